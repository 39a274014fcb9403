"""Exact finite-domain structural causal model over confounder D, input X and label Y.

The graph is D -> X, D -> Y, X -> Y.  Tables are float64; "exact" means equal
to full joint enumeration up to float64 accumulation error.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, UndefinedConditionalError

ROW_TOL = 1e-12
FIXTURE_DIR = Path(__file__).with_name("fixtures")


def _check_rows(name: str, table: np.ndarray) -> None:
    if not np.all(np.isfinite(table)) or (table < 0).any():
        raise ContractError(f"{name} must be finite and non-negative")
    sums = table.sum(axis=-1)
    if np.abs(sums - 1.0).max() > ROW_TOL:
        raise ContractError(f"{name} rows must sum to 1 (worst {sums.flat[np.abs(sums - 1).argmax()]!r})")


@dataclass(frozen=True)
class DiscreteSCM:
    p_d: np.ndarray  # (N_c,)
    p_x_given_d: np.ndarray  # (N_c, N_x)
    p_y_given_xd: np.ndarray  # (N_x, N_c, N_y)

    def __post_init__(self):
        for name in ("p_d", "p_x_given_d", "p_y_given_xd"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.p_d.ndim != 1 or self.p_x_given_d.ndim != 2 or self.p_y_given_xd.ndim != 3:
            raise ContractError("expected shapes (N_c,), (N_c, N_x), (N_x, N_c, N_y)")
        n_c, n_x = self.p_x_given_d.shape
        if self.p_d.shape[0] != n_c or self.p_y_given_xd.shape[:2] != (n_x, n_c):
            raise ContractError(
                f"inconsistent sizes: p_d {self.p_d.shape}, p_x_given_d {self.p_x_given_d.shape}, "
                f"p_y_given_xd {self.p_y_given_xd.shape}"
            )
        _check_rows("p_d", self.p_d)
        _check_rows("p_x_given_d", self.p_x_given_d)
        _check_rows("p_y_given_xd", self.p_y_given_xd)

    @property
    def sizes(self) -> tuple[int, int, int]:
        """(N_c, N_x, N_y)."""
        return self.p_d.shape[0], self.p_x_given_d.shape[1], self.p_y_given_xd.shape[2]

    def joint(self) -> np.ndarray:
        """P(d, x, y) as an (N_c, N_x, N_y) array."""
        return self.p_d[:, None, None] * self.p_x_given_d[:, :, None] * self.p_y_given_xd.transpose(1, 0, 2)

    def to_dict(self) -> dict:
        return {
            "p_d": self.p_d.tolist(),
            "p_x_given_d": self.p_x_given_d.tolist(),
            "p_y_given_xd": self.p_y_given_xd.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteSCM":
        try:
            return cls(d["p_d"], d["p_x_given_d"], d["p_y_given_xd"])
        except KeyError as exc:
            raise FormatError(f"SCM table missing {exc}") from exc


def _check_x(scm: DiscreteSCM, x: int) -> None:
    if not 0 <= x < scm.sizes[1]:
        raise ContractError(f"x={x} outside [0, {scm.sizes[1]})")


def posterior_d(scm: DiscreteSCM, x: int) -> np.ndarray:
    """P(d | x) by Bayes' rule."""
    _check_x(scm, x)
    unnorm = scm.p_d * scm.p_x_given_d[:, x]
    px = unnorm.sum()
    if px <= 0:
        raise UndefinedConditionalError(f"P(X={x}) = 0; the conditional is undefined")
    return unnorm / px


def conditional(scm: DiscreteSCM, x: int) -> np.ndarray:
    """P(Y | x) = sum_d P(Y | x, d) P(d | x)."""
    return posterior_d(scm, x) @ scm.p_y_given_xd[x]


def backdoor(scm: DiscreteSCM, x: int) -> np.ndarray:
    """P(Y | do(x)) = sum_d P(Y | x, d) P(d)."""
    _check_x(scm, x)
    return scm.p_d @ scm.p_y_given_xd[x]


def sample_do(scm: DiscreteSCM, x: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Empirical P(Y | do(x)) from ``n`` draws of d ~ P(d), y ~ P(Y | x, d)."""
    _check_x(scm, x)
    if n < 1:
        raise ContractError("n must be >= 1")
    n_c, _, n_y = scm.sizes
    d_counts = rng.multinomial(n, scm.p_d)
    y_counts = np.zeros(n_y, dtype=np.int64)
    for d in range(n_c):
        if d_counts[d]:
            y_counts += rng.multinomial(d_counts[d], scm.p_y_given_xd[x, d] / scm.p_y_given_xd[x, d].sum())
    return y_counts / n


def enumerate_conditional(scm: DiscreteSCM, x: int) -> np.ndarray:
    """P(Y | x) by summing the full joint table cell by cell; an independent oracle."""
    n_c, _, n_y = scm.sizes
    joint = scm.joint()
    num = np.zeros(n_y)
    den = 0.0
    for d in range(n_c):
        for y in range(n_y):
            num[y] += joint[d, x, y]
            den += joint[d, x, y]
    if den <= 0:
        raise UndefinedConditionalError(f"P(X={x}) = 0; the conditional is undefined")
    return num / den


def enumerate_backdoor(scm: DiscreteSCM, x: int) -> np.ndarray:
    """sum_d P(d) P(y | x, d) with each factor recovered from the joint table."""
    n_c, _, n_y = scm.sizes
    joint = scm.joint()
    out = np.zeros(n_y)
    for d in range(n_c):
        p_d = joint[d].sum()
        p_dx = joint[d, x].sum()
        if p_dx <= 0:
            # P(y | x, d) is unidentified from the joint; the SCM table supplies it
            out += p_d * scm.p_y_given_xd[x, d]
            continue
        for y in range(n_y):
            out[y] += p_d * joint[d, x, y] / p_dx
    return out


def random_scm(rng: np.random.Generator, n_c: int, n_x: int, n_y: int, concentration: float = 1.0) -> DiscreteSCM:
    """Dirichlet-distributed tables, renormalised so rows sum to 1 in float64."""

    def rows(shape):
        t = rng.dirichlet(np.full(shape[-1], concentration), size=shape[:-1])
        return t / t.sum(axis=-1, keepdims=True)

    return DiscreteSCM(rows((n_c,)), rows((n_c, n_x)), rows((n_x, n_c, n_y)))


# ---------------------------------------------------------------------------
# Simpson-style reversal


def reversal_margin(scm: DiscreteSCM, x: int) -> float:
    """How clearly conditional and backdoor disagree on the most likely y at ``x``.

    Positive when the argmaxes differ; the value is the smaller of the two
    winning margins, so ties never count as a reversal.
    """
    c, b = conditional(scm, x), backdoor(scm, x)
    yc, yb = int(np.argmax(c)), int(np.argmax(b))
    if yc == yb:
        return 0.0

    def margin(p, y):
        return float(p[y] - np.max(np.delete(p, y)))

    return min(margin(c, yc), margin(b, yb))


def find_simpson(grid=(1, 3, 5, 7, 9), denominator: int = 10, min_margin: float = 0.05) -> DiscreteSCM:
    """First 2x2x2 SCM, in a fixed enumeration order over ``grid / denominator``, whose
    conditional and backdoor argmaxes differ at x = 0 by at least ``min_margin``."""
    vals = [Fraction(g, denominator) for g in grid]
    for pd0, px0, px1, a, b, c, d in itertools.product(vals, repeat=7):
        scm = DiscreteSCM(
            [pd0, 1 - pd0],
            [[px0, 1 - px0], [px1, 1 - px1]],
            [[[a, 1 - a], [b, 1 - b]], [[c, 1 - c], [d, 1 - d]]],
        )
        if reversal_margin(scm, 0) >= min_margin:
            return scm
    raise ContractError("no reversal found on this grid")


# ---------------------------------------------------------------------------
# Fixture files


def save_scm(scm: DiscreteSCM, path: str | Path, note: str = "") -> Path:
    path = Path(path)
    path.write_text(json.dumps({"format": "iernlab-scm", "format_version": 1, "note": note, **scm.to_dict()}, indent=2))
    return path


def load_scm(path: str | Path) -> DiscreteSCM:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if d.get("format") != "iernlab-scm" or d.get("format_version") != 1:
        raise FormatError(f"{path}: not an iernlab SCM file")
    return DiscreteSCM.from_dict(d)


def simpson_fixture() -> DiscreteSCM:
    """The pinned 2x2x2 instance produced by :func:`find_simpson` with default arguments."""
    return load_scm(FIXTURE_DIR / "simpson.json")
