"""Synthetic confounded classification data.

Each sample is an emotion-specific geometric template (an oriented bar) drawn
with a little jitter, then passed through the degradation assigned to its
confounder stratum (identity, Gaussian blur, additive noise or a tint).  How
often each (emotion, stratum) pair occurs is set by a co-occurrence matrix, so
train and test splits with disjoint supports give an out-of-distribution test.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError, DegenerateFoldError, FormatError, ConfigurationError

FORMAT_VERSION = 1

EMOTIONS = ("anger", "disgust", "fear", "happiness", "sadness", "surprise")

# Rows: source datasets (CK+, MMI, Oulu-CASIA analogs); columns: EMOTIONS.
TABLE1_PLAN = (
    (1, 2, 3, 1, 2, 3),
    (3, 1, 2, 3, 1, 2),
    (2, 3, 1, 2, 3, 1),
)


@dataclass(frozen=True)
class Degradation:
    kind: str = "identity"  # identity | blur | noise | tint
    sigma: float = 0.0
    color: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("identity", "blur", "noise", "tint"):
            raise ConfigurationError(f"unknown degradation {self.kind!r}")
        if self.sigma < 0:
            raise ConfigurationError("degradation sigma must be non-negative")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma, "color": list(self.color)}

    @classmethod
    def from_dict(cls, d: dict) -> "Degradation":
        return cls(d["kind"], float(d.get("sigma", 0.0)), tuple(float(c) for c in d.get("color", ())))


@dataclass
class SyntheticSpec:
    cooccurrence: list[list[int]]
    degradations: list[Degradation]
    image_size: tuple[int, int, int] = (16, 16, 1)
    pattern_seed: int = 0
    noise_seed: int = 1
    contrast: float = 1.0
    jitter_shift: int = 2
    jitter_angle: float = 8.0

    def __post_init__(self):
        self.cooccurrence = [[int(v) for v in row] for row in self.cooccurrence]
        self.degradations = [d if isinstance(d, Degradation) else Degradation.from_dict(d) for d in self.degradations]
        self.image_size = tuple(int(s) for s in self.image_size)
        if not self.cooccurrence or len({len(r) for r in self.cooccurrence}) != 1:
            raise ConfigurationError("cooccurrence must be a non-empty rectangular matrix")
        if any(v < 0 for row in self.cooccurrence for v in row):
            raise ConfigurationError("cooccurrence counts must be non-negative")
        if len(self.degradations) != self.n_confounders:
            raise ConfigurationError(
                f"{len(self.degradations)} degradations for {self.n_confounders} confounder strata"
            )
        if len(self.image_size) != 3 or min(self.image_size) <= 0:
            raise ConfigurationError("image_size must be (H, W, C) with positive entries")

    @property
    def n_emotions(self) -> int:
        return len(self.cooccurrence)

    @property
    def n_confounders(self) -> int:
        return len(self.cooccurrence[0])

    def validate_training(self) -> None:
        """A training spec needs at least one sample for every emotion."""
        empty = [e for e, row in enumerate(self.cooccurrence) if sum(row) == 0]
        if empty:
            raise ConfigurationError(f"emotion rows with no samples: {empty}")

    def to_dict(self) -> dict:
        return {
            "cooccurrence": self.cooccurrence,
            "degradations": [d.to_dict() for d in self.degradations],
            "image_size": list(self.image_size),
            "pattern_seed": self.pattern_seed,
            "noise_seed": self.noise_seed,
            "contrast": self.contrast,
            "jitter_shift": self.jitter_shift,
            "jitter_angle": self.jitter_angle,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(
            cooccurrence=d["cooccurrence"],
            degradations=[Degradation.from_dict(x) for x in d["degradations"]],
            image_size=tuple(d.get("image_size", (16, 16, 1))),
            pattern_seed=int(d.get("pattern_seed", 0)),
            noise_seed=int(d.get("noise_seed", 1)),
            contrast=float(d.get("contrast", 1.0)),
            jitter_shift=int(d.get("jitter_shift", 2)),
            jitter_angle=float(d.get("jitter_angle", 8.0)),
        )


@dataclass(frozen=True)
class Sample:
    x: np.ndarray  # (H, W, C) float32
    y_e: int
    y_c: int


@dataclass
class ConfoundedDataset:
    """Samples stored column-wise.

    ``source`` records which source dataset a sample came from; together with
    ``y_e`` it identifies the protocol cell used by fold splits.
    """

    x: np.ndarray
    y_e: np.ndarray
    y_c: np.ndarray
    source: np.ndarray
    spec: SyntheticSpec | None = None
    split_tag: str = "train"
    n_emotions: int = 0
    n_confounders: int = 0

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.y_e = np.asarray(self.y_e, dtype=np.int64)
        self.y_c = np.asarray(self.y_c, dtype=np.int64)
        self.source = np.asarray(self.source, dtype=np.int64)
        if not (len(self.x) == len(self.y_e) == len(self.y_c) == len(self.source)):
            raise ContractError("dataset columns have different lengths")
        if self.spec is not None:
            self.n_emotions = self.n_emotions or self.spec.n_emotions
            self.n_confounders = self.n_confounders or self.spec.n_confounders

    def __len__(self) -> int:
        return len(self.y_e)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i], int(self.y_e[i]), int(self.y_c[i]))

    @property
    def samples(self) -> list[Sample]:
        return [self[i] for i in range(len(self))]

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def cell_counts(self) -> np.ndarray:
        counts = np.zeros((self.n_emotions, self.n_confounders), dtype=np.int64)
        np.add.at(counts, (self.y_e, self.y_c), 1)
        return counts

    def subset(self, idx, split_tag: str | None = None) -> "ConfoundedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ConfoundedDataset(
            self.x[idx], self.y_e[idx], self.y_c[idx], self.source[idx], self.spec,
            split_tag or self.split_tag, self.n_emotions, self.n_confounders,
        )


def concat(parts: list[ConfoundedDataset], split_tag: str) -> ConfoundedDataset:
    if not parts:
        raise ContractError("nothing to concatenate")
    shape = parts[0].image_shape
    return ConfoundedDataset(
        np.concatenate([p.x for p in parts]).reshape((-1,) + shape),
        np.concatenate([p.y_e for p in parts]),
        np.concatenate([p.y_c for p in parts]),
        np.concatenate([p.source for p in parts]),
        None,
        split_tag,
        max(p.n_emotions for p in parts),
        max(p.n_confounders for p in parts),
    )


# ---------------------------------------------------------------------------
# Rendering


def template_angle(emotion: int, n_emotions: int) -> float:
    return math.pi * emotion / n_emotions


def base_pattern(emotion: int, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """An oriented bar whose angle encodes the emotion, with shift/angle/gain jitter."""
    h, w, c = spec.image_size
    s = spec.jitter_shift
    dy, dx = (rng.integers(-s, s + 1, size=2) if s > 0 else (0, 0))
    angle = template_angle(emotion, spec.n_emotions) + math.radians(rng.uniform(-spec.jitter_angle, spec.jitter_angle))
    gain = spec.contrast * rng.uniform(0.85, 1.15)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy -= (h - 1) / 2 + dy
    xx -= (w - 1) / 2 + dx
    along = xx * math.cos(angle) + yy * math.sin(angle)
    across = -xx * math.sin(angle) + yy * math.cos(angle)
    half_len = 0.4 * min(h, w)
    bar = np.exp(-0.5 * (across / 1.0) ** 2) / (1.0 + np.exp(2.0 * (np.abs(along) - half_len)))
    img = gain * bar
    return np.repeat(img[:, :, None], c, axis=2)


def degrade(img: np.ndarray, deg: Degradation, rng: np.random.Generator) -> np.ndarray:
    if deg.kind == "identity":
        return img
    if deg.kind == "blur":
        if deg.sigma == 0:
            return img
        return gaussian_filter(img, sigma=(deg.sigma, deg.sigma, 0), mode="constant")
    if deg.kind == "noise":
        if deg.sigma == 0:
            return img
        return img + rng.normal(0.0, deg.sigma, size=img.shape)
    color = np.asarray(deg.color if deg.color else (0.0,), dtype=np.float64)
    return img + np.broadcast_to(color, img.shape)


def render_sample(
    emotion: int,
    confounder: int,
    spec: SyntheticSpec,
    rng: np.random.Generator,
    noise_rng: np.random.Generator | None = None,
) -> Sample:
    """Jittered template for ``emotion`` degraded by stratum ``confounder``'s operator."""
    if not 0 <= emotion < spec.n_emotions:
        raise ContractError(f"emotion {emotion} out of range [0, {spec.n_emotions})")
    if not 0 <= confounder < spec.n_confounders:
        raise ContractError(f"confounder {confounder} out of range [0, {spec.n_confounders})")
    img = base_pattern(emotion, spec, rng)
    img = degrade(img, spec.degradations[confounder], noise_rng if noise_rng is not None else rng)
    return Sample(img.astype(np.float32), emotion, confounder)


def _cell_rngs(spec: SyntheticSpec, e: int, c: int, i: int):
    return (
        np.random.default_rng([spec.pattern_seed, e, c, i]),
        np.random.default_rng([spec.noise_seed, e, c, i, 7]),
    )


def build_split(spec: SyntheticSpec, split_tag: str = "train", source: int = 0) -> ConfoundedDataset:
    """Exactly ``cooccurrence[e][c]`` samples per cell, each seeded by its (cell, index)."""
    xs, ye, yc = [], [], []
    for e, row in enumerate(spec.cooccurrence):
        for c, n in enumerate(row):
            for i in range(n):
                rng, nrng = _cell_rngs(spec, e, c, i)
                s = render_sample(e, c, spec, rng, nrng)
                xs.append(s.x)
                ye.append(e)
                yc.append(c)
    x = np.stack(xs) if xs else np.zeros((0,) + spec.image_size, dtype=np.float32)
    return ConfoundedDataset(x, ye, yc, np.full(len(ye), source), spec, split_tag)


# ---------------------------------------------------------------------------
# Default benchmarks

TOY_DEGRADATIONS = (
    Degradation("identity"),
    Degradation("blur", sigma=1.5),
    Degradation("noise", sigma=0.35),
)

# Training stratum of each emotion in the default toy: anger↔noise and
# disgust/sadness↔blur follow the example pairings; the rest fill the grid so
# every stratum holds two emotions.
TOY_TRAIN_STRATUM = (2, 1, 0, 0, 1, 2)


def toy_specs(
    n_train: int = 60,
    n_test: int = 20,
    seed: int = 0,
    degradations=TOY_DEGRADATIONS,
    train_stratum=TOY_TRAIN_STRATUM,
) -> dict[str, SyntheticSpec]:
    """Train, in-distribution test and o.o.d. test specs for the toy benchmark.

    The o.o.d. test uses exactly the cells the training spec leaves empty.
    """
    n_e, n_c = len(train_stratum), len(degradations)
    train = [[n_train if c == train_stratum[e] else 0 for c in range(n_c)] for e in range(n_e)]
    iid = [[n_test if c == train_stratum[e] else 0 for c in range(n_c)] for e in range(n_e)]
    ood = [[0 if c == train_stratum[e] else n_test for c in range(n_c)] for e in range(n_e)]
    degs = list(degradations)
    return {
        "train": SyntheticSpec(train, degs, pattern_seed=seed * 3 + 11, noise_seed=seed * 3 + 12),
        "test_iid": SyntheticSpec(iid, degs, pattern_seed=seed * 3 + 1011, noise_seed=seed * 3 + 1012),
        "test_ood": SyntheticSpec(ood, degs, pattern_seed=seed * 3 + 2011, noise_seed=seed * 3 + 2012),
    }


MIXED_DEGRADATIONS = (
    Degradation("tint", color=(0.25,)),
    Degradation("blur", sigma=1.5),
    Degradation("noise", sigma=0.35),
)


def mixed_datasets(per_cell: int = 30, seed: int = 0, degradations=MIXED_DEGRADATIONS) -> list[ConfoundedDataset]:
    """Three source datasets covering all emotions; each source is one confounder stratum."""
    n_c = len(degradations)
    out = []
    for d in range(n_c):
        counts = [[per_cell if c == d else 0 for c in range(n_c)] for _ in EMOTIONS]
        spec = SyntheticSpec(counts, list(degradations), pattern_seed=seed * 7 + 100 + d, noise_seed=seed * 7 + 200 + d)
        out.append(build_split(spec, "train", source=d))
    return out


# ---------------------------------------------------------------------------
# Fold protocol


@dataclass
class FoldPlan:
    assignment: list[list[int]] = field(default_factory=lambda: [list(r) for r in TABLE1_PLAN])

    def __post_init__(self):
        self.assignment = [[int(v) for v in row] for row in self.assignment]
        if not self.assignment or len({len(r) for r in self.assignment}) != 1:
            raise ConfigurationError("fold plan must be a non-empty rectangular matrix")

    @property
    def folds(self) -> list[int]:
        return sorted({v for row in self.assignment for v in row})


def make_threefold(
    datasets: list[ConfoundedDataset], plan: FoldPlan, fold: int
) -> tuple[ConfoundedDataset, ConfoundedDataset]:
    """Test = every (dataset, emotion) cell whose plan entry equals ``fold``; train = the rest."""
    if len(plan.assignment) != len(datasets):
        raise ContractError(f"plan has {len(plan.assignment)} rows for {len(datasets)} datasets")
    n_e = len(plan.assignment[0])
    if fold not in plan.folds:
        raise ContractError(f"fold {fold} not among plan values {plan.folds}")
    train_parts, test_parts = [], []
    for d, ds in enumerate(datasets):
        if len(ds) and int(ds.y_e.max()) >= n_e:
            raise ContractError(f"dataset {d} has emotions beyond the plan's {n_e} columns")
        in_test = np.array([plan.assignment[d][e] == fold for e in ds.y_e], dtype=bool)
        ds = ConfoundedDataset(ds.x, ds.y_e, ds.y_c, np.full(len(ds), d), ds.spec, ds.split_tag,
                               ds.n_emotions, ds.n_confounders)
        test_parts.append(ds.subset(np.flatnonzero(in_test), "test"))
        train_parts.append(ds.subset(np.flatnonzero(~in_test), "train"))
    train = concat(train_parts, "train")
    test = concat(test_parts, "test")
    if len(train) == 0:
        raise DegenerateFoldError(f"fold {fold} puts every cell in the test set")
    return train, test


def move_fraction(
    train: ConfoundedDataset, test: ConfoundedDataset, fraction: float, rng: np.random.Generator
) -> tuple[ConfoundedDataset, ConfoundedDataset]:
    """Move floor(fraction * size) samples of every (source, emotion) test cell into train."""
    if not 0 <= fraction < 1:
        raise ContractError("fraction must lie in [0, 1)")
    if fraction == 0:
        return train, test
    move = np.zeros(len(test), dtype=bool)
    cells = sorted(set(zip(test.source.tolist(), test.y_e.tolist())))
    for s, e in cells:
        idx = np.flatnonzero((test.source == s) & (test.y_e == e))
        k = math.floor(fraction * len(idx) + 1e-9)
        if k:
            move[rng.choice(idx, size=k, replace=False)] = True
    moved = test.subset(np.flatnonzero(move), "train")
    return concat([train, moved], "train"), test.subset(np.flatnonzero(~move), "test")


# ---------------------------------------------------------------------------
# Files


def save_dataset(ds: ConfoundedDataset, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (float32 samples, int32 labels)."""
    path = Path(path)
    manifest_path, blob_path = path.with_suffix(".json"), path.with_suffix(".bin")
    manifest = {
        "format": "iernlab-dataset",
        "format_version": FORMAT_VERSION,
        "n_samples": len(ds),
        "image_shape": list(ds.image_shape),
        "n_emotions": ds.n_emotions,
        "n_confounders": ds.n_confounders,
        "split_tag": ds.split_tag,
        "spec": ds.spec.to_dict() if ds.spec is not None else None,
        "cell_counts": ds.cell_counts().tolist(),
        "blob": blob_path.name,
        "layout": ["x:float32le", "y_e:int32le", "y_c:int32le", "source:int32le"],
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=2))
    with open(blob_path, "wb") as f:
        f.write(ds.x.astype("<f4").tobytes())
        for col in (ds.y_e, ds.y_c, ds.source):
            f.write(col.astype("<i4").tobytes())
    return manifest_path, blob_path


def load_dataset(path: str | Path) -> ConfoundedDataset:
    path = Path(path)
    manifest_path = path if path.suffix == ".json" else path.with_suffix(".json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: {exc}") from exc
    if manifest.get("format") != "iernlab-dataset" or manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{manifest_path}: unsupported dataset format")
    n = int(manifest["n_samples"])
    shape = tuple(manifest["image_shape"])
    raw = (manifest_path.parent / manifest["blob"]).read_bytes()
    n_x = n * math.prod(shape)
    if len(raw) != 4 * (n_x + 3 * n):
        raise FormatError(f"blob size {len(raw)} does not match manifest")
    x = np.frombuffer(raw, dtype="<f4", count=n_x).reshape((n,) + shape)
    ints = np.frombuffer(raw, dtype="<i4", offset=4 * n_x).reshape(3, n)
    spec = SyntheticSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None
    ds = ConfoundedDataset(
        x.astype(np.float32), ints[0], ints[1], ints[2], spec, manifest["split_tag"],
        int(manifest["n_emotions"]), int(manifest["n_confounders"]),
    )
    if ds.cell_counts().tolist() != manifest["cell_counts"]:
        raise FormatError("cell counts in blob disagree with manifest")
    return ds
