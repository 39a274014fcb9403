"""Comparison methods: plain classifier, disentanglement without intervention,
re-sampled training data, and an NWGM-style single-pass approximation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import numcore as nc
from .errors import ConfigurationError, ContractError
from .iern import (
    ArchConfig,
    Batch,
    LossWeights,
    Model,
    TrainState,
    _features,
    _require,
    _uniform_mse,
    apply_update,
    sub_seed,
)
from .synthbench import ConfoundedDataset


class VanillaModel(Model):
    """Backbone plus classifier head, nothing else."""

    kind = "baseline"
    component_names = ("f_b", "f_c")


class DisentangleModel(Model):
    """Feature disentanglement; the classifier reads the emotion feature directly."""

    kind = "disentangle"
    component_names = ("f_b", "g_e", "g_c", "d_e", "d_c", "g_r", "f_c")


def vanilla_step(model: Model, batch: Batch, state: TrainState) -> dict[str, float]:
    _require(batch, "y_e")
    loss = nc.cross_entropy(model.f_c(model.f_b(batch.x)), batch.y_e)
    apply_update(model, loss, ("f_b", "f_c"), state)
    state.step += 1
    model.step += 1
    return {"L_CE": nc.scalar(loss)}


@torch.no_grad()
def vanilla_logits(model: Model, x: torch.Tensor) -> torch.Tensor:
    return model.f_c(model.f_b(x, False), False)


def disentangle_step(model: Model, batch: Batch, weights: LossWeights, state: TrainState) -> dict[str, float]:
    """Same staging as the IERN step without centers; stage (d) classifies g_e directly."""
    _require(batch, "y_e", "y_c")
    l1, l3 = weights.lambda1, weights.lambda3
    fb, ge, gc = _features(model, batch.x)
    l_de = nc.cross_entropy(model.d_e(ge.detach()), batch.y_e)
    l_dc = nc.cross_entropy(model.d_c(gc.detach()), batch.y_c)
    if l1 > 0:
        apply_update(model, l1 * (l_de + l_dc), ("d_e", "d_c"), state)
        l_ge = _uniform_mse(model.d_c(ge))
        l_gc = _uniform_mse(model.d_e(gc))
        l_r = nc.mse(model.g_r((ge, gc)), fb.detach())
        apply_update(model, l1 * (l_ge + l_gc + l_r), ("g_e", "g_c", "g_r"), state)
    else:
        with torch.no_grad():
            l_ge = _uniform_mse(model.d_c(ge))
            l_gc = _uniform_mse(model.d_e(gc))
            l_r = nc.mse(model.g_r((ge, gc)), fb)
    l_cls = nc.cross_entropy(model.f_c(model.g_e(fb)), batch.y_e)
    apply_update(model, l3 * l_cls, ("f_c", "g_e", "f_b"), state)
    state.step += 1
    model.step += 1
    return {
        "L_e": nc.scalar(l_de + l_ge),
        "L_c": nc.scalar(l_dc + l_gc),
        "L_r": nc.scalar(l_r),
        "L_Cls": nc.scalar(l_cls),
    }


@torch.no_grad()
def disentangle_logits(model: Model, x: torch.Tensor) -> torch.Tensor:
    return model.f_c(model.g_e(model.f_b(x, False), False), False)


@torch.no_grad()
def context_logits(model: Model, x: torch.Tensor) -> torch.Tensor:
    """d_c applied to the context feature: the stratum predictor."""
    return model.d_c(model.g_c(model.f_b(x, False), False), False)


# ---------------------------------------------------------------------------
# Re-sampling


def resample_dataset(dataset: ConfoundedDataset, rng: np.random.Generator) -> ConfoundedDataset:
    """Sample with replacement so every occupied (emotion, stratum) cell reaches the largest cell's count.

    Original members of each cell are kept; only the shortfall is drawn.
    Empty cells stay empty.
    """
    cells: dict[tuple[int, int], np.ndarray] = {}
    for e, c in sorted(set(zip(dataset.y_e.tolist(), dataset.y_c.tolist()))):
        cells[(e, c)] = np.flatnonzero((dataset.y_e == e) & (dataset.y_c == c))
    if not cells:
        raise ContractError("nothing to resample")
    target = max(len(v) for v in cells.values())
    idx = []
    for members in cells.values():
        idx.append(members)
        if len(members) < target:
            idx.append(rng.choice(members, size=target - len(members), replace=True))
    return dataset.subset(np.concatenate(idx))


# ---------------------------------------------------------------------------
# NWGM


@dataclass(frozen=True)
class NwgmDictionary:
    entries: torch.Tensor  # (N_c, D), never trained

    def __len__(self) -> int:
        return self.entries.shape[0]


def build_nwgm_dictionary(context_features: torch.Tensor, y_c, n_confounders: int | None = None) -> NwgmDictionary:
    """Entry j is the mean of the context features whose stratum label is j."""
    feats = torch.as_tensor(context_features).detach().to(nc.ACCUM_DTYPE)
    feats = feats.reshape(feats.shape[0], -1)
    y_c = torch.as_tensor(y_c, dtype=torch.long).reshape(-1)
    n = n_confounders if n_confounders is not None else int(y_c.max()) + 1
    rows = []
    for j in range(n):
        mask = y_c == j
        if not bool(mask.any()):
            raise ConfigurationError(f"stratum {j} has no features to average")
        rows.append(feats[mask].mean(dim=0))
    return NwgmDictionary(torch.stack(rows))


class NwgmHead:
    """logits = W1 x + W2 sum_j alpha_j entry_j with alpha = softmax(<Wq x, Wk entry_j> / sqrt(d))."""

    def __init__(self, feature_dim: int, dict_dim: int, n_classes: int, seed: int = 0, key_dim: int | None = None, dtype=nc.DEFAULT_DTYPE):
        self.key_dim = key_dim or feature_dim
        self.params = nc.ParamSet()
        rng = np.random.default_rng(seed)

        def u(shape, fan_in):
            b = 1.0 / math.sqrt(fan_in)
            return torch.as_tensor(rng.uniform(-b, b, size=shape), dtype=dtype)

        self.params.add("W1", u((n_classes, feature_dim), feature_dim))
        self.params.add("b", torch.zeros(n_classes, dtype=dtype))
        self.params.add("W2", u((n_classes, dict_dim), dict_dim))
        self.params.add("Wq", u((self.key_dim, feature_dim), feature_dim))
        self.params.add("Wk", u((self.key_dim, dict_dim), dict_dim))

    def attention(self, x: torch.Tensor, dictionary: NwgmDictionary) -> torch.Tensor:
        p = self.params
        d = dictionary.entries.to(x.dtype)
        q = x @ p["Wq"].T
        k = d @ p["Wk"].T
        return nc.softmax(q @ k.T / math.sqrt(self.key_dim))


def nwgm_forward(head: NwgmHead, x_feature: torch.Tensor, dictionary: NwgmDictionary) -> torch.Tensor:
    """One forward pass with the stratum expectation moved inside the classifier."""
    p = head.params
    alpha = head.attention(x_feature, dictionary)
    expected = alpha @ dictionary.entries.to(x_feature.dtype)
    return x_feature @ p["W1"].T + p["b"] + expected @ p["W2"].T


class NwgmModel(Model):
    """Disentanglement trunk plus an NWGM head over a frozen context dictionary."""

    kind = "nwgm"
    component_names = ("f_b", "g_e", "g_c", "d_e", "d_c", "g_r", "f_c")

    def __init__(self, arch: ArchConfig, dtype=nc.DEFAULT_DTYPE):
        super().__init__(arch, dtype)
        w = arch.width
        self.head = NwgmHead(w, w, arch.n_emotions, sub_seed(arch.seed, "nwgm"), dtype=dtype)
        self.extra["head"] = self.head.params
        bank = nc.ParamSet()
        bank.add("entries", torch.zeros(arch.n_confounders, w, dtype=dtype), frozen=True)
        self.extra["dictionary"] = bank

    @property
    def dictionary(self) -> NwgmDictionary:
        return NwgmDictionary(self.extra["dictionary"]["entries"].detach())

    def set_dictionary(self, d: NwgmDictionary) -> None:
        with torch.no_grad():
            self.extra["dictionary"]["entries"].copy_(d.entries.to(self.dtype))


def pooled(t: torch.Tensor) -> torch.Tensor:
    return t.mean(dim=(2, 3))


def fit_nwgm_dictionary(model: NwgmModel, dataset: ConfoundedDataset, batch_size: int = 256) -> NwgmDictionary:
    from .iern import make_batch

    feats = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            b = make_batch(dataset, np.arange(start, min(start + batch_size, len(dataset))), model.dtype)
            feats.append(pooled(model.g_c(model.f_b(b.x, False), False)))
    d = build_nwgm_dictionary(torch.cat(feats), dataset.y_c, model.arch.n_confounders)
    model.set_dictionary(d)
    return d


def nwgm_step(model: NwgmModel, batch: Batch, state: TrainState) -> dict[str, float]:
    _require(batch, "y_e")
    x_feat = pooled(model.g_e(model.f_b(batch.x)))
    loss = nc.cross_entropy(nwgm_forward(model.head, x_feat, model.dictionary), batch.y_e)
    apply_update(model, loss, ("head", "g_e", "f_b"), state)
    state.step += 1
    model.step += 1
    return {"L_CE": nc.scalar(loss)}


@torch.no_grad()
def nwgm_logits(model: NwgmModel, x: torch.Tensor) -> torch.Tensor:
    x_feat = pooled(model.g_e(model.f_b(x, False), False))
    return nwgm_forward(model.head, x_feat, model.dictionary)


def copy_trunk(src: Model, dst: Model) -> None:
    for name in src.nets:
        if name in dst.nets:
            dst.nets[name].params.load({**src.nets[name].params.snapshot(), **src.nets[name].params.buffers})
