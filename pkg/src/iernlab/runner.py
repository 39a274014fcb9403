"""Epoch loops and per-method dispatch shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import baselines as bl
from . import numcore as nc
from .errors import ConfigurationError, FormatError
from .iern import (
    ArchConfig,
    Batch,
    IernModel,
    LossWeights,
    Model,
    OptimizerConfig,
    TrainState,
    averaged_logits,
    loss_classifier,
    loss_confounder_builder,
    loss_context,
    loss_emotion,
    loss_recon,
    make_batch,
    read_manifest,
    train_step,
)
from .synthbench import ConfoundedDataset

log = logging.getLogger(__name__)

METHODS = ("baseline", "disentangle", "resample", "nwgm", "iern")


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 32
    opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    warmup_fraction: float = 0.05

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")


def build_model(method: str, arch: ArchConfig) -> Model:
    if method == "iern":
        return IernModel(arch)
    if method in ("baseline", "resample"):
        return bl.VanillaModel(arch)
    if method == "disentangle":
        return bl.DisentangleModel(arch)
    if method == "nwgm":
        return bl.NwgmModel(arch)
    raise ConfigurationError(f"unknown method {method!r}; expected one of {METHODS}")


MODEL_CLASSES = {
    "iern": IernModel,
    "baseline": bl.VanillaModel,
    "disentangle": bl.DisentangleModel,
    "nwgm": bl.NwgmModel,
}


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2 or n < 2:
            yield idx


def _loop(model: Model, dataset: ConfoundedDataset, cfg: TrainConfig, step_fn, epochs: int, tag: str, rng,
          on_epoch=None) -> list[dict]:
    per_epoch = max(1, -(-len(dataset) // cfg.batch_size))
    state = TrainState(
        OptimizerConfig(cfg.opt.lr, cfg.opt.beta1, cfg.opt.beta2, cfg.opt.epsilon,
                        cfg.opt.warmup_steps or int(round(cfg.warmup_fraction * per_epoch * epochs)))
    )
    records = []
    for epoch in range(epochs):
        sums: dict[str, float] = {}
        n = 0
        t0 = time.perf_counter()
        for idx in batches(len(dataset), cfg.batch_size, rng):
            terms = step_fn(model, make_batch(dataset, idx, model.dtype), state)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
        means = {k: v / max(n, 1) for k, v in sums.items()}
        rec = {"phase": tag, "epoch": epoch + 1, "terms": {k: v for k, v in means.items() if k != "total"}}
        if "total" in means:
            rec["total"] = means["total"]
        rec["seconds"] = time.perf_counter() - t0
        if on_epoch is not None:
            rec.update(on_epoch(model, tag) or {})
        records.append(rec)
        log.debug("%s", rec)
    return records


def fit(method: str, train: ConfoundedDataset, arch: ArchConfig, cfg: TrainConfig, on_epoch=None) -> tuple[Model, list[dict]]:
    """Train ``method`` from scratch; returns the model and per-epoch log records.

    ``on_epoch(model, phase)`` may return extra fields for each epoch record.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    model = build_model(method, arch)
    w = cfg.weights
    if method == "iern":
        records = _loop(model, train, cfg, lambda m, b, s: train_step(m, b, w, s), cfg.epochs, "iern", rng, on_epoch)
    elif method == "baseline":
        records = _loop(model, train, cfg, bl.vanilla_step, cfg.epochs, "baseline", rng, on_epoch)
    elif method == "resample":
        data = bl.resample_dataset(train, np.random.default_rng([cfg.seed, 2]))
        records = _loop(model, data, cfg, bl.vanilla_step, cfg.epochs, "resample", rng, on_epoch)
    elif method == "disentangle":
        records = _loop(model, train, cfg, lambda m, b, s: bl.disentangle_step(m, b, w, s), cfg.epochs, "disentangle", rng, on_epoch)
    elif method == "nwgm":
        if w.lambda1 == 0:
            raise ConfigurationError("nwgm needs a disentanglement trunk; lambda1 = 0 leaves it untrained")
        records = _loop(model, train, cfg, lambda m, b, s: bl.disentangle_step(m, b, w, s), cfg.epochs, "trunk", rng, on_epoch)
        bl.fit_nwgm_dictionary(model, train)
        records += _loop(model, train, cfg, bl.nwgm_step, cfg.epochs, "nwgm", rng, on_epoch)
    else:
        raise ConfigurationError(f"unknown method {method!r}")
    return model, records


def logits(model: Model, x: torch.Tensor) -> torch.Tensor:
    if isinstance(model, IernModel):
        return averaged_logits(model, x)
    if isinstance(model, bl.NwgmModel):
        return bl.nwgm_logits(model, x)
    if isinstance(model, bl.DisentangleModel):
        return bl.disentangle_logits(model, x)
    return bl.vanilla_logits(model, x)


def predict_dataset(model: Model, dataset: ConfoundedDataset, batch_size: int = 256, fn=None) -> np.ndarray:
    fn = fn or logits
    out = []
    for start in range(0, len(dataset), batch_size):
        b = make_batch(dataset, np.arange(start, min(start + batch_size, len(dataset))), model.dtype)
        out.append(nc.argmax(fn(model, b.x)).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, dataset: ConfoundedDataset, fn=None) -> float:
    pred = predict_dataset(model, dataset, fn=fn)
    return float((pred == dataset.y_e).mean())


def load_model(path) -> Model:
    """Rebuild a model of the recorded kind from a checkpoint directory."""
    manifest = read_manifest(path)
    cls = MODEL_CLASSES.get(manifest["kind"])
    if cls is None:
        raise FormatError(f"unknown model kind {manifest['kind']!r}")
    model = cls(ArchConfig.from_dict(manifest["arch"]))
    model.load_weights(path, manifest)
    return model


def tiny_arch(seed: int = 0) -> ArchConfig:
    """4-channel features, two emotions, two strata: small enough for exhaustive finite differences."""
    return ArchConfig(in_channels=1, width=4, n_emotions=2, n_confounders=2, image_hw=(12, 12), seed=seed)


GRADCHECK_STEPS = (1e-3, 1e-4, 1e-5, 1e-6)


def gradcheck_report(seed: int = 0, batch_size: int = 4, max_coords: int | None = 24) -> dict[str, float]:
    """Max relative finite-difference error of every loss term on a float64 tiny model.

    Each term is checked against exactly the parameters it is minimised over.
    """
    arch = tiny_arch(seed)
    model = IernModel(arch, dtype=torch.float64)
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(batch_size, 1, *arch.image_hw, generator=g, dtype=torch.float64)
    y_e = torch.arange(batch_size) % arch.n_emotions
    y_c = (torch.arange(batch_size) // arch.n_emotions) % arch.n_confounders
    batch = Batch(x, y_e, y_c)
    checks = {
        "L_e": (lambda: sum(loss_emotion(model, batch)), ("d_e", "g_e", "d_c", "f_b")),
        "L_c": (lambda: sum(loss_context(model, batch)), ("d_c", "g_c", "d_e", "f_b")),
        "L_r": (lambda: loss_recon(model, batch), ("g_r", "g_e", "g_c")),
        "L_CB": (lambda: loss_confounder_builder(model, batch), ("C", "g_c")),
        "L_Cls": (lambda: loss_classifier(model, batch), ("f_c", "g_e", "f_b", "g_r", "C")),
    }
    return {
        name: nc.grad_check(fn, model.view(comps), eps=GRADCHECK_STEPS, max_coords=max_coords, seed=seed)
        for name, (fn, comps) in checks.items()
    }
