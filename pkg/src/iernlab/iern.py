"""Interventional emotion recognition network.

Seven sub-networks plus a bank of learnable confounder centers.  The emotion
and context generators split the backbone feature in two, each policed by the
other side's discriminator; a reconstruction net glues them back together and,
at classification time, pairs the emotion feature with every confounder center
so the classifier averages over all strata with equal weight.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import numcore as nc
from .errors import CompatibilityError, ConfigurationError, ContractError, FormatError

COMPONENTS = ("f_b", "g_e", "g_c", "d_e", "d_c", "g_r", "f_c")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 1
    width: int = 32
    n_emotions: int = 6
    n_confounders: int = 3
    image_hw: tuple[int, int] = (16, 16)
    backbone_stride: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.width < 4 or self.width % 4:
            raise ConfigurationError("width must be a positive multiple of 4")
        if self.n_emotions < 1 or self.n_confounders < 1:
            raise ConfigurationError("need at least one emotion class and one stratum")
        h, w = self.feature_hw
        if min(h, w) < 6:
            raise ConfigurationError(f"feature map {h}x{w} too small for the discriminators")

    @property
    def feature_hw(self) -> tuple[int, int]:
        s = self.backbone_stride
        return tuple((d + 2 - 3) // s + 1 for d in self.image_hw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_hw"] = list(self.image_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["image_hw"] = tuple(d["image_hw"])
        return cls(**d)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 5e-4
    lambda3: float = 1.0

    def __post_init__(self):
        for v in (self.lambda1, self.lambda2, self.lambda3):
            if not (math.isfinite(v) and v >= 0):
                raise ConfigurationError("loss weights must be finite and non-negative")


def backbone_layers(a: ArchConfig):
    w = a.width
    return [nc.conv2d(a.in_channels, w, 3, 1, 1), nc.relu(), nc.conv2d(w, w, 3, a.backbone_stride, 1), nc.relu()]


def generator_layers(a: ArchConfig):
    w = a.width
    return [nc.conv2d(w, w, 3, 1, 1), nc.residual_block(w)]


def discriminator_layers(a: ArchConfig, n_out: int):
    w = a.width
    return [
        nc.conv2d(w, w, 4, 2, 1), nc.leaky_relu(),
        nc.conv2d(w, w // 2, 1), nc.leaky_relu(),
        nc.conv2d(w // 2, w // 4, 1), nc.leaky_relu(),
        nc.conv2d(w // 4, n_out, 3, 1, 0),
        nc.global_avg_pool(),
    ]


def reconstruction_layers(a: ArchConfig):
    w = a.width
    return [nc.concat_channels(), nc.conv2d(2 * w, w, 3, 1, 1), nc.residual_block(w), nc.residual_block(w)]


def classifier_layers(a: ArchConfig):
    return [nc.global_avg_pool(), nc.dense(a.width, a.n_emotions)]


def component_layers(name: str, a: ArchConfig):
    return {
        "f_b": lambda: backbone_layers(a),
        "g_e": lambda: generator_layers(a),
        "g_c": lambda: generator_layers(a),
        "d_e": lambda: discriminator_layers(a, a.n_emotions),
        "d_c": lambda: discriminator_layers(a, a.n_confounders),
        "g_r": lambda: reconstruction_layers(a),
        "f_c": lambda: classifier_layers(a),
    }[name]()


def sub_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, sum(ord(ch) * 31**i for i, ch in enumerate(name)) % 2**31]).generate_state(1)[0])


@dataclass
class Batch:
    x: torch.Tensor  # (N, C, H, W)
    y_e: torch.Tensor | None = None
    y_c: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.x.shape[0]


def make_batch(dataset, idx=None, dtype=nc.DEFAULT_DTYPE) -> Batch:
    """Batch from a ConfoundedDataset (HWC arrays) or anything with x/y_e/y_c columns."""
    idx = np.arange(len(dataset)) if idx is None else np.asarray(idx)
    x = torch.as_tensor(np.asarray(dataset.x[idx]), dtype=dtype).permute(0, 3, 1, 2).contiguous()
    return Batch(x, torch.as_tensor(dataset.y_e[idx], dtype=torch.long), torch.as_tensor(dataset.y_c[idx], dtype=torch.long))


class Model:
    """A named collection of networks and loose parameter sets, saved as one checkpoint."""

    kind = "model"
    component_names: tuple[str, ...] = ()

    def __init__(self, arch: ArchConfig, dtype=nc.DEFAULT_DTYPE):
        self.arch = arch
        self.dtype = dtype
        self.nets: dict[str, nc.Network] = {
            n: nc.Network(component_layers(n, arch), sub_seed(arch.seed, n), dtype) for n in self.component_names
        }
        self.extra: dict[str, nc.ParamSet] = {}
        self.step = 0
        self.meta: dict = {}

    def __getattr__(self, name):
        nets = self.__dict__.get("nets", {})
        if name in nets:
            return nets[name]
        raise AttributeError(name)

    def param_sets(self) -> dict[str, nc.ParamSet]:
        out = {n: net.params for n, net in self.nets.items()}
        out.update(self.extra)
        return out

    def view(self, names) -> nc.ParamSet:
        """ParamSet sharing the live tensors of the named components, keyed ``comp/param``."""
        sets = self.param_sets()
        view = nc.ParamSet()
        for comp in names:
            ps = sets[comp]
            for pname, t in ps.items():
                key = f"{comp}/{pname}"
                view._params[key] = t
                if ps.is_frozen(pname):
                    view._frozen.add(key)
        return view

    def snapshot(self) -> dict[str, dict[str, torch.Tensor]]:
        return {n: ps.snapshot() for n, ps in self.param_sets().items()}

    def changed_components(self, before: dict) -> set[str]:
        after = self.snapshot()
        return {
            comp
            for comp, vals in before.items()
            if any(not torch.equal(v, after[comp][k]) for k, v in vals.items())
        }

    # -- checkpoints -------------------------------------------------------

    def save(self, path: str | Path, extra_meta: dict | None = None) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        entries = {}
        for comp, ps in self.param_sets().items():
            names = [(n, list(t.shape), "param") for n, t in ps.items()]
            names += [(n, list(t.shape), "buffer") for n, t in ps.buffers.items()]
            blob = b"".join(
                (ps[n] if role == "param" else ps.buffers[n]).detach().to(torch.float32).numpy().astype("<f4").tobytes()
                for n, _, role in names
            )
            fname = f"{comp}.bin"
            (path / fname).write_bytes(blob)
            entries[comp] = {"blob": fname, "tensors": [{"name": n, "shape": s, "role": r} for n, s, r in names]}
        manifest = {
            "format": "iernlab-checkpoint",
            "format_version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "arch": self.arch.to_dict(),
            "seed": self.arch.seed,
            "step": self.step,
            "components": entries,
            "meta": {**self.meta, **(extra_meta or {})},
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return path

    def load_weights(self, path: str | Path, manifest: dict) -> None:
        path = Path(path)
        sets = self.param_sets()
        if set(manifest["components"]) != set(sets):
            raise CompatibilityError(f"checkpoint components {sorted(manifest['components'])} != {sorted(sets)}")
        for comp, entry in manifest["components"].items():
            raw = np.frombuffer((path / entry["blob"]).read_bytes(), dtype="<f4")
            off = 0
            values = {}
            for t in entry["tensors"]:
                n = math.prod(t["shape"]) if t["shape"] else 1
                if off + n > raw.size:
                    raise FormatError(f"{comp}: blob shorter than manifest")
                values[t["name"]] = torch.as_tensor(raw[off:off + n].reshape(t["shape"]).copy(), dtype=self.dtype)
                off += n
            if off != raw.size:
                raise FormatError(f"{comp}: blob longer than manifest")
            sets[comp].load(values)
        self.step = int(manifest["step"])
        self.meta = dict(manifest.get("meta", {}))


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint manifest in {path}: {exc}") from exc
    if manifest.get("format") != "iernlab-checkpoint" or manifest.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format")
    return manifest


class IernModel(Model):
    kind = "iern"
    component_names = COMPONENTS

    def __init__(self, arch: ArchConfig, dtype=nc.DEFAULT_DTYPE, center_scale: float = 0.1):
        super().__init__(arch, dtype)
        h, w = arch.feature_hw
        rng = np.random.default_rng(sub_seed(arch.seed, "C"))
        bank = nc.ParamSet()
        bank.add("C", torch.as_tensor(
            rng.uniform(-center_scale, center_scale, size=(arch.n_confounders, arch.width, h, w)), dtype=dtype))
        self.extra["C"] = bank

    @property
    def centers(self) -> torch.Tensor:
        return self.extra["C"]["C"]


# ---------------------------------------------------------------------------
# Forward pieces


def _features(model: Model, x: torch.Tensor, training: bool = True):
    fb = model.f_b(x, training)
    return fb, model.g_e(fb, training), model.g_c(fb, training)


def branch_logits(model: IernModel, ge: torch.Tensor, centers: torch.Tensor | None = None, training: bool = True):
    """Classifier logits of ``ge`` paired with each center: shape (N_c, N, N_e).

    In training all pairings go through g_r as one batch so batch-norm sees the
    same mixture of strata it will be normalised with at test time.  In eval
    mode each pairing is run on its own; outputs are per-sample there anyway.
    """
    centers = model.centers if centers is None else centers
    n_c, n = centers.shape[0], ge.shape[0]
    if training:
        ge_rep = ge.repeat(n_c, 1, 1, 1)
        c_rep = centers.repeat_interleave(n, dim=0)
        return model.f_c(model.g_r((ge_rep, c_rep))).reshape(n_c, n, -1)
    out = []
    for i in range(n_c):
        ci = centers[i].unsqueeze(0).expand(n, -1, -1, -1)
        out.append(model.f_c(model.g_r((ge, ci), False), False))
    return torch.stack(out)


def average_branches(branches: torch.Tensor) -> torch.Tensor:
    """Mean over the branch axis, invariant to branch order.

    Values are sorted along the branch axis before summation so that permuting
    the confounder bank cannot change the rounding of the sum.
    """
    if branches.shape[0] == 1:
        return branches[0]
    return torch.sort(branches, dim=0).values.sum(dim=0) / branches.shape[0]


def _uniform_mse(logits: torch.Tensor) -> torch.Tensor:
    return nc.mse(nc.softmax(logits), 1.0 / logits.shape[-1])


def _require(batch: Batch, *labels: str) -> None:
    for name in labels:
        if getattr(batch, name) is None:
            raise ContractError(f"batch lacks {name} labels")


# ---------------------------------------------------------------------------
# Losses


def loss_emotion(model: Model, batch: Batch):
    """(cross-entropy of d_e on the emotion feature, uniformity MSE of d_c on it)."""
    _require(batch, "y_e")
    _, ge, _ = _features(model, batch.x)
    return nc.cross_entropy(model.d_e(ge), batch.y_e), _uniform_mse(model.d_c(ge))


def loss_context(model: Model, batch: Batch):
    """(cross-entropy of d_c on the context feature, uniformity MSE of d_e on it)."""
    _require(batch, "y_c")
    _, _, gc = _features(model, batch.x)
    return nc.cross_entropy(model.d_c(gc), batch.y_c), _uniform_mse(model.d_e(gc))


def loss_recon(model: Model, batch: Batch):
    fb, ge, gc = _features(model, batch.x)
    return nc.mse(model.g_r((ge, gc)), fb.detach())


def loss_confounder_builder(model: IernModel, batch: Batch):
    _require(batch, "y_c")
    _, _, gc = _features(model, batch.x)
    return nc.mse(gc, model.centers[batch.y_c])


def loss_classifier(model: IernModel, batch: Batch, centers: torch.Tensor | None = None):
    _require(batch, "y_e")
    fb = model.f_b(batch.x)
    ge = model.g_e(fb)
    return nc.cross_entropy(average_branches(branch_logits(model, ge, centers)), batch.y_e)


TERM_NAMES = ("L_e", "L_c", "L_r", "L_CB", "L_Cls")


def total_loss(model: IernModel, batch: Batch, weights: LossWeights):
    """Weighted objective for reporting, with each term broken out."""
    le1, le2 = loss_emotion(model, batch)
    lc1, lc2 = loss_context(model, batch)
    terms = {
        "L_e": nc.scalar(le1 + le2),
        "L_c": nc.scalar(lc1 + lc2),
        "L_r": nc.scalar(loss_recon(model, batch)),
        "L_CB": nc.scalar(loss_confounder_builder(model, batch)),
        "L_Cls": nc.scalar(loss_classifier(model, batch)),
    }
    total = weights.lambda1 * (terms["L_e"] + terms["L_c"] + terms["L_r"]) + weights.lambda2 * terms["L_CB"] + weights.lambda3 * terms["L_Cls"]
    return total, terms


# ---------------------------------------------------------------------------
# Training


@dataclass
class OptimizerConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    warmup_steps: int = 0

    def state(self) -> nc.AdamState:
        return nc.AdamState(self.lr, self.beta1, self.beta2, self.epsilon)


# Parameter groups updated together, in Algorithm-1 stage order.
STAGE_GROUPS = {
    "discriminators": ("d_e", "d_c"),
    "generators": ("g_e", "g_c", "g_r", "C"),
    "classifier": ("f_c", "g_e", "f_b"),
}


@dataclass
class TrainState:
    opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    adam: dict[str, nc.AdamState] = field(default_factory=dict)
    step: int = 0

    def get(self, component: str) -> nc.AdamState:
        if component not in self.adam:
            self.adam[component] = self.opt.state()
        return self.adam[component]

    def lr(self) -> float:
        return nc.warmup_lr(self.opt.lr, self.step, self.opt.warmup_steps)


def apply_update(model: Model, loss: torch.Tensor, components, state: TrainState) -> None:
    """Backward ``loss`` into ``components`` and step each with its own Adam state.

    A component updated in several stages (g_e) keeps one set of moments, so
    the stages compete on gradient magnitude rather than each taking a
    unit-sized step.
    """
    view = model.view(components)
    grads = nc.backward(loss, view)
    lr = state.lr()
    for comp in components:
        sub = model.view([comp])
        nc.adam_step(sub, {k: grads[k] for k, _ in sub.trainable()}, state.get(comp), lr=lr)


def train_step(model: IernModel, batch: Batch, weights: LossWeights, state: TrainState, hooks=None) -> dict[str, float]:
    """One staged update; returns the loss breakdown measured along the way.

    ``hooks`` maps a stage name to a callable invoked right after that stage,
    which the tests use to snapshot parameters between stages.
    """
    _require(batch, "y_e", "y_c")
    hooks = hooks or {}
    l1, l2, l3 = weights.lambda1, weights.lambda2, weights.lambda3

    # (a) forward; the discriminators and g_r are run on these features below
    fb, ge, gc = _features(model, batch.x)
    hooks.get("forward", lambda: None)()

    # (b) discriminators learn on fixed generator outputs
    ge_d, gc_d = ge.detach(), gc.detach()
    l_de = nc.cross_entropy(model.d_e(ge_d), batch.y_e)
    l_dc = nc.cross_entropy(model.d_c(gc_d), batch.y_c)
    apply_update(model, l1 * (l_de + l_dc), STAGE_GROUPS["discriminators"], state)
    hooks.get("discriminators", lambda: None)()

    # (c) generators, reconstruction and centers against the updated discriminators.
    # Each loss below touches a disjoint set of trainable groups except L_r, so
    # one backward of the sum routes exactly the per-component terms.
    l_ge = _uniform_mse(model.d_c(ge))
    l_gc = _uniform_mse(model.d_e(gc))
    l_r = nc.mse(model.g_r((ge, gc), track=False), fb.detach())
    l_cb = nc.mse(gc, model.centers[batch.y_c])
    apply_update(model, l1 * (l_ge + l_gc + l_r) + l2 * l_cb, STAGE_GROUPS["generators"], state)
    hooks.get("generators", lambda: None)()

    # (d) backdoor-adjusted classifier through every center
    ge2 = model.g_e(fb)
    l_cls = nc.cross_entropy(average_branches(branch_logits(model, ge2)), batch.y_e)
    if l3 > 0:
        apply_update(model, l3 * l_cls, STAGE_GROUPS["classifier"], state)
    hooks.get("classifier", lambda: None)()

    state.step += 1
    model.step += 1
    terms = {
        "L_e": nc.scalar(l_de + l_ge),
        "L_c": nc.scalar(l_dc + l_gc),
        "L_r": nc.scalar(l_r),
        "L_CB": nc.scalar(l_cb),
        "L_Cls": nc.scalar(l_cls),
    }
    terms["total"] = l1 * (terms["L_e"] + terms["L_c"] + terms["L_r"]) + l2 * terms["L_CB"] + l3 * terms["L_Cls"]
    return terms


# ---------------------------------------------------------------------------
# Inference


@torch.no_grad()
def averaged_logits(model: IernModel, x: torch.Tensor) -> torch.Tensor:
    ge = model.g_e(model.f_b(x, False), False)
    return average_branches(branch_logits(model, ge, training=False))


@torch.no_grad()
def predict(model: IernModel, x: torch.Tensor):
    """(labels, probabilities) from the softmax of the branch-averaged logits."""
    z = averaged_logits(model, x)
    p = nc.softmax(z.to(nc.ACCUM_DTYPE))
    return nc.argmax(p), p


def check_compatible(model: Model, dataset) -> None:
    a = model.arch
    shape = tuple(dataset.image_shape)
    if shape != (a.image_hw[0], a.image_hw[1], a.in_channels):
        raise CompatibilityError(f"dataset images {shape} vs model input {a.image_hw + (a.in_channels,)}")
    if dataset.n_emotions and dataset.n_emotions != a.n_emotions:
        raise CompatibilityError(f"dataset has {dataset.n_emotions} emotions, model {a.n_emotions}")
    if len(dataset) and int(dataset.y_e.max()) >= a.n_emotions:
        raise CompatibilityError("dataset emotion labels exceed the model's classes")
