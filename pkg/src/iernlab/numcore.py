"""Small tensor toolkit: layer stacks, losses, Adam and a finite-difference checker.

Tensors are plain ``torch.Tensor`` objects and reverse-mode differentiation is
delegated to ``torch.autograd``.  What lives here is the thin contract layer the
rest of the package relies on: named parameter sets with per-parameter freeze
flags, a declarative layer vocabulary, losses that accumulate in float64, a
hand-written Adam update, and ``grad_check``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError, ShapeError, StateError

DEFAULT_DTYPE = torch.float32
ACCUM_DTYPE = torch.float64


def tensor(data, shape: Sequence[int] | None = None, dtype=DEFAULT_DTYPE) -> torch.Tensor:
    """Build a tensor from nested data or a flat row-major list, rejecting NaN/Inf."""
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=dtype)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"non-positive dimension in shape {shape}")
        if math.prod(shape) != t.numel():
            raise ShapeError(f"shape {shape} does not hold {t.numel()} values")
        t = t.reshape(shape)
    check_finite(t)
    return t


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise ContractError(f"{what} contains non-finite values")
    return t


# ---------------------------------------------------------------------------
# Parameter sets


class ParamSet:
    """Named leaf tensors plus a frozen flag per name.

    Buffers (batch-norm running statistics) ride along in ``buffers``; they are
    not parameters and never receive gradients.
    """

    def __init__(self):
        self._params: dict[str, torch.Tensor] = {}
        self._frozen: set[str] = set()
        self.buffers: dict[str, torch.Tensor] = {}

    def add(self, name: str, value: torch.Tensor, frozen: bool = False) -> torch.Tensor:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        check_finite(value, name)
        leaf = value.detach().clone().requires_grad_(True)
        self._params[name] = leaf
        if frozen:
            self._frozen.add(name)
        return leaf

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def freeze(self, names: Iterable[str] | None = None) -> None:
        self._frozen.update(self._params if names is None else names)

    def unfreeze(self, names: Iterable[str] | None = None) -> None:
        if names is None:
            self._frozen.clear()
        else:
            self._frozen.difference_update(names)

    def trainable(self) -> list[tuple[str, torch.Tensor]]:
        return [(n, p) for n, p in self._params.items() if n not in self._frozen]

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self._params.items()}

    def load(self, values: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for n, v in values.items():
                if n in self._params:
                    if self._params[n].shape != v.shape:
                        raise ShapeError(f"{n}: expected {tuple(self._params[n].shape)}, got {tuple(v.shape)}")
                    self._params[n].copy_(v)
                elif n in self.buffers:
                    self.buffers[n].copy_(v)
                else:
                    raise ContractError(f"unknown parameter {n!r}")

    def n_values(self) -> int:
        return sum(p.numel() for p in self._params.values())


# ---------------------------------------------------------------------------
# Layers


LAYER_KINDS = (
    "dense",
    "conv2d",
    "relu",
    "leaky_relu",
    "batchnorm",
    "residual_block",
    "global_avg_pool",
    "concat_channels",
)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    bias: bool = True
    slope: float = 0.2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec("dense", n_in, n_out)


def conv2d(in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0, bias: bool = True) -> LayerSpec:
    return LayerSpec("conv2d", in_ch, out_ch, kernel, stride, padding, bias)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def leaky_relu(slope: float = 0.2) -> LayerSpec:
    return LayerSpec("leaky_relu", slope=slope)


def batchnorm(ch: int) -> LayerSpec:
    return LayerSpec("batchnorm", ch, ch)


def residual_block(ch: int) -> LayerSpec:
    """x + relu(bn(conv3x3(x)))."""
    return LayerSpec("residual_block", ch, ch, 3, 1, 1, bias=False)


def global_avg_pool() -> LayerSpec:
    return LayerSpec("global_avg_pool")


def concat_channels() -> LayerSpec:
    return LayerSpec("concat_channels")


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def init_layer(spec: LayerSpec, name: str, params: ParamSet, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> None:
    """Uniform fan-in init for weights, zeros for biases, unit scale for batch-norm."""

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return torch.as_tensor(rng.uniform(-bound, bound, size=shape), dtype=dtype)

    k = spec.kind
    if k == "dense":
        params.add(f"{name}.weight", uniform((spec.out_ch, spec.in_ch), spec.in_ch))
        params.add(f"{name}.bias", torch.zeros(spec.out_ch, dtype=dtype))
    elif k in ("conv2d", "residual_block"):
        fan_in = spec.in_ch * spec.kernel * spec.kernel
        params.add(f"{name}.weight", uniform((spec.out_ch, spec.in_ch, spec.kernel, spec.kernel), fan_in))
        if spec.bias:
            params.add(f"{name}.bias", torch.zeros(spec.out_ch, dtype=dtype))
        if k == "residual_block":
            _init_bn(f"{name}.bn", spec.out_ch, params, dtype)
    elif k == "batchnorm":
        _init_bn(name, spec.out_ch, params, dtype)


def _init_bn(name: str, ch: int, params: ParamSet, dtype) -> None:
    params.add(f"{name}.gamma", torch.ones(ch, dtype=dtype))
    params.add(f"{name}.beta", torch.zeros(ch, dtype=dtype))
    params.buffers[f"{name}.running_mean"] = torch.zeros(ch, dtype=dtype)
    params.buffers[f"{name}.running_var"] = torch.ones(ch, dtype=dtype)


def _bn(x: torch.Tensor, name: str, params: ParamSet, training: bool, track: bool = True) -> torch.Tensor:
    """Batch-norm over (N, H, W) with statistics accumulated in float64.

    The float64 reduction makes the float32 result insensitive to the order of
    samples within the batch.  ``training=False`` uses the running statistics;
    ``track=False`` leaves them untouched during a training-mode pass.
    """
    rm = params.buffers[f"{name}.running_mean"]
    rv = params.buffers[f"{name}.running_var"]
    if training:
        x64 = x.to(ACCUM_DTYPE)
        mean = x64.mean(dim=(0, 2, 3))
        var = x64.var(dim=(0, 2, 3), unbiased=False)
        if track:
            n = x.numel() // x.shape[1]
            with torch.no_grad():
                rm.mul_(1 - BN_MOMENTUM).add_(BN_MOMENTUM * mean.detach().to(rm.dtype))
                rv.mul_(1 - BN_MOMENTUM).add_(BN_MOMENTUM * (var.detach() * n / max(n - 1, 1)).to(rv.dtype))
        scale = (params[f"{name}.gamma"].to(ACCUM_DTYPE) / torch.sqrt(var + BN_EPS))
        shift = params[f"{name}.beta"].to(ACCUM_DTYPE) - mean * scale
        return x * scale.to(x.dtype)[None, :, None, None] + shift.to(x.dtype)[None, :, None, None]
    scale = params[f"{name}.gamma"] / torch.sqrt(rv + BN_EPS)
    shift = params[f"{name}.beta"] - rm * scale
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def _expect_channels(x: torch.Tensor, spec: LayerSpec) -> None:
    if x.dim() != 4 or x.shape[1] != spec.in_ch:
        raise ShapeError(f"{spec.kind} expects (N, {spec.in_ch}, H, W), got {tuple(x.shape)}")


def layer_forward(spec: LayerSpec, x, params: ParamSet | None = None, name: str = "", training: bool = True, track: bool = True):
    """Apply one layer. ``x`` is a tensor, or a sequence of tensors for ``concat_channels``.

    ``training`` selects batch statistics for batch-norm; with ``training=False``
    the stored running statistics are used instead.  ``track=False`` keeps a
    training-mode pass from updating those running statistics.
    """
    k = spec.kind
    if k == "concat_channels":
        parts = list(x) if isinstance(x, (list, tuple)) else [x]
        if any(p.dim() != 4 for p in parts) or len({(p.shape[0],) + tuple(p.shape[2:]) for p in parts}) != 1:
            raise ShapeError("concat_channels needs (N, C_i, H, W) inputs with matching N, H, W")
        return torch.cat(parts, dim=1)
    if k == "relu":
        return torch.relu(x)
    if k == "leaky_relu":
        return F.leaky_relu(x, spec.slope)
    if k == "global_avg_pool":
        if x.dim() != 4:
            raise ShapeError(f"global_avg_pool expects (N, C, H, W), got {tuple(x.shape)}")
        return x.mean(dim=(2, 3))
    if k == "dense":
        if x.dim() != 2 or x.shape[1] != spec.in_ch:
            raise ShapeError(f"dense expects (N, {spec.in_ch}), got {tuple(x.shape)}")
        return F.linear(x, params[f"{name}.weight"], params[f"{name}.bias"])
    if k == "conv2d":
        _expect_channels(x, spec)
        if x.shape[2] + 2 * spec.padding < spec.kernel or x.shape[3] + 2 * spec.padding < spec.kernel:
            raise ShapeError(f"input {tuple(x.shape)} smaller than kernel {spec.kernel}")
        bias = params[f"{name}.bias"] if spec.bias else None
        return F.conv2d(x, params[f"{name}.weight"], bias, spec.stride, spec.padding)
    if k == "batchnorm":
        _expect_channels(x, spec)
        return _bn(x, name, params, training, track)
    if k == "residual_block":
        _expect_channels(x, spec)
        h = F.conv2d(x, params[f"{name}.weight"], None, 1, 1)
        return x + torch.relu(_bn(h, f"{name}.bn", params, training, track))
    raise ConfigurationError(f"unknown layer kind {k!r}")  # pragma: no cover


class Network:
    """An ordered stack of layers sharing one ParamSet."""

    def __init__(self, layers: Sequence[LayerSpec], seed: int, dtype=DEFAULT_DTYPE):
        self.layers = list(layers)
        self.dtype = dtype
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        for i, spec in enumerate(self.layers):
            init_layer(spec, str(i), self.params, rng, dtype)

    def __call__(self, x, training: bool = True, track: bool = True) -> torch.Tensor:
        for i, spec in enumerate(self.layers):
            x = layer_forward(spec, x, self.params, str(i), training, track)
        return x


# ---------------------------------------------------------------------------
# Losses and softmax


def softmax(logits: torch.Tensor) -> torch.Tensor:
    """Softmax along the last axis with max subtraction."""
    check_finite(logits.detach(), "logits")
    z = logits - logits.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean of -log softmax(logits)[label]; accumulates in float64.

    ``logits`` is (N,) with an int label, or (B, N) with B labels.
    """
    single = logits.dim() == 1
    z = logits.unsqueeze(0) if single else logits
    n_cls = z.shape[-1]
    lab = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if lab.numel() != z.shape[0]:
        raise ContractError(f"{lab.numel()} labels for {z.shape[0]} logit rows")
    if bool((lab < 0).any()) or bool((lab >= n_cls).any()):
        raise ContractError(f"label out of range [0, {n_cls})")
    z = z.to(ACCUM_DTYPE)
    logp = z - torch.logsumexp(z, dim=-1, keepdim=True)
    return -logp.gather(1, lab[:, None]).mean()


def mse(a: torch.Tensor, b) -> torch.Tensor:
    """Mean squared difference; ``b`` may be a same-shape tensor or a scalar target."""
    if isinstance(b, torch.Tensor) and b.dim() > 0:
        if b.shape != a.shape:
            raise ContractError(f"mse shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        b = b.to(ACCUM_DTYPE)
    elif isinstance(b, torch.Tensor):
        b = b.to(ACCUM_DTYPE)
    else:
        b = float(b)
    d = a.to(ACCUM_DTYPE) - b
    return (d * d).mean()


# ---------------------------------------------------------------------------
# Differentiation


def backward(loss: torch.Tensor, params: ParamSet) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss for every non-frozen parameter.

    Unreachable parameters get zeros; frozen parameters get no entry.  The
    ``.grad`` slot of each trainable leaf is filled as well.
    """
    if loss.numel() != 1:
        raise ContractError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None and not loss.requires_grad:
        raise StateError("loss has no recorded forward computation")
    trainable = params.trainable()
    if not trainable:
        return {}
    grads = torch.autograd.grad(
        loss.reshape(()), [p for _, p in trainable], retain_graph=True, allow_unused=True
    )
    out = {}
    for (name, p), g in zip(trainable, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        p.grad = g
        out[name] = g
    return out


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: ParamSet,
    eps: float | Sequence[float] = 1e-4,
    max_coords: int | None = 64,
    seed: int = 0,
    analytic: dict[str, torch.Tensor] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per coordinate is |a - n| / max(|a|, |n|, 1e-12).  Up to
    ``max_coords`` coordinates per parameter are sampled.  ``analytic`` lets a
    caller substitute precomputed gradients (used to test the checker itself).

    ``eps`` may be a sequence of step sizes; each coordinate then keeps its
    best agreement.  Large steps straddle relu kinks and small ones lose tiny
    gradients to cancellation, while a wrong gradient disagrees at every step.
    """
    steps = [float(eps)] if np.isscalar(eps) else [float(e) for e in eps]
    if not steps or min(steps) <= 0:
        raise ContractError("eps must be positive")
    if analytic is None:
        analytic = backward(loss_fn(), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.trainable():
        flat = p.data.view(-1)
        n = flat.numel()
        idx = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        g = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i].item()
            ana = float(g[i])
            best = math.inf
            for h in steps:
                with torch.no_grad():
                    flat[i] = orig + h
                    up = float(loss_fn())
                    flat[i] = orig - h
                    down = float(loss_fn())
                    flat[i] = orig
                num = (up - down) / (2 * h)
                best = min(best, abs(ana - num) / max(abs(ana), abs(num), 1e-12))
            worst = max(worst, best)
    return worst


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("betas must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")


def adam_step(params: ParamSet, grads: dict[str, torch.Tensor], state: AdamState, lr: float | None = None) -> None:
    """Bias-corrected Adam update of every non-frozen parameter, in place."""
    trainable = params.trainable()
    missing = [n for n, _ in trainable if n not in grads]
    if missing:
        raise ContractError(f"missing gradients for {missing}")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in trainable:
            g = grads[name].to(ACCUM_DTYPE)
            if name not in state.m:
                state.m[name] = torch.zeros_like(g)
                state.v[name] = torch.zeros_like(g)
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            update = lr * (m / bc1) / (torch.sqrt(v / bc2) + state.epsilon)
            p.sub_(update.to(p.dtype))


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear ramp from 0 over ``warmup_steps`` optimizer steps, then constant."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def argmax(values: torch.Tensor) -> torch.Tensor:
    """Argmax along the last axis; the lowest index wins ties."""
    return torch.argmax(values, dim=-1)


def scalar(t: torch.Tensor) -> float:
    return float(t.detach())
