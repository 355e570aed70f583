"""Differentiable numerical backbone.

Thin, shape-checked operations over ``torch`` tensors, a gradient entry point
that never accumulates, a hand-written Adam step and the Gaussian negative
log-likelihood used by every model in the package.

Weights are stored as ``(in, out)`` for dense layers and ``(out, in, 3, 3)``
for convolutions. Leading batch dimensions are accepted everywhere.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

torch.set_num_threads(1)

LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the default float type (``"float32"`` or ``"float64"``)."""
    dtypes = {"float32": torch.float32, "float64": torch.float64}
    if mode not in dtypes:
        raise ValueError(f"unknown precision {mode!r}")
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtypes[mode])
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def _shape(t) -> tuple:
    return tuple(t.shape)


def _fail(op: str, a, b) -> None:
    raise ShapeError(f"{op}: incompatible shapes {_shape(a)} and {_shape(b)}")


# --- operations ---------------------------------------------------------------

def dense(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    if w.dim() != 2 or x.shape[-1] != w.shape[0]:
        _fail("dense", x, w)
    y = x @ w
    if b is not None:
        if _shape(b) != (w.shape[1],):
            _fail("dense(bias)", w, b)
        y = y + b
    return y


def _as_batched_image(op: str, x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ShapeError(f"{op}: expected (C, H, W) or (N, C, H, W), got {_shape(x)}")


def conv3x3(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """Stride 1, zero padding 1; spatial size is preserved."""
    xb, squeeze = _as_batched_image("conv3x3", x)
    if w.dim() != 4 or w.shape[2:] != (3, 3) or w.shape[1] != xb.shape[1]:
        _fail("conv3x3", x, w)
    if b is not None and _shape(b) != (w.shape[0],):
        _fail("conv3x3(bias)", w, b)
    y = F.conv2d(xb, w, b, stride=1, padding=1)
    return y.squeeze(0) if squeeze else y


def maxpool2x2(x: torch.Tensor) -> torch.Tensor:
    xb, squeeze = _as_batched_image("maxpool2x2", x)
    if xb.shape[-1] % 2 or xb.shape[-2] % 2:
        raise ShapeError(f"maxpool2x2: spatial extents must be even, got {_shape(x)}")
    y = F.max_pool2d(xb, 2)
    return y.squeeze(0) if squeeze else y


def upsample2x2(x: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbour doubling of both spatial extents."""
    xb, squeeze = _as_batched_image("upsample2x2", x)
    y = xb.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)
    return y.squeeze(0) if squeeze else y


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x)


def concat(tensors: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    first = tensors[0]
    for other in tensors[1:]:
        if other.dim() != first.dim():
            _fail("concat", first, other)
        a = list(first.shape)
        c = list(other.shape)
        del a[dim], c[dim]
        if a != c:
            _fail("concat", first, other)
    return torch.cat(list(tensors), dim=dim)


def slice_(x: torch.Tensor, start: int, stop: int, dim: int = -1) -> torch.Tensor:
    n = x.shape[dim]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice: range [{start}, {stop}) outside extent {n} of {_shape(x)}")
    return x.narrow(dim, start, stop - start)


def reshape(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    shape = tuple(shape)
    known = math.prod(s for s in shape if s != -1)
    if -1 not in shape and known != x.numel() or -1 in shape and x.numel() % max(known, 1):
        raise ShapeError(f"reshape: cannot view {_shape(x)} as {shape}")
    return x.reshape(shape)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        _fail("add", a, b)
    return a + b


def scale(x: torch.Tensor, c) -> torch.Tensor:
    return x * c


def set_mean(x: torch.Tensor) -> torch.Tensor:
    """Mean over the leading (set) axis."""
    if x.dim() < 1 or x.shape[0] == 0:
        raise ShapeError(f"mean-over-set: empty set {_shape(x)}")
    return x.mean(dim=0)


OPS: dict[str, Callable] = {
    "dense": dense,
    "conv3x3": conv3x3,
    "maxpool2x2": maxpool2x2,
    "upsample2x2": upsample2x2,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "concat": lambda *ts, dim=-1: concat(ts, dim=dim),
    "slice": slice_,
    "reshape": reshape,
    "add": add,
    "multiply-by-scalar": scale,
    "mean-over-set": set_mean,
}


def forward_op(kind: str, *inputs, **kwargs) -> torch.Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operation {kind!r}") from None
    return fn(*inputs, **kwargs)


# --- gradients ----------------------------------------------------------------

def backward(loss: torch.Tensor, params: Iterable[torch.Tensor]) -> list[torch.Tensor]:
    """Write d(loss)/d(param) into each ``param.grad`` (old values discarded)."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {_shape(loss)}")
    params = [p for p in params if p.requires_grad]
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    out = []
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        p.grad = g
        out.append(g)
    return out


def finite_difference_grad(
    fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-4
) -> list[torch.Tensor]:
    """Central-difference gradient of a scalar function of ``params``.

    Perturbs every element in place and restores it; autograd is not consulted.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(fn())
                flat[i] = orig - h
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    a = a.detach().double().reshape(-1)
    b = b.detach().double().reshape(-1)
    denom = max(float(a.norm()), float(b.norm()), floor)
    return float((a - b).norm()) / denom


# --- optimisation -------------------------------------------------------------

def flatten_parameters(params: Sequence[torch.Tensor]) -> torch.Tensor:
    """Move ``params`` into one contiguous buffer; each becomes a view of it."""
    params = list(params)
    flat = torch.cat([p.detach().reshape(-1) for p in params]) if params else torch.zeros(0)
    offset = 0
    for p in params:
        n = p.numel()
        p.data = flat[offset:offset + n].view_as(p)
        offset += n
    return flat


def _flat_source(params: Sequence[torch.Tensor]) -> torch.Tensor | None:
    """The shared buffer behind ``params`` if they tile one contiguously."""
    if not params:
        return None
    base = params[0].data
    storage = base.untyped_storage().data_ptr()
    offset = base.storage_offset()
    for p in params:
        if p.data.untyped_storage().data_ptr() != storage or p.data.storage_offset() != offset \
                or not p.data.is_contiguous():
            return None
        offset += p.numel()
    total = offset - params[0].data.storage_offset()
    return base.new_empty(0).set_(base.untyped_storage(), params[0].data.storage_offset(), (total,))


@dataclass
class OptimizerState:
    """Adam hyper-parameters, step counter and per-parameter moments.

    ``m`` and ``v`` are views into flat buffers so updates run as a few
    whole-buffer operations.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor], **kwargs) -> "OptimizerState":
        state = cls(**kwargs)
        state.set_moments([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])
        return state

    def set_moments(self, m: Sequence[torch.Tensor], v: Sequence[torch.Tensor]) -> None:
        self._m_flat = torch.cat([x.reshape(-1) for x in m]) if m else torch.zeros(0)
        self._v_flat = torch.cat([x.reshape(-1) for x in v]) if v else torch.zeros(0)
        self.m = _views(self._m_flat, m)
        self.v = _views(self._v_flat, v)


def _views(flat: torch.Tensor, like: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    out, offset = [], 0
    for x in like:
        out.append(flat[offset:offset + x.numel()].view(x.shape))
        offset += x.numel()
    return out


def adam_step(state: OptimizerState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor]) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and moments are misaligned")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape:
            _fail("adam_step", p, g)
        if m.shape != p.shape:
            _fail("adam_step(moment)", p, m)
    g = torch.cat([x.reshape(-1) for x in grads]) if grads else torch.zeros(0)
    if not math.isfinite(float(g.sum())):
        raise NonFiniteError(f"non-finite gradient at optimizer step {state.step}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        m, v = state._m_flat, state._v_flat
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        update = m / (v.div(c2).sqrt_().add_(state.eps))
        update.mul_(-state.lr / c1)
        flat = _flat_source(params)
        if flat is not None:
            flat.add_(update)
        else:
            for p, u in zip(params, _views(update, params)):
                p.add_(u)


# --- likelihood ---------------------------------------------------------------

def gaussian_nll(target: torch.Tensor, mean: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
    """Sum of elementwise Gaussian negative log-likelihoods."""
    if not (target.shape == mean.shape == std.shape):
        raise ShapeError(
            f"gaussian_nll: shapes differ target={_shape(target)} mean={_shape(mean)} std={_shape(std)}"
        )
    if bool((std <= 0).any()):
        raise ValueError("gaussian_nll: standard deviation must be strictly positive")
    var = std * std
    return (0.5 * (LOG_2PI + torch.log(var)) + (target - mean) ** 2 / (2 * var)).sum()


# --- initialisation -----------------------------------------------------------

def fan_in_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> torch.Tensor:
    bound = math.sqrt(6.0 / fan_in)
    values = rng.uniform(-bound, bound, size=tuple(shape))
    return torch.tensor(values, dtype=torch.get_default_dtype())
