"""Dense tensors with reverse-mode autodiff, AdamW, and the linear warmup/decay schedule.

The operator set is deliberately closed: matmul, add, mul, scale, reshape,
axis swaps, embedding gather, layer norm, GELU (tanh form), softmax,
cross-entropy, sum/mean, and position slicing. The models in this package are
built only from these. Storage is float32; reductions and loss scalars
accumulate in float64 so checks stay tight without doubling memory.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32
GELU_COEF = 0.044715
SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation / decoding)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class NonFiniteError(ValueError):
    """A value that must be finite (loss, gradient, op input) is NaN or Inf."""


class Tensor:
    """A dense float array plus the graph edges needed for reverse-mode backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _needs_grad(*tensors: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad or t._parents for t in tensors)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    if _needs_grad(a, b):
        def backward_fn(g):
            if a.requires_grad or a._parents:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad or b._parents:
                _accum(b, _unbroadcast(g, b.data.shape))
        out._parents = (a, b)
        out._backward_fn = backward_fn
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    if _needs_grad(a, b):
        def backward_fn(g):
            if a.requires_grad or a._parents:
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad or b._parents:
                _accum(b, _unbroadcast(g * a.data, b.data.shape))
        out._parents = (a, b)
        out._backward_fn = backward_fn
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(s))
    if _needs_grad(a):
        def backward_fn(g):
            _accum(a, g * a.data.dtype.type(s))
        out._parents = (a,)
        out._backward_fn = backward_fn
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b. Supports [..., m, k] @ [k, n] and batched operands of equal rank."""
    out = Tensor(np.matmul(a.data, b.data))
    if _needs_grad(a, b):
        def backward_fn(g):
            if a.requires_grad or a._parents:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                _accum(a, _unbroadcast(ga, a.data.shape))
            if b.requires_grad or b._parents:
                if b.data.ndim == 2 and a.data.ndim > 2:
                    k = a.data.shape[-1]
                    n = g.shape[-1]
                    gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
                else:
                    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                _accum(b, _unbroadcast(gb, b.data.shape))
        out._parents = (a, b)
        out._backward_fn = backward_fn
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    if _needs_grad(a):
        def backward_fn(g):
            _accum(a, g.reshape(a.data.shape))
        out._parents = (a,)
        out._backward_fn = backward_fn
    return out


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = Tensor(np.swapaxes(a.data, ax1, ax2))
    if _needs_grad(a):
        def backward_fn(g):
            _accum(a, np.swapaxes(g, ax1, ax2))
        out._parents = (a,)
        out._backward_fn = backward_fn
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of an embedding table: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])
    if _needs_grad(table):
        def backward_fn(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
            _accum(table, gt)
        out._parents = (table,)
        out._backward_fn = backward_fn
    return out


def take_position(a: Tensor, position: int) -> Tensor:
    """Slice one sequence position: [B, S, d] -> [B, d]."""
    out = Tensor(a.data[:, position, :])
    if _needs_grad(a):
        def backward_fn(g):
            ga = np.zeros_like(a.data)
            ga[:, position, :] = g
            _accum(a, ga)
        out._parents = (a,)
        out._backward_fn = backward_fn
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = np.square(xd - mean).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = ((xd - mean) * inv).astype(xd.dtype)
    out = Tensor(xhat * gain.data + bias.data)
    if _needs_grad(x, gain, bias):
        def backward_fn(g):
            if gain.requires_grad or gain._parents:
                _accum(gain, (g * xhat).sum(axis=tuple(range(g.ndim - 1)), dtype=np.float64))
            if bias.requires_grad or bias._parents:
                _accum(bias, g.sum(axis=tuple(range(g.ndim - 1)), dtype=np.float64))
            if x.requires_grad or x._parents:
                gy = g * gain.data
                m1 = gy.mean(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
                m2 = (gy * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
                _accum(x, (gy - m1 - xhat * m2) * inv)
        out._parents = (x, gain, bias)
        out._backward_fn = backward_fn
    return out


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation. This form is normative for the whole package."""
    xd = x.data
    u = SQRT_2_OVER_PI * (xd + GELU_COEF * xd ** 3)
    t = np.tanh(u)
    out = Tensor(0.5 * xd * (1.0 + t))
    if _needs_grad(x):
        def backward_fn(g):
            du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * xd ** 2)
            dydx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * du
            _accum(x, g * dydx)
        out._parents = (x,)
        out._backward_fn = backward_fn
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along one axis; rows sum to 1 within 1e-6."""
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NonFiniteError("softmax input contains NaN or Inf")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    y = (e / denom).astype(xd.dtype)
    out = Tensor(y)
    if _needs_grad(x):
        def backward_fn(g):
            dot = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64).astype(xd.dtype)
            _accum(x, (g - dot) * y)
        out._parents = (x,)
        out._backward_fn = backward_fn
    return out


IGNORE_ID = -100


def cross_entropy(logits: Tensor, targets, ignore_marker: int = IGNORE_ID,
                  label_smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not the ignore marker.

    logits: [..., V]; targets: matching integer ids of shape [...]. Leading
    axes are flattened, so [B,S,V] against [B,S] works directly. The scalar
    is computed and returned in float64 regardless of logits storage.

    label_smoothing spreads that fraction of each row's target mass
    uniformly over the vocabulary, so the per-row loss becomes
    lse - (1-eps) * x[gold] - (eps/V) * sum(x).
    """
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must be in [0, 1)")
    targets = np.asarray(targets)
    ld = logits.data
    if targets.shape != ld.shape[:-1]:
        raise ValueError(
            f"cross_entropy: targets {targets.shape} do not match logits {ld.shape}")
    flat_t = targets.reshape(-1)
    flat_l = ld.reshape(-1, ld.shape[-1])
    keep = flat_t != ignore_marker
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ValueError("cross_entropy: every row is ignored")
    rows = np.nonzero(keep)[0]
    tgt = flat_t[rows]
    if np.any(tgt < 0) or np.any(tgt >= flat_l.shape[1]):
        raise ValueError("cross_entropy: target id out of range")
    eps = float(label_smoothing)
    n_vocab = flat_l.shape[1]
    x = flat_l[rows].astype(np.float64)
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    nll = lse - (1.0 - eps) * x[np.arange(n_keep), tgt]
    if eps:
        nll -= (eps / n_vocab) * x.sum(axis=1)
    loss = float(nll.mean())
    out = Tensor(np.float64(loss))
    if _needs_grad(logits):
        p = np.exp(x - lse[:, None])
        p[np.arange(n_keep), tgt] -= 1.0 - eps
        if eps:
            p -= eps / n_vocab

        def backward_fn(g):
            gl = np.zeros_like(flat_l)
            gl[rows] = (p * (float(g) / n_keep)).astype(ld.dtype)
            _accum(logits, gl.reshape(ld.shape))
        out._parents = (logits,)
        out._backward_fn = backward_fn
    return out


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.float64(a.data.sum(dtype=np.float64)))
    if _needs_grad(a):
        def backward_fn(g):
            _accum(a, np.full_like(a.data, float(g)))
        out._parents = (a,)
        out._backward_fn = backward_fn
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.float64(a.data.sum(dtype=np.float64) / n))
    if _needs_grad(a):
        def backward_fn(g):
            _accum(a, np.full_like(a.data, float(g) / n))
        out._parents = (a,)
        out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; gradients accumulate on .grad."""
    if loss.data.ndim != 0:
        raise ValueError("backward expects a scalar loss")
    if not np.isfinite(loss.data):
        raise NonFiniteError("backward: loss is not finite")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
            if node is not loss:
                node.grad = None  # free intermediates; parameter grads survive


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class ModelParameters:
    """Ordered, uniquely named collection of trainable tensors."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._items:
            raise ValueError(f"duplicate parameter name: {name}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self):
        return self._items.items()

    def zero_grads(self) -> None:
        for t in self._items.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradients aligned with parameter names; missing grads are zeros."""
        out = {}
        for name, t in self._items.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def astype(self, dtype) -> "ModelParameters":
        clone = ModelParameters()
        for name, t in self._items.items():
            clone.add(name, t.data.astype(dtype))
        return clone

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._items.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self._items.items():
            arr = values[name]
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(t.data.dtype).copy()


# ---------------------------------------------------------------------------
# AdamW and the learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    peak_lr: float = 5e-5

    @classmethod
    def for_params(cls, params: ModelParameters, **hp) -> "OptimizerState":
        m = {n: np.zeros_like(t.data) for n, t in params.items()}
        v = {n: np.zeros_like(t.data) for n, t in params.items()}
        return cls(m=m, v=v, **hp)


def adamw_step(params: ModelParameters, grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float | None = None):
    """One AdamW update: bias-corrected moments, decoupled weight decay.

    Mutates params and state in place and returns them. Decay multiplies the
    parameter directly by (1 - lr * weight_decay), never touching gradients.
    """
    if lr is None:
        lr = state.peak_lr
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, t in params.items():
        g = grads[name]
        if g.shape != t.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        mhat = m / bc1
        vhat = v / bc2
        t.data = t.data - (lr * (mhat / (np.sqrt(vhat) + state.eps))).astype(t.data.dtype)
        if state.weight_decay != 0.0:
            t.data = t.data - (lr * state.weight_decay) * t.data
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to peak_lr over the first warmup_fraction of steps, then linear decay to 0."""
    total_steps: int
    peak_lr: float
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")


def lr_at(schedule: LrSchedule, step: int | float) -> float:
    """Learning rate after `step` completed optimizer steps, 0 <= step <= total."""
    total = schedule.total_steps
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = schedule.warmup_fraction * total
    if step <= warm:
        return schedule.peak_lr * (step / warm)
    return schedule.peak_lr * ((total - step) / (total - warm))


def derived_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent RNG stream for (seed, *key); stable across platforms and worker counts."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))
