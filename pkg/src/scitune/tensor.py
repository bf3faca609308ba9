"""Dense float64 tensors with reverse-mode differentiation.

Every trainable component in this package runs on these primitives. Design
constraints baked in:

* float64 everywhere, so finite-difference checks have precision headroom;
* any NaN/Inf produced by a completed op raises ``NonFiniteError`` instead
  of propagating silently;
* backward passes accumulate gradients only into tensors that require them,
  visiting each graph node exactly once in reverse topological order;
* update steps never mutate a tensor whose ``requires_grad`` is False.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(ArithmeticError):
    """A computation produced NaN or Inf."""


def _as_f64(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    """A node in the computation graph.

    ``grad`` is lazily allocated on first accumulation and holds the same
    shape as ``data``. Non-leaf tensors created by ops carry closures that
    push gradients to their parents.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fns")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fns: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar; each node is visited exactly once."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        order = topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node._accumulate(g)
            for parent, fn in zip(node._parents, node._grad_fns):
                pg = fn(g)
                key = id(parent)
                if key in grads:
                    grads[key] += pg
                else:
                    grads[key] = pg

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the graph reachable from ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    grad_fns: Sequence[Callable[[np.ndarray], np.ndarray]],
    op: str,
) -> Tensor:
    _check_finite(data, op)
    kept = [(p, f) for p, f in zip(parents, grad_fns) if _needs_grad(p)]
    out = Tensor(data)
    if kept:
        out.requires_grad = True
        out._parents = tuple(p for p, _ in kept)
        out._grad_fns = tuple(f for _, f in kept)
    return out


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` to undo numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make_node(
        out,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
        "matmul",
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}") from None
    return _make_node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
        "add",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}") from None
    return _make_node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make_node(a.data * c, (a,), (lambda g: g * c,), "scale")


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g: np.ndarray) -> np.ndarray:
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner)

    return _make_node(out, (a,), (grad_fn,), "gelu")


_LN_EPS = 1e-5


def layer_norm(a: Tensor, eps: float = _LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv

    def grad_fn(g: np.ndarray) -> np.ndarray:
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return inv * (g - gm - xhat * gx)

    return _make_node(xhat, (a,), (grad_fn,), "layer_norm")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g: np.ndarray) -> np.ndarray:
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return _make_node(out, (a,), (grad_fn,), "softmax")


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ValueError(f"embedding table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ValueError(
            f"id out of range for table of {table.data.shape[0]} rows"
        )
    out = table.data[idx]

    def grad_fn(g: np.ndarray) -> np.ndarray:
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return gt

    return _make_node(out, (table,), (grad_fn,), "embedding_lookup")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    if axis >= a.data.ndim or start < 0 or start + length > a.data.shape[axis]:
        raise ValueError(
            f"narrow out of bounds: axis {axis}, [{start}:{start + length}) "
            f"of shape {a.shape}"
        )
    key = [slice(None)] * a.data.ndim
    key[axis] = slice(start, start + length)
    key_t = tuple(key)
    out = a.data[key_t]

    def grad_fn(g: np.ndarray) -> np.ndarray:
        ga = np.zeros_like(a.data)
        ga[key_t] = g
        return ga

    return _make_node(out, (a,), (grad_fn,), "narrow")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_fn(i: int) -> Callable[[np.ndarray], np.ndarray]:
        key = [slice(None)] * out.ndim
        key[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        key_t = tuple(key)
        return lambda g: g[key_t]

    return _make_node(
        out, tuple(parts), tuple(make_fn(i) for i in range(len(parts))), "concat"
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects 2-D, got {a.shape}")
    return _make_node(a.data.T, (a,), (lambda g: g.T,), "transpose")


def cross_entropy(logits: Tensor, targets: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """Mean of -log softmax(logits)[t, target_t] over mask-true positions."""
    tgt = np.asarray(targets, dtype=np.int64)
    msk = np.asarray(mask, dtype=bool)
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be 2-D, got {logits.shape}")
    n_pos, n_vocab = logits.data.shape
    if tgt.shape != (n_pos,) or msk.shape != (n_pos,):
        raise ValueError(
            f"targets/mask length mismatch: logits {logits.shape}, "
            f"targets {tgt.shape}, mask {msk.shape}"
        )
    n_true = int(msk.sum())
    if n_true == 0:
        raise ValueError("cross_entropy mask has no true positions")
    if tgt[msk].min() < 0 or tgt[msk].max() >= n_vocab:
        raise ValueError(f"target id out of range for vocab {n_vocab}")

    x = logits.data
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = logp[np.arange(n_pos), tgt]
    loss = -(picked * msk).sum() / n_true

    def grad_fn(g: np.ndarray) -> np.ndarray:
        soft = np.exp(logp)
        gl = soft.copy()
        gl[np.arange(n_pos), tgt] -= 1.0
        gl *= msk[:, None] / n_true
        return gl * g

    return _make_node(np.asarray(loss), (logits,), (grad_fn,), "cross_entropy")


# ---------------------------------------------------------------------------
# parameter updates
# ---------------------------------------------------------------------------


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.requires_grad and p.grad is not None:
            total += float((p.grad**2).sum())
    return float(np.sqrt(total))


def sgd_step(params: Sequence[Tensor], lr: float, clip: float | None = None) -> None:
    """p <- p - lr * g on trainable params; frozen tensors are never touched.

    ``clip`` applies global-norm gradient clipping across all trainable
    params before the update. Grads of every passed tensor are cleared.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    factor = 1.0
    if clip is not None:
        norm = global_grad_norm(params)
        if norm > clip:
            factor = clip / norm
    for p in params:
        if p.requires_grad and p.grad is not None:
            _check_finite(p.grad, "sgd_step gradient")
            p.data -= lr * factor * p.grad
        p.grad = None


class Adam:
    """Adam behind the same step contract as ``sgd_step``.

    Keeps per-tensor first/second moment state; frozen tensors are never
    mutated and grads of every passed tensor are cleared by ``step``.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t: dict[int, int] = {}

    def step(self, params: Sequence[Tensor], clip: float | None = None) -> None:
        factor = 1.0
        if clip is not None:
            norm = global_grad_norm(params)
            if norm > clip:
                factor = clip / norm
        for p in params:
            if p.requires_grad and p.grad is not None:
                _check_finite(p.grad, "adam step gradient")
                g = p.grad * factor
                key = id(p)
                m = self._m.setdefault(key, np.zeros_like(p.data))
                v = self._v.setdefault(key, np.zeros_like(p.data))
                t = self._t.get(key, 0) + 1
                self._t[key] = t
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g**2
                mhat = m / (1 - self.beta1**t)
                vhat = v / (1 - self.beta2**t)
                p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int = 1000,
    seed: int = 0,
) -> float:
    """Worst relative error of reverse-mode grads vs central differences.

    ``f`` is re-evaluated with perturbed parameters, so it must be a pure
    function of ``params``. Above ``max_coords`` total coordinates a seeded
    random subsample is checked. Tensors in ``params`` are treated as
    trainable for the duration of the check.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    saved_flags = [p.requires_grad for p in params]
    saved_grads = [p.grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    try:
        out = f()
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("grad_check objective is non-finite")
        out.backward()
        analytic = [
            np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
        ]

        coords: list[tuple[int, int]] = [
            (pi, ci) for pi, p in enumerate(params) for ci in range(p.data.size)
        ]
        if len(coords) > max_coords:
            rng = np.random.default_rng(seed)
            chosen = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[int(i)] for i in sorted(chosen)]

        worst = 0.0
        for pi, ci in coords:
            flat = params[pi].data.reshape(-1)
            orig = flat[ci]
            flat[ci] = orig + h
            f_plus = float(f().data)
            flat[ci] = orig - h
            f_minus = float(f().data)
            flat[ci] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(analytic[pi].reshape(-1)[ci])
            denom = max(abs(a), abs(numeric), 1e-6)
            err = abs(a - numeric) / denom if (a != 0.0 or numeric != 0.0) else 0.0
            worst = max(worst, err)
        return worst
    finally:
        for p, flag, g in zip(params, saved_flags, saved_grads):
            p.requires_grad = flag
            p.grad = g


# ---------------------------------------------------------------------------
# initialization and snapshots
# ---------------------------------------------------------------------------


def init_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight tensor."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def tensor_to_bytes(t: Tensor) -> bytes:
    """Snapshot: uint32 ndim, uint64 dims, then raw little-endian float64."""
    dims = t.data.shape
    header = struct.pack("<I", len(dims)) + b"".join(
        struct.pack("<Q", d) for d in dims
    )
    return header + np.ascontiguousarray(t.data, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Read one snapshot from ``buf`` at ``offset``; returns (array, next offset)."""
    try:
        (ndim,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        dims = []
        for _ in range(ndim):
            (d,) = struct.unpack_from("<Q", buf, offset)
            dims.append(int(d))
            offset += 8
        count = int(np.prod(dims)) if dims else 1
        end = offset + 8 * count
        if end > len(buf):
            raise struct.error("truncated tensor payload")
        arr = np.frombuffer(buf[offset:end], dtype="<f8").astype(np.float64)
        return arr.reshape(dims), end
    except struct.error as exc:
        raise ValueError(f"corrupt tensor snapshot at offset {offset}: {exc}") from None
