"""Float32 tensors with a reverse-mode tape, Adam, and checkpoint IO.

Every model component downstream is assembled from the primitives in this
module. Each primitive carries its own backward rule; the test suite checks
all of them against central finite differences, both in isolation and through
the full model.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32


class ShapeMismatchError(ValueError):
    """Operands with incompatible shapes."""


class DegenerateRowError(ValueError):
    """A softmax row in which every entry is masked."""


class NonFiniteGradError(RuntimeError):
    """A gradient contained NaN or infinity."""


class CheckpointFormatError(ValueError):
    """Checkpoint bytes with an unknown magic, version, or layout."""


# ---------------------------------------------------------------------------
# Tensor and tape


class Tensor:
    """Dense n-dimensional float32 array, optionally recorded on the active tape.

    `grad`, when populated by `backward`, always has the same shape as `data`.
    A non-float32 dtype may be passed explicitly (the gradient checks use a
    float64 shadow mode); everything written by the library itself is float32.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=DTYPE if dtype is None else dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"<Tensor shape={self.data.shape}{label}>"

    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; divide by a scalar")
        return mul(self, _coerce(1.0 / other, self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    t.name = None
    return t


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _wrap(np.asarray(x, dtype=like.data.dtype))


_TAPES: list["Tape"] = []


class Tape:
    """Execution-ordered record of primitive ops.

    Forward execution order is a topological order of the op graph, so a
    single reverse sweep suffices for the chain rule. Ops only record when a
    tape is active, which makes inference allocation-light by default.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._entries.append((out, inputs, backward))


def _tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/dt into t.grad for every requires_grad tensor on the tape.

    Gradients are additive: across fan-out within the graph and across
    repeated `backward` calls (which is what batch gradient accumulation
    relies on).
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar tensor, got shape {loss.shape}")
    if not any(out is loss for out, _, _ in tape._entries):
        raise ValueError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {}
    for out, inputs, rule in reversed(tape._entries):
        gout = grads.pop(id(out), None)
        if gout is None:
            continue
        if out.requires_grad:
            out.grad = gout if out.grad is None else out.grad + gout
        for t, g in zip(inputs, rule(gout)):
            if g is None:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = g if prev is None else prev + g
            tensors[key] = t
    for key, g in grads.items():
        t = tensors.get(key)
        if t is not None and t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# Primitive operations


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _wrap(a.data + b.data)
    tape = _tape()
    if tape is not None:
        ash, bsh = a.data.shape, b.data.shape
        tape.record(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _wrap(a.data - b.data)
    tape = _tape()
    if tape is not None:
        ash, bsh = a.data.shape, b.data.shape
        tape.record(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _wrap(a.data * b.data)
    tape = _tape()
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(
            out,
            (a, b),
            lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        )
    return out


def neg(a: Tensor) -> Tensor:
    out = _wrap(-a.data)
    tape = _tape()
    if tape is not None:
        tape.record(out, (a,), lambda g: (-g,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(
            f"matmul: incompatible shapes {tuple(a.data.shape)} and {tuple(b.data.shape)}"
        )
    out = _wrap(a.data @ b.data)
    tape = _tape()
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a matrix, got shape {a.shape}")
    out = _wrap(a.data.T.copy())
    tape = _tape()
    if tape is not None:
        tape.record(out, (a,), lambda g: (g.T,))
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _wrap(a.data.reshape(shape))
    tape = _tape()
    if tape is not None:
        orig = a.data.shape
        tape.record(out, (a,), lambda g: (g.reshape(orig),))
    return out


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _wrap(a.data.sum(axis=axis, keepdims=keepdims))
    tape = _tape()
    if tape is not None:
        shape = a.data.shape

        def rule(g):
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, shape).copy(),)

        tape.record(out, (a,), rule)
    return out


def mean_all(a: Tensor) -> Tensor:
    out = _wrap(np.asarray(a.data.mean(), dtype=a.data.dtype))
    tape = _tape()
    if tape is not None:
        shape = a.data.shape
        n = a.data.size
        tape.record(out, (a,), lambda g: (np.broadcast_to(np.asarray(g) / n, shape).copy(),))
    return out


def exp(a: Tensor) -> Tensor:
    out = _wrap(np.exp(a.data))
    tape = _tape()
    if tape is not None:
        od = out.data
        tape.record(out, (a,), lambda g: (g * od,))
    return out


def log(a: Tensor) -> Tensor:
    out = _wrap(np.log(a.data))
    tape = _tape()
    if tape is not None:
        ad = a.data
        tape.record(out, (a,), lambda g: (g / ad,))
    return out


def relu(a: Tensor) -> Tensor:
    out = _wrap(np.maximum(a.data, 0))
    tape = _tape()
    if tape is not None:
        pos = a.data > 0
        tape.record(out, (a,), lambda g: (g * pos,))
    return out


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    out = _wrap(np.where(a.data > 0, a.data, slope * a.data))
    tape = _tape()
    if tape is not None:
        factor = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
        tape.record(out, (a,), lambda g: (g * factor,))
    return out


def elu(a: Tensor) -> Tensor:
    """x for x > 0, exp(x) - 1 otherwise."""
    out = _wrap(np.where(a.data > 0, a.data, np.expm1(a.data)))
    tape = _tape()
    if tape is not None:
        factor = np.where(a.data > 0, 1.0, np.exp(a.data)).astype(a.data.dtype)
        tape.record(out, (a,), lambda g: (g * factor,))
    return out


def _as_bool_mask(mask, shape: tuple[int, ...]) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    return np.broadcast_to(m.astype(bool), shape)


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Row-wise softmax with max-subtraction; masked entries come out exactly 0."""
    xd = x.data
    if xd.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows expects a matrix, got shape {x.shape}")
    if mask is not None:
        m = _as_bool_mask(mask, xd.shape)
        alive = m.any(axis=1)
        if not alive.all():
            dead = np.where(~alive)[0].tolist()
            raise DegenerateRowError(f"softmax_rows: fully masked row(s) {dead}")
        shifted = np.where(m, xd, -np.inf)
        e = np.exp(shifted - shifted.max(axis=1, keepdims=True))
        e = np.where(m, e, 0.0).astype(xd.dtype)
    else:
        e = np.exp(xd - xd.max(axis=1, keepdims=True))
    out = _wrap(e / e.sum(axis=1, keepdims=True))
    tape = _tape()
    if tape is not None:
        p = out.data
        tape.record(out, (x,), lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))
    return out


def log_softmax_rows(x: Tensor) -> Tensor:
    xd = x.data
    if xd.ndim != 2:
        raise ShapeMismatchError(f"log_softmax_rows expects a matrix, got shape {x.shape}")
    shifted = xd - xd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = _wrap(shifted - lse)
    tape = _tape()
    if tape is not None:
        p = np.exp(out.data)
        tape.record(out, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))
    return out


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, attn_mask=None) -> Tensor:
    """Scaled dot-product attention over `n_heads` column blocks of q, k, v.

    q is [Lq, H*dk], k is [Lk, H*dk], v is [Lk, H*dv]; the result is the
    per-head attention outputs concatenated back to [Lq, H*dv]. `attn_mask`
    is a boolean [Lq, Lk] (or [Lk]) array, True where attention is allowed;
    masked columns receive exactly zero weight.
    """
    lq, qdim = q.data.shape
    lk, kdim = k.data.shape
    if qdim != kdim or qdim % n_heads != 0 or v.data.shape[0] != lk or v.data.shape[1] % n_heads != 0:
        raise ShapeMismatchError(
            f"attention shapes q={q.shape} k={k.shape} v={v.shape} with {n_heads} heads"
        )
    dk = qdim // n_heads
    dv = v.data.shape[1] // n_heads
    scale = 1.0 / np.sqrt(dk)

    qh = q.data.reshape(lq, n_heads, dk).transpose(1, 0, 2)
    kh = k.data.reshape(lk, n_heads, dk).transpose(1, 0, 2)
    vh = v.data.reshape(lk, n_heads, dv).transpose(1, 0, 2)

    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    if attn_mask is not None:
        m = _as_bool_mask(attn_mask, (lq, lk))
        alive = m.any(axis=1)
        if not alive.all():
            dead = np.where(~alive)[0].tolist()
            raise DegenerateRowError(f"attention: fully masked query row(s) {dead}")
        shifted = np.where(m[None, :, :], scores, -np.inf)
        e = np.exp(shifted - shifted.max(axis=2, keepdims=True))
        e = np.where(m[None, :, :], e, 0.0).astype(q.data.dtype)
    else:
        e = np.exp(scores - scores.max(axis=2, keepdims=True))
    probs = e / e.sum(axis=2, keepdims=True)

    ctx = probs @ vh
    out = _wrap(ctx.transpose(1, 0, 2).reshape(lq, n_heads * dv))
    tape = _tape()
    if tape is not None:

        def rule(g):
            gc = g.reshape(lq, n_heads, dv).transpose(1, 0, 2)
            d_probs = gc @ vh.transpose(0, 2, 1)
            d_vh = probs.transpose(0, 2, 1) @ gc
            d_scores = probs * (d_probs - (d_probs * probs).sum(axis=2, keepdims=True))
            d_scores *= scale
            d_qh = d_scores @ kh
            d_kh = d_scores.transpose(0, 2, 1) @ qh
            dq = d_qh.transpose(1, 0, 2).reshape(lq, n_heads * dk)
            dkk = d_kh.transpose(1, 0, 2).reshape(lk, n_heads * dk)
            dvv = d_vh.transpose(1, 0, 2).reshape(lk, n_heads * dv)
            return dq, dkk, dvv

        tape.record(out, (q, k, v), rule)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _wrap(xhat * gain.data + bias.data)
    tape = _tape()
    if tape is not None:
        gd = gain.data

        def rule(g):
            dxhat = g * gd
            lead = tuple(range(g.ndim - 1))
            dgain = (g * xhat).sum(axis=lead)
            dbias = g.sum(axis=lead)
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            return dx, dgain, dbias

        tape.record(out, (x, gain, bias), rule)
    return out


def gather_rows(x: Tensor, indices) -> Tensor:
    """Rows of x selected by integer index; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError(
            f"row index out of range: indices span [{idx.min()}, {idx.max()}] "
            f"for {x.data.shape[0]} rows"
        )
    out = _wrap(x.data[idx])
    tape = _tape()
    if tape is not None:
        shape = x.data.shape
        dtype = x.data.dtype

        def rule(g):
            dx = np.zeros(shape, dtype=dtype)
            np.add.at(dx, idx, g)
            return (dx,)

        tape.record(out, (x,), rule)
    return out


def pick(x: Tensor, rows, cols) -> Tensor:
    """Vector of x[rows[i], cols[i]]; backward scatter-adds."""
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    out = _wrap(x.data[r, c])
    tape = _tape()
    if tape is not None:
        shape = x.data.shape
        dtype = x.data.dtype

        def rule(g):
            dx = np.zeros(shape, dtype=dtype)
            np.add.at(dx, (r, c), g)
            return (dx,)

        tape.record(out, (x,), rule)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat of zero tensors")
    out = _wrap(np.concatenate([p.data for p in parts], axis=axis))
    tape = _tape()
    if tape is not None:
        sizes = [p.data.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        tape.record(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = _wrap(x.data[start:stop].copy())
    tape = _tape()
    if tape is not None:
        shape = x.data.shape
        dtype = x.data.dtype

        def rule(g):
            dx = np.zeros(shape, dtype=dtype)
            dx[start:stop] = g
            return (dx,)

        tape.record(out, (x,), rule)
    return out


# ---------------------------------------------------------------------------
# Optimizer


class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update in place; returns (params, state)."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatchError(
                f"gradient shape {g.shape} does not match parameter '{name}' {p.data.shape}"
            )
        if not np.isfinite(g).all():
            raise NonFiniteGradError(f"non-finite gradient for parameter '{name}'")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.data.dtype)
    return params, state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * np.asarray(factor, dtype=grads[name].dtype)
    return norm


# ---------------------------------------------------------------------------
# Seeding and initialization


def derive_seed(root: int, label: str) -> int:
    """64-bit seed for one named stream, stable across runs and platforms."""
    digest = hashlib.blake2b(f"{root}:{label}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def generator(root: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root, label)))


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(DTYPE)


def param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Checkpoint IO

CHECKPOINT_MAGIC = b"SRWCKPT1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    """Binary little-endian dump of named float32 parameters, sorted by name."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name].data, dtype=np.dtype("<f4"))
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"unknown checkpoint magic {blob[:8]!r}")
    (version, count) = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    offset = 16
    params: dict[str, Tensor] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(dims)
            offset += 4 * n
            params[name] = param(arr.astype(DTYPE), name)
    except (struct.error, ValueError) as err:
        raise CheckpointFormatError(f"truncated or corrupt checkpoint: {err}") from err
    if offset != len(blob):
        raise CheckpointFormatError("trailing bytes after final parameter")
    return params
