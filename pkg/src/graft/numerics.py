"""Dense float64 tensors with a reverse-mode tape.

Every differentiable operation used by the encoders, the projector and the
language model lives here, together with its adjoint rule.  Tensors wrap a
numpy array; the tape is implicit in the parent links recorded at forward
time and is walked in reverse topological order by :func:`backward`.
"""

from __future__ import annotations

import hashlib
import io
import math
import os
import struct
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NumericsError(ValueError):
    """Shape mismatch or non-finite value produced by a tensor op."""


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "name", "needs", "__weakref__")

    def __init__(self, data, parents: tuple = (), backward_fn: Callable | None = None, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.needs = True  # set by backward(): does any requested leaf sit below this node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise NumericsError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, name: str | None = None) -> Tensor:
    """Leaf tensor (a parameter or a constant input)."""
    return Tensor(np.array(data, dtype=DTYPE), name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _checked(out: np.ndarray, op: str) -> np.ndarray:
    # one reduction instead of an elementwise isfinite pass; NaN/Inf propagate into the sum
    if not math.isfinite(out.sum()):
        raise NumericsError(f"non-finite result in {op}")
    return out


def _node(out: np.ndarray, parents: tuple, fn: Callable, op: str) -> Tensor:
    return Tensor(_checked(out, op), parents, fn)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _accumulate(t: Tensor, g: np.ndarray | None) -> None:
    if g is None:
        return
    # never in place: ``g`` may be shared with a sibling parent or be a broadcast view
    g = g.reshape(t.shape)
    t.grad = g if t.grad is None else t.grad + g


# ----------------------------------------------------------------------------
# elementwise and linear-algebra ops
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise NumericsError(f"add: shape mismatch {a.shape} vs {b.shape}") from exc

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise NumericsError(f"sub: shape mismatch {a.shape} vs {b.shape}") from exc

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise NumericsError(f"mul: shape mismatch {a.shape} vs {b.shape}") from exc

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.needs else None
        gb = _unbroadcast(g * a.data, b.shape) if b.needs else None
        return ga, gb

    return _node(out, (a, b), fn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericsError("log of non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = gb = None
        if b.needs:
            if b.ndim == 2 and a.ndim > 2:
                # weight shared across batch rows: fold the batch axes instead of broadcasting
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        if a.needs:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        return ga, gb

    return _node(out, (a, b), fn, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or apply a full axis permutation."""
    if axes is None:
        if a.ndim < 2:
            raise NumericsError("transpose needs at least 2 axes")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise NumericsError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def sum_all(a: Tensor) -> Tensor:
    return _node(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(np.array(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape),), "mean")


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape),)

    return _node(out, (a,), fn, "mean_axis")


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean of a matrix: (n, d) -> (1, d)."""
    if a.ndim != 2 or a.shape[0] == 0:
        raise NumericsError(f"mean_rows needs a non-empty matrix, got {a.shape}")
    return mean_axis(a, 0, keepdims=True)


def concat_rows(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise NumericsError("concat of zero tensors")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise NumericsError(f"concat: shape mismatch {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def fn(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts)))

    return _node(out, tuple(parts), fn, "concat")


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a matrix; ``ids`` may have any shape.

    Output shape is ``ids.shape + (d,)``.  This is both the embedding lookup
    and the splice that mixes token embeddings with graph vectors.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise NumericsError(f"take_rows needs a matrix table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise NumericsError("take_rows: index out of range")
    out = table.data[ids]

    def fn(g):
        if not table.needs:
            return (None,)
        gt = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _node(out, (table,), fn, "take_rows")


embedding_lookup = take_rows


def row_softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), fn, "row_softmax")


def masked_softmax(a: Tensor, mask: np.ndarray, scale_by: float = 1.0) -> Tensor:
    """``row_softmax(scale_by * a + mask)`` in one node (attention scores)."""
    z = np.multiply(a.data, scale_by)
    z += mask
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    out = z

    def fn(g):
        gz = g - (g * out).sum(axis=-1, keepdims=True)
        gz *= out
        if scale_by != 1.0:
            gz *= scale_by
        return (gz,)

    return _node(out, (a,), fn, "masked_softmax")


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def fn(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), fn, "log_softmax")


def row_l2_normalize(a: Tensor) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm.

    All-zero rows pass through as zero rows, with a warning.
    """
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    zero = norms == 0
    if np.any(zero):
        warnings.warn("row_l2_normalize: all-zero row left unnormalized", RuntimeWarning, stacklevel=2)
    safe = np.where(zero, 1.0, norms)
    out = a.data / safe

    def fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(zero, 0.0, (g - out * dot) / safe),)

    return _node(out, (a,), fn, "row_l2_normalize")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def fn(g):
        gx = g * gain.data
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        if not gain.needs:
            return ga, None, None
        return ga, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _node(out, (a, gain, bias), fn, "layer_norm")


def add_constant_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Add a constant (e.g. a 0/-inf-like causal mask); no gradient to the mask."""
    return _node(a.data + mask, (a,), lambda g: (g,), "add_mask")


def cross_entropy_rows(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[row, target]``."""
    if logits.ndim != 2:
        raise NumericsError(f"cross_entropy_rows expects a matrix, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise NumericsError(f"cross_entropy_rows: {n} rows but {targets.shape[0] if targets.ndim else 0} targets")
    if n == 0:
        raise NumericsError("cross_entropy_rows: empty batch")
    if targets.min() < 0 or targets.max() >= c:
        raise NumericsError("cross_entropy_rows: target out of range")
    weights = np.full(n, 1.0 / n)
    return masked_nll(logits, targets, weights)


def masked_nll(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """``sum_i weights[i] * -log softmax(logits[i])[targets[i]]`` over the leading axes.

    ``logits`` has shape ``(..., C)``; ``targets`` and ``weights`` share the
    leading shape.  Rows with zero weight contribute nothing.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=DTYPE)
    c = logits.shape[-1]
    flat = logits.data.reshape(-1, c)
    t = targets.reshape(-1)
    w = weights.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(flat.shape[0])
    loss = float(np.sum(w * (lse - z[rows, t])))

    def fn(g):
        soft = np.exp(z - lse[:, None])
        soft[rows, t] -= 1.0
        return ((g * w[:, None] * soft).reshape(logits.shape),)

    return _node(np.array(loss), (logits,), fn, "masked_nll")


# ----------------------------------------------------------------------------
# reverse pass
# ----------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every tensor on the tape.

    Returns the gradients of the leaves (tensors with no parents), keyed by
    tensor.  Existing ``.grad`` values on the tape are overwritten.  With
    ``wrt`` given, only paths reaching those leaves are differentiated; other
    leaves end with ``grad`` None.
    """
    if loss.data.size != 1:
        raise NumericsError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    targets = None if wrt is None else {id(t) for t in wrt}
    for node in order:  # parents precede children in ``order``
        node.grad = None
        if targets is None:
            node.needs = True
        elif node.parents:
            node.needs = any(p.needs for p in node.parents)
        else:
            node.needs = id(node) in targets
    loss.grad = np.ones(loss.shape, dtype=DTYPE)
    leaves = {}
    for node in reversed(order):
        if not node.needs or node.grad is None:
            continue
        if node.backward_fn is None:
            if not node.parents:
                leaves[node] = node.grad
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            _accumulate(parent, g)
    return leaves


# ----------------------------------------------------------------------------
# parameters, optimizer, checkpoints
# ----------------------------------------------------------------------------


def content_hash(name: str, data: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(name.encode("utf-8"))
    h.update(struct.pack("<I", data.ndim))
    for n in data.shape:
        h.update(struct.pack("<Q", n))
    h.update(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return h.hexdigest()


class ParamStore:
    """Ordered named tensors with per-tensor freeze flags.

    Names are dotted (``lm.layer0.wq``); the first component is the group
    used by freeze sets (``lm``, ``graph_encoder``, ``text_encoder``,
    ``projector``).
    """

    def __init__(self, tensors: Iterable[tuple[str, Tensor]] = ()):
        self.tensors: OrderedDict[str, Tensor] = OrderedDict()
        self.frozen: set[str] = set()
        for name, t in tensors:
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t.name = name
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    def group(self, prefix: str) -> "ParamStore":
        """View (sharing tensors) of the parameters under ``prefix``."""
        sub = ParamStore()
        for name, t in self.tensors.items():
            if name == prefix or name.startswith(prefix + "."):
                sub.tensors[name] = t
                if name in self.frozen:
                    sub.frozen.add(name)
        return sub

    def merge(self, other: "ParamStore") -> "ParamStore":
        for name, t in other:
            self.add(name, t)
        self.frozen |= other.frozen
        return self

    def freeze_groups(self, groups: Iterable[str]) -> None:
        groups = set(groups)
        self.frozen = {n for n in self.tensors if n.split(".")[0] in groups}

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.tensors.items() if n not in self.frozen]

    def num_parameters(self, trainable_only: bool = False) -> int:
        items = self.trainable() if trainable_only else self.tensors.items()
        return int(sum(t.data.size for _, t in items))

    def hashes(self) -> dict[str, str]:
        return {n: content_hash(n, t.data) for n, t in self.tensors.items()}

    def group_hash(self, prefix: str) -> str:
        h = hashlib.sha256()
        for name, digest in self.group(prefix).hashes().items():
            h.update(digest.encode())
        return h.hexdigest()

    def copy(self) -> "ParamStore":
        out = ParamStore((n, tensor(t.data.copy())) for n, t in self.tensors.items())
        out.frozen = set(self.frozen)
        return out

    def zero_grad(self) -> None:
        for _, t in self:
            t.grad = None


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: ParamStore,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Frozen tensors and tensors without a gradient are left untouched.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in params.trainable():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def collect_grads(params: ParamStore) -> dict[str, np.ndarray]:
    return {n: t.grad for n, t in params if t.grad is not None}


# Checkpoint layout (all integers little-endian):
#   magic b"GRFTCKPT", u32 version=1, u32 record count, then per record:
#   u32 name length, name bytes (UTF-8), u32 ndim, ndim x u64 dims,
#   prod(dims) x f64 values (row-major), 32-byte SHA-256 content hash
#   (see content_hash), u8 frozen flag.
CKPT_MAGIC = b"GRFTCKPT"
CKPT_VERSION = 1


def save_checkpoint(params: ParamStore, path: str | os.PathLike) -> None:
    """Write ``params`` atomically (temp file + rename)."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(params)))
    for name, t in params:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.data.ndim))
        for n in t.data.shape:
            buf.write(struct.pack("<Q", n))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        buf.write(bytes.fromhex(content_hash(name, t.data)))
        buf.write(struct.pack("<B", 1 if name in params.frozen else 0))
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | os.PathLike) -> ParamStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        size = int(math.prod(shape))
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=off).astype(DTYPE).reshape(shape)
        off += 8 * size
        digest = blob[off : off + 32].hex()
        off += 32
        (frozen,) = struct.unpack_from("<B", blob, off)
        off += 1
        if digest != content_hash(name, data):
            raise CheckpointError(f"{path}: hash mismatch for {name!r}")
        store.add(name, tensor(data))
        if frozen:
            store.frozen.add(name)
    return store


def init_normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return tensor(rng.normal(0.0, std, size=shape))
