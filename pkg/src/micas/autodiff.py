"""Tape-based reverse-mode differentiation over float64 arrays.

A Tape records every primitive in creation order, which is already a
topological order of the computation graph. backward() seeds the final
scalar node and walks the list in reverse, applying each node's
vector-Jacobian product. Leaf gradients are added into their Param
accumulators, so two backward passes without zero_grads() in between
accumulate twice.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy.special import expit

from . import geometry
from .errors import FormatError, TrainingDiverged

CHECKPOINT_MAGIC = b"MICASNN1"


class Param:
    """A named leaf tensor with a gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        if not np.isfinite(self.value).all():
            raise ValueError("parameter value must be finite")
        self.grad = np.zeros_like(self.value)


class ParamStore:
    """Insertion-ordered mapping from parameter names to Param leaves."""

    def __init__(self):
        self._entries: dict[str, Param] = {}

    def add(self, name: str, value) -> Param:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(value)
        self._entries[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def zero_grads(self) -> None:
        for p in self._entries.values():
            p.grad[...] = 0.0

    def n_scalars(self) -> int:
        return sum(p.value.size for p in self._entries.values())


class Node:
    """One recorded value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "vjp", "param")

    def __init__(self, value, parents=(), vjp=None, param=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.vjp = vjp  # fn(out_grad) -> per-parent gradient contributions
        self.param = param

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Records primitives eagerly; replay in reverse drives backward()."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, value, parents=(), vjp=None, param=None) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), parents, vjp, param)
        self.nodes.append(node)
        return node

    # ---- leaves ----

    def const(self, value) -> Node:
        return self._push(value)

    def param(self, store: ParamStore, name: str) -> Node:
        p = store[name]
        return self._push(p.value, param=p)

    # ---- arithmetic ----

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
        return self._push(a.value + b.value, (a, b), lambda g: (g, g))

    def add_row(self, a: Node, v: Node) -> Node:
        """Add a width-C row vector to every row of an (R, C) matrix."""
        if a.value.ndim != 2 or v.shape != (a.value.shape[1],):
            raise ValueError(f"add_row needs (R, C) and (C,), got {a.shape} and {v.shape}")
        return self._push(a.value + v.value, (a, v), lambda g: (g, g.sum(axis=0)))

    def add_const(self, a: Node, c) -> Node:
        c = np.asarray(c, dtype=np.float64)
        if c.shape != () and c.shape != a.shape:
            raise ValueError("add_const offset must be scalar or same-shaped")
        return self._push(a.value + c, (a,), lambda g: (g,))

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._push(a.value * c, (a,), lambda g: (g * c,))

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        return self._push(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))

    def transpose(self, a: Node) -> Node:
        if a.value.ndim != 2:
            raise ValueError("transpose expects a matrix")
        return self._push(a.value.T, (a,), lambda g: (g.T,))

    def reshape(self, a: Node, shape) -> Node:
        old = a.shape
        return self._push(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))

    # ---- structure ----

    def concat_cols(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ValueError(f"concat_cols shape mismatch {a.shape} vs {b.shape}")
        split = a.shape[1]
        return self._push(
            np.hstack([a.value, b.value]), (a, b), lambda g: (g[:, :split], g[:, split:])
        )

    def concat_rows(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
            raise ValueError(f"concat_rows shape mismatch {a.shape} vs {b.shape}")
        split = a.shape[0]
        return self._push(
            np.vstack([a.value, b.value]), (a, b), lambda g: (g[:split], g[split:])
        )

    def tile_rows(self, v: Node, r: int) -> Node:
        """Repeat a width-C vector as the rows of an (r, C) matrix."""
        if v.value.ndim != 1:
            raise ValueError("tile_rows expects a vector")
        return self._push(np.tile(v.value, (r, 1)), (v,), lambda g: (g.sum(axis=0),))

    def gather_rows(self, a: Node, indices) -> Node:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1 or a.value.ndim != 2:
            raise ValueError("gather_rows expects a matrix and 1-D indices")
        if len(idx) and ((idx < 0).any() or (idx >= a.shape[0]).any()):
            raise ValueError("gather index out of range")

        def vjp(g):
            z = np.zeros_like(a.value)
            np.add.at(z, idx, g)  # duplicate indices accumulate
            return (z,)

        return self._push(a.value[idx], (a,), vjp)

    def stack_scalars(self, nodes) -> Node:
        nodes = list(nodes)
        if not nodes or any(n.shape != () for n in nodes):
            raise ValueError("stack_scalars expects a non-empty list of scalar nodes")
        value = np.array([n.value for n in nodes])
        return self._push(
            value, tuple(nodes), lambda g: tuple(np.asarray(g[i]) for i in range(len(nodes)))
        )

    # ---- nonlinearities ----

    def relu(self, a: Node) -> Node:
        return self._push(np.maximum(a.value, 0.0), (a,), lambda g: (g * (a.value > 0.0),))

    def tanh(self, a: Node) -> Node:
        t = np.tanh(a.value)
        return self._push(t, (a,), lambda g: (g * (1.0 - t * t),))

    def sin(self, a: Node) -> Node:
        return self._push(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))

    def softplus(self, a: Node) -> Node:
        return self._push(np.logaddexp(0.0, a.value), (a,), lambda g: (g * expit(a.value),))

    def log(self, a: Node) -> Node:
        if (a.value <= 0.0).any():
            raise ValueError("log requires strictly positive input")
        return self._push(np.log(a.value), (a,), lambda g: (g / a.value,))

    def softmax_cols(self, a: Node) -> Node:
        """Softmax down each column of an (R, C) matrix."""
        if a.value.ndim != 2:
            raise ValueError("softmax_cols expects a matrix")
        shifted = a.value - a.value.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=0, keepdims=True)

        def vjp(g):
            s = (g * y).sum(axis=0, keepdims=True)
            return (y * (g - s),)

        return self._push(y, (a,), vjp)

    def maxpool_rows(self, a: Node) -> Node:
        """Column-wise max over rows of an (R, C) matrix, yielding (C,)."""
        if a.value.ndim != 2:
            raise ValueError("maxpool_rows expects a matrix")
        idx = np.argmax(a.value, axis=0)  # first maximizer = lowest row on ties

        def vjp(g):
            z = np.zeros_like(a.value)
            z[idx, np.arange(a.value.shape[1])] = g
            return (z,)

        return self._push(a.value.max(axis=0), (a,), vjp)

    # ---- reductions ----

    def mean_all(self, a: Node) -> Node:
        size = a.value.size

        def vjp(g):
            return (np.full(a.value.shape, float(g) / size),)

        return self._push(a.value.mean(), (a,), vjp)

    def weighted_sum(self, a: Node, weights) -> Node:
        """Scalar dot product of a node with a constant weight array."""
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != a.shape:
            raise ValueError(f"weighted_sum shape mismatch {a.shape} vs {w.shape}")
        return self._push((a.value * w).sum(), (a,), lambda g: (g * w,))

    def chamfer(self, a: Node, b: Node) -> Node:
        """Symmetric squared-distance Chamfer divergence as a scalar node.

        Gradients flow to both point sets through the nearest-neighbor
        matches found in the forward pass (lowest index on ties); the
        matches themselves are treated as constant.
        """
        pa, pb = a.value, b.value
        d2_ab, idx_ab, d2_ba, idx_ba = geometry.chamfer_nearest(pa, pb)
        value = d2_ab.mean() + d2_ba.mean()
        inv_a, inv_b = 2.0 / len(pa), 2.0 / len(pb)

        def vjp(g):
            g = float(g)
            ga = inv_a * (pa - pb[idx_ab])
            np.add.at(ga, idx_ba, inv_b * (pa[idx_ba] - pb))
            gb = inv_b * (pb - pa[idx_ba])
            np.add.at(gb, idx_ab, inv_a * (pb[idx_ab] - pa))
            return (g * ga, g * gb)

        return self._push(value, (a, b), vjp)

    # ---- reverse pass ----

    def backward(self, loss_grad: float = 1.0) -> None:
        """Propagate d(loss)/d(node) from the final scalar to every leaf.

        Interior node gradients are reset on entry; Param gradients are
        accumulated, not reset, so callers control zeroing.
        """
        if not self.nodes:
            raise ValueError("backward on an empty tape")
        out = self.nodes[-1]
        if out.value.shape != ():
            raise ValueError(f"tape must end in a scalar node, got shape {out.value.shape}")
        for n in self.nodes:
            n.grad = np.zeros_like(n.value)
        out.grad += float(loss_grad)
        for n in reversed(self.nodes):
            if n.vjp is None:
                continue
            for parent, g in zip(n.parents, n.vjp(n.grad)):
                if g is not None:
                    parent.grad += g
        for n in self.nodes:
            if n.param is not None:
                n.param.grad += n.grad


# ---- layers ----


def init_affine(store: ParamStore, name: str, n_in: int, n_out: int, rng) -> None:
    """He-normal weight, zero bias."""
    store.add(f"{name}.w", rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)))
    store.add(f"{name}.b", np.zeros(n_out))


def affine(tape: Tape, store: ParamStore, name: str, x: Node) -> Node:
    return tape.add_row(tape.matmul(x, tape.param(store, f"{name}.w")), tape.param(store, f"{name}.b"))


def init_mlp(store: ParamStore, prefix: str, widths, rng) -> None:
    """Stack of affine layers named {prefix}.0, {prefix}.1, ..."""
    if len(widths) < 2:
        raise ValueError("an MLP needs at least one layer")
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        init_affine(store, f"{prefix}.{i}", n_in, n_out, rng)


def forward_mlp(tape: Tape, store: ParamStore, prefix: str, x: Node, final="linear", hidden="relu") -> Node:
    """Run the affine stack under `prefix` with `hidden` activations between layers.

    `hidden` is "relu", "tanh", or "sin"; `final` selects the activation
    after the last layer: "linear", "relu", or "tanh".
    """
    acts = {"relu": tape.relu, "tanh": tape.tanh, "sin": tape.sin}
    if final not in ("linear", "relu", "tanh"):
        raise ValueError(f"unknown final activation {final!r}")
    if hidden not in acts:
        raise ValueError(f"unknown hidden activation {hidden!r}")
    i = 0
    h = x
    while f"{prefix}.{i}.w" in store:
        h = affine(tape, store, f"{prefix}.{i}", h)
        last = f"{prefix}.{i + 1}.w" not in store
        if not last:
            h = acts[hidden](h)
        elif final != "linear":
            h = acts[final](h)
        i += 1
    if i == 0:
        raise ValueError(f"no layers found under prefix {prefix!r}")
    return h


# ---- optimization ----


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    """Cosine-annealed rate: lr0 at step 0 down to lr_min at the last step."""
    if total_steps < 2:
        raise ValueError("cosine schedule needs at least 2 total steps")
    if not 0 <= step < total_steps:
        raise ValueError(f"step must be in [0, {total_steps}), got {step}")
    if not (lr0 > 0.0 and lr_min > 0.0 and lr0 >= lr_min):
        raise ValueError("need lr0 >= lr_min > 0")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * step / (total_steps - 1)))


def sgd_cosine_step(params: ParamStore, step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    """One plain-SGD update under the cosine schedule; clears gradients.

    Returns the learning rate that was applied. Raises TrainingDiverged if
    any parameter leaves the finite range.
    """
    lr = cosine_lr(step, total_steps, lr0, lr_min)
    for name, p in params.items():
        p.value -= lr * p.grad
        if not np.isfinite(p.value).all():
            raise TrainingDiverged(f"parameter {name!r} became non-finite at step {step}")
        p.grad[...] = 0.0
    return lr


# ---- gradient verification ----


def finite_diff_check(loss_fn, params: ParamStore, epsilon: float = 1e-6) -> float:
    """Compare tape gradients with central differences over every scalar.

    loss_fn takes the ParamStore and returns a Tape ending in the scalar
    loss; it must be deterministic (two evaluations that disagree bitwise
    raise RuntimeError). Returns the worst relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    params.zero_grads()
    tape = loss_fn(params)
    loss0 = float(tape.nodes[-1].value)
    tape.backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}
    if float(loss_fn(params).nodes[-1].value) != loss0:
        raise RuntimeError("loss_fn is not deterministic; freeze all randomness before checking")
    worst = 0.0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(loss_fn(params).nodes[-1].value)
            flat[i] = orig - epsilon
            down = float(loss_fn(params).nodes[-1].value)
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            err = abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    params.zero_grads()
    return worst


# ---- checkpoints ----


def save_params(store: ParamStore, path) -> None:
    """Write all parameters in the binary MICASNN1 layout (little-endian)."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(store))]
    for name, p in store.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", p.value.ndim))
        parts.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        parts.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_params(path) -> ParamStore:
    """Read a MICASNN1 checkpoint; values round-trip bit-exactly."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12 or buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (count,) = struct.unpack_from("<I", buf, 8)
    offset = 12
    store = ParamStore()
    for _ in range(count):
        if len(buf) - offset < 4:
            raise FormatError("truncated checkpoint entry")
        (name_len,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if len(buf) - offset < name_len + 4:
            raise FormatError("truncated checkpoint entry")
        name = buf[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if len(buf) - offset < 4 * rank:
            raise FormatError("truncated checkpoint entry")
        shape = struct.unpack_from(f"<{rank}I", buf, offset)
        offset += 4 * rank
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        if len(buf) - offset < 8 * n:
            raise FormatError("truncated checkpoint payload")
        value = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
        offset += 8 * n
        store.add(name, value)
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} unexpected trailing bytes")
    return store
