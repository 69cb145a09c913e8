"""Dense float32 tensors with tape-based reverse-mode differentiation.

Data is stored flat in row-major order; shapes are tuples of positive
ints. Ops validate shapes eagerly, compute with numpy, and (when a Tape
is supplied and an input requires gradients) record a backward rule on
the tape. Backward replays the tape in exact reverse order, so two runs
on identical inputs produce bitwise-equal gradients. Gradients
accumulate additively until explicitly zeroed.

Passing ``tape=None`` to any op runs it in inference mode: same numpy
computation, nothing recorded.
"""

from __future__ import annotations

import numpy as np

F32 = np.float32


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class EvaluationError(RuntimeError):
    """A checked computation produced a non-finite value."""


class Tensor:
    """A dense float32 array with an optional gradient buffer.

    ``data`` and ``grad`` are flat float32 arrays of equal length;
    ``shape`` describes the row-major layout. Leaf tensors created with
    ``requires_grad=True`` receive gradients during backward; constants
    do not.
    """

    __slots__ = ("shape", "data", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=F32)
        self.shape = arr.shape if arr.shape else (1,)
        self.data = np.ascontiguousarray(arr).ravel()
        self.grad = None
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, flat: np.ndarray, shape: tuple, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.shape = shape
        t.data = flat
        t.grad = None
        t.requires_grad = requires_grad
        return t

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def nd(self) -> np.ndarray:
        """Row-major view of the flat buffer at this tensor's shape."""
        return self.data.reshape(self.shape)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}, not scalar")
        return float(self.data[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detached(self) -> "Tensor":
        """Constant copy with no tape linkage and no gradient."""
        return Tensor._wrap(self.data.copy(), self.shape, False)

    def copy(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), self.shape, self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Execution-ordered op record; backward replays it exactly reversed.

    A tape and the tensors on it belong to a single worker; nothing here
    locks. Call :func:`backward` once per recorded graph.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes = []

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple, rule) -> None:
        self._nodes.append((out, inputs, rule))


def _accum(t: Tensor, g: np.ndarray) -> None:
    g = g.ravel()
    if t.grad is None:
        t.grad = g.astype(F32, copy=False)
    else:
        t.grad += g


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate grads of every reachable gradient-requiring tensor.

    ``loss`` must be a scalar produced on this tape. Gradients add into
    existing buffers, so shared parameters accumulate contributions from
    every use.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    _accum(loss, np.ones(1, F32))
    for out, inputs, rule in reversed(tape._nodes):
        g = out.grad
        if g is None:
            continue
        for inp, gi in zip(inputs, rule(g)):
            if gi is not None and inp.requires_grad:
                _accum(inp, gi)


# ---------------------------------------------------------------------------
# ops


def _emit(tape, data_nd: np.ndarray, req: bool) -> Tensor:
    flat = data_nd.ravel()
    if not flat.flags.owndata and flat.base is not None and flat.base.base is not None:
        flat = flat.copy()
    return Tensor._wrap(flat, data_nd.shape, req)


def matmul(tape, a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    A = a.data.reshape(a.shape)
    B = b.data.reshape(b.shape)
    out_nd = A @ B
    req = a.requires_grad or b.requires_grad
    out = _emit(tape, out_nd, req)
    if req and tape is not None:
        def rule(g):
            G = g.reshape(out.shape)
            return (
                (G @ B.T) if a.requires_grad else None,
                (A.T @ G) if b.requires_grad else None,
            )
        tape.record(out, (a, b), rule)
    return out


def _binary_mode(a: Tensor, b: Tensor, name: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1:
        return "scalar"
    if a.ndim == 2 and b.shape == (a.shape[1],):
        return "row"
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_b(g: np.ndarray, mode: str, shape: tuple) -> np.ndarray:
    if mode == "same":
        return g
    if mode == "scalar":
        return g.sum(dtype=F32).reshape(1)
    return g.reshape(shape).sum(axis=0, dtype=F32)


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b; b may be a scalar or a row vector over a's rows."""
    mode = _binary_mode(a, b, "add")
    out_nd = a.nd() + (b.data if mode != "same" else b.nd())
    req = a.requires_grad or b.requires_grad
    out = _emit(tape, out_nd, req)
    if req and tape is not None:
        def rule(g):
            return (
                g.copy() if a.requires_grad else None,
                _reduce_b(g, mode, a.shape) if b.requires_grad else None,
            )
        tape.record(out, (a, b), rule)
    return out


def sub(tape, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a - b; same broadcasting rules as add."""
    mode = _binary_mode(a, b, "sub")
    out_nd = a.nd() - (b.data if mode != "same" else b.nd())
    req = a.requires_grad or b.requires_grad
    out = _emit(tape, out_nd, req)
    if req and tape is not None:
        def rule(g):
            return (
                g.copy() if a.requires_grad else None,
                -_reduce_b(g, mode, a.shape) if b.requires_grad else None,
            )
        tape.record(out, (a, b), rule)
    return out


def mul(tape, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; b may be a scalar or a row vector."""
    mode = _binary_mode(a, b, "mul")
    B = b.data if mode != "same" else b.nd()
    out_nd = a.nd() * B
    req = a.requires_grad or b.requires_grad
    out = _emit(tape, out_nd, req)
    if req and tape is not None:
        A = a.nd()
        def rule(g):
            G = g.reshape(out.shape)
            return (
                (G * B) if a.requires_grad else None,
                _reduce_b((G * A).ravel(), mode, a.shape) if b.requires_grad else None,
            )
        tape.record(out, (a, b), rule)
    return out


def concat(tape, parts, axis: int = 0) -> Tensor:
    """Concatenate tensors of equal rank along axis 0 or 1."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: no inputs")
    nd = parts[0].ndim
    if axis not in (0, 1) or axis >= nd:
        raise ShapeError(f"concat: bad axis {axis} for rank {nd}")
    for p in parts[1:]:
        if p.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {parts[0].shape} vs {p.shape}")
        other = 1 - axis
        if nd == 2 and p.shape[other] != parts[0].shape[other]:
            raise ShapeError(f"concat: shape mismatch {parts[0].shape} vs {p.shape}")
    out_nd = np.concatenate([p.nd() for p in parts], axis=axis)
    req = any(p.requires_grad for p in parts)
    out = _emit(tape, out_nd, req)
    if req and tape is not None:
        sizes = [p.shape[axis] for p in parts]
        def rule(g):
            G = g.reshape(out.shape)
            grads = []
            off = 0
            for p, s in zip(parts, sizes):
                if p.requires_grad:
                    piece = G[off:off + s] if axis == 0 else G[:, off:off + s]
                    grads.append(np.ascontiguousarray(piece).copy())
                else:
                    grads.append(None)
                off += s
            return grads
        tape.record(out, tuple(parts), rule)
    return out


def mean(tape, a: Tensor, axis=None) -> Tensor:
    """Mean over all elements (axis=None, scalar out) or over rows (axis=0)."""
    if axis is None:
        out_nd = a.data.mean(dtype=F32).reshape(1)
    elif axis == 0 and a.ndim == 2:
        out_nd = a.nd().mean(axis=0, dtype=F32, keepdims=True)
    else:
        raise ShapeError(f"mean: unsupported axis {axis} for shape {a.shape}")
    req = a.requires_grad
    out = _emit(tape, out_nd, req)
    if req and tape is not None:
        def rule(g):
            if axis is None:
                return (np.full(a.size, g[0] / F32(a.size), F32),)
            rows = a.shape[0]
            return (np.broadcast_to(g.reshape(out.shape) / F32(rows), a.shape).ravel(),)
        tape.record(out, (a,), rule)
    return out


def tsum(tape, a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = _emit(tape, a.data.sum(dtype=F32).reshape(1), a.requires_grad)
    if a.requires_grad and tape is not None:
        def rule(g):
            return (np.full(a.size, g[0], F32),)
        tape.record(out, (a,), rule)
    return out


def embedding(tape, table: Tensor, ids) -> Tensor:
    """Gather rows of a rank-2 tensor by integer index."""
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be rank 2, got {table.shape}")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"embedding: indices must be 1-D, got shape {idx.shape}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"embedding: index {bad} out of range [0, {n})")
    T = table.data.reshape(table.shape)
    out_nd = T[idx]
    req = table.requires_grad
    out = _emit(tape, out_nd, req)
    if req and tape is not None:
        def rule(g):
            gt = np.zeros(table.shape, F32)
            np.add.at(gt, idx, g.reshape(out.shape))
            return (gt,)
        tape.record(out, (table,), rule)
    return out


def gather_cols(tape, a: Tensor, cols) -> Tensor:
    """Pick one column per row: out[i, 0] = a[i, cols[i]]."""
    if a.ndim != 2:
        raise ShapeError(f"gather_cols: need rank 2, got {a.shape}")
    idx = np.asarray(cols, dtype=np.intp)
    m, n = a.shape
    if idx.shape != (m,):
        raise ShapeError(f"gather_cols: need {m} column indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"gather_cols: index {bad} out of range [0, {n})")
    rows = np.arange(m)
    out_nd = a.nd()[rows, idx].reshape(m, 1)
    req = a.requires_grad
    out = _emit(tape, out_nd, req)
    if req and tape is not None:
        def rule(g):
            ga = np.zeros(a.shape, F32)
            ga[rows, idx] = g
            return (ga,)
        tape.record(out, (a,), rule)
    return out


def reshape(tape, a: Tensor, shape) -> Tensor:
    """Reinterpret the flat buffer at a new shape (copies, no views)."""
    shape = tuple(int(s) for s in shape)
    n = 1
    for s in shape:
        n *= s
    if n != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor._wrap(a.data.copy(), shape, a.requires_grad)
    if a.requires_grad and tape is not None:
        def rule(g):
            return (g.copy(),)
        tape.record(out, (a,), rule)
    return out


def _unary(tape, a, out_nd, dfn):
    req = a.requires_grad
    out = _emit(tape, out_nd, req)
    if req and tape is not None:
        def rule(g):
            return (g * dfn(),)
        tape.record(out, (a,), rule)
    return out


def tanh(tape, a: Tensor) -> Tensor:
    out_nd = np.tanh(a.nd())
    return _unary(tape, a, out_nd, lambda: (F32(1) - out_nd.ravel() * out_nd.ravel()))


def sigmoid(tape, a: Tensor) -> Tensor:
    # 0.5 * (tanh(x/2) + 1) avoids exp overflow at large |x|
    out_nd = F32(0.5) * (np.tanh(F32(0.5) * a.nd()) + F32(1))
    return _unary(tape, a, out_nd, lambda: (out_nd.ravel() * (F32(1) - out_nd.ravel())))


def relu(tape, a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    out_nd = np.maximum(a.nd(), F32(0))
    return _unary(tape, a, out_nd, lambda: (a.data > 0).astype(F32))


def _rows(a: Tensor) -> np.ndarray:
    return a.nd() if a.ndim == 2 else a.data.reshape(1, -1)


def softmax(tape, a: Tensor) -> Tensor:
    """Softmax along the last axis; each output row sums to 1."""
    X = _rows(a)
    shifted = X - X.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    req = a.requires_grad
    out = _emit(tape, s.reshape(a.shape), req)
    if req and tape is not None:
        def rule(g):
            G = g.reshape(s.shape)
            return (((G - (G * s).sum(axis=1, keepdims=True)) * s),)
        tape.record(out, (a,), rule)
    return out


def log_softmax(tape, a: Tensor) -> Tensor:
    """Log-softmax along the last axis."""
    X = _rows(a)
    shifted = X - X.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_nd = shifted - lse
    req = a.requires_grad
    out = _emit(tape, out_nd.reshape(a.shape), req)
    if req and tape is not None:
        def rule(g):
            G = g.reshape(out_nd.shape)
            return ((G - np.exp(out_nd) * G.sum(axis=1, keepdims=True)),)
        tape.record(out, (a,), rule)
    return out


def gru_cell(tape, x: Tensor, h: Tensor, wz: Tensor, bz: Tensor,
             wr: Tensor, br: Tensor, wh: Tensor, bh: Tensor) -> Tensor:
    """One step of a gated recurrent cell.

    Gate inputs are the concatenation [h, x]; the candidate uses
    [r * h, x]. All weight matrices are (d_h + d_x, d_h).
    """
    if x.ndim != 2 or h.ndim != 2 or x.shape[0] != h.shape[0]:
        raise ShapeError(f"gru_cell: bad state shapes x={x.shape} h={h.shape}")
    m, dx = x.shape
    dh = h.shape[1]
    for name, w in (("wz", wz), ("wr", wr), ("wh", wh)):
        if w.shape != (dh + dx, dh):
            raise ShapeError(f"gru_cell: {name} must be {(dh + dx, dh)}, got {w.shape}")
    for name, b in (("bz", bz), ("br", br), ("bh", bh)):
        if b.shape != (dh,):
            raise ShapeError(f"gru_cell: {name} must be {(dh,)}, got {b.shape}")
    X, H = x.nd(), h.nd()
    Wz, Wr, Wh = wz.nd(), wr.nd(), wh.nd()
    U = np.concatenate([H, X], axis=1)
    z = F32(0.5) * (np.tanh(F32(0.5) * (U @ Wz + bz.data)) + F32(1))
    r = F32(0.5) * (np.tanh(F32(0.5) * (U @ Wr + br.data)) + F32(1))
    V = np.concatenate([r * H, X], axis=1)
    c = np.tanh(V @ Wh + bh.data)
    out_nd = (F32(1) - z) * H + z * c
    inputs = (x, h, wz, bz, wr, br, wh, bh)
    req = any(t.requires_grad for t in inputs)
    out = _emit(tape, out_nd, req)
    if req and tape is not None:
        def rule(g):
            G = g.reshape(m, dh)
            dz = G * (c - H) * z * (F32(1) - z)
            dc = G * z * (F32(1) - c * c)
            dH = G * (F32(1) - z)
            dWh = V.T @ dc
            dbh = dc.sum(axis=0, dtype=F32)
            dV = dc @ Wh.T
            drh = dV[:, :dh]
            dX = dV[:, dh:].copy()
            dr = drh * H * r * (F32(1) - r)
            dH = dH + drh * r
            dU = dz @ Wz.T + dr @ Wr.T
            dWz = U.T @ dz
            dWr = U.T @ dr
            dH = dH + dU[:, :dh]
            dX += dU[:, dh:]
            return (dX, dH, dWz, dz.sum(axis=0, dtype=F32), dWr,
                    dr.sum(axis=0, dtype=F32), dWh, dbh)
        tape.record(out, inputs, rule)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(f, params, eps: float = 1e-3, n_coords: int = 4, seed: int = 0) -> float:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f(params, tape)`` must build and return a scalar Tensor; with
    ``tape=None`` it must still evaluate. Returns the max over sampled
    coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    if eps <= 0:
        raise ValueError("gradcheck: eps must be positive")
    tape = Tape()
    loss = f(params, tape)
    if loss.size != 1:
        raise ShapeError(f"gradcheck: f must return a scalar, got {loss.shape}")
    if not np.isfinite(loss.data[0]):
        raise EvaluationError("gradcheck: f evaluated to a non-finite value")
    params.zero_grads()
    backward(tape, loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros(t.size, F32))
        for name, t in params.items()
    }
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in params.items():
        k = min(n_coords, t.size)
        for i in rng.choice(t.size, size=k, replace=False):
            v0 = t.data[i]
            t.data[i] = F32(v0 + eps)
            xp = float(t.data[i])
            fp = float(f(params, None).data[0])
            t.data[i] = F32(v0 - eps)
            xm = float(t.data[i])
            fm = float(f(params, None).data[0])
            t.data[i] = v0
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError("gradcheck: non-finite value during perturbation")
            g_fd = (fp - fm) / (xp - xm)
            g_ad = float(analytic[name][i])
            err = abs(g_ad - g_fd) / max(1.0, abs(g_ad), abs(g_fd))
            worst = max(worst, err)
    return worst
