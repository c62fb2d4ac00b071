"""Minimal dense-tensor math with reverse-mode differentiation.

Everything is float64. Ops record onto the active :class:`Tape` (a Wengert
list); ``tape.backward(loss)`` walks it once in reverse and accumulates
gradients into ``Tensor.grad`` buffers. Outside a tape, ops are plain numpy
forward computations, which is what evaluation uses.

Only the operations the prediction model needs are provided; there is no
general broadcasting.
"""

from __future__ import annotations

import json
import numpy as np


class ShapeError(ValueError):
    pass


def _check(cond, op, *shapes):
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


_ACTIVE_TAPE = None


class Tensor:
    """A float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive ops; creation order is topological order."""

    def __init__(self):
        self._nodes = []
        self._used = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(param) into every reachable parameter's .grad.

        The loss must be a scalar recorded on this tape; a second call
        without a fresh tape is an error.
        """
        if self._used:
            raise RuntimeError("backward already ran on this tape; build a new tape")
        if loss.data.shape != ():
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        if not any(n is loss for n in self._nodes):
            raise RuntimeError("backward: loss is not on this tape")
        self._used = True
        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self._nodes):
            if node.grad is None or node._vjp is None:
                continue
            node._vjp(node.grad)
        # transient node buffers are dropped; leaf gradients stay
        for node in self._nodes:
            node.grad = None


def _record(out: Tensor, parents, vjp):
    """Attach autodiff metadata when recording is active and useful."""
    tape = _ACTIVE_TAPE
    if tape is None:
        return out
    for p in parents:
        if p.requires_grad:
            break
    else:
        return out
    out.requires_grad = True
    out._parents = parents
    out._vjp = vjp
    tape._nodes.append(out)
    return out


def constant(data, name=None):
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.data.shape == b.data.shape, "add", a.data.shape, b.data.shape)
    out = Tensor(a.data + b.data)

    def vjp(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.data.shape == b.data.shape, "mul", a.data.shape, b.data.shape)
    out = Tensor(a.data * b.data)

    def vjp(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return _record(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def vjp(g):
        if a.requires_grad:
            a.accumulate(g * c)

    return _record(out, (a,), vjp)


def scale_t(a: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar tensor (gradients flow to both)."""
    _check(s.data.shape == (), "scale_t", a.data.shape, s.data.shape)
    out = Tensor(a.data * s.data)

    def vjp(g):
        if a.requires_grad:
            a.accumulate(g * s.data)
        if s.requires_grad:
            s.accumulate(np.sum(g * a.data))

    return _record(out, (a, s), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    an, bn = a.data.ndim, b.data.ndim
    _check(1 <= an <= 2 and 1 <= bn <= 2, "matmul", a.data.shape, b.data.shape)
    _check(a.data.shape[-1] == b.data.shape[0], "matmul", a.data.shape, b.data.shape)
    out = Tensor(a.data @ b.data)

    if an == 2 and bn == 2:
        def vjp(g):
            if a.requires_grad:
                a.accumulate(g @ b.data.T)
            if b.requires_grad:
                b.accumulate(a.data.T @ g)
    else:
        def vjp(g):
            a2 = a.data if an == 2 else a.data[None, :]
            b2 = b.data if bn == 2 else b.data[:, None]
            if an == 1 and bn == 1:
                g2 = np.asarray(g).reshape(1, 1)
            elif an == 1:
                g2 = g[None, :]
            else:
                g2 = g[:, None]
            if a.requires_grad:
                ga = g2 @ b2.T
                a.accumulate(ga[0] if an == 1 else ga)
            if b.requires_grad:
                gb = a2.T @ g2
                b.accumulate(gb[:, 0] if bn == 1 else gb)

    return _record(out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    _check(a.data.ndim == 2, "transpose", a.data.shape)
    out = Tensor(a.data.T)

    def vjp(g):
        if a.requires_grad:
            a.accumulate(g.T)

    return _record(out, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def vjp(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.shape))

    return _record(out, (a,), vjp)


def concat(parts, axis=0) -> Tensor:
    parts = list(parts)
    _check(len(parts) >= 1, "concat", ())
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p.accumulate(g[tuple(idx)])

    return _record(out, tuple(parts), vjp)


def rows(table: Tensor, idx) -> Tensor:
    """Gather rows (or elements of a vector) by a constant index array."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(table.data[idx])

    def vjp(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, idx, g)
            table.accumulate(buf)

    return _record(out, (table,), vjp)


def cols(m: Tensor, j: int) -> Tensor:
    _check(m.data.ndim == 2, "cols", m.data.shape)
    out = Tensor(m.data[:, j])

    def vjp(g):
        if m.requires_grad:
            buf = np.zeros_like(m.data)
            buf[:, j] = g
            m.accumulate(buf)

    return _record(out, (m,), vjp)


def sum_rows(a: Tensor) -> Tensor:
    """Sum each row of a matrix, returning a vector of row totals."""
    _check(a.data.ndim == 2, "sum_rows", a.data.shape)
    out = Tensor(a.data.sum(axis=1))

    def vjp(g):
        if a.requires_grad:
            a.accumulate(np.repeat(g[:, None], a.shape[1], axis=1))

    return _record(out, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def vjp(g):
        if a.requires_grad:
            a.accumulate(np.full(a.shape, g, dtype=np.float64))

    return _record(out, (a,), vjp)


def add_rowvec(m: Tensor, v: Tensor) -> Tensor:
    _check(m.data.ndim == 2 and v.data.shape == (m.data.shape[1],), "add_rowvec", m.data.shape, v.data.shape)
    out = Tensor(m.data + v.data[None, :])

    def vjp(g):
        if m.requires_grad:
            m.accumulate(g)
        if v.requires_grad:
            v.accumulate(g.sum(axis=0))

    return _record(out, (m, v), vjp)


def add_colvec(m: Tensor, v: Tensor) -> Tensor:
    _check(m.data.ndim == 2 and v.data.shape == (m.data.shape[0],), "add_colvec", m.data.shape, v.data.shape)
    out = Tensor(m.data + v.data[:, None])

    def vjp(g):
        if m.requires_grad:
            m.accumulate(g)
        if v.requires_grad:
            v.accumulate(g.sum(axis=1))

    return _record(out, (m, v), vjp)


def scale_rows(m: Tensor, v: Tensor) -> Tensor:
    """out[i, j] = m[i, j] * v[i]."""
    _check(m.data.ndim == 2 and v.data.shape == (m.data.shape[0],), "scale_rows", m.data.shape, v.data.shape)
    out = Tensor(m.data * v.data[:, None])

    def vjp(g):
        if m.requires_grad:
            m.accumulate(g * v.data[:, None])
        if v.requires_grad:
            v.accumulate((g * m.data).sum(axis=1))

    return _record(out, (m, v), vjp)


def scale_cols(m: Tensor, v: Tensor) -> Tensor:
    """out[i, j] = m[i, j] * v[j]."""
    _check(m.data.ndim == 2 and v.data.shape == (m.data.shape[1],), "scale_cols", m.data.shape, v.data.shape)
    out = Tensor(m.data * v.data[None, :])

    def vjp(g):
        if m.requires_grad:
            m.accumulate(g * v.data[None, :])
        if v.requires_grad:
            v.accumulate((g * m.data).sum(axis=0))

    return _record(out, (m, v), vjp)


def outer_sum(u: Tensor, v: Tensor) -> Tensor:
    """out[i, j] = u[i] + v[j]."""
    _check(u.data.ndim == 1 and v.data.ndim == 1, "outer_sum", u.data.shape, v.data.shape)
    out = Tensor(u.data[:, None] + v.data[None, :])

    def vjp(g):
        if u.requires_grad:
            u.accumulate(g.sum(axis=1))
        if v.requires_grad:
            v.accumulate(g.sum(axis=0))

    return _record(out, (u, v), vjp)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    out = Tensor(np.where(pos, a.data, slope * a.data))

    def vjp(g):
        if a.requires_grad:
            a.accumulate(g * np.where(pos, 1.0, slope))

    return _record(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    # two-branch form is exact at +/-inf and never overflows
    x = a.data
    y = np.empty_like(x)
    neg = x < 0
    with np.errstate(over="ignore"):
        e = np.exp(np.where(neg, x, -x))
    y = np.where(neg, e / (1.0 + e), 1.0 / (1.0 + e))
    out = Tensor(y)

    def vjp(g):
        if a.requires_grad:
            a.accumulate(g * y * (1.0 - y))

    return _record(out, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, a.data))
    x = a.data

    def vjp(g):
        neg = x < 0
        with np.errstate(over="ignore"):
            e = np.exp(np.where(neg, x, -x))
        s = np.where(neg, e / (1.0 + e), 1.0 / (1.0 + e))
        if a.requires_grad:
            a.accumulate(g * s)

    return _record(out, (a,), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    _check(a.data.ndim == 2, "softmax_rows", a.data.shape)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            a.accumulate(y * (g - dot))

    return _record(out, (a,), vjp)


def masked_softmax_rows(a: Tensor, mask) -> Tensor:
    """Row softmax restricted to True entries of a constant boolean mask.

    A row with no True entries comes out all zero (the softmax over an
    empty set is the empty sum).
    """
    _check(a.data.ndim == 2, "masked_softmax_rows", a.data.shape)
    mask = np.asarray(mask, dtype=bool)
    _check(mask.shape == a.data.shape, "masked_softmax_rows", a.data.shape, mask.shape)
    neg = np.where(mask, a.data, -np.inf)
    rowmax = neg.max(axis=1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.where(mask, np.exp(a.data - rowmax), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    out = Tensor(y)

    def vjp(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            a.accumulate(y * (g - dot))

    return _record(out, (a,), vjp)


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Mean-reduced smooth L1: 0.5 e^2 where |e| < 1, |e| - 0.5 elsewhere."""
    if not isinstance(target, Tensor):
        target = constant(target)
    _check(pred.data.shape == target.data.shape, "smooth_l1", pred.data.shape, target.data.shape)
    e = pred.data - target.data
    small = np.abs(e) < 1.0
    per = np.where(small, 0.5 * e * e, np.abs(e) - 0.5)
    n = max(per.size, 1)
    out = Tensor(per.sum() / n)

    def vjp(g):
        d = np.where(small, e, np.sign(e)) * (g / n)
        if pred.requires_grad:
            pred.accumulate(d)
        if target.requires_grad:
            target.accumulate(-d)

    return _record(out, (pred, target), vjp)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_grads(loss_fn, params, step=1e-5):
    """Central-difference gradient of ``loss_fn()`` w.r.t. each param tensor.

    ``loss_fn`` must be a pure forward function of the current param values
    (it is re-evaluated 2x per coordinate, so keep the params small).
    """
    def evaluate():
        value = loss_fn()
        return float(value.data if isinstance(value, Tensor) else value)

    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            keep = p.data[idx]
            p.data[idx] = keep + step
            up = evaluate()
            p.data[idx] = keep - step
            down = evaluate()
            p.data[idx] = keep
            g[idx] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


def gradcheck(loss_fn, params, step=1e-5):
    """Compare tape gradients against finite differences.

    Returns a flat array of per-parameter relative errors, ordered by
    sorted param name then C order within each tensor.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                for k, p in params.items()}
    numeric = finite_difference_grads(loss_fn, params, step=step)
    errs = []
    for k in sorted(params):
        a = analytic[k].reshape(-1)
        b = numeric[k].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
        errs.append(np.abs(a - b) / denom)
    return np.concatenate(errs) if errs else np.zeros(0)


# ---------------------------------------------------------------------------
# named-tensor container (versioned, bit-exact round trip)

_MAGIC = "odflow-tensors"
_VERSION = 1


def save_tensors(path, tensors, meta=None):
    """Write named float64 arrays plus a JSON meta block to one file.

    Layout: one JSON header line (sorted keys) followed by the raw
    little-endian float64 bytes of every tensor in header order. Saving the
    result of ``load_tensors`` reproduces the file byte for byte.
    """
    names = sorted(tensors)
    layout = {}
    offset = 0
    for name in names:
        arr = np.asarray(tensors[name], dtype=np.float64)
        layout[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size * 8
    header = {
        "format": _MAGIC,
        "version": _VERSION,
        "meta": meta if meta is not None else {},
        "tensors": layout,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(b"\n")
        for name in names:
            arr = np.asarray(tensors[name], dtype=np.float64)
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_tensors(path):
    """Read a container written by :func:`save_tensors` -> (tensors, meta)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format") != _MAGIC:
            raise ValueError(f"{path}: not a tensor container")
        if header.get("version") != _VERSION:
            raise ValueError(f"{path}: unsupported container version {header.get('version')}")
        body = fh.read()
    tensors = {}
    for name, spec in header["tensors"].items():
        shape = tuple(spec["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = spec["offset"]
        raw = body[start:start + size * 8]
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return tensors, header["meta"]
