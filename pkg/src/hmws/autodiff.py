"""Dense-tensor reverse-mode autodiff on a Wengert-list tape.

All values are float64 numpy arrays. Ops record onto the innermost active
Tape (opened as a context manager); without an active tape they run eagerly
and backward is unavailable. -inf is a legal value (zero-probability
log-weights); NaN or +inf raise NonFiniteError naming the primitive.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_TAPE_STACK: list["Tape"] = []
_QUIET = {"all": "ignore"}

# jitter ladder for the Gaussian log-density primitive
_JITTERS = (0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


class Tensor:
    """A dense float64 array, optionally a named parameter slot."""

    __slots__ = ("data", "tape", "name", "store")

    def __init__(self, data, name=None, store=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = None
        self.name = name
        self.store = store

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Records primitive applications for one reverse pass scope.

    The tape snapshots the version of every ParamStore it sees; running
    backward after a parameter mutation raises TapeError.
    """

    def __init__(self):
        self.entries: list[_Node] = []
        self._stores: dict[int, tuple] = {}

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _watch(self, t: Tensor):
        if t.store is not None and id(t.store) not in self._stores:
            self._stores[id(t.store)] = (t.store, t.store.version)

    def check_fresh(self):
        for store, version in self._stores.values():
            if store.version != version:
                raise TapeError(
                    "tape reused after parameter mutation "
                    f"(store version {store.version} != {version} at record time)"
                )


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_values(data, op: str):
    if np.isnan(data).any():
        raise NonFiniteError(f"{op}: NaN in output")
    if np.isposinf(data).any():
        raise NonFiniteError(f"{op}: +inf in output")


def _record(op: str, out_data, inputs, vjp) -> Tensor:
    _check_values(out_data, op)
    out = Tensor(out_data)
    if _TAPE_STACK:
        tape = _TAPE_STACK[-1]
        tape.entries.append(_Node(out, inputs, vjp))
        out.tape = tape
        for t in inputs:
            tape._watch(t)
    return out


def _unbroadcast(g, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _binop(op, a, b, fwd, vjp_a, vjp_b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        with np.errstate(**_QUIET):
            out = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        with np.errstate(**_QUIET):
            return (
                _unbroadcast(vjp_a(g, a.data, b.data), a.shape),
                _unbroadcast(vjp_b(g, a.data, b.data), b.shape),
            )

    return _record(op, out, (a, b), vjp)


def add(a, b):
    return _binop("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binop("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binop("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binop(
        "div", a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def neg(a):
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul: rank must be 1 or 2, got {a.shape} and {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        x, y = a.data, b.data
        if x.ndim == 1 and y.ndim == 1:  # dot -> scalar
            return (g * y, g * x)
        if x.ndim == 2 and y.ndim == 2:
            return (g @ y.T, x.T @ g)
        if x.ndim == 2 and y.ndim == 1:  # (m,n)@(n,) -> (m,)
            return (np.outer(g, y), x.T @ g)
        # (m,)@(m,n) -> (n,)
        return (y @ g, np.outer(x, g))

    return _record("matmul", out, (a, b), vjp)


def exp(a):
    a = as_tensor(a)
    with np.errstate(**_QUIET):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    with np.errstate(**_QUIET):
        out = np.log(a.data)

    def vjp(g):
        with np.errstate(**_QUIET):
            return (g / a.data,)

    return _record("log", out, (a,), vjp)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x):
    with np.errstate(**_QUIET):
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = as_tensor(a)
    with np.errstate(**_QUIET):
        out = np.logaddexp(0.0, a.data)
    return _record("softplus", out, (a,), lambda g: (g * _sigmoid_np(a.data),))


def sin(a):
    a = as_tensor(a)
    return _record("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def absolute(a):
    a = as_tensor(a)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    with np.errstate(**_QUIET):
        m = np.max(x, axis=axis, keepdims=True)
        m = np.where(np.isneginf(m), 0.0, m)
        e = np.exp(x - m)
        out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", out, (a,), vjp)


def logsumexp(a, axis=None):
    a = as_tensor(a)
    x = a.data
    with np.errstate(**_QUIET):
        m = np.max(x, axis=axis, keepdims=True)
        m_safe = np.where(np.isneginf(m), 0.0, m)
        e = np.exp(x - m_safe)
        s = e.sum(axis=axis, keepdims=True)
        out_k = np.where(np.isneginf(m), -np.inf, m_safe + np.log(s))
    out = out_k.reshape(()) if axis is None else np.squeeze(out_k, axis=axis)

    def vjp(g):
        with np.errstate(**_QUIET):
            w = np.where(s > 0, e / np.where(s > 0, s, 1.0), 0.0)
        if axis is None:
            return (g * w,)
        return (np.expand_dims(g, axis) * w,)

    return _record("logsumexp", out, (a,), vjp)


def gather(a, idx, axis=0):
    """Index along an axis by an int array/list; gradient scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ShapeError(f"gather: index out of range for shape {a.shape} on axis {axis}")
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        gx = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(gx, idx, g)
        else:
            np.add.at(gx.swapaxes(0, axis), idx, np.asarray(g).swapaxes(0, axis))
        return (gx,)

    return _record("gather", out, (a,), vjp)


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(parts))
        )

    return _record("concat", out, tuple(parts), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _record("reshape", out, (a,), lambda g: (np.reshape(g, a.data.shape),))


def reduce_sum(a, axis=None):
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _record("reduce_sum", out, (a,), vjp)


def reduce_mean(a, axis=None):
    a = as_tensor(a)
    out = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, a.data.shape).copy(),)

    return _record("reduce_mean", out, (a,), vjp)


def conv1d(x, w, stride=1):
    """x: (C_in, L), w: (C_out, C_in, k) -> (C_out, L_out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 3 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv1d: expected (C_in,L) and (C_out,C_in,k), got {x.shape} and {w.shape}")
    c_in, length = x.shape
    c_out, _, k = w.shape
    l_out = (length - k) // stride + 1
    if l_out < 1:
        raise ShapeError(f"conv1d: kernel {k} (stride {stride}) too large for length {length}")
    cols = np.empty((l_out, c_in * k))
    for i in range(l_out):
        cols[i] = x.data[:, i * stride : i * stride + k].ravel()
    w2 = w.data.reshape(c_out, c_in * k)
    out = w2 @ cols.T

    def vjp(g):
        gw = (g @ cols).reshape(w.data.shape)
        gcols = w2.T @ g  # (c_in*k, l_out)
        gx = np.zeros_like(x.data)
        for i in range(l_out):
            gx[:, i * stride : i * stride + k] += gcols[:, i].reshape(c_in, k)
        return (gx, gw)

    return _record("conv1d", out, (x, w), vjp)


def conv2d(x, w, stride=1):
    """x: (C_in, H, W), w: (C_out, C_in, kh, kw) -> (C_out, H_out, W_out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d: expected (C_in,H,W) and (C_out,C_in,kh,kw), got {x.shape} and {w.shape}")
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    h_out = (h - kh) // stride + 1
    w_out = (wd - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) too large for input ({h},{wd})")
    cols = np.empty((h_out * w_out, c_in * kh * kw))
    for i in range(h_out):
        for j in range(w_out):
            patch = x.data[:, i * stride : i * stride + kh, j * stride : j * stride + kw]
            cols[i * w_out + j] = patch.ravel()
    w2 = w.data.reshape(c_out, -1)
    out = (w2 @ cols.T).reshape(c_out, h_out, w_out)

    def vjp(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols).reshape(w.data.shape)
        gcols = w2.T @ g2  # (c_in*kh*kw, h_out*w_out)
        gx = np.zeros_like(x.data)
        for i in range(h_out):
            for j in range(w_out):
                gx[:, i * stride : i * stride + kh, j * stride : j * stride + kw] += gcols[
                    :, i * w_out + j
                ].reshape(c_in, kh, kw)
        return (gx, gw)

    return _record("conv2d", out, (x, w), vjp)


def gaussian_chol_logpdf(cov, y):
    """log N(y; 0, cov) via Cholesky with an escalating diagonal jitter.

    Returns -inf (with zero gradients) when the factorization fails at the
    largest jitter. cov must be symmetric.
    """
    cov, y = as_tensor(cov), as_tensor(y)
    n = y.data.shape[0]
    if cov.data.shape != (n, n):
        raise ShapeError(f"gaussian_chol_logpdf: cov {cov.shape} does not match y {y.shape}")
    eye = np.eye(n)
    chol = None
    if np.isfinite(cov.data).all():
        for jit in _JITTERS:
            try:
                chol = np.linalg.cholesky(cov.data + jit * eye)
                break
            except np.linalg.LinAlgError:
                continue
    if chol is None:
        return _record(
            "gaussian_chol_logpdf",
            np.float64(-np.inf),
            (cov, y),
            lambda g: (np.zeros_like(cov.data), np.zeros_like(y.data)),
        )
    alpha = cho_solve((chol, True), y.data)
    out = -0.5 * float(y.data @ alpha) - np.log(np.diag(chol)).sum() - 0.5 * n * np.log(2.0 * np.pi)

    def vjp(g):
        kinv = cho_solve((chol, True), eye)
        gk = 0.5 * (np.outer(alpha, alpha) - kinv)
        return (g * gk, g * (-alpha))

    return _record("gaussian_chol_logpdf", np.float64(out), (cov, y), vjp)


def backward(head: Tensor, seed=None) -> dict[str, np.ndarray]:
    """Reverse-accumulate from head; returns gradients keyed by slot name.

    Slots not reached by the head get no entry (i.e. zero gradient).
    """
    if head.tape is None:
        raise TapeError("backward: head was not recorded on a tape")
    tape = head.tape
    tape.check_fresh()
    if seed is None:
        seed = np.ones_like(head.data)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != head.data.shape:
        raise ShapeError(f"backward: seed shape {seed.shape} does not match head {head.data.shape}")

    adjoint: dict[int, np.ndarray] = {id(head): seed}
    params: dict[int, Tensor] = {}
    with np.errstate(**_QUIET):
        for node in reversed(tape.entries):
            g = adjoint.get(id(node.out))
            if g is None:
                continue
            gins = node.vjp(g)
            for t, gt in zip(node.inputs, gins):
                if gt is None:
                    continue
                key = id(t)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + gt
                else:
                    adjoint[key] = np.asarray(gt, dtype=np.float64)
                if t.name is not None:
                    params[key] = t

    grads: dict[str, np.ndarray] = {}
    for key, t in params.items():
        g = adjoint[key]
        if t.name in grads:
            grads[t.name] = grads[t.name] + g
        else:
            grads[t.name] = g
    return grads
