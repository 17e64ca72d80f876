"""Dense tensors with tape-based reverse-mode differentiation.

Every op is a pure function of its inputs.  When a :class:`GradTape` is
active on the current thread and any input requires a gradient, the op
appends an entry ``(output, inputs, adjoint)`` to the tape; ``tape.gradient``
then walks the entries in reverse.
"""
from __future__ import annotations

import contextlib
import functools
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError

DEFAULT_DTYPE = np.float32

_local = threading.local()


class Tensor:
    """Immutable dense array plus a ``requires_grad`` flag.

    Trainable parameters are the one exception to immutability: the
    optimizer assigns ``param.data`` in place between steps.
    """

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = data if dtype is None and type(data) is np.ndarray else np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: mul(self, -1.0)
    __getitem__ = lambda self, idx: take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


FeatureTensor = Tensor


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class GradTape:
    """Ordered record of differentiable ops executed while the tape is active.

    Use as a context manager on the thread that owns it::

        with GradTape() as tape:
            loss = f(params)
        grads = tape.gradient(loss, params)
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def record(self, out, inputs, adjoint):
        self.entries.append((out, inputs, adjoint))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """d(target)/d(source) for every source; zeros where unconnected."""
        if target.data.size != 1:
            raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
        grads = {id(target): np.ones_like(target.data)}
        for out, inputs, adjoint in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, adjoint(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [
            np.asarray(grads.get(id(s), np.zeros_like(s.data)), dtype=s.dtype).reshape(s.shape)
            for s in sources
        ]


def active_tape():
    return getattr(_local, "tape", None)


class Trace:
    """Forward-only record of op calls, replayable with substituted inputs.

    While a trace is active every primitive op appends ``(fn, args, kwargs,
    out)``.  :meth:`replay` re-executes only the calls downstream of the
    substituted tensors and reuses recorded outputs everywhere else, so it
    evaluates the same function as re-running the traced code, provided
    that code has no value-dependent Python control flow outside the ops.
    """

    def __init__(self):
        self.entries: list = []
        self._inputs = None
        self._plans: dict = {}
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_local, "trace", None)
        _local.trace = self
        return self

    def __exit__(self, *exc):
        _local.trace = self._prev
        return False

    def _downstream(self, sources: frozenset) -> list[int]:
        """Indices of entries that (transitively) read any of ``sources``."""
        if self._inputs is None:
            self._inputs = [tuple(id(t) for t in _tensors_in((args, kwargs)))
                            for _, args, kwargs, _ in self.entries]
        dirty, hit = set(sources), []
        for n, ids in enumerate(self._inputs):
            if any(i in dirty for i in ids):
                hit.append(n)
                dirty.update(id(t) for t in _tensors_in(self.entries[n][3]))
        return hit

    def replay(self, target: Tensor, substitutes: dict) -> Tensor:
        """Value of ``target`` with ``substitutes`` ({id(tensor): tensor}) swapped in."""
        key = frozenset(substitutes)
        if key not in self._plans:
            self._plans[key] = self._downstream(key)
        subs = dict(substitutes)

        def swap(a):
            kind = type(a)
            if kind is Tensor:
                return subs.get(id(a), a)
            if (kind is list or kind is tuple) and any(type(x) is Tensor for x in a):
                return kind(subs.get(id(x), x) if type(x) is Tensor else x for x in a)
            return a

        for n in self._plans[key]:
            fn, args, kwargs, out = self.entries[n]
            args = [swap(a) for a in args]
            new = fn(*args, **{k: swap(v) for k, v in kwargs.items()}) if kwargs else fn(*args)
            if isinstance(out, tuple):
                for o, t in zip(out, new):
                    if isinstance(o, Tensor):
                        subs[id(o)] = t
            else:
                subs[id(out)] = new
        return subs.get(id(target), target)


def _tensors_in(obj):
    if isinstance(obj, Tensor):
        yield obj
    elif isinstance(obj, (list, tuple)):
        for x in obj:
            yield from _tensors_in(x)
    elif isinstance(obj, dict):
        for x in obj.values():
            yield from _tensors_in(x)


def _traced(fn):
    @functools.wraps(fn)
    def op(*args, **kwargs):
        out = fn(*args, **kwargs)
        trace = getattr(_local, "trace", None)
        if trace is not None:
            trace.entries.append((fn, args, kwargs, out))
        return out
    return op


def _make(out_data, inputs, adjoint) -> Tensor:
    out = Tensor(out_data)
    tape = getattr(_local, "tape", None)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, adjoint)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    if type(a) is Tensor and type(b) is Tensor:
        return a, b
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else None))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# elementwise -----------------------------------------------------------------

@_traced
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


@_traced
def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


@_traced
def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


@_traced
def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


@_traced
def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


@_traced
def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


@_traced
def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


@_traced
def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is taken as 0."""
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


hinge = relu


@_traced
def where(mask, x: Tensor, fill: float) -> Tensor:
    """``x`` where ``mask`` is true, the constant ``fill`` elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, x.data, np.asarray(fill, dtype=x.dtype))
    return _make(out, (x,), lambda g: (_unbroadcast(np.where(mask, g, 0), x.shape),))


# shape -------------------------------------------------------------------------

@_traced
def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


@_traced
def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


@_traced
def take(x: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing along the leading axes."""
    if isinstance(idx, Tensor):
        raise TypeError("index with integers or numpy arrays, not tensors")

    def adjoint(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), adjoint)


@_traced
def concat(xs: Sequence[Tensor], axis=0) -> Tensor:
    xs = tuple(xs)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _make(np.concatenate([t.data for t in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


@_traced
def stack(xs: Sequence[Tensor], axis=0) -> Tensor:
    xs = tuple(xs)
    return _make(np.stack([t.data for t in xs], axis=axis), xs,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


# reductions ---------------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


@_traced
def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,),
                 lambda g: (_expand(g, x.shape, axis, keepdims).copy(),))


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def tmax(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal element."""
    if axis is None:
        return _tmax(reshape(x, (-1,)), 0, False)
    return _tmax(x, axis % x.ndim, keepdims)


@_traced
def _tmax(x: Tensor, axis, keepdims) -> Tensor:
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis)

    def adjoint(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(arg, axis), gk, axis)
        return (gx,)

    return _make(out if keepdims else out.squeeze(axis), (x,), adjoint)


# linear algebra -----------------------------------------------------------------

@_traced
def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul expects rank >= 2 operands, got {a.shape} and {b.shape}")

    def adjoint(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), adjoint)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


# fused ops with hand-written adjoints -------------------------------------------

def _masked(x, mask, axis):
    if mask is None:
        return x, None
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=axis).all():
        raise ShapeError("softmax over a fully masked slice")
    return np.where(mask, x, -np.inf), mask


def _softmax_forward(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_backward(g, y, axis):
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


@_traced
def softmax(x: Tensor, axis=-1, mask=None) -> Tensor:
    """Numerically stable softmax; ``mask`` false entries get -inf logits."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    xm, _ = _masked(x.data, mask, axis)
    y = _softmax_forward(xm, axis)
    return _make(y, (x,), lambda g: (_softmax_backward(g, y, axis),))


def _log_softmax_backward(g, y, axis):
    return g - y * g.sum(axis=axis, keepdims=True)


@_traced
def log_softmax(x: Tensor, axis=-1, mask=None) -> Tensor:
    """log(softmax(x)); masked entries come out as -inf and receive no gradient."""
    xm, m = _masked(x.data, mask, axis)
    z = xm - xm.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def adjoint(g):
        if m is not None:
            g = np.where(m, g, 0)
        return (_log_softmax_backward(g, y, axis),)

    return _make(out, (x,), adjoint)


def _layer_norm_backward(g, xhat, inv_std, gain):
    d = xhat.shape[-1]
    gx_hat = g * gain
    gx = (inv_std / d) * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                          - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
    red = tuple(range(g.ndim - 1))
    return gx, (g * xhat).sum(axis=red), g.sum(axis=red)


@_traced
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps=1e-5) -> Tensor:
    """Standardise the last axis, then apply ``gain`` and ``bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: params {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gain.data + bias.data
    return _make(out.astype(x.dtype, copy=False), (x, gain, bias),
                 lambda g: _layer_norm_backward(g, xhat, inv_std, gain.data))


def _conv1d_backward(g, padded, kernel, l):
    k = kernel.shape[0]
    gpad = np.zeros_like(padded)
    gk = np.empty_like(kernel)
    for j in range(k):
        gpad[..., j:j + l] += g * kernel[j]
        gk[j] = (g * padded[..., j:j + l]).sum()
    half = k // 2
    return gpad[..., half:half + l], gk


@_traced
def conv1d(seq: Tensor, kernel: Tensor) -> Tensor:
    """Same-length cross-correlation along the last axis with zero padding.

    ``out[t] = sum_j kernel[j] * seq[t + j - k // 2]``
    """
    k = kernel.shape[0]
    if kernel.ndim != 1 or k % 2 == 0:
        raise ConfigError(f"conv1d kernel must be a 1-d odd-length vector, got shape {kernel.shape}")
    half = k // 2
    l = seq.shape[-1]
    padded = np.zeros((*seq.shape[:-1], l + 2 * half), dtype=seq.dtype)
    padded[..., half:half + l] = seq.data
    out = kernel.data[0] * padded[..., :l]
    for j in range(1, k):
        out = out + kernel.data[j] * padded[..., j:j + l]
    return _make(out, (seq, kernel), lambda g: _conv1d_backward(g, padded, kernel.data, l))


def _attention_forward(x, wq, bq, wk, wv, bv, mask, h):
    *lead, n, d = x.shape
    dh = d // h
    split = lambda t: np.swapaxes(t.reshape(*lead, n, h, dh), -2, -3)
    q, k, v = split(x @ wq + bq), split(x @ wk), split(x @ wv + bv)
    scores = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(dh)
    att = _softmax_forward(np.where(mask, scores, -np.inf), -1)
    ctx = np.swapaxes(att @ v, -2, -3).reshape(*lead, n, d)
    return q, k, v, att, ctx


@_traced
def multi_head_attention(x: Tensor, wq: Tensor, bq: Tensor, wk: Tensor, wv: Tensor, bv: Tensor,
                         mask, n_heads: int) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product self-attention over ``n_heads`` heads, before the output projection.

    ``mask`` (..., n) marks valid keys.  Returns the merged head outputs
    (..., n, d) and the attention weights (..., h, n, n) as a plain array.
    """
    d = x.shape[-1]
    if d % n_heads:
        raise ShapeError(f"model dim {d} not divisible by {n_heads} heads")
    key_mask = np.asarray(mask, dtype=bool)[..., None, None, :]
    if not key_mask.any(-1).all():
        raise ShapeError("attention over a fully masked sequence")
    q, k, v, att, ctx = _attention_forward(x.data, wq.data, bq.data, wk.data, wv.data, bv.data,
                                           key_mask, n_heads)
    *lead, n, _ = x.shape
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)

    def adjoint(g):
        g = np.swapaxes(g.reshape(*lead, n, n_heads, dh), -2, -3)
        g_att = g @ np.swapaxes(v, -1, -2)
        g_v = np.swapaxes(att, -1, -2) @ g
        g_s = _softmax_backward(g_att, att, -1) * scale
        g_q = g_s @ k
        g_k = np.swapaxes(g_s, -1, -2) @ q
        merge = lambda t: np.swapaxes(t, -2, -3).reshape(*lead, n, d)
        g_q, g_k, g_v = merge(g_q), merge(g_k), merge(g_v)
        xd = x.data
        red = tuple(range(g_q.ndim - 1))
        flat = lambda t: t.reshape(-1, d)
        gx = g_q @ wq.data.T + g_k @ wk.data.T + g_v @ wv.data.T
        return (gx, flat(xd).T @ flat(g_q), g_q.sum(axis=red), flat(xd).T @ flat(g_k),
                flat(xd).T @ flat(g_v), g_v.sum(axis=red))

    return _make(ctx, (x, wq, bq, wk, wv, bv), adjoint), att


# composites ----------------------------------------------------------------------

def l2_normalize(x: Tensor, axis=-1, eps=1e-8) -> Tensor:
    norm = sqrt(add(tsum(mul(x, x), axis, keepdims=True), eps * eps))
    return div(x, norm)


def cosine(a: Tensor, b: Tensor, axis=-1) -> Tensor:
    return tsum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis)


# verification harness -------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps=1e-5,
               return_per_param=False, replay=False):
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and reads ``params`` by reference; it must be
    deterministic.  Relative error per coordinate is
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``.

    With ``replay=True`` the finite differences come from a :class:`Trace`
    of ``f`` that recomputes only the ops downstream of the perturbed
    parameter.  One coordinate per parameter is also evaluated by calling
    ``f`` directly and must agree with the replayed value.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ConfigError(f"grad_check needs float64 parameters, {p.name or p.shape} is {p.dtype}")
    trace = Trace()
    with GradTape() as tape, (trace if replay else contextlib.nullcontext()):
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericalError(f"grad_check: non-finite loss {loss.data!r}")
    analytic = tape.gradient(loss, params)

    def perturbed(p, i, delta, direct=not replay):
        if direct:
            flat = p.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + delta
            try:
                return float(f().data)
            finally:
                flat[i] = orig
        data = p.data.copy()
        data.reshape(-1)[i] += delta
        return float(trace.replay(loss, {id(p): Tensor(data)}).data)

    per_param = []
    for p, g_ad in zip(params, analytic):
        worst = 0.0
        g_ad = g_ad.reshape(-1)
        for i in range(p.data.size):
            fp, fm = perturbed(p, i, eps), perturbed(p, i, -eps)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"grad_check: non-finite loss perturbing {p.name}[{i}]")
            if replay and i == 0:
                direct = perturbed(p, 0, eps, direct=True)
                if abs(direct - fp) > 1e-12 * max(1.0, abs(direct)):
                    raise NumericalError(f"grad_check: trace replay disagrees with f for {p.name}")
            g_fd = (fp - fm) / (2 * eps)
            denom = max(abs(g_ad[i]), abs(g_fd), 1e-8)
            worst = max(worst, abs(g_ad[i] - g_fd) / denom)
        per_param.append(worst)
    worst = max(per_param, default=0.0)
    return (worst, per_param) if return_per_param else worst
