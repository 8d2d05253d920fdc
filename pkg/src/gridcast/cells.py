"""Recurrent, convolutional and dropout layers with hand-written gradients.

Every sequence is time-major. Step functions take ``x`` of shape ``(d,)`` or
``(B, d)`` and ``h`` of shape ``(n,)`` or ``(B, n)``; scans take ``X`` of shape
``(T, d)`` or ``(T, B, d)``. Parameter containers hold references to numpy
arrays, so an optimiser that updates a flat parameter dict in place updates
the cells too.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .linalg import ShapeError, activation, check_shape


class _Params:
    """Mixin for dataclasses whose array fields are trainable tensors."""

    _static: tuple[str, ...] = ()

    def tensor_names(self) -> list[str]:
        return [f.name for f in fields(self) if f.name not in self._static and getattr(self, f.name) is not None]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.tensor_names()}

    def zeros_like(self):
        kwargs = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kwargs[f.name] = np.zeros_like(v) if isinstance(v, np.ndarray) else v
        return type(self)(**kwargs)

    @classmethod
    def from_flat(cls, flat: dict, prefix: str, **static):
        kwargs = {f.name: flat.get(prefix + f.name) for f in fields(cls) if f.name not in cls._static}
        return cls(**kwargs, **static)

    def size(self) -> int:
        return sum(a.size for a in self.tensors().values())


@dataclass
class RnnParams(_Params):
    W: np.ndarray  # (n, n)
    U: np.ndarray  # (n, d)
    b: np.ndarray  # (n,)
    nonlinearity: str = "tanh"

    _static = ("nonlinearity",)

    def __post_init__(self):
        n, d = self.U.shape
        check_shape(self.W, (n, n), "W")
        check_shape(self.b, (n,), "b")

    @property
    def dims(self):
        return self.U.shape[1], self.U.shape[0]


@dataclass
class GruParams(_Params):
    W_zx: np.ndarray  # (n, d)
    W_rx: np.ndarray
    W_x: np.ndarray
    W_zh: np.ndarray  # (n, n)
    W_rh: np.ndarray
    W_h: np.ndarray
    b_z: np.ndarray  # (n,)
    b_r: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        n, d = self.W_x.shape
        for name in ("W_zx", "W_rx"):
            check_shape(getattr(self, name), (n, d), name)
        for name in ("W_zh", "W_rh", "W_h"):
            check_shape(getattr(self, name), (n, n), name)
        for name in ("b_z", "b_r", "b"):
            check_shape(getattr(self, name), (n,), name)

    @property
    def dims(self):
        """``(input_dim, hidden_size)``."""
        return self.W_x.shape[1], self.W_x.shape[0]

    @classmethod
    def random(cls, rng: np.random.Generator, d: int, n: int, scale: float = 0.5) -> "GruParams":
        def u(*shape):
            return rng.uniform(-scale, scale, size=shape)

        return cls(u(n, d), u(n, d), u(n, d), u(n, n), u(n, n), u(n, n), u(n), u(n), u(n))


@dataclass
class ReadoutParams(_Params):
    """Linear map ``o = W_oh h + b_o``; a bidirectional readout adds ``W_obwd h_bwd``."""

    W_oh: np.ndarray  # (out, n)
    b_o: np.ndarray  # (out,)
    W_obwd: np.ndarray | None = None

    def __post_init__(self):
        out, n = self.W_oh.shape
        check_shape(self.b_o, (out,), "b_o")
        if self.W_obwd is not None:
            check_shape(self.W_obwd, (out, n), "W_obwd")


@dataclass
class ConvParams(_Params):
    filters: np.ndarray  # (F, l, d)
    bias: np.ndarray  # (F,)
    stride: int = 1
    nonlinearity: str = "relu"

    _static = ("stride", "nonlinearity")

    def __post_init__(self):
        if self.filters.ndim != 3 or self.filters.shape[1] < 1:
            raise ShapeError(f"filters must be (F, l >= 1, d), got {self.filters.shape}")
        check_shape(self.bias, (self.filters.shape[0],), "bias")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def kernel(self) -> int:
        return self.filters.shape[1]


@dataclass
class GradSet:
    """Gradients shaped like the owning parameters, plus the input gradient."""

    params: _Params
    dX: np.ndarray
    readout: ReadoutParams | None = None


@dataclass
class BiGradSet:
    fwd: GruParams
    bwd: GruParams
    readout: ReadoutParams
    dX: np.ndarray


def _check_step(d: int, n: int, h_prev, x):
    if x.shape[-1] != d:
        raise ShapeError(f"input has dim {x.shape[-1]}, cell expects {d}")
    if h_prev.shape[-1] != n or h_prev.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"hidden state has shape {h_prev.shape}, expected {x.shape[:-1] + (n,)}")


def _flat(a, width):
    return a.reshape(-1, width)


# ---------------------------------------------------------------- plain RNN


@dataclass
class RnnStep:
    x: np.ndarray
    h: np.ndarray
    deriv: np.ndarray


def rnn_step(p: RnnParams, h_prev, x, return_cache: bool = False):
    """``h = phi(W h_prev + U x + b)``."""
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d, n = p.dims
    _check_step(d, n, h_prev, x)
    h, deriv = activation(p.nonlinearity, h_prev @ p.W.T + x @ p.U.T + p.b)
    if return_cache:
        return h, RnnStep(x, h_prev, deriv)
    return h


def rnn_step_backward(p: RnnParams, e: RnnStep, dh):
    da = dh * e.deriv
    return da @ p.U, da @ p.W, da


def accumulate_rnn(grads: RnnParams, steps, pres) -> None:
    if not steps:
        return
    d, n = grads.dims
    da = _flat(np.stack(pres), n)
    grads.W += da.T @ _flat(np.stack([e.h for e in steps]), n)
    grads.U += da.T @ _flat(np.stack([e.x for e in steps]), d)
    grads.b += da.sum(axis=0)


# ---------------------------------------------------------------------- GRU


@dataclass
class GruStep:
    """Activations of one GRU step; ``h`` is the incoming state."""

    x: np.ndarray
    h: np.ndarray
    z: np.ndarray
    r: np.ndarray
    c: np.ndarray
    dz: np.ndarray
    dr: np.ndarray
    dc: np.ndarray


def gru_step(p: GruParams, h_prev, x):
    """One GRU transition. Returns ``(h, GruStep)``.

    update gate  z = sigmoid(W_zx x + W_zh h_prev + b_z)
    reset gate   r = sigmoid(W_rx x + W_rh h_prev + b_r)
    candidate    c = tanh(W_h (r * h_prev) + W_x x + b)
    new state    h = (1 - z) * h_prev + z * c
    """
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d, n = p.dims
    _check_step(d, n, h_prev, x)
    return _gru_core(p, h_prev, x, x @ p.W_zx.T + p.b_z, x @ p.W_rx.T + p.b_r, x @ p.W_x.T + p.b)


def _gru_core(p, h_prev, x, xz, xr, xc):
    # xz, xr, xc: input projections with biases already added
    z, dz = activation("sigmoid", xz + h_prev @ p.W_zh.T)
    r, dr = activation("sigmoid", xr + h_prev @ p.W_rh.T)
    c, dc = activation("tanh", (r * h_prev) @ p.W_h.T + xc)
    h = (1.0 - z) * h_prev + z * c
    return h, GruStep(x, h_prev, z, r, c, dz, dr, dc)


def gru_step_backward(p: GruParams, e: GruStep, dh):
    """Push ``dL/dh`` back through one step.

    Returns ``(dx, dh_prev, (da_z, da_r, da_c))`` where the last tuple holds
    gradients at the three gate pre-activations, consumed by
    :func:`accumulate_gru`.
    """
    da_c = dh * e.z * e.dc
    da_z = dh * (e.c - e.h) * e.dz
    d_rh = da_c @ p.W_h
    da_r = d_rh * e.h * e.dr
    dh_prev = dh * (1.0 - e.z) + d_rh * e.r + da_z @ p.W_zh + da_r @ p.W_rh
    dx = da_c @ p.W_x + da_z @ p.W_zx + da_r @ p.W_rx
    return dx, dh_prev, (da_z, da_r, da_c)


def accumulate_gru(grads: GruParams, steps, pres) -> None:
    """Add the weight and bias gradients of ``steps`` into ``grads``."""
    if not steps:
        return
    d, n = grads.dims
    X = _flat(np.stack([e.x for e in steps]), d)
    Hp = _flat(np.stack([e.h for e in steps]), n)
    RH = _flat(np.stack([e.r * e.h for e in steps]), n)
    da_z = _flat(np.stack([q[0] for q in pres]), n)
    da_r = _flat(np.stack([q[1] for q in pres]), n)
    da_c = _flat(np.stack([q[2] for q in pres]), n)
    grads.W_zx += da_z.T @ X
    grads.W_zh += da_z.T @ Hp
    grads.b_z += da_z.sum(axis=0)
    grads.W_rx += da_r.T @ X
    grads.W_rh += da_r.T @ Hp
    grads.b_r += da_r.sum(axis=0)
    grads.W_x += da_c.T @ X
    grads.W_h += da_c.T @ RH
    grads.b += da_c.sum(axis=0)


# ------------------------------------------------------------------- scans


@dataclass
class ScanCache:
    steps: list
    reverse: bool
    h0: np.ndarray


def _step_fns(p):
    if isinstance(p, GruParams):
        return gru_step, gru_step_backward, accumulate_gru
    if isinstance(p, RnnParams):
        return (lambda q, h, x: rnn_step(q, h, x, return_cache=True)), rnn_step_backward, accumulate_rnn
    raise TypeError(f"not a recurrent parameter set: {type(p).__name__}")


def scan(p, X, h0=None, reverse: bool = False):
    """Run a recurrent cell over ``X``; ``H[t]`` is the state after reading ``X[t]``.

    With ``reverse=True`` the cell reads ``X[T-1]`` first, so ``H[0]`` is the
    final state of the backward pass.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 1:
        raise ShapeError("cannot scan an empty sequence")
    step, _, _ = _step_fns(p)
    _, n = p.dims
    h = np.zeros(X.shape[1:-1] + (n,)) if h0 is None else np.asarray(h0, dtype=np.float64)
    h_init = h
    T = X.shape[0]
    H = np.empty(X.shape[:-1] + (n,))
    steps = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    if isinstance(p, GruParams):
        _check_step(p.dims[0], n, h, X[0])
        XZ, XR, XC = X @ p.W_zx.T + p.b_z, X @ p.W_rx.T + p.b_r, X @ p.W_x.T + p.b
        for t in order:
            h, steps[t] = _gru_core(p, h, X[t], XZ[t], XR[t], XC[t])
            H[t] = h
    else:
        for t in order:
            h, steps[t] = step(p, h, X[t])
            H[t] = h
    return H, ScanCache(steps, reverse, h_init)


def scan_backward(p, cache: ScanCache, dH, grads=None):
    """Backward pass of :func:`scan`.

    ``dH[t]`` is the loss gradient arriving at ``H[t]`` from outside the
    recurrence. Returns ``(grads, dX, dh0)``; ``grads`` is accumulated in
    place when given.
    """
    _, back, accumulate = _step_fns(p)
    T = len(cache.steps)
    if dH.shape[0] != T:
        raise ShapeError(f"dH covers {dH.shape[0]} steps, cache holds {T}")
    if grads is None:
        grads = p.zeros_like()
    dh = np.zeros_like(cache.h0)
    dX = np.empty(dH.shape[:-1] + (p.dims[0],))
    pres = [None] * T
    for t in (range(T) if cache.reverse else range(T - 1, -1, -1)):
        dX[t], dh, pres[t] = back(p, cache.steps[t], dh + dH[t])
    accumulate(grads, cache.steps, pres)
    return grads, dX, dh


# ------------------------------------------------ GRU and BiGRU with readout


def _readout(ro: ReadoutParams, h, h_bwd=None):
    if h.shape[-1] != ro.W_oh.shape[1]:
        raise ShapeError(f"readout expects hidden size {ro.W_oh.shape[1]}, got {h.shape[-1]}")
    out = h @ ro.W_oh.T + ro.b_o
    if h_bwd is not None:
        out = out + h_bwd @ ro.W_obwd.T
    return out


def gru_forward(p: GruParams, ro: ReadoutParams, X, h0=None):
    """GRU over a sequence with a readout ``o_t = W_oh h_t + b_o`` at every step."""
    H, cache = scan(p, X, h0)
    return _readout(ro, H), (cache, H)


def gru_backward(p: GruParams, ro: ReadoutParams, cache, targets) -> GradSet:
    """Gradients of ``sum_t 0.5 * ||y_t - o_t||^2`` for :func:`gru_forward`."""
    scan_cache, H = cache
    if not isinstance(scan_cache, ScanCache) or len(scan_cache.steps) != H.shape[0]:
        raise ShapeError("cache does not come from gru_forward")
    targets = np.asarray(targets, dtype=np.float64)
    pred = _readout(ro, H)
    check_shape(targets, pred.shape, "targets")
    d_out = pred - targets
    ro_grads = ro.zeros_like()
    out, n = ro.W_oh.shape
    ro_grads.W_oh += _flat(d_out, out).T @ _flat(H, n)
    ro_grads.b_o += _flat(d_out, out).sum(axis=0)
    grads, dX, _ = scan_backward(p, scan_cache, d_out @ ro.W_oh)
    return GradSet(grads, dX, ro_grads)


def bigru_forward(fwd: GruParams, bwd: GruParams, ro: ReadoutParams, X):
    """Forward and time-reversed GRU scans combined by the readout.

    ``o_t = W_oh h_fwd_t + W_obwd h_bwd_t + b_o``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2 or X.shape[0] == 0:
        raise ShapeError("bigru_forward needs a non-empty sequence")
    if ro.W_obwd is None:
        raise ShapeError("bidirectional readout needs W_obwd")
    Hf, cf = scan(fwd, X)
    Hb, cb = scan(bwd, X, reverse=True)
    return _readout(ro, Hf, Hb), (cf, cb, Hf, Hb)


def bigru_backward(fwd: GruParams, bwd: GruParams, ro: ReadoutParams, caches, targets) -> BiGradSet:
    cf, cb, Hf, Hb = caches
    if len(cf.steps) != len(cb.steps) or not cb.reverse:
        raise ShapeError("caches do not come from bigru_forward")
    targets = np.asarray(targets, dtype=np.float64)
    pred = _readout(ro, Hf, Hb)
    check_shape(targets, pred.shape, "targets")
    d_out = pred - targets
    out, n = ro.W_oh.shape
    ro_grads = ro.zeros_like()
    ro_grads.W_oh += _flat(d_out, out).T @ _flat(Hf, n)
    ro_grads.W_obwd += _flat(d_out, out).T @ _flat(Hb, n)
    ro_grads.b_o += _flat(d_out, out).sum(axis=0)
    gf, dXf, _ = scan_backward(fwd, cf, d_out @ ro.W_oh)
    gb, dXb, _ = scan_backward(bwd, cb, d_out @ ro.W_obwd)
    return BiGradSet(gf, gb, ro_grads, dXf + dXb)


# ------------------------------------------------------------------ Conv1D


def conv_output_length(T: int, kernel: int, stride: int = 1) -> int:
    if T < kernel:
        raise ShapeError(f"sequence of length {T} is shorter than the kernel ({kernel})")
    return (T - kernel) // stride + 1


@dataclass
class ConvCache:
    windows: np.ndarray  # (T', ..., d, l)
    deriv: np.ndarray  # (T', ..., F)
    input_shape: tuple


def conv1d_forward(p: ConvParams, X):
    """Valid (unpadded) 1-D correlation over time with a shared filter bank.

    ``out[t, f] = phi(sum_tau <filters[f, tau], X[t*stride + tau]> + bias[f])``.
    Returns ``(out, cache)`` with ``out`` of shape ``(T', ..., F)``.
    """
    X = np.asarray(X, dtype=np.float64)
    F, l, d = p.filters.shape
    if X.shape[-1] != d:
        raise ShapeError(f"input has {X.shape[-1]} channels, filters expect {d}")
    conv_output_length(X.shape[0], l, p.stride)
    windows = np.lib.stride_tricks.sliding_window_view(X, l, axis=0)[:: p.stride]
    pre = np.einsum("t...dl,fld->t...f", windows, p.filters) + p.bias
    out, deriv = activation(p.nonlinearity, pre)
    return out, ConvCache(windows, deriv, X.shape)


def conv1d_backward(p: ConvParams, cache: ConvCache, d_out) -> GradSet:
    d_out = np.asarray(d_out, dtype=np.float64)
    check_shape(d_out, cache.deriv.shape, "d_out")
    F, l, d = p.filters.shape
    d_pre = d_out * cache.deriv
    grads = p.zeros_like()
    grads.filters += np.einsum("nf,ndl->fld", _flat(d_pre, F), cache.windows.reshape(-1, d, l))
    grads.bias += _flat(d_pre, F).sum(axis=0)
    dX = np.zeros(cache.input_shape)
    n_out = d_pre.shape[0]
    span = p.stride * (n_out - 1) + 1
    for tau in range(l):
        dX[tau : tau + span : p.stride] += d_pre @ p.filters[:, tau, :]
    return GradSet(grads, dX)


# ------------------------------------------------------------------ dropout


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout_apply(v, rate: float, seed=None, mode: str = "train") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if mode == "eval" or rate == 0.0:
        return v.copy()
    return v * dropout_mask(v.shape, rate, np.random.default_rng(seed))
