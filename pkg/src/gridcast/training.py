"""Least-squares training with Adam, chronological splits and gradient checks."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .linalg import ShapeError
from .measurement import StateSeries
from .metrics import nrmse
from .model import Model, ModelConfig, build_model, predict_windows
from .serialization import canonical_dump

log = logging.getLogger(__name__)


class SeriesTooShort(ValueError):
    pass


def least_squares_loss(targets, predictions) -> float:
    """``sum 0.5 * (y - y_hat)^2`` over every step and component."""
    y = np.asarray(targets, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"targets {y.shape} and predictions {p.shape} differ in shape")
    r = y - p
    return 0.5 * float(np.sum(r * r))


# -------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """Bias-corrected Adam update of ``params`` in place. Returns ``(params, state)``."""
    if set(params) != set(grads):
        raise ShapeError("gradient names do not match parameter names")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# --------------------------------------------------------------- datasets


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.75
    val_frac: float = 0.05
    test_frac: float = 0.20

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if min(fracs) <= 0:
            raise ValueError("split fractions must be positive")
        if abs(sum(fracs) - 1.0) > 1e-12:
            raise ValueError(f"split fractions sum to {sum(fracs)!r}, not 1")


def split_lengths(T: int, spec: SplitSpec) -> tuple[int, int, int]:
    # the small nudge keeps e.g. 0.05 * 100 = 5.000000000000001 and 0.29 * 100 from flooring wrongly
    n_train = int(math.floor(T * spec.train_frac + 1e-9))
    n_val = int(math.floor(T * spec.val_frac + 1e-9))
    return n_train, n_val, T - n_train - n_val


def split_dataset(series: StateSeries, spec: SplitSpec = SplitSpec(), min_length: int = 1):
    """Cut ``series`` into contiguous (train, val, test) segments, in time order."""
    lengths = split_lengths(series.T, spec)
    if min(lengths) < min_length:
        raise SeriesTooShort(
            f"series of length {series.T} splits into {lengths}; every part needs >= {min_length} steps"
        )
    a, b = lengths[0], lengths[0] + lengths[1]
    return series[:a], series[a:b], series[b:]


def make_examples(segment, seq_len: int, horizon: int):
    """Sliding windows: ``window = x[s:s+l]``, ``target = x[s+l:s+l+horizon]``.

    Returns arrays of shape ``(N, seq_len, 2K)`` and ``(N, horizon, 2K)``.
    """
    X = segment.states if isinstance(segment, StateSeries) else np.asarray(segment, dtype=np.float64)
    T = X.shape[0]
    if T < seq_len + horizon:
        raise SeriesTooShort(f"segment of length {T} cannot hold a window of {seq_len} plus {horizon} targets")
    count = T - seq_len - horizon + 1
    frames = np.lib.stride_tricks.sliding_window_view(X, seq_len + horizon, axis=0)[:count]
    frames = np.transpose(frames, (0, 2, 1))
    return frames[:, :seq_len].copy(), frames[:, seq_len:].copy()


# ---------------------------------------------------------------- training


@dataclass
class TrainReport:
    train_loss: list
    val_nrmse: list
    stopped_epoch: int
    best_epoch: int
    test_nrmse: float
    seed: int
    parameter_count: int
    config: dict
    split: dict
    wall_clock_seconds: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        out = asdict(self)
        if not include_timing:
            out.pop("wall_clock_seconds")
        return out

    def save(self, path) -> None:
        """Canonical JSON without the wall-clock time, so identical runs give identical bytes."""
        canonical_dump(self.to_dict(), path)


def evaluate_nrmse(model: Model, windows, targets) -> float:
    """NRMSE over every forecast step of every window; constant variables fall back to RMSE."""
    preds = predict_windows(model, windows, targets.shape[1])
    d = targets.shape[-1]
    return nrmse(targets.reshape(-1, d), preds.reshape(-1, d), zero_range="rmse")


def fit_scaler(states: np.ndarray):
    shift = states.mean(axis=0)
    scale = states.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    return shift, scale


def train(
    cfg: ModelConfig,
    data: StateSeries,
    spec: SplitSpec = SplitSpec(),
    epochs: int = 100,
    batch_size: int = 32,
    lr: float = 1e-3,
    patience: int = 10,
    seed: int | None = None,
    clip_norm: float | None = None,
    verbose: bool = False,
    standardize: bool = True,
):
    """Fit a model; return ``(model, report)`` with the best-validation parameters restored.

    ``seed`` (default ``cfg.seed``) drives initialisation, shuffling and
    dropout, so equal inputs give bit-identical results. With
    ``standardize=False`` the model sees raw states instead of states
    standardised by the training segment's mean and spread.
    """
    start = time.perf_counter()
    seed = cfg.seed if seed is None else int(seed)
    if cfg.seed != seed:
        cfg = cfg.replace(seed=seed)
    if data.states.shape[1] != cfg.input_dim:
        raise ShapeError(f"data has state dim {data.states.shape[1]}, config expects {cfg.input_dim}")
    if epochs < 0 or batch_size < 1 or patience < 1:
        raise ValueError("epochs must be >= 0, batch_size and patience >= 1")

    train_seg, val_seg, test_seg = split_dataset(data, spec, cfg.seq_len + cfg.horizon)
    Xtr, Ytr = make_examples(train_seg, cfg.seq_len, cfg.horizon)
    Xva, Yva = make_examples(val_seg, cfg.seq_len, cfg.horizon)
    Xte, Yte = make_examples(test_seg, cfg.seq_len, cfg.horizon)

    model = build_model(cfg)
    if standardize:
        model.shift, model.scale = fit_scaler(train_seg.states)
    state = AdamState(lr=lr)
    rng = np.random.default_rng(seed)

    losses, val_trace = [], []
    best_val, best_epoch, best_params = math.inf, 0, None
    stale = 0
    epoch = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(Xtr))
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            drop_seed = int(rng.integers(2**63))
            _, cache = model.forward(Xtr[idx], mode="train", seed=drop_seed, targets=Ytr[idx])
            loss, grads = model.backward(cache, Ytr[idx])
            total += loss
            for g in grads.values():
                g /= len(idx)
            if clip_norm is not None:
                clip_by_global_norm(grads, clip_norm)
            adam_step(model.params, grads, state)
        losses.append(total / len(Xtr))
        val = evaluate_nrmse(model, Xva, Yva)
        val_trace.append(val)
        if verbose:
            log.info("epoch %d  loss %.6g  val_nrmse %.6g", epoch, losses[-1], val)
        if val < best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
        else:
            stale += 1
            if stale >= patience:
                break

    if best_params is not None:
        for k, v in best_params.items():
            model.params[k][...] = v
    test = evaluate_nrmse(model, Xte, Yte)
    report = TrainReport(
        train_loss=losses,
        val_nrmse=val_trace,
        stopped_epoch=epoch,
        best_epoch=best_epoch,
        test_nrmse=test,
        seed=seed,
        parameter_count=model.parameter_count(),
        config=cfg.to_dict(),
        split=asdict(spec),
        wall_clock_seconds=time.perf_counter() - start,
    )
    return model, report


# --------------------------------------------------------------- gradcheck


def _loss_difference(plus, minus, targets) -> float:
    # L(+) - L(-) = 0.5 * sum (r+ - r-)(r+ + r-), without cancelling two large sums
    rp, rm = plus - targets, minus - targets
    return 0.5 * float(np.sum((rp - rm) * (rp + rm)))


def relative_error(a, b) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def gradcheck(
    cfg: ModelConfig,
    step: float = 1e-5,
    trials: int = 20,
    seed: int = 0,
    batch: int = 2,
    zero_residual: bool = False,
    stencil: int = 3,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Each trial draws every parameter uniformly from [-0.5, 0.5], a random
    batch of windows and targets, and (when dropout is configured) a fixed
    dropout seed, so the training-mode forward pass is a deterministic
    function of the parameters. ``zero_residual`` instead uses all-zero
    parameters and inputs with targets equal to the forecast.

    ``stencil=3`` is the usual ``(L(t+h) - L(t-h)) / 2h``; ``stencil=5`` uses
    the fourth-order central formula, which tolerates a larger step and so
    stays accurate for gradient entries near zero.
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    worst = 0.0
    mode = "train" if cfg.dropout_rate > 0 else "eval"
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        model = build_model(cfg.replace(seed=seed + trial))
        shape_w = (batch, cfg.seq_len, cfg.input_dim)
        shape_y = (batch, cfg.horizon, cfg.input_dim)
        if zero_residual:
            for v in model.params.values():
                v[...] = 0.0
            windows = np.zeros(shape_w)
        else:
            for v in model.params.values():
                v[...] = rng.uniform(-0.5, 0.5, v.shape)
            windows = rng.normal(size=shape_w)
        drop_seed = int(rng.integers(2**63))
        tf_targets = rng.normal(size=shape_y)

        def run():
            return model.forward(windows, mode=mode, seed=drop_seed, targets=tf_targets)

        preds, cache = run()
        targets = preds.copy() if zero_residual else rng.normal(size=shape_y)
        if cfg.teacher_forcing:
            targets = tf_targets
        _, grads = model.backward(cache, targets)

        def diff(p, idx, h):
            orig = p[idx]
            p[idx] = orig + h
            plus = run()[0]
            p[idx] = orig - h
            minus = run()[0]
            p[idx] = orig
            return _loss_difference(plus, minus, targets)

        for name, p in model.params.items():
            for idx in np.ndindex(p.shape):
                if stencil == 3:
                    numeric = diff(p, idx, step) / (2.0 * step)
                else:
                    numeric = (8.0 * diff(p, idx, step) - diff(p, idx, 2.0 * step)) / (12.0 * step)
                worst = max(worst, relative_error(grads[name][idx], numeric))
    return worst


def default_stencil(cfg: ModelConfig) -> tuple[int, float]:
    """``(stencil, step)`` suited to ``cfg``.

    Smooth networks get the fourth-order formula with step 1e-3. ReLU kinks
    in the Conv1D front end make wide steps unreliable, so ``conv_bigru``
    keeps the three-point formula with step 1e-5.
    """
    return (3, 1e-5) if cfg.has_conv else (5, 1e-3)
