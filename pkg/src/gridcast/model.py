"""Sequence-to-sequence forecaster assembled from the cells.

The encoder reads a window of ``seq_len`` states (through an optional Conv1D
front end) with a stack of recurrent layers. The decoder keeps running the
same stack autoregressively: it starts from the encoder's final state of
every layer, reads the last window state first and afterwards its own
previous prediction. Bidirectional layers hand over ``h_fwd_T + h_bwd_1``
and decode with their forward cell; the top layer's final backward state
stays available to the readout as a fixed context vector.

Internally the network works on standardised states ``(x - shift) / scale``;
the least-squares loss is measured in those coordinates.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .cells import (
    ConvParams,
    GruParams,
    ReadoutParams,
    RnnParams,
    accumulate_gru,
    accumulate_rnn,
    conv1d_backward,
    conv1d_forward,
    conv_output_length,
    dropout_mask,
    gru_step,
    gru_step_backward,
    rnn_step,
    rnn_step_backward,
    scan,
    scan_backward,
)
from .linalg import ACTIVATIONS, ShapeError, glorot_uniform
from .serialization import canonical_dumps

ARCHITECTURES = ("rnn", "gru", "bigru", "conv_bigru")

MAGIC = b"GRIDCAST"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint, or one that does not fit the data."""


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "bigru"
    input_dim: int = 12
    hidden_size: int = 16
    depth: int = 3
    seq_len: int = 5
    horizon: int = 5
    conv_filters: int = 64
    conv_kernel: int = 5
    conv_stride: int = 1
    dropout_rate: float = 0.05
    rnn_nonlinearity: str = "tanh"
    teacher_forcing: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        for name in ("input_dim", "hidden_size", "depth", "seq_len", "horizon"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.rnn_nonlinearity not in ACTIVATIONS:
            raise ValueError(f"unknown rnn_nonlinearity {self.rnn_nonlinearity!r}")
        if self.has_conv:
            if self.conv_filters < 1 or self.conv_kernel < 1 or self.conv_stride < 1:
                raise ValueError("conv_filters, conv_kernel and conv_stride must be >= 1")
            if self.seq_len < self.conv_kernel:
                raise ValueError(f"seq_len {self.seq_len} is shorter than conv_kernel {self.conv_kernel}")

    @property
    def has_conv(self) -> bool:
        return self.architecture == "conv_bigru"

    @property
    def cell(self) -> str:
        return {"rnn": "rnn", "gru": "gru"}.get(self.architecture, "bigru")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {unknown}")
        return cls(**data)

    def replace(self, **changes) -> "ModelConfig":
        return type(self).from_dict({**self.to_dict(), **changes})


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name and shape of every trainable tensor, in checkpoint order."""
    d, n = cfg.input_dim, cfg.hidden_size
    shapes = {}
    layer_in = d
    if cfg.has_conv:
        shapes["conv.filters"] = (cfg.conv_filters, cfg.conv_kernel, d)
        shapes["conv.bias"] = (cfg.conv_filters,)
        layer_in = cfg.conv_filters
    for i in range(cfg.depth):
        dirs = [f"L{i}."] if cfg.cell != "bigru" else [f"L{i}.fwd.", f"L{i}.bwd."]
        for p in dirs:
            if cfg.cell == "rnn":
                shapes.update({p + "W": (n, n), p + "U": (n, layer_in), p + "b": (n,)})
            else:
                for g in ("W_zx", "W_rx", "W_x"):
                    shapes[p + g] = (n, layer_in)
                for g in ("W_zh", "W_rh", "W_h"):
                    shapes[p + g] = (n, n)
                for g in ("b_z", "b_r", "b"):
                    shapes[p + g] = (n,)
        layer_in = n
    shapes["out.W_oh"] = (d, n)
    shapes["out.b_o"] = (d,)
    if cfg.cell == "bigru":
        shapes["out.W_obwd"] = (d, n)
    return shapes


@dataclass
class _Layer:
    kind: str
    cells: tuple  # one cell, or (fwd, bwd) for bidirectional layers


@dataclass
class ForwardCache:
    batched: bool
    horizon: int
    mode: str
    teacher: bool
    targets_n: np.ndarray | None
    window_len: int
    conv: object
    enc: list
    enc_masks: list
    ctx: np.ndarray | None
    dec_steps: list
    dec_masks: list
    dec_conv: list
    dec_hidden: list
    preds_n: np.ndarray


class Model:
    """Parameters plus the layer structure derived from a :class:`ModelConfig`.

    ``params`` is an ordered ``name -> array`` dict; the cell containers are
    views onto the same arrays.
    """

    def __init__(self, cfg: ModelConfig, params: dict, shift=None, scale=None):
        self.cfg = cfg
        shapes = parameter_shapes(cfg)
        if list(params) != list(shapes):
            raise ShapeError("parameter names do not match the configuration")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.params = params
        d = cfg.input_dim
        self.shift = np.zeros(d) if shift is None else np.asarray(shift, dtype=np.float64)
        self.scale = np.ones(d) if scale is None else np.asarray(scale, dtype=np.float64)
        if self.shift.shape != (d,) or self.scale.shape != (d,) or np.any(self.scale <= 0):
            raise ShapeError("shift and scale must be length input_dim with positive scale")
        self.conv, self.layers, self.readout = self._views(params)

    def _views(self, flat):
        cfg = self.cfg
        conv = ConvParams.from_flat(flat, "conv.", stride=cfg.conv_stride) if cfg.has_conv else None
        layers = []
        for i in range(cfg.depth):
            if cfg.cell == "rnn":
                cells = (RnnParams.from_flat(flat, f"L{i}.", nonlinearity=cfg.rnn_nonlinearity),)
            elif cfg.cell == "gru":
                cells = (GruParams.from_flat(flat, f"L{i}."),)
            else:
                cells = (GruParams.from_flat(flat, f"L{i}.fwd."), GruParams.from_flat(flat, f"L{i}.bwd."))
            layers.append(_Layer(cfg.cell, cells))
        readout = ReadoutParams.from_flat(flat, "out.")
        return conv, layers, readout

    def parameter_count(self) -> int:
        return sum(a.size for a in self.params.values())

    def copy(self) -> "Model":
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()}, self.shift.copy(), self.scale.copy())

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def normalize(self, x):
        return (x - self.shift) / self.scale

    def denormalize(self, u):
        return u * self.scale + self.shift

    # -------------------------------------------------------------- forward

    def forward(self, windows, horizon=None, mode="eval", seed=None, targets=None):
        """Forecast ``horizon`` states after each window.

        ``windows`` is ``(seq_len, d)`` or ``(B, seq_len, d)``. ``targets``
        (same layout as the output) are only read when teacher forcing is
        switched on in training mode. Returns ``(preds, cache)``.
        """
        cfg = self.cfg
        horizon = cfg.horizon if horizon is None else int(horizon)
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        W = np.asarray(windows, dtype=np.float64)
        batched = W.ndim == 3
        if not batched:
            W = W[None]
        if W.ndim != 3 or W.shape[1] != cfg.seq_len or W.shape[2] != cfg.input_dim:
            raise ShapeError(
                f"windows must be (B, {cfg.seq_len}, {cfg.input_dim}), got {np.shape(windows)}"
            )
        U = np.transpose(self.normalize(W), (1, 0, 2))
        teacher = cfg.teacher_forcing and mode == "train" and targets is not None
        targets_n = None
        if teacher:
            Y = np.asarray(targets, dtype=np.float64)
            Y = Y if batched else Y[None]
            check = (W.shape[0], horizon, cfg.input_dim)
            if Y.shape != check:
                raise ShapeError(f"targets have shape {Y.shape}, expected {check}")
            targets_n = np.transpose(self.normalize(Y), (1, 0, 2))

        use_dropout = mode == "train" and cfg.dropout_rate > 0
        rng = np.random.default_rng(seed) if use_dropout else None

        def mask(shape):
            return dropout_mask(shape, cfg.dropout_rate, rng) if use_dropout else None

        # encoder
        seq = U
        conv_cache = None
        if self.conv is not None:
            seq, conv_cache = conv1d_forward(self.conv, U)
        enc, enc_masks, finals = [], [], []
        ctx = None
        for i, layer in enumerate(self.layers):
            m = mask(seq.shape) if (i > 0 or self.conv is not None) else None
            if m is not None:
                seq = seq * m
            enc_masks.append(m)
            if layer.kind == "bigru":
                Hf, cf = scan(layer.cells[0], seq)
                Hb, cb = scan(layer.cells[1], seq, reverse=True)
                enc.append((cf, cb))
                finals.append(Hf[-1] + Hb[0])
                ctx = Hb[0]
                seq = Hf + Hb
            else:
                H, c = scan(layer.cells[0], seq)
                enc.append((c,))
                finals.append(H[-1])
                seq = H

        # decoder
        stream = list(U)
        hidden = list(finals)
        dec_steps, dec_masks, dec_conv, dec_hidden, preds = [], [], [], [], []
        for k in range(horizon):
            conv_k = None
            if self.conv is not None:
                feat, conv_k = conv1d_forward(self.conv, np.stack(stream[-cfg.conv_kernel :]))
                inp = feat[0]
            else:
                inp = stream[-1]
            steps_k, masks_k = [], []
            for i, layer in enumerate(self.layers):
                m = mask(inp.shape) if (i > 0 or self.conv is not None) else None
                if m is not None:
                    inp = inp * m
                masks_k.append(m)
                cell = layer.cells[0]
                if layer.kind == "rnn":
                    hidden[i], e = rnn_step(cell, hidden[i], inp, return_cache=True)
                else:
                    hidden[i], e = gru_step(cell, hidden[i], inp)
                steps_k.append(e)
                inp = hidden[i]
            y = inp @ self.readout.W_oh.T + self.readout.b_o
            if ctx is not None:
                y = y + ctx @ self.readout.W_obwd.T
            preds.append(y)
            dec_steps.append(steps_k)
            dec_masks.append(masks_k)
            dec_conv.append(conv_k)
            dec_hidden.append(inp)
            stream.append(targets_n[k] if teacher else y)

        preds_n = np.stack(preds)
        out = np.transpose(self.denormalize(preds_n), (1, 0, 2))
        cache = ForwardCache(
            batched, horizon, mode, teacher, targets_n, cfg.seq_len, conv_cache, enc, enc_masks, ctx,
            dec_steps, dec_masks, dec_conv, dec_hidden, preds_n,
        )
        return (out if batched else out[0]), cache

    # ------------------------------------------------------------- backward

    def backward(self, cache: ForwardCache, targets):
        """Loss and gradients for a cached forward pass.

        The loss is ``sum 0.5 * (y - y_hat)^2`` over batch, horizon and state
        components, in standardised coordinates. Returns ``(loss, grads)``.
        """
        if not isinstance(cache, ForwardCache):
            raise ValueError("model_backward needs the cache of a forward pass")
        cfg = self.cfg
        Y = np.asarray(targets, dtype=np.float64)
        if not cache.batched:
            Y = Y[None]
        expect = (cache.preds_n.shape[1], cache.horizon, cfg.input_dim)
        if Y.shape != expect:
            raise ShapeError(f"targets have shape {Y.shape}, expected {expect}")
        Yn = np.transpose(self.normalize(Y), (1, 0, 2))
        resid = cache.preds_n - Yn
        loss = 0.5 * float(np.sum(resid * resid))

        grads = self.zero_grads()
        g_conv, g_layers, g_out = self._views(grads)
        depth = len(self.layers)
        l, H = cache.window_len, cache.horizon
        B = resid.shape[1]
        n = cfg.hidden_size

        d_stream = np.zeros((l + H, B, cfg.input_dim))
        dh = [np.zeros((B, n)) for _ in range(depth)]
        d_ctx = np.zeros((B, n)) if cache.ctx is not None else None
        dec_pres = [[] for _ in range(depth)]
        dec_entries = [[] for _ in range(depth)]

        for k in range(H - 1, -1, -1):
            dy = resid[k] if cache.teacher else resid[k] + d_stream[l + k]
            h_top = cache.dec_hidden[k]
            g_out.W_oh += dy.T @ h_top
            g_out.b_o += dy.sum(axis=0)
            if d_ctx is not None:
                g_out.W_obwd += dy.T @ cache.ctx
                d_ctx += dy @ self.readout.W_obwd
            dh[-1] = dh[-1] + dy @ self.readout.W_oh
            d_in = None
            for i in range(depth - 1, -1, -1):
                cell = self.layers[i].cells[0]
                e = cache.dec_steps[k][i]
                if self.layers[i].kind == "rnn":
                    dx, dh[i], pre = rnn_step_backward(cell, e, dh[i])
                else:
                    dx, dh[i], pre = gru_step_backward(cell, e, dh[i])
                dec_entries[i].append(e)
                dec_pres[i].append(pre)
                m = cache.dec_masks[k][i]
                if m is not None:
                    dx = dx * m
                if i > 0:
                    dh[i - 1] = dh[i - 1] + dx
                else:
                    d_in = dx
            if self.conv is not None:
                gs = conv1d_backward(self.conv, cache.dec_conv[k], d_in[None])
                g_conv.filters += gs.params.filters
                g_conv.bias += gs.params.bias
                d_stream[l + k - cfg.conv_kernel : l + k] += gs.dX
            else:
                d_stream[l + k - 1] += d_in

        for i in range(depth):
            acc = accumulate_rnn if self.layers[i].kind == "rnn" else accumulate_gru
            acc(g_layers[i].cells[0], dec_entries[i], dec_pres[i])

        d_above = None
        for i in range(depth - 1, -1, -1):
            layer, caches = self.layers[i], cache.enc[i]
            T_i = len(caches[0].steps)
            d_out = np.zeros((T_i, B, n)) if d_above is None else d_above
            if layer.kind == "bigru":
                dHf = d_out.copy()
                dHf[-1] += dh[i]
                dHb = d_out.copy()
                dHb[0] += dh[i]
                if i == depth - 1:
                    dHb[0] += d_ctx
                _, dXf, _ = scan_backward(layer.cells[0], caches[0], dHf, g_layers[i].cells[0])
                _, dXb, _ = scan_backward(layer.cells[1], caches[1], dHb, g_layers[i].cells[1])
                dX = dXf + dXb
            else:
                dH = d_out.copy()
                dH[-1] += dh[i]
                _, dX, _ = scan_backward(layer.cells[0], caches[0], dH, g_layers[i].cells[0])
            m = cache.enc_masks[i]
            if m is not None:
                dX = dX * m
            d_above = dX

        if self.conv is not None:
            gs = conv1d_backward(self.conv, cache.conv, d_above)
            g_conv.filters += gs.params.filters
            g_conv.bias += gs.params.bias
        return loss, grads


def build_model(cfg: ModelConfig) -> Model:
    """Glorot-uniform weights and zero biases drawn from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        elif len(shape) == 2:
            params[name] = glorot_uniform(rng, *shape)
        else:
            F, l, d = shape
            limit = np.sqrt(6.0 / (l * d + l * F))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return Model(cfg, params)


def forecast(m: Model, window, horizon=None, mode="eval", seed=None):
    """Forecast ``horizon`` future states after ``window`` (see :meth:`Model.forward`)."""
    return m.forward(window, horizon, mode, seed)[0]


def model_backward(m: Model, cache: ForwardCache, targets):
    if cache is None:
        raise ValueError("model_backward needs the cache of a forward pass")
    return m.backward(cache, targets)


# ------------------------------------------------------------- checkpoints


def _pack_tensor(a: np.ndarray) -> bytes:
    head = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f8").tobytes()


def checkpoint_bytes(m: Model) -> bytes:
    """Header (magic, version, config JSON) then every tensor, shift and scale last."""
    cfg_json = canonical_dumps(m.cfg.to_dict()).encode()
    tensors = list(m.params.values()) + [m.shift, m.scale]
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(cfg_json)), cfg_json]
    parts.append(struct.pack("<I", len(tensors)))
    parts += [_pack_tensor(a) for a in tensors]
    return b"".join(parts)


def save_checkpoint(m: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(m))


def load_checkpoint(path) -> Model:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    try:
        return _parse_checkpoint(buf)
    except (struct.error, ValueError, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None


def _parse_checkpoint(buf: bytes) -> Model:
    if not buf.startswith(MAGIC):
        raise ValueError("bad magic")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    (n_cfg,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    cfg = ModelConfig.from_dict(json.loads(buf[pos : pos + n_cfg].decode()))
    pos += n_cfg
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * size
        tensors.append(data)
    if pos != len(buf):
        raise ValueError("trailing bytes")
    names = list(parameter_shapes(cfg))
    if len(tensors) != len(names) + 2:
        raise ValueError(f"expected {len(names) + 2} tensors, found {len(tensors)}")
    params = dict(zip(names, tensors[: len(names)]))
    return Model(cfg, params, tensors[-2], tensors[-1])


def predict_windows(m: Model, windows, horizon=None, batch_size: int = 256) -> np.ndarray:
    """Eval-mode forecasts for a stack of windows, ``(N, seq_len, d) -> (N, horizon, d)``."""
    chunks = [m.forward(windows[i : i + batch_size], horizon, "eval")[0] for i in range(0, len(windows), batch_size)]
    return np.concatenate(chunks, axis=0)
