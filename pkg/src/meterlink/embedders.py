"""Weekly-record embedders: MLP, LSTM, GRU, CNN-LSTM, TCN and Transformer.

Every model maps a batch of unit-scaled weekly grids ``(B, 168, F)`` to
``(B, n_out)`` vectors. Apart from the MLP, the models read the week as seven
daily rows of ``24 * F`` values (see :func:`to_daily_sequence`).

Parameters live in :class:`EmbedderParams` as plain float64 arrays; the
forward functions accept them wrapped as tensors so the same code serves
training (recorded on a tape) and evaluation (plain numpy).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import HOUR, Dataset, MeterRecord, ScalingStats, unit_scale_array
from .numkit import tensor as T
from .numkit.checkpoint import content_id, load_checkpoint, save_checkpoint
from .numkit.layers import BatchNormState, batchnorm1d, l2_normalize, layer_norm, linear
from .numkit.tensor import Tensor, as_tensor

KINDS = ("mlp", "lstm", "gru", "cnn_lstm", "tcn", "transformer")
DAYS = 7
SLOTS_PER_DAY = 24
N_OUT = 32

# depth search ranges per architecture
LAYER_RANGES = {
    "mlp": (3,),
    "lstm": (2, 3),
    "gru": (2, 3),
    "cnn_lstm": (1, 2),
    "tcn": (1,),
    "transformer": (2, 3),
}

TRANSFORMER_IN = 128
TRANSFORMER_DIM = 64
TRANSFORMER_HEADS = 4
TRANSFORMER_FF = 128
CNN_CHANNELS = (16, 32)
CNN_KERNELS = (3, 4)
POOL = 2


@dataclass(frozen=True)
class EmbedderConfig:
    kind: str
    L: int | None = None
    n_out: int = N_OUT
    normalize: bool | None = None
    F: int = 1
    positional_encoding: bool = True
    mlp_hidden: tuple = (128, 64)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown embedder kind {self.kind!r}; expected one of {KINDS}")
        if self.L is None:
            object.__setattr__(self, "L", LAYER_RANGES[self.kind][0])
        if self.normalize is None:
            object.__setattr__(self, "normalize", self.kind != "transformer")
        if self.L not in LAYER_RANGES[self.kind]:
            raise ValueError(f"L={self.L} outside the range {LAYER_RANGES[self.kind]} for {self.kind}")
        if self.n_out != N_OUT:
            raise ValueError(f"n_out must be {N_OUT}")
        if self.F < 1:
            raise ValueError("F must be positive")
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))

    @property
    def day_width(self) -> int:
        return SLOTS_PER_DAY * self.F

    def header(self) -> dict:
        return {
            "kind": self.kind,
            "L": self.L,
            "n_out": self.n_out,
            "normalize": self.normalize,
            "F": self.F,
            "positional_encoding": self.positional_encoding,
            "mlp_hidden": list(self.mlp_hidden),
        }

    @classmethod
    def from_header(cls, h: dict) -> "EmbedderConfig":
        return cls(h["kind"], h["L"], h["n_out"], h["normalize"], h["F"], h["positional_encoding"],
                   tuple(h.get("mlp_hidden", (128, 64))))


@dataclass
class EmbedderParams:
    """Named parameter arrays plus batchnorm running statistics."""

    config: EmbedderConfig
    arrays: dict[str, np.ndarray]
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    @property
    def param_count(self) -> int:
        return param_count(self)

    def copy(self) -> "EmbedderParams":
        return EmbedderParams(
            self.config,
            {k: v.copy() for k, v in self.arrays.items()},
            {k: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum, s.eps)
             for k, s in self.bn.items()},
        )

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        """Tensor views sharing memory with ``arrays`` (optimizer updates are visible)."""
        return {k: _view(v, requires_grad) for k, v in self.arrays.items()}

    def flat_arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.arrays)
        for k, s in self.bn.items():
            out[f"{k}.running_mean"] = s.running_mean
            out[f"{k}.running_var"] = s.running_var
        return out


def _view(a: np.ndarray, requires_grad: bool) -> Tensor:
    t = Tensor(a, requires_grad=requires_grad)
    t.data = a
    return t


def param_count(params: EmbedderParams) -> int:
    return int(sum(a.size for a in params.arrays.values()))


# --------------------------------------------------------------------------
# Input shaping


def to_daily_sequence(rec) -> np.ndarray:
    """Day rows of a weekly grid.

    Accepts a :class:`MeterRecord`, a ``(168, F)`` grid or a batch
    ``(B, 168, F)``. Row ``d`` holds the 24 hourly values of day ``d`` for
    utility 0, then the 24 values for utility 1, and so on.
    """
    if isinstance(rec, MeterRecord):
        if rec.delta_t != HOUR:
            raise ValueError("daily sequences need hourly records")
        rec = rec.values
    v = np.asarray(rec, dtype=np.float64)
    single = v.ndim == 2
    if single:
        v = v[None]
    if v.ndim != 3 or v.shape[1] != DAYS * SLOTS_PER_DAY:
        raise ValueError(f"expected weekly grids with T=168, got shape {np.shape(rec)}")
    B, _, F = v.shape
    out = v.reshape(B, DAYS, SLOTS_PER_DAY, F).transpose(0, 1, 3, 2).reshape(B, DAYS, SLOTS_PER_DAY * F)
    return out[0] if single else out


def from_daily_sequence(x: np.ndarray, F: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    B = x.shape[0]
    out = x.reshape(B, DAYS, F, SLOTS_PER_DAY).transpose(0, 1, 3, 2).reshape(B, DAYS * SLOTS_PER_DAY, F)
    return out[0] if single else out


# --------------------------------------------------------------------------
# Initialization


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


def _init_linear(P, rng, name, n_in, n_out):
    b = 1 / np.sqrt(n_in)
    P[f"{name}.W"] = _uniform(rng, b, (n_in, n_out))
    P[f"{name}.b"] = _uniform(rng, b, (n_out,))


def _init_rnn(P, rng, name, cell, n_in, H, L):
    gates = 4 if cell == "lstm" else 3
    b = 1 / np.sqrt(H)
    for layer in range(L):
        d_in = n_in if layer == 0 else H
        P[f"{name}.{layer}.W_ih"] = _uniform(rng, b, (d_in, gates * H))
        P[f"{name}.{layer}.W_hh"] = _uniform(rng, b, (H, gates * H))
        P[f"{name}.{layer}.b_ih"] = _uniform(rng, b, (gates * H,))
        P[f"{name}.{layer}.b_hh"] = _uniform(rng, b, (gates * H,))


def _init_conv(P, rng, name, c_in, c_out, k):
    b = 1 / np.sqrt(c_in * k)
    P[f"{name}.w"] = _uniform(rng, b, (c_out, c_in, k))
    P[f"{name}.b"] = _uniform(rng, b, (c_out,))


def _cnn_lengths(n_in: int) -> list[int]:
    lengths = [n_in]
    n = n_in
    for k in CNN_KERNELS:
        n = n - k + 1
        lengths.append(n)
        n //= POOL
        lengths.append(n)
    return lengths


def _cnn_stage_input(cfg: EmbedderConfig, stage: int) -> tuple[int, int]:
    """(channels, length) of the per-day map entering CNN stage ``stage``."""
    if stage == 0:
        return cfg.F, SLOTS_PER_DAY
    return 1, cfg.n_out


def init_params(cfg: EmbedderConfig, seed: int = 0) -> EmbedderParams:
    rng = np.random.default_rng(seed)
    P: dict[str, np.ndarray] = {}
    bn: dict[str, BatchNormState] = {}
    H = cfg.n_out
    if cfg.kind == "mlp":
        widths = (DAYS * SLOTS_PER_DAY * cfg.F,) + cfg.mlp_hidden + (cfg.n_out,)
        for i in range(len(widths) - 1):
            _init_linear(P, rng, f"mlp.{i}", widths[i], widths[i + 1])
    elif cfg.kind in ("lstm", "gru"):
        _init_rnn(P, rng, cfg.kind, cfg.kind, cfg.day_width, H, cfg.L)
    elif cfg.kind == "cnn_lstm":
        for s in range(cfg.L):
            c_in, n = _cnn_stage_input(cfg, s)
            lengths = _cnn_lengths(n)
            if lengths[-1] < 1:
                raise ValueError("per-day map too short for the CNN stage")
            chans = (c_in,) + CNN_CHANNELS
            for j, k in enumerate(CNN_KERNELS):
                _init_conv(P, rng, f"cnn.{s}.conv{j}", chans[j], chans[j + 1], k)
                P[f"cnn.{s}.bn{j}.gamma"] = np.ones(chans[j + 1])
                P[f"cnn.{s}.bn{j}.beta"] = np.zeros(chans[j + 1])
                bn[f"cnn.{s}.bn{j}"] = BatchNormState.fresh(chans[j + 1])
            _init_rnn(P, rng, f"cnn.{s}.lstm", "lstm", CNN_CHANNELS[-1] * lengths[-1], H, 1)
    elif cfg.kind == "tcn":
        C = cfg.day_width
        for j, c_in in enumerate((C, H)):
            v = rng.normal(0.0, 0.01, size=(H, c_in, DAYS))
            P[f"tcn.conv{j}.v"] = v
            P[f"tcn.conv{j}.g"] = np.sqrt((v**2).sum(axis=(1, 2)))
            P[f"tcn.conv{j}.b"] = _uniform(rng, 1 / np.sqrt(c_in * DAYS), (H,))
        P["tcn.down.w"] = rng.normal(0.0, 0.01, size=(H, C, 1))
        P["tcn.down.b"] = _uniform(rng, 1 / np.sqrt(C), (H,))
    elif cfg.kind == "transformer":
        D = TRANSFORMER_DIM
        _init_linear(P, rng, "tr.in", cfg.day_width, TRANSFORMER_IN)
        if cfg.positional_encoding:
            P["tr.pos"] = rng.normal(0.0, 0.02, size=(DAYS, TRANSFORMER_IN))
        _init_linear(P, rng, "tr.proj", TRANSFORMER_IN, D)
        for layer in range(cfg.L):
            for m in ("q", "k", "v", "o"):
                _init_linear(P, rng, f"tr.{layer}.{m}", D, D)
            _init_linear(P, rng, f"tr.{layer}.ff1", D, TRANSFORMER_FF)
            _init_linear(P, rng, f"tr.{layer}.ff2", TRANSFORMER_FF, D)
            for n in ("ln1", "ln2"):
                P[f"tr.{layer}.{n}.gamma"] = np.ones(D)
                P[f"tr.{layer}.{n}.beta"] = np.zeros(D)
        _init_linear(P, rng, "tr.out", D, cfg.n_out)
    return EmbedderParams(cfg, P, bn)


# --------------------------------------------------------------------------
# Cells


def lstm_cell(x, h, c, W_ih, W_hh, b_ih, b_hh):
    """One LSTM step with gate order (input, forget, cell, output)."""
    z = linear(x, W_ih, b_ih) + linear(h, W_hh, b_hh)
    H = h.shape[-1]
    i = T.sigmoid(z[:, 0:H])
    f = T.sigmoid(z[:, H:2 * H])
    g = T.tanh(z[:, 2 * H:3 * H])
    o = T.sigmoid(z[:, 3 * H:4 * H])
    c = f * c + i * g
    return o * T.tanh(c), c


def gru_cell(x, h, W_ih, W_hh, b_ih, b_hh):
    """One GRU step with gate order (reset, update, new)."""
    a = linear(x, W_ih, b_ih)
    b = linear(h, W_hh, b_hh)
    H = h.shape[-1]
    r = T.sigmoid(a[:, 0:H] + b[:, 0:H])
    z = T.sigmoid(a[:, H:2 * H] + b[:, H:2 * H])
    n = T.tanh(a[:, 2 * H:] + r * b[:, 2 * H:])
    return (1 - z) * n + z * h


def _rnn_stack(P, name, cell, xs, L, H):
    """Run ``L`` stacked layers over the list of per-step inputs ``xs``; returns last-layer outputs."""
    B = xs[0].shape[0]
    for layer in range(L):
        p = [P[f"{name}.{layer}.{k}"] for k in ("W_ih", "W_hh", "b_ih", "b_hh")]
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H)))
        ys = []
        for x in xs:
            if cell == "lstm":
                h, c = lstm_cell(x, h, c, *p)
            else:
                h = gru_cell(x, h, *p)
            ys.append(h)
        xs = ys
    return xs


def _sum(ts):
    out = ts[0]
    for t in ts[1:]:
        out = out + t
    return out


# --------------------------------------------------------------------------
# Forward passes on daily sequences (B, 7, 24F)


def _forward_mlp(cfg, P, x, train):
    B = x.shape[0]
    # back to temporal order: slot-major, utility-minor
    h = as_tensor(x).reshape(B, DAYS, cfg.F, SLOTS_PER_DAY).transpose(0, 1, 3, 2).reshape(B, -1)
    n = len(cfg.mlp_hidden) + 1
    for i in range(n):
        h = linear(h, P[f"mlp.{i}.W"], P[f"mlp.{i}.b"])
        if i < n - 1:
            h = T.relu(h)
    return h


def _forward_rnn(cfg, P, x, train):
    x = as_tensor(x)
    xs = [x[:, d, :] for d in range(x.shape[1])]
    return _sum(_rnn_stack(P, cfg.kind, cfg.kind, xs, cfg.L, cfg.n_out))


def cnn_day_features(P, bn, stage: int, maps, train: bool) -> Tensor:
    """Per-day CNN of one stage: ``(n, C, len)`` maps to ``(n, 32 * len_out)`` features."""
    h = maps
    for j in range(len(CNN_KERNELS)):
        h = T.conv1d(h, P[f"cnn.{stage}.conv{j}.w"], P[f"cnn.{stage}.conv{j}.b"])
        h = batchnorm1d(h, P[f"cnn.{stage}.bn{j}.gamma"], P[f"cnn.{stage}.bn{j}.beta"],
                        bn[f"cnn.{stage}.bn{j}"], train)
        h = T.leaky_relu(h, 0.01)
        h = T.maxpool1d(h, POOL)
    return h.reshape(h.shape[0], -1)


def _forward_cnn_lstm(cfg, P, x, train, bn):
    x = as_tensor(x)
    B, D, _ = x.shape
    # (B, D, F*24) -> per-day maps (B*D, F, 24)
    maps = x.reshape(B * D, cfg.F, SLOTS_PER_DAY)
    outs = None
    for s in range(cfg.L):
        feats = cnn_day_features(P, bn, s, maps, train).reshape(B, D, -1)
        outs = _rnn_stack(P, f"cnn.{s}.lstm", "lstm", [feats[:, d, :] for d in range(D)], 1, cfg.n_out)
        # the next stage reads each day's LSTM output as a one-channel map
        maps = T.stack(outs, axis=1).reshape(B * D, 1, cfg.n_out)
    return _sum(outs)


def _weight_norm(v, g):
    norm = T.sqrt(T.tsum(v * v, axis=(1, 2), keepdims=True))
    return v / norm * g.reshape(-1, 1, 1)


def tcn_day_outputs(cfg, P, x) -> Tensor:
    """Per-day outputs ``(B, 32, D)`` of the temporal block; day ``d`` sees days ``<= d`` only."""
    x = as_tensor(x)
    xc = x.transpose(0, 2, 1)  # channels first: (B, 24F, D)
    pad = DAYS - 1
    h = xc
    for j in range(2):
        w = _weight_norm(P[f"tcn.conv{j}.v"], P[f"tcn.conv{j}.g"])
        h = T.relu(T.conv1d(h, w, P[f"tcn.conv{j}.b"], left_pad=pad))
    res = T.conv1d(xc, P["tcn.down.w"], P["tcn.down.b"])
    return T.relu(h + res)


def _forward_tcn(cfg, P, x, train):
    return T.tsum(tcn_day_outputs(cfg, P, x), axis=2)


def attention(x, P, prefix, heads: int = TRANSFORMER_HEADS, return_weights: bool = False):
    """Multi-head scaled dot-product self-attention over the day axis of ``x`` (B, D, E)."""
    B, D, E = x.shape
    dh = E // heads

    def split(t):
        return t.reshape(B, D, heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(x, P[f"{prefix}.q.W"], P[f"{prefix}.q.b"]))
    k = split(linear(x, P[f"{prefix}.k.W"], P[f"{prefix}.k.b"]))
    v = split(linear(x, P[f"{prefix}.v.W"], P[f"{prefix}.v.b"]))
    a = T.softmax((q @ k.transpose(0, 1, 3, 2)) * (1 / np.sqrt(dh)), axis=-1)
    ctx = (a @ v).transpose(0, 2, 1, 3).reshape(B, D, E)
    out = linear(ctx, P[f"{prefix}.o.W"], P[f"{prefix}.o.b"])
    return (out, a) if return_weights else out


def encoder_layer(x, P, prefix):
    """Post-norm encoder layer: attention and feedforward, each with residual and layer norm."""
    x = layer_norm(x + attention(x, P, prefix), P[f"{prefix}.ln1.gamma"], P[f"{prefix}.ln1.beta"])
    ff = linear(T.relu(linear(x, P[f"{prefix}.ff1.W"], P[f"{prefix}.ff1.b"])),
                P[f"{prefix}.ff2.W"], P[f"{prefix}.ff2.b"])
    return layer_norm(x + ff, P[f"{prefix}.ln2.gamma"], P[f"{prefix}.ln2.beta"])


def _forward_transformer(cfg, P, x, train):
    h = linear(as_tensor(x), P["tr.in.W"], P["tr.in.b"])
    if cfg.positional_encoding:
        h = h + P["tr.pos"]
    h = linear(h, P["tr.proj.W"], P["tr.proj.b"])
    for layer in range(cfg.L):
        h = encoder_layer(h, P, f"tr.{layer}")
    return linear(T.tsum(h, axis=1), P["tr.out.W"], P["tr.out.b"])


def forward(params: EmbedderParams, x, train: bool = False, P: dict | None = None) -> Tensor:
    """Embed daily sequences ``x`` (B, 7, 24F).

    ``P`` supplies tensor views of the parameters (trainable ones during
    training); by default constant views are created.
    """
    cfg = params.config
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if xd.ndim != 3 or xd.shape[1:] != (DAYS, cfg.day_width):
        raise ValueError(f"expected daily sequences of shape (B, {DAYS}, {cfg.day_width}), got {xd.shape}")
    if not np.all(np.isfinite(xd)):
        raise ValueError("embedder input contains non-finite values")
    if P is None:
        P = params.tensors()
    if cfg.kind == "mlp":
        y = _forward_mlp(cfg, P, x, train)
    elif cfg.kind in ("lstm", "gru"):
        y = _forward_rnn(cfg, P, x, train)
    elif cfg.kind == "cnn_lstm":
        y = _forward_cnn_lstm(cfg, P, x, train, params.bn)
    elif cfg.kind == "tcn":
        y = _forward_tcn(cfg, P, x, train)
    else:
        y = _forward_transformer(cfg, P, x, train)
    return l2_normalize(y) if cfg.normalize else y


def embed_array(params: EmbedderParams, grids: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Eval-mode embeddings of scaled weekly grids ``(B, 168, F)``."""
    grids = np.asarray(grids, dtype=np.float64)
    if grids.ndim == 2:
        return embed_array(params, grids[None], chunk)[0]
    if grids.shape[2] != params.config.F:
        raise ValueError(f"model expects F={params.config.F}, got {grids.shape[2]}")
    x = to_daily_sequence(grids)
    P = params.tensors()
    parts = [forward(params, x[i:i + chunk], train=False, P=P).data for i in range(0, len(x), chunk)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, params.config.n_out))


def _check_scaled(v: np.ndarray) -> None:
    if not np.all(np.isfinite(v)):
        raise ValueError("record contains non-finite values")
    if v.min() < 0 or v.max() > 1:
        raise ValueError("record is not unit-scaled (values outside [0, 1])")


def _record_grid(rec) -> np.ndarray:
    v = rec.values if isinstance(rec, MeterRecord) else np.asarray(rec, dtype=np.float64)
    _check_scaled(v)
    return v


def _embed_kind(rec, params, kinds) -> np.ndarray:
    if params.config.kind not in kinds:
        raise ValueError(f"parameters are for {params.config.kind!r}, not {kinds}")
    return embed_array(params, _record_grid(rec))


def embed_mlp(rec, params: EmbedderParams) -> np.ndarray:
    return _embed_kind(rec, params, ("mlp",))


def embed_rnn(rec, params: EmbedderParams, cell: str | None = None) -> np.ndarray:
    return _embed_kind(rec, params, (cell,) if cell else ("lstm", "gru"))


def embed_cnn_lstm(rec, params: EmbedderParams) -> np.ndarray:
    return _embed_kind(rec, params, ("cnn_lstm",))


def embed_tcn(rec, params: EmbedderParams) -> np.ndarray:
    return _embed_kind(rec, params, ("tcn",))


def embed_transformer(rec, params: EmbedderParams) -> np.ndarray:
    return _embed_kind(rec, params, ("transformer",))


# --------------------------------------------------------------------------
# Model = parameters + input scaling


@dataclass
class EmbeddingModel:
    """Trained parameters together with the scaling fitted on the training weeks."""

    params: EmbedderParams
    stats: ScalingStats

    @property
    def config(self) -> EmbedderConfig:
        return self.params.config

    def embed(self, ds: Dataset | np.ndarray) -> np.ndarray:
        v = ds.values if isinstance(ds, Dataset) else np.asarray(ds)
        return embed_array(self.params, unit_scale_array(v, self.stats))

    def save(self, path) -> str:
        header, arrays = self._payload()
        save_checkpoint(path, header, arrays)
        return content_id(header, arrays)

    @property
    def checkpoint_id(self) -> str:
        return content_id(*self._payload())

    def _payload(self):
        header = {"architecture": self.config.header(), "bn": sorted(self.params.bn)}
        arrays = dict(self.params.flat_arrays())
        for k, v in self.stats.as_arrays().items():
            arrays[f"scaling.{k}"] = v
        return header, arrays

    @classmethod
    def load(cls, path) -> "EmbeddingModel":
        header, arrays = load_checkpoint(Path(path))
        cfg = EmbedderConfig.from_header(header["architecture"])
        bn = {}
        for k in header["bn"]:
            bn[k] = BatchNormState(arrays.pop(f"{k}.running_mean"), arrays.pop(f"{k}.running_var"))
        stats = ScalingStats(**{k: arrays.pop(f"scaling.{k}") for k in
                                ("util_min", "util_max", "feat_mean", "feat_std")})
        return cls(EmbedderParams(cfg, arrays, bn), stats)
