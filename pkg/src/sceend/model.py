"""Transformer encoder with a speaker-wise conditional LSTM decoder.

The encoder maps a feature matrix ``X`` (F x T) to embeddings ``E`` (D x T).
The decoder is called once per speaker: it stacks ``E`` on top of a projected
copy of the previous speaker's activity, advances an LSTM whose recurrence
runs over the speaker index (one independent state per frame), and emits a
posterior row ``z_s`` in (0, 1)^T.  A fixed-size sigmoid head on top of the
same encoder provides the conventional EEND baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator, Mapping

import numpy as np

from . import numcore as nc
from .numcore import Matrix, Node, ShapeError, Tape


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 16
    hidden_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 2
    ffn_dim: int = 256
    max_speakers: int = 4
    dropout: float = 0.1
    threshold: float = 0.5
    eend_speakers: int = 4

    def validate(self) -> ModelConfig:
        if min(self.feat_dim, self.hidden_dim, self.ffn_dim, self.num_heads) < 1:
            raise ConfigError(f"dimensions must be positive: {self}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.max_speakers < 1:
            raise ConfigError("max_speakers must be >= 1")
        if self.eend_speakers < 0:
            raise ConfigError("eend_speakers must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        return self

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping[str, object]) -> ModelConfig:
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = float(d[f.name]) if f.type == "float" else int(d[f.name])
        return cls(**kw).validate()


PROFILES: dict[str, ModelConfig] = {
    "desk": ModelConfig(),
    "2spk": ModelConfig(hidden_dim=256, num_blocks=4, num_heads=4, ffn_dim=1024,
                        max_speakers=2, eend_speakers=2),
    "vspk": ModelConfig(hidden_dim=384, num_blocks=4, num_heads=6, ffn_dim=1024,
                        max_speakers=4, eend_speakers=4),
}


@dataclass
class FeatureSequence:
    frames: Matrix  # F x T
    frame_shift: float = 0.1

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] < 1:
            raise ShapeError(f"features must be F x T with T >= 1, got {self.frames.shape}")

    @property
    def F(self) -> int:
        return self.frames.shape[0]

    @property
    def T(self) -> int:
        return self.frames.shape[1]


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, Matrix]

    def __getitem__(self, name: str) -> Matrix:
        return self.arrays[name]

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


class BoundParams:
    """Parameter nodes for one forward pass (tracked or constant)."""

    def __init__(self, config: ModelConfig, nodes: Mapping[str, Node]):
        self.config = config
        self.nodes = nodes

    def __getitem__(self, name: str) -> Node:
        return self.nodes[name]

    def detached(self) -> BoundParams:
        return BoundParams(self.config, {k: nc.constant(v) for k, v in self.nodes.items()})


def bind(params: ModelParams | BoundParams, tape: Tape | None = None) -> BoundParams:
    if isinstance(params, BoundParams):
        return params
    if tape is None:
        return BoundParams(params.config, {k: nc.constant(v) for k, v in params.arrays.items()})
    return BoundParams(params.config, {k: tape.param(k, v) for k, v in params.arrays.items()})


def _shapes(cfg: ModelConfig) -> Iterator[tuple[str, tuple[int, int], str]]:
    """(name, shape, init kind) for every array, in a fixed order."""
    D, F, H = cfg.hidden_dim, cfg.feat_dim, cfg.ffn_dim
    yield "in.w", (D, F), "glorot"
    yield "in.b", (D, 1), "zeros"
    for i in range(cfg.num_blocks):
        p = f"enc{i}."
        yield p + "ln1.g", (D, 1), "ones"
        yield p + "ln1.b", (D, 1), "zeros"
        for w in ("wq", "wk", "wv", "wo"):
            yield p + w, (D, D), "glorot"
            yield p + "b" + w[1], (D, 1), "zeros"
        yield p + "ln2.g", (D, 1), "ones"
        yield p + "ln2.b", (D, 1), "zeros"
        yield p + "ff1.w", (H, D), "glorot"
        yield p + "ff1.b", (H, 1), "zeros"
        yield p + "ff2.w", (D, H), "glorot"
        yield p + "ff2.b", (D, 1), "zeros"
    yield "enc.ln.g", (D, 1), "ones"
    yield "enc.ln.b", (D, 1), "zeros"
    yield "cond.w", (D, 1), "glorot"
    yield "cond.b", (D, 1), "zeros"
    yield "lstm.wx", (4 * D, 2 * D), "glorot"
    yield "lstm.wh", (4 * D, D), "glorot"
    yield "lstm.b", (4 * D, 1), "zeros"
    yield "out.w", (1, D), "glorot"
    yield "out.b", (1, 1), "zeros"
    if cfg.eend_speakers:
        yield "head.w", (cfg.eend_speakers, D), "glorot"
        yield "head.b", (cfg.eend_speakers, 1), "zeros"


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    return {name: shape for name, shape, _ in _shapes(cfg)}


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit norm gains; pure in ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, (r, c), kind in _shapes(config):
        if kind == "glorot":
            limit = np.sqrt(6.0 / (r + c))
            arrays[name] = rng.uniform(-limit, limit, size=(r, c))
        elif kind == "ones":
            arrays[name] = np.ones((r, c))
        else:
            arrays[name] = np.zeros((r, c))
    return ModelParams(config, arrays)


def _frames(x) -> Matrix:
    return x.frames if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float64)


def _affine(p: BoundParams, w: str, b: str, x) -> Node:
    return nc.add(nc.matmul(p[w], x), p[b])


# ------------------------------------------------------------------- encoder


def self_attention(p: BoundParams, prefix: str, h: Node, probe: list | None = None) -> Node:
    cfg = p.config
    D, heads = cfg.hidden_dim, cfg.num_heads
    dk = D // heads
    q = _affine(p, prefix + "wq", prefix + "bq", h)
    k = _affine(p, prefix + "wk", prefix + "bk", h)
    v = _affine(p, prefix + "wv", prefix + "bv", h)
    outs = []
    for j in range(heads):
        lo, hi = j * dk, (j + 1) * dk
        qh, kh, vh = nc.rows(q, lo, hi), nc.rows(k, lo, hi), nc.rows(v, lo, hi)
        # scores[key, query]; softmax over keys, so every query column sums to 1
        scores = nc.scale(nc.matmul(nc.transpose(kh), qh), 1.0 / np.sqrt(dk))
        att = nc.softmax_cols(scores)
        if probe is not None:
            probe.append(att.value)
        outs.append(nc.matmul(vh, att))
    cat = outs[0] if heads == 1 else nc.concat_vertical(*outs)
    return _affine(p, prefix + "wo", prefix + "bo", cat)


def encoder_block(p: BoundParams, index: int, e: Node, rng: np.random.Generator | None = None,
                  probe: list | None = None) -> Node:
    """Pre-norm block: ``e + Attn(LN(e))`` followed by ``+ FFN(LN(.))``."""
    pre = f"enc{index}."
    rate = p.config.dropout
    h = nc.layer_norm(e, p[pre + "ln1.g"], p[pre + "ln1.b"])
    e = nc.add(e, nc.dropout(self_attention(p, pre, h, probe), rate, rng))
    h = nc.layer_norm(e, p[pre + "ln2.g"], p[pre + "ln2.b"])
    h = nc.relu(_affine(p, pre + "ff1.w", pre + "ff1.b", h))
    h = _affine(p, pre + "ff2.w", pre + "ff2.b", nc.dropout(h, rate, rng))
    return nc.add(e, nc.dropout(h, rate, rng))


def encode(params: ModelParams | BoundParams, x, rng: np.random.Generator | None = None) -> Node:
    """Embeddings ``E_P`` (D x T).  Dropout is active only when ``rng`` is given."""
    p = bind(params)
    frames = _frames(x)
    if frames.ndim != 2 or frames.shape[0] != p.config.feat_dim:
        raise ShapeError(f"expected {p.config.feat_dim} x T features, got {frames.shape}")
    e = _affine(p, "in.w", "in.b", frames)
    for i in range(p.config.num_blocks):
        e = encoder_block(p, i, e, rng)
    return nc.layer_norm(e, p["enc.ln.g"], p["enc.ln.b"])


# ------------------------------------------------------------------- decoder


@dataclass(frozen=True)
class DecoderState:
    hidden: Node  # D x T
    cell: Node  # D x T

    @classmethod
    def zeros(cls, D: int, T: int) -> DecoderState:
        return cls(nc.constant(np.zeros((D, T))), nc.constant(np.zeros((D, T))))

    def to_arrays(self) -> dict[str, Matrix]:
        return {"hidden": self.hidden.value.copy(), "cell": self.cell.value.copy()}

    @classmethod
    def from_arrays(cls, d: Mapping[str, Matrix]) -> DecoderState:
        return cls(nc.constant(np.array(d["hidden"])), nc.constant(np.array(d["cell"])))


def condition_input(p: BoundParams, e_p: Node, y_prev) -> Node:
    """``E'_s``: encoder output stacked over the projected previous activity (2D x T)."""
    y = np.asarray(y_prev.value if isinstance(y_prev, Node) else y_prev, dtype=np.float64)
    y = y.reshape(1, -1)
    if y.shape[1] != e_p.shape[1]:
        raise ShapeError(f"condition has {y.shape[1]} frames, embeddings have {e_p.shape[1]}")
    cond = nc.add(nc.matmul(p["cond.w"], y), p["cond.b"])
    return nc.concat_vertical(e_p, cond)


def decode_step(params: ModelParams | BoundParams, e_p: Node, y_prev,
                state: DecoderState) -> tuple[Node, DecoderState]:
    """One speaker iteration: returns the posterior row (1 x T) and the next state."""
    p = bind(params)
    D = p.config.hidden_dim
    e_p = nc.as_node(e_p)
    if e_p.shape[0] != D or state.hidden.shape != e_p.shape or state.cell.shape != e_p.shape:
        raise ShapeError(
            f"decode_step: embeddings {e_p.shape}, state {state.hidden.shape}/{state.cell.shape}")
    x = condition_input(p, e_p, y_prev)
    gates = nc.add(nc.add(nc.matmul(p["lstm.wx"], x), nc.matmul(p["lstm.wh"], state.hidden)),
                   p["lstm.b"])
    i = nc.sigmoid(nc.rows(gates, 0, D))
    f = nc.sigmoid(nc.rows(gates, D, 2 * D))
    g = nc.tanh(nc.rows(gates, 2 * D, 3 * D))
    o = nc.sigmoid(nc.rows(gates, 3 * D, 4 * D))
    cell = nc.add(nc.mul(f, state.cell), nc.mul(i, g))
    hidden = nc.mul(o, nc.tanh(cell))
    z = nc.sigmoid(_affine(p, "out.w", "out.b", hidden))
    return z, DecoderState(hidden, cell)


def eend_forward(params: ModelParams | BoundParams, x, s_fixed: int,
                 rng: np.random.Generator | None = None) -> Node:
    """Baseline posteriors (s_fixed x T) from a fixed-size sigmoid head."""
    p = bind(params)
    if p.config.eend_speakers == 0 or p.config.eend_speakers != s_fixed:
        raise ConfigError(
            f"baseline head has {p.config.eend_speakers} outputs, {s_fixed} requested")
    return nc.sigmoid(_affine(p, "head.w", "head.b", encode(p, x, rng)))
