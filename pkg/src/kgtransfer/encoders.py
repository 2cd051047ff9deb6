"""Path encoders over relational paths: LSTM, RSN and Transformer.

Paths arrive as ``(batch, t)`` integer arrays with entities at even columns
and relations at odd columns. Public position arguments are 1-based, as in
path notation ``(x_1, ..., x_t)``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DataError, NumericError

KINDS = ("lstm", "rsn", "transformer")
LAYER_NORM_EPS = 1e-6
EMBEDDING_NAMES = ("entity_embedding", "relation_embedding")


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "rsn"
    dim: int = 256
    layers: int = 1
    heads: int = 1
    dropout_rate: float = 0.2
    precision: str = "float64"
    max_length: int = 11
    ffn_multiplier: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.dim < 1 or self.layers < 1 or self.heads < 1:
            raise ConfigError("dim, layers and heads must be positive")
        if self.kind == "transformer" and self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)


class ParameterSet(dict):
    """Named parameter arrays. Names are stable across runs and architectures."""

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.items()})

    def encoder_names(self) -> list[str]:
        return [k for k in self if k not in EMBEDDING_NAMES]

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())


class GradientSet(dict):
    pass


@dataclass
class HiddenStates:
    """Encoder outputs of shape ``(batch, t, d)``.

    ``begin`` is the state produced by the begin-of-path step (recurrent
    encoders only); ``attention`` holds per-layer attention weights.
    """

    states: Tensor
    begin: Tensor | None = None
    attention: list = field(default_factory=list)
    kind: str = "lstm"


def xavier_uniform(rng, shape, fan_in, fan_out, dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _rng_for(seed: int, name: str):
    return np.random.default_rng([seed & 0xFFFFFFFF, seed >> 32, zlib.crc32(name.encode())])


def init_parameters(config: EncoderConfig, num_entities: int, num_relations: int,
                    seed: int = 0) -> ParameterSet:
    """Xavier-uniform weights, zero biases, unit layer-norm scales.

    Each parameter draws from its own stream keyed by name, so growing a
    vocabulary appends rows without disturbing existing ones.
    """
    if num_entities < 1 or num_relations < 1:
        raise ConfigError("vocabulary sizes must be positive")
    d, dt = config.dim, config.dtype
    p = ParameterSet()

    def vec_table(name, rows):
        p[name] = xavier_uniform(_rng_for(seed, name), (rows, d), d, d, dt)

    vec_table("entity_embedding", num_entities)
    vec_table("relation_embedding", num_relations)
    if config.kind in ("lstm", "rsn"):
        p["begin"] = xavier_uniform(_rng_for(seed, "begin"), (d,), d, d, dt)
        for layer in range(config.layers):
            pre = f"lstm.{layer}."
            for part in ("input", "recurrent"):
                rng = _rng_for(seed, pre + part)
                # one Xavier block per gate
                p[pre + part] = np.concatenate(
                    [xavier_uniform(rng, (d, d), d, d, dt) for _ in range(4)], axis=1)
            p[pre + "bias"] = np.zeros(4 * d, dtype=dt)
        if config.kind == "rsn":
            p["rsn.W1"] = xavier_uniform(_rng_for(seed, "rsn.W1"), (d, d), d, d, dt)
            p["rsn.W2"] = xavier_uniform(_rng_for(seed, "rsn.W2"), (d, d), d, d, dt)
    else:
        p["mask"] = xavier_uniform(_rng_for(seed, "mask"), (d,), d, d, dt)
        p["position"] = xavier_uniform(_rng_for(seed, "position"), (config.max_length, d),
                                       d, d, dt)
        hidden = config.ffn_multiplier * d
        for layer in range(config.layers):
            pre = f"transformer.{layer}."
            for part in ("query", "key", "value", "output"):
                p[pre + part] = xavier_uniform(_rng_for(seed, pre + part), (d, d), d, d, dt)
            p[pre + "ffn.in"] = xavier_uniform(_rng_for(seed, pre + "ffn.in"), (d, hidden),
                                               d, hidden, dt)
            p[pre + "ffn.in_bias"] = np.zeros(hidden, dtype=dt)
            p[pre + "ffn.out"] = xavier_uniform(_rng_for(seed, pre + "ffn.out"), (hidden, d),
                                                hidden, d, dt)
            p[pre + "ffn.out_bias"] = np.zeros(d, dtype=dt)
            for norm in ("norm1", "norm2"):
                p[pre + norm + ".scale"] = np.ones(d, dtype=dt)
                p[pre + norm + ".shift"] = np.zeros(d, dtype=dt)
    return p


def bind(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    """Wrap parameter arrays as graph leaves."""
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def _weights(params) -> dict[str, Tensor]:
    if params and isinstance(next(iter(params.values())), Tensor):
        return params
    return bind(params, requires_grad=False)


def _check_paths(weights, paths) -> np.ndarray:
    paths = np.asarray(paths)
    if paths.ndim == 1:
        paths = paths[None, :]
    if paths.shape[1] < 1:
        raise DataError("empty path")
    n_ent = weights["entity_embedding"].shape[0]
    n_rel = weights["relation_embedding"].shape[0]
    ent, rel = paths[:, 0::2], paths[:, 1::2]
    if ent.size and (ent.min() < 0 or ent.max() >= n_ent):
        raise DataError("entity index outside the vocabulary")
    if rel.size and (rel.min() < 0 or rel.max() >= n_rel):
        raise DataError("relation index outside the vocabulary")
    return paths


def _interleave(even: Tensor, odd: Tensor, t: int) -> Tensor:
    """Merge ``(B, ceil(t/2), d)`` and ``(B, floor(t/2), d)`` into ``(B, t, d)``."""
    n_even = even.shape[1]
    order = np.empty(t, dtype=np.int64)
    order[0::2] = np.arange(n_even)
    order[1::2] = n_even + np.arange(t // 2)
    joined = ag.concat([even, odd], axis=1) if t > 1 else even
    return joined[:, order]


def embed(weights, paths) -> Tensor:
    """Input embeddings ``x^0`` of every path element, shape ``(B, t, d)``."""
    ent = ag.take(weights["entity_embedding"], paths[:, 0::2])
    if paths.shape[1] == 1:
        return ent
    rel = ag.take(weights["relation_embedding"], paths[:, 1::2])
    return _interleave(ent, rel, paths.shape[1])


def dropout(x: Tensor, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout; the identity outside training."""
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return x * keep


def _lstm_layer(weights, layer: int, inputs: Tensor, d: int) -> Tensor:
    pre = f"lstm.{layer}."
    w_in, w_rec, bias = weights[pre + "input"], weights[pre + "recurrent"], weights[pre + "bias"]
    batch, steps = inputs.shape[0], inputs.shape[1]
    projected = inputs @ w_in + bias
    zeros = np.zeros((batch, d), dtype=inputs.data.dtype)
    h, c = ag.as_tensor(zeros), ag.as_tensor(zeros)
    outputs = []
    for j in range(steps):
        z = projected[:, j] + h @ w_rec
        i_gate = z[:, 0:d].sigmoid()
        f_gate = z[:, d:2 * d].sigmoid()
        o_gate = z[:, 2 * d:3 * d].sigmoid()
        candidate = z[:, 3 * d:].tanh()
        c = f_gate * c + i_gate * candidate
        h = o_gate * c.tanh()
        outputs.append(h)
    return ag.stack(outputs, axis=1)


def _recurrent(params, paths, config: EncoderConfig, training=False, rng=None):
    weights = _weights(params)
    paths = _check_paths(weights, paths)
    d = weights["entity_embedding"].shape[1]
    layers = sum(1 for k in weights if k.startswith("lstm.") and k.endswith(".input"))
    x0 = embed(weights, paths)
    batch = paths.shape[0]
    begin = weights["begin"].reshape(1, 1, d) + np.zeros((batch, 1, d), dtype=x0.data.dtype)
    seq = ag.concat([begin, x0], axis=1)
    for layer in range(layers):
        seq = dropout(seq, config.dropout_rate, rng, training)
        seq = _lstm_layer(weights, layer, seq, d)
    return weights, paths, x0, seq


def forward_lstm(params, paths, config: EncoderConfig, training: bool = False,
                 rng=None) -> HiddenStates:
    """Stacked LSTM; the begin-of-path embedding is fed first to produce ``h_0``."""
    _, _, _, seq = _recurrent(params, paths, config, training, rng)
    return HiddenStates(seq[:, 1:], seq[:, 0], kind="lstm")


def forward_rsn(params, paths, config: EncoderConfig, training: bool = False,
                rng=None) -> HiddenStates:
    """LSTM states with a skip from the preceding entity at relation positions.

    At a relation position the output is ``W1 h_t + W2 x_{t-1}``; entity
    positions keep the LSTM state.
    """
    weights, paths, x0, seq = _recurrent(params, paths, config, training, rng)
    t = paths.shape[1]
    states = seq[:, 1:]
    if t == 1:
        return HiddenStates(states, seq[:, 0], kind="rsn")
    at_entities = states[:, 0::2]
    at_relations = states[:, 1::2]
    subjects = x0[:, 0:t - 1:2]
    skipped = at_relations @ weights["rsn.W1"].T + subjects @ weights["rsn.W2"].T
    return HiddenStates(_interleave(at_entities, skipped, t), seq[:, 0], kind="rsn")


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (var + eps) ** -0.5 * scale + shift


def self_attention(x: Tensor, weights, layer: int, heads: int):
    """Multi-head scaled dot-product attention within each path.

    Returns the projected output ``(B, t, d)`` and weights ``(B, heads, t, t)``.
    """
    pre = f"transformer.{layer}."
    batch, t, d = x.shape
    dh = d // heads

    def split(m):
        return m.reshape(batch, t, heads, dh).transpose(0, 2, 1, 3)

    q = split(x @ weights[pre + "query"])
    k = split(x @ weights[pre + "key"])
    v = split(x @ weights[pre + "value"])
    attn = (q @ k.swapaxes(-1, -2) * (1.0 / np.sqrt(dh))).softmax(axis=-1)
    mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(batch, t, d)
    return mixed @ weights[pre + "output"], attn


def forward_transformer(params, paths, config: EncoderConfig, masked_position,
                        training: bool = False, rng=None) -> HiddenStates:
    """Post-norm transformer over paths with one masked element per row.

    ``masked_position`` is a 1-based position, scalar or one per row. The
    masked element's input is replaced by the mask embedding; positions use
    learned absolute embeddings.
    """
    weights = _weights(params)
    paths = _check_paths(weights, paths)
    batch, t = paths.shape
    pos = np.broadcast_to(np.asarray(masked_position), (batch,))
    if pos.min() < 1 or pos.max() > t:
        raise DataError(f"masked position outside 1..{t}")
    if t > weights["position"].shape[0]:
        raise DataError(f"path length {t} exceeds max_length {weights['position'].shape[0]}")
    d = weights["entity_embedding"].shape[1]
    x0 = embed(weights, paths)
    is_masked = (np.arange(1, t + 1)[None, :] == pos[:, None])[:, :, None]
    x = ag.where(is_masked, weights["mask"].reshape(1, 1, d), x0)
    x = x + weights["position"][:t]
    x = dropout(x, config.dropout_rate, rng, training)
    layers = sum(1 for k in weights if k.startswith("transformer.") and k.endswith(".query"))
    attentions = []
    for layer in range(layers):
        pre = f"transformer.{layer}."
        attended, attn = self_attention(x, weights, layer, config.heads)
        attentions.append(attn.data)
        x = layer_norm(x + dropout(attended, config.dropout_rate, rng, training),
                       weights[pre + "norm1.scale"], weights[pre + "norm1.shift"])
        hidden = (x @ weights[pre + "ffn.in"] + weights[pre + "ffn.in_bias"]).relu()
        ff = hidden @ weights[pre + "ffn.out"] + weights[pre + "ffn.out_bias"]
        x = layer_norm(x + dropout(ff, config.dropout_rate, rng, training),
                       weights[pre + "norm2.scale"], weights[pre + "norm2.shift"])
    return HiddenStates(x, None, attentions, kind="transformer")


def forward(params, paths, config: EncoderConfig, masked_position=None, training=False,
            rng=None) -> HiddenStates:
    if config.kind == "lstm":
        return forward_lstm(params, paths, config, training, rng)
    if config.kind == "rsn":
        return forward_rsn(params, paths, config, training, rng)
    return forward_transformer(params, paths, config, masked_position, training, rng)


def context_representation(hiddens: HiddenStates, position) -> Tensor:
    """Context vector used to predict the element at 1-based ``position``.

    Recurrent encoders use the state just before ``position`` (the
    begin-of-path state for position 1). The transformer uses its output at
    the masked position, which must be the position the states were
    computed with.
    """
    states = hiddens.states
    batch = states.shape[0]
    pos = np.broadcast_to(np.asarray(position), (batch,)).astype(np.int64)
    if hiddens.kind == "transformer":
        return states[np.arange(batch), pos - 1]
    if pos.min() < 1:
        raise DataError("positions are 1-based")
    if np.all(pos == 1):
        return hiddens.begin
    full = ag.concat([hiddens.begin.reshape(batch, 1, -1), states], axis=1)
    return full[np.arange(batch), pos - 1]


def all_contexts(params, paths, config: EncoderConfig, training=False, rng=None) -> Tensor:
    """Context for every position of every path, shape ``(B, t, d)``.

    The transformer needs one masked forward per position; those run as a
    single enlarged batch.
    """
    paths = np.asarray(paths)
    batch, t = paths.shape
    if config.kind != "transformer":
        h = forward(params, paths, config, training=training, rng=rng)
        return ag.concat([h.begin.reshape(batch, 1, -1), h.states[:, :-1]], axis=1)
    tiled = np.tile(paths, (t, 1))
    pos = np.repeat(np.arange(1, t + 1), batch)
    h = forward_transformer(params, tiled, config, pos, training, rng)
    picked = h.states[np.arange(batch * t), pos - 1]
    return picked.reshape(t, batch, -1).transpose(1, 0, 2)


def query_contexts(params, heads, relations, config: EncoderConfig) -> np.ndarray:
    """Contexts for link queries ``(s, r, ?)`` as a plain array ``(Q, d)``."""
    heads = np.asarray(heads)
    paths = np.stack([heads, np.asarray(relations), heads], axis=1)
    if config.kind == "transformer":
        h = forward_transformer(params, paths, config, 3)
        return h.states.data[:, 2]
    h = forward(params, paths, config)
    return h.states.data[:, 1]


def compute_gradients(loss: Tensor, bound: Mapping[str, Tensor]) -> GradientSet:
    """Reverse-mode gradients of ``loss`` for every bound parameter.

    Parameters the loss does not touch get zero arrays.
    """
    if loss.data.size != 1:
        raise NumericError("loss must be a scalar")
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite loss {float(loss.data)}")
    for t in bound.values():
        t.grad = None
    ag.backward(loss)
    grads = GradientSet()
    for name, t in bound.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        grads[name] = np.ascontiguousarray(g)
    return grads
