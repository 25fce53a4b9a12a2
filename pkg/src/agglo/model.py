"""Weight-shared transformer decoder for next-token prediction.

One block (pre-norm self-attention and feed-forward sublayers, each with a
residual connection) is applied ``n_blocks`` times with the same parameters.
Sequences are encoded either with a learned absolute position embedding or
with a causal convolution over the token embeddings.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import attention as A
from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor

ATTENTION_KINDS = ("full", "agglomerative")
ENCODING_KINDS = ("embedding", "convolution")
EMBED_INIT_LIMIT = 0.05
OUTPUT_INIT_LIMIT = 0.01


@dataclass(frozen=True)
class ModelConfig:
    attention_kind: str = "agglomerative"
    encoding_kind: str = "convolution"
    n_blocks: int = 5
    seq_len: int = 128
    d_model: int = 64
    heads_or_classes: int = 8
    vocab_size: int = 27
    ffn_multiplier: int = 4
    conv_width: int = 8

    def __post_init__(self):
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError("attention_kind", f"must be one of {ATTENTION_KINDS}, got {self.attention_kind!r}")
        if self.encoding_kind not in ENCODING_KINDS:
            raise ConfigError("encoding_kind", f"must be one of {ENCODING_KINDS}, got {self.encoding_kind!r}")
        for f in fields(self):
            if f.type == "int" or f.type is int:
                v = getattr(self, f.name)
                if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                    raise ConfigError(f.name, f"must be an integer, got {v!r}")
        if self.n_blocks < 0:
            raise ConfigError("n_blocks", "must be >= 0")
        for name in ("seq_len", "d_model", "heads_or_classes", "ffn_multiplier", "conv_width"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size", "must be >= 2")
        if self.d_model % self.heads_or_classes:
            raise ConfigError(
                "heads_or_classes",
                f"d_model={self.d_model} is not divisible by heads_or_classes={self.heads_or_classes}",
            )

    def to_dict(self) -> dict:
        return asdict(self)


def count_params(config: ModelConfig) -> int:
    """Exact number of trainable scalars for ``config``."""
    d, v = config.d_model, config.vocab_size
    m = config.heads_or_classes
    hidden = config.ffn_multiplier * d
    total = v * d  # token embedding
    if config.encoding_kind == "embedding":
        total += config.seq_len * d
    else:
        total += config.conv_width * d * d + d
    if config.attention_kind == "full":
        attn = 4 * d * d
    else:
        attn = 2 * (d * m + m) + d * d + d * d  # two classifiers, P (m blocks of d x d/m), Q
    ffn = d * hidden + hidden + hidden * d + d
    layer_norms = 2 * 2 * d
    total += attn + ffn + layer_norms
    total += d * v + v  # logit projection
    return total


def _uniform(rng, shape, limit, dtype):
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class DecoderModel:
    """Parameters of a decoder plus the fixed order used for checkpoints.

    ``params`` maps names to leaf tensors; the attention parameter object and
    the block's other tensors reference the same leaves, so every depth
    application reads one shared set of weights.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise DimensionError(f"parameter names {list(params)} differ from {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params
        c = config
        if c.attention_kind == "full":
            self.attention = A.FullAttentionParams(
                W_k=params["block.attn.W_k"], W_q=params["block.attn.W_q"],
                W_v=params["block.attn.W_v"], W_o=params["block.attn.W_o"],
                h=c.heads_or_classes,
            )
        else:
            self.attention = A.AggloAttentionParams(
                W_ref=params["block.attn.W_ref"], b_ref=params["block.attn.b_ref"],
                W_query=params["block.attn.W_query"], b_query=params["block.attn.b_query"],
                P=params["block.attn.P"], Q=params["block.attn.Q"],
            )

    @property
    def dtype(self):
        return self.params["token_embedding"].dtype

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "DecoderModel":
        rng = np.random.default_rng(seed)
        d, v = config.d_model, config.vocab_size
        hidden = config.ffn_multiplier * d
        p: dict[str, np.ndarray] = {}
        p["token_embedding"] = _uniform(rng, (v, d), EMBED_INIT_LIMIT, dtype)
        if config.encoding_kind == "embedding":
            p["position_embedding"] = _uniform(rng, (config.seq_len, d), EMBED_INIT_LIMIT, dtype)
        else:
            w = config.conv_width
            p["conv.kernel"] = A.glorot_uniform(rng, (w, d, d), w * d, w * d, dtype)
            p["conv.bias"] = np.zeros(d, dtype)
        p["block.ln1.gain"] = np.ones(d, dtype)
        p["block.ln1.bias"] = np.zeros(d, dtype)
        if config.attention_kind == "full":
            attn = A.FullAttentionParams.init(d, config.heads_or_classes, rng, dtype)
        else:
            attn = A.AggloAttentionParams.init(d, config.heads_or_classes, rng, dtype)
        for name, t in attn.tensors().items():
            p[f"block.attn.{name}"] = t.data
        p["block.ln2.gain"] = np.ones(d, dtype)
        p["block.ln2.bias"] = np.zeros(d, dtype)
        p["block.ffn.W1"] = A.glorot_uniform(rng, (d, hidden), d, hidden, dtype)
        p["block.ffn.b1"] = np.zeros(hidden, dtype)
        p["block.ffn.W2"] = A.glorot_uniform(rng, (hidden, d), hidden, d, dtype)
        p["block.ffn.b2"] = np.zeros(d, dtype)
        # small logit weights: an untrained model predicts close to uniform
        p["output.W"] = _uniform(rng, (d, v), OUTPUT_INIT_LIMIT, dtype)
        p["output.b"] = np.zeros(v, dtype)
        tensors = {k: Tensor(val, requires_grad=True, name=k) for k, val in p.items()}
        return cls(config, tensors)

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def astype(self, dtype) -> "DecoderModel":
        tensors = {k: Tensor(t.data.astype(dtype), requires_grad=True, name=k) for k, t in self.params.items()}
        return DecoderModel(self.config, tensors)

    def block_tensors(self) -> tuple[Tensor, ...]:
        return tuple(t for k, t in self.params.items() if k.startswith("block."))


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in checkpoint order."""
    d, v, m = config.d_model, config.vocab_size, config.heads_or_classes
    hidden = config.ffn_multiplier * d
    shapes: dict[str, tuple[int, ...]] = {"token_embedding": (v, d)}
    if config.encoding_kind == "embedding":
        shapes["position_embedding"] = (config.seq_len, d)
    else:
        shapes["conv.kernel"] = (config.conv_width, d, d)
        shapes["conv.bias"] = (d,)
    shapes["block.ln1.gain"] = (d,)
    shapes["block.ln1.bias"] = (d,)
    if config.attention_kind == "full":
        for name in ("W_k", "W_q", "W_v", "W_o"):
            shapes[f"block.attn.{name}"] = (d, d)
    else:
        shapes.update({
            "block.attn.W_ref": (d, m), "block.attn.b_ref": (m,),
            "block.attn.W_query": (d, m), "block.attn.b_query": (m,),
            "block.attn.P": (m, d, d // m), "block.attn.Q": (d, d),
        })
    shapes["block.ln2.gain"] = (d,)
    shapes["block.ln2.bias"] = (d,)
    shapes["block.ffn.W1"] = (d, hidden)
    shapes["block.ffn.b1"] = (hidden,)
    shapes["block.ffn.W2"] = (hidden, d)
    shapes["block.ffn.b2"] = (d,)
    shapes["output.W"] = (d, v)
    shapes["output.b"] = (v,)
    return shapes


def _check_tokens(tokens, config: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be [batch, time], got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise DataError("token ids must be integers")
    if tokens.shape[1] > config.seq_len:
        raise DimensionError(f"sequence length {tokens.shape[1]} exceeds seq_len={config.seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise DataError(f"token id outside [0, {config.vocab_size})")
    return tokens


def encode_sequence(tokens, model: DecoderModel) -> Tensor:
    """Token embedding plus position embedding, or token embedding through a causal convolution."""
    config = model.config
    tokens = _check_tokens(tokens, config)
    p = model.params
    x = T.embedding(tokens, p["token_embedding"])
    t = tokens.shape[1]
    if config.encoding_kind == "embedding":
        return T.add(x, T.slice_axis(p["position_embedding"], 0, 0, t))
    return T.causal_conv1d(x, p["conv.kernel"], p["conv.bias"])


def self_attention(x: Tensor, model: DecoderModel) -> Tensor:
    if model.config.attention_kind == "full":
        return A.full_attention(x, x, model.attention, causal=True)
    return A.agglo_masked(x, x, model.attention)


def apply_block(x: Tensor, model: DecoderModel) -> Tensor:
    p = model.params
    h = T.layer_norm(x, p["block.ln1.gain"], p["block.ln1.bias"])
    x = T.add(x, self_attention(h, model))
    h = T.layer_norm(x, p["block.ln2.gain"], p["block.ln2.bias"])
    h = T.relu(T.add(T.matmul(h, p["block.ffn.W1"]), p["block.ffn.b1"]))
    h = T.add(T.matmul(h, p["block.ffn.W2"]), p["block.ffn.b2"])
    return T.add(x, h)


def decoder_forward(tokens, model: DecoderModel, trace: list | None = None) -> Tensor:
    """Logits ``[b, t, vocab]``; position ``i`` depends only on tokens ``<= i``.

    When ``trace`` is a list, the identities of the block tensors read at each
    depth step are appended to it.
    """
    x = encode_sequence(tokens, model)
    for _ in range(model.config.n_blocks):
        if trace is not None:
            trace.append(tuple(id(t) for t in model.block_tensors()))
        x = apply_block(x, model)
    p = model.params
    return T.add(T.matmul(x, p["output.W"]), p["output.b"])


def lm_loss(logits: Tensor, targets) -> Tensor:
    """Mean next-token cross-entropy in bits."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} do not match targets {targets.shape}")
    return T.mul(T.cross_entropy(logits, targets), logits.dtype.type(1.0 / math.log(2.0)))


def generate(model: DecoderModel, prompt, n_tokens: int, temperature: float = 1.0, seed: int = 0) -> np.ndarray:
    """Autoregressively sample ``n_tokens`` continuation tokens after ``prompt``.

    The returned array holds the prompt followed by the samples. The model
    only ever sees the last ``seq_len`` tokens.
    """
    if temperature <= 0:
        raise DataError(f"temperature must be > 0, got {temperature}")
    seq = [int(t) for t in np.asarray(prompt).reshape(-1)]
    if not seq and n_tokens > 0:
        raise DataError("generation needs a non-empty prompt")
    rng = np.random.default_rng(seed)
    with T.no_grad():
        for _ in range(n_tokens):
            ctx = np.asarray(seq[-model.config.seq_len:], dtype=np.int64)[None, :]
            logits = decoder_forward(ctx, model).data[0, -1].astype(np.float64)
            z = logits / temperature
            z -= z.max()
            probs = np.exp(z)
            probs /= probs.sum()
            seq.append(int(rng.choice(len(probs), p=probs)))
    return np.asarray(seq, dtype=np.int64)
