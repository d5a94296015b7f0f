"""BERT-style causal decoder with cross-attention to encoder features.

Each block runs masked self-attention, cross-attention over the audio
features and a GELU feed-forward layer; every sub-layer is followed by
dropout, a residual add and layer norm (post-norm, as in BERT). Output
logits reuse the token-embedding matrix (weight tying) plus a bias.

Weights are stored as [in, out] and applied as ``x @ W + b``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tf
from .config import ModelConfig
from .tensor import Tensor

LN_EPS = 1e-12
MASK_VALUE = -1e9


class CausalityError(ValueError):
    pass


def attention_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for proj in ("q", "k", "v", "o"):
        shapes[f"{prefix}.w{proj}"] = (d, d)
        shapes[f"{prefix}.b{proj}"] = (d,)
    shapes[f"{prefix}.ln.gamma"] = (d,)
    shapes[f"{prefix}.ln.beta"] = (d,)
    return shapes


def decoder_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "decoder.embed.tokens": (cfg.vocab_size, d),
        "decoder.embed.positions": (cfg.max_positions, d),
        "decoder.embed.ln.gamma": (d,),
        "decoder.embed.ln.beta": (d,),
    }
    for k in range(cfg.num_blocks):
        pre = f"decoder.block{k}"
        shapes.update(attention_shapes(f"{pre}.selfattn", d))
        shapes.update(attention_shapes(f"{pre}.crossattn", d))
        shapes[f"{pre}.ffn.w1"] = (d, cfg.ffn_dim)
        shapes[f"{pre}.ffn.b1"] = (cfg.ffn_dim,)
        shapes[f"{pre}.ffn.w2"] = (cfg.ffn_dim, d)
        shapes[f"{pre}.ffn.b2"] = (d,)
        shapes[f"{pre}.ffn.ln.gamma"] = (d,)
        shapes[f"{pre}.ffn.ln.beta"] = (d,)
    shapes["decoder.head.bias"] = (cfg.vocab_size,)
    return shapes


# ---------------------------------------------------------------------------
# Attention pieces
# ---------------------------------------------------------------------------


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """[..., L, D] -> [..., heads, L, D / heads] using contiguous slices of D."""
    *lead, length, d = x.shape
    return x.reshape(*lead, length, num_heads, d // num_heads).swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, length, heads * dh)


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax(q k^T / sqrt(d)) v for per-head tensors [..., heads, L, d]."""
    d = q.shape[-1]
    scores = tf.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d))
    if mask is not None:
        scores = scores + np.where(mask, 0.0, MASK_VALUE).astype(q.dtype)
    return tf.matmul(tf.softmax(scores, axis=-1), v)


def multi_head_attention(
    query: Tensor,
    memory: Tensor,
    state: dict[str, Tensor],
    prefix: str,
    num_heads: int,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Attn(Q, K, V) with queries from ``query``, keys/values from ``memory``.

    Returns the output projection of the concatenated heads, before the
    residual add.
    """
    if query.shape[-1] != memory.shape[-1]:
        raise tf.DimensionError(
            f"attention width mismatch: queries {query.shape} vs memory {memory.shape}"
        )
    q = split_heads(tf.linear(query, state[f"{prefix}.wq"], state[f"{prefix}.bq"]), num_heads)
    k = split_heads(tf.linear(memory, state[f"{prefix}.wk"], state[f"{prefix}.bk"]), num_heads)
    v = split_heads(tf.linear(memory, state[f"{prefix}.wv"], state[f"{prefix}.bv"]), num_heads)
    ctx = merge_heads(attend(q, k, v, mask))
    return tf.linear(ctx, state[f"{prefix}.wo"], state[f"{prefix}.bo"])


def add_norm(x: Tensor, residual: Tensor, state: dict[str, Tensor], prefix: str) -> Tensor:
    return tf.layer_norm(x + residual, state[f"{prefix}.ln.gamma"], state[f"{prefix}.ln.beta"], LN_EPS)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def _self_mask(n: int, key_mask: np.ndarray | None) -> np.ndarray:
    mask = causal_mask(n)
    if key_mask is None:
        return mask
    # key_mask: [B, N] -> [B, 1, N, N]; a query always sees itself so no row is empty
    keys = np.asarray(key_mask, dtype=bool)[:, None, None, :]
    return (mask[None, None] & keys) | np.eye(n, dtype=bool)[None, None]


def causal_self_attention(
    h: Tensor,
    state: dict[str, Tensor],
    prefix: str,
    num_heads: int,
    mask: np.ndarray | None = None,
    key_mask: np.ndarray | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
) -> Tensor:
    """LayerNorm(dropout(SelfAttn(H)) + H) where position i sees only j <= i."""
    n = h.shape[-2]
    if mask is None:
        mask = _self_mask(n, key_mask)
    elif np.any(np.triu(np.broadcast_to(mask, mask.shape[:-2] + (n, n)), k=1)):
        raise CausalityError("self-attention mask lets a position attend to the future")
    out = multi_head_attention(h, h, state, prefix, num_heads, mask)
    return add_norm(tf.dropout(out, dropout, training, rng), h, state, prefix)


def cross_attention(
    h: Tensor,
    features: Tensor,
    state: dict[str, Tensor],
    prefix: str,
    num_heads: int,
    memory_mask: np.ndarray | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
) -> Tensor:
    """LayerNorm(dropout(Attn(H, I, I)) + H)."""
    if h.shape[-1] != features.shape[-1]:
        raise tf.DimensionError(
            f"decoder state width {h.shape[-1]} does not match encoder output width {features.shape[-1]}"
        )
    mask = None
    if memory_mask is not None:
        mask = np.asarray(memory_mask, dtype=bool)[:, None, None, :]
    out = multi_head_attention(h, features, state, prefix, num_heads, mask)
    return add_norm(tf.dropout(out, dropout, training, rng), h, state, prefix)


def feed_forward(
    x: Tensor,
    state: dict[str, Tensor],
    prefix: str,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
) -> Tensor:
    hidden = tf.gelu(tf.linear(x, state[f"{prefix}.w1"], state[f"{prefix}.b1"]))
    out = tf.linear(hidden, state[f"{prefix}.w2"], state[f"{prefix}.b2"])
    return add_norm(tf.dropout(out, dropout, training, rng), x, state, prefix)


# ---------------------------------------------------------------------------
# Full forward
# ---------------------------------------------------------------------------


def _check_ids(ids: np.ndarray, cfg: ModelConfig) -> None:
    if ids.shape[-1] == 0:
        raise ValueError("decoder needs at least one token")
    if ids.shape[-1] > cfg.max_positions:
        raise ValueError(f"sequence of {ids.shape[-1]} tokens exceeds {cfg.max_positions} positions")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(f"token id outside [0, {cfg.vocab_size})")


def embed(ids: np.ndarray, state: dict[str, Tensor], start: int = 0) -> Tensor:
    n = ids.shape[-1]
    x = tf.embedding(state["decoder.embed.tokens"], ids)
    x = x + state["decoder.embed.positions"][start:start + n]
    return tf.layer_norm(x, state["decoder.embed.ln.gamma"], state["decoder.embed.ln.beta"], LN_EPS)


def output_logits(h: Tensor, state: dict[str, Tensor]) -> Tensor:
    """Tied projection: hidden states times the transposed token-embedding matrix."""
    return tf.matmul(h, state["decoder.embed.tokens"].transpose()) + state["decoder.head.bias"]


def decoder_forward(
    ids,
    features: Tensor | None,
    state: dict[str, Tensor],
    cfg: ModelConfig,
    token_mask: np.ndarray | None = None,
    memory_mask: np.ndarray | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits [.., N, vocab] for token ids [N] or [B, N].

    ``features`` is [T', D] or [B, T', D]; ``None`` skips cross-attention,
    which turns the decoder into a plain causal language model.
    """
    ids = np.asarray(ids, dtype=np.int64)
    _check_ids(ids, cfg)
    batched = ids.ndim == 2
    if not batched:
        ids = ids[None]
        if features is not None and features.ndim == 2:
            features = features.reshape(1, *features.shape)
    p = cfg.dropout
    x = tf.dropout(embed(ids, state), p, training, rng)
    for k in range(cfg.num_blocks):
        pre = f"decoder.block{k}"
        x = causal_self_attention(x, state, f"{pre}.selfattn", cfg.num_heads,
                                  key_mask=token_mask, training=training, rng=rng, dropout=p)
        if features is not None:
            x = cross_attention(x, features, state, f"{pre}.crossattn", cfg.num_heads,
                                memory_mask=memory_mask, training=training, rng=rng, dropout=p)
        x = feed_forward(x, state, f"{pre}.ffn", training=training, rng=rng, dropout=p)
    logits = output_logits(x, state)
    return logits if batched else logits.reshape(*logits.shape[1:])


# ---------------------------------------------------------------------------
# Incremental decoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecoderState:
    """Cached keys/values for an already-consumed prefix.

    ``self_kv[k]`` holds block k's self-attention keys and values
    [heads, n, d]; ``cross_kv[k]`` the projected encoder features. Every step
    returns a new state, so beams can share prefixes safely.
    """

    tokens: tuple[int, ...]
    self_kv: tuple[tuple[np.ndarray, np.ndarray], ...]
    cross_kv: tuple[tuple[np.ndarray, np.ndarray], ...] | None


def start_state(features: Tensor | np.ndarray | None, state: dict[str, Tensor], cfg: ModelConfig) -> DecoderState:
    cross = None
    if features is not None:
        mem = features if isinstance(features, Tensor) else Tensor(features)
        cross = []
        for k in range(cfg.num_blocks):
            pre = f"decoder.block{k}.crossattn"
            kk = split_heads(tf.linear(mem, state[f"{pre}.wk"], state[f"{pre}.bk"]), cfg.num_heads)
            vv = split_heads(tf.linear(mem, state[f"{pre}.wv"], state[f"{pre}.bv"]), cfg.num_heads)
            cross.append((kk.data, vv.data))
        cross = tuple(cross)
    return DecoderState((), tuple((None, None) for _ in range(cfg.num_blocks)), cross)


def _append(cache, new: np.ndarray) -> np.ndarray:
    return new if cache is None else np.concatenate([cache, new], axis=-2)


def step(dstate: DecoderState, token: int, state: dict[str, Tensor], cfg: ModelConfig) -> tuple[np.ndarray, DecoderState]:
    """Consume one token; return its next-token logits and the extended state."""
    if not 0 <= token < cfg.vocab_size:
        raise ValueError(f"token id {token} outside [0, {cfg.vocab_size})")
    pos = len(dstate.tokens)
    if pos >= cfg.max_positions:
        raise ValueError("decoder cache is full")
    x = embed(np.array([token]), state, start=pos)  # [1, D]
    new_self = []
    for k in range(cfg.num_blocks):
        pre = f"decoder.block{k}.selfattn"
        q = split_heads(tf.linear(x, state[f"{pre}.wq"], state[f"{pre}.bq"]), cfg.num_heads)
        kn = split_heads(tf.linear(x, state[f"{pre}.wk"], state[f"{pre}.bk"]), cfg.num_heads)
        vn = split_heads(tf.linear(x, state[f"{pre}.wv"], state[f"{pre}.bv"]), cfg.num_heads)
        kc, vc = dstate.self_kv[k]
        kc, vc = _append(kc, kn.data), _append(vc, vn.data)
        new_self.append((kc, vc))
        ctx = merge_heads(attend(q, Tensor(kc), Tensor(vc)))
        out = tf.linear(ctx, state[f"{pre}.wo"], state[f"{pre}.bo"])
        x = add_norm(out, x, state, pre)
        if dstate.cross_kv is not None:
            pre = f"decoder.block{k}.crossattn"
            q = split_heads(tf.linear(x, state[f"{pre}.wq"], state[f"{pre}.bq"]), cfg.num_heads)
            ck, cv = dstate.cross_kv[k]
            ctx = merge_heads(attend(q, Tensor(ck), Tensor(cv)))
            out = tf.linear(ctx, state[f"{pre}.wo"], state[f"{pre}.bo"])
            x = add_norm(out, x, state, pre)
        x = feed_forward(x, state, f"decoder.block{k}.ffn")
    logits = output_logits(x, state).data[0]
    return logits, DecoderState(dstate.tokens + (token,), tuple(new_self), dstate.cross_kv)
