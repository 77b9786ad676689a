"""Transformer encoder with MLM head and an optional attachable decoder.

Pre-layer-norm residual blocks, learned absolute positions, scaled
dot-product attention, GELU feed-forward. Attention masking is additive
(-1e30 before softmax), which underflows to an exact zero weight, so PAD
invariance and decoder causality hold exactly rather than approximately.
Gradients come from the autograd module and are finite-difference checked.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .subwords import PAD_ID, CLS_ID, SEP_ID, MARK_ID, NUM_SPECIALS

MASK_VALUE = -1e30
CHECKPOINT_MAGIC = b"DLMCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_positions: int = 64
    decoder_layers: int = 0
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size <= NUM_SPECIALS:
            raise ValueError(f"vocab_size must exceed {NUM_SPECIALS}")
        if self.n_layers < 1 or self.n_heads < 1 or self.d_model < 1 or self.d_ff < 1:
            raise ValueError("layer, head, and width counts must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.max_positions < 64:
            raise ValueError("max_positions must be at least 64")
        if self.decoder_layers < 0:
            raise ValueError("decoder_layers must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


class ParameterSet:
    """Ordered name -> Tensor mapping plus the config that shaped it."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


@dataclass
class EncoderOutput:
    """Per-position hidden states (batch, positions, d_model) plus the
    attention probability arrays of each layer, for inspection."""
    hidden: Tensor
    attention_probs: list[np.ndarray]


def _layer_param_names(prefix: str, cross_attention: bool) -> list[tuple[str, str]]:
    names = [
        (f"{prefix}.ln1.g", "ln_g"), (f"{prefix}.ln1.b", "ln_b"),
        (f"{prefix}.attn.wq", "proj"), (f"{prefix}.attn.bq", "bias"),
        (f"{prefix}.attn.wk", "proj"), (f"{prefix}.attn.bk", "bias"),
        (f"{prefix}.attn.wv", "proj"), (f"{prefix}.attn.bv", "bias"),
        (f"{prefix}.attn.wo", "proj"), (f"{prefix}.attn.bo", "bias"),
    ]
    if cross_attention:
        names += [
            (f"{prefix}.lnc.g", "ln_g"), (f"{prefix}.lnc.b", "ln_b"),
            (f"{prefix}.cross.wq", "proj"), (f"{prefix}.cross.bq", "bias"),
            (f"{prefix}.cross.wk", "proj"), (f"{prefix}.cross.bk", "bias"),
            (f"{prefix}.cross.wv", "proj"), (f"{prefix}.cross.bv", "bias"),
            (f"{prefix}.cross.wo", "proj"), (f"{prefix}.cross.bo", "bias"),
        ]
    names += [
        (f"{prefix}.ln2.g", "ln_g"), (f"{prefix}.ln2.b", "ln_b"),
        (f"{prefix}.ffn.w1", "ffn_in"), (f"{prefix}.ffn.b1", "ffn_bias"),
        (f"{prefix}.ffn.w2", "ffn_out"), (f"{prefix}.ffn.b2", "bias"),
    ]
    return names


def init_params(config: ModelConfig) -> ParameterSet:
    """Draw parameters deterministically from config.seed.

    Weight matrices ~ N(0, 0.02^2); biases zero; layer-norm scale one,
    offset zero. Encoder weights are drawn before any decoder weights, so
    the encoder initialization is identical whether or not a decoder is
    attached (same seed).
    """
    rng = np.random.default_rng(config.seed)
    d, ff, v = config.d_model, config.d_ff, config.vocab_size

    shapes = {"proj": (d, d), "bias": (d,), "ln_g": (d,), "ln_b": (d,),
              "ffn_in": (d, ff), "ffn_bias": (ff,), "ffn_out": (ff, d)}

    tensors: dict[str, Tensor] = {}

    def draw(name: str, kind: str, shape=None):
        shape = shapes.get(kind, shape) if shape is None else shape
        if kind in ("ln_g",):
            data = np.ones(shape)
        elif kind in ("ln_b", "bias", "ffn_bias", "zeros"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)

    draw("tok_emb", "emb", (v, d))
    draw("pos_emb", "emb", (config.max_positions, d))
    for i in range(config.n_layers):
        for name, kind in _layer_param_names(f"enc.{i}", cross_attention=False):
            draw(name, kind)
    draw("enc_ln.g", "ln_g", (d,))
    draw("enc_ln.b", "ln_b", (d,))
    draw("mlm.w", "head", (d, v))
    draw("mlm.b", "zeros", (v,))
    for i in range(config.decoder_layers):
        for name, kind in _layer_param_names(f"dec.{i}", cross_attention=True):
            draw(name, kind)
    if config.decoder_layers:
        draw("dec_ln.g", "ln_g", (d,))
        draw("dec_ln.b", "ln_b", (d,))
        draw("dec_head.w", "head", (d, v))
        draw("dec_head.b", "zeros", (v,))
    return ParameterSet(config, tensors)


def _attention(p: ParameterSet, prefix: str, x: Tensor, kv: Tensor,
               additive_mask: np.ndarray | None,
               probs_out: list[np.ndarray] | None) -> Tensor:
    """Multi-head scaled dot-product attention. x supplies queries, kv
    supplies keys/values; additive_mask broadcasts over (B, H, Tq, Tk)."""
    cfg = p.config
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    bq, tq, _ = x.shape
    tk = kv.shape[1]

    def to_heads(y: Tensor, t: int) -> Tensor:
        # (B, T, d) -> (B, T, H, dh) -> (B, H, T, dh)
        return ag.swapaxes(ag.reshape(y, (bq, t, h, dh)), 1, 2)

    q = to_heads(ag.add(ag.matmul(x, p[f"{prefix}.wq"]), p[f"{prefix}.bq"]), tq)
    k = to_heads(ag.add(ag.matmul(kv, p[f"{prefix}.wk"]), p[f"{prefix}.bk"]), tk)
    v = to_heads(ag.add(ag.matmul(kv, p[f"{prefix}.wv"]), p[f"{prefix}.bv"]), tk)

    scores = ag.scale(ag.matmul(q, ag.transpose_last(k)), 1.0 / math.sqrt(dh))
    probs = ag.softmax_masked(scores, additive_mask)
    if probs_out is not None:
        probs_out.append(probs.data)
    ctx = ag.matmul(probs, v)                       # (B, H, Tq, dh)
    ctx = ag.swapaxes(ctx, 1, 2)                    # (B, Tq, H, dh)
    ctx = ag.reshape(ctx, (bq, tq, cfg.d_model))
    return ag.add(ag.matmul(ctx, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])


def _maybe_dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rng is None or rate == 0.0:
        return x
    return ag.dropout(x, rate, rng)


def _check_ids(token_ids: np.ndarray, vocab_size: int) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ValueError("token ids must be a 1-D or 2-D integer array")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(f"token id out of range [0, {vocab_size})")
    return ids


def _embed(p: ParameterSet, ids: np.ndarray, dropout_rng) -> Tensor:
    cfg = p.config
    t = ids.shape[1]
    if t > cfg.max_positions:
        raise ValueError(f"sequence length {t} exceeds max_positions {cfg.max_positions}")
    x = ag.add(ag.embedding(p["tok_emb"], ids),
               ag.embedding(p["pos_emb"], np.arange(t)))
    return _maybe_dropout(x, cfg.dropout, dropout_rng)


def encoder_forward(params: ParameterSet, token_ids,
                    attention_mask: np.ndarray | None = None,
                    dropout_rng: np.random.Generator | None = None) -> EncoderOutput:
    """Run the encoder stack. attention_mask marks real (attendable)
    positions; None means every position not equal to PAD. Dropout is
    active only when a generator is supplied."""
    cfg = params.config
    ids = _check_ids(token_ids, cfg.vocab_size)
    if attention_mask is None:
        attention_mask = ids != PAD_ID
    attention_mask = np.asarray(attention_mask, dtype=bool)
    if attention_mask.ndim == 1:
        attention_mask = attention_mask[None, :]
    if attention_mask.shape != ids.shape:
        raise ValueError("attention mask shape must match token ids")
    add_mask = np.where(attention_mask, 0.0, MASK_VALUE)[:, None, None, :]

    x = _embed(params, ids, dropout_rng)
    probs: list[np.ndarray] = []
    for i in range(cfg.n_layers):
        pre = ag.layer_norm(x, params[f"enc.{i}.ln1.g"], params[f"enc.{i}.ln1.b"])
        a = _attention(params, f"enc.{i}.attn", pre, pre, add_mask, probs)
        x = ag.add(x, _maybe_dropout(a, cfg.dropout, dropout_rng))
        pre = ag.layer_norm(x, params[f"enc.{i}.ln2.g"], params[f"enc.{i}.ln2.b"])
        f = ag.add(ag.matmul(ag.gelu(ag.add(ag.matmul(pre, params[f"enc.{i}.ffn.w1"]),
                                            params[f"enc.{i}.ffn.b1"])),
                             params[f"enc.{i}.ffn.w2"]),
                   params[f"enc.{i}.ffn.b2"])
        x = ag.add(x, _maybe_dropout(f, cfg.dropout, dropout_rng))
    x = ag.layer_norm(x, params["enc_ln.g"], params["enc_ln.b"])
    return EncoderOutput(hidden=x, attention_probs=probs)


def mlm_logits(params: ParameterSet, hidden: EncoderOutput | Tensor) -> Tensor:
    """Project hidden states to per-position vocabulary logits."""
    h = hidden.hidden if isinstance(hidden, EncoderOutput) else hidden
    return ag.add(ag.matmul(h, params["mlm.w"]), params["mlm.b"])


def decoder_forward(params: ParameterSet, target_ids, memory: Tensor,
                    memory_mask: np.ndarray | None = None,
                    dropout_rng: np.random.Generator | None = None,
                    cross_probs_out: list[np.ndarray] | None = None) -> Tensor:
    """Teacher-forced decoder logits over the target sequence.

    memory: (B, S, d_model), the full encoder hidden states, or a single
    marked-position vector with S = 1. memory_mask marks attendable memory
    slots (None = all). Self-attention is causal. cross_probs_out, when
    given, collects each layer's cross-attention probabilities.
    """
    cfg = params.config
    if cfg.decoder_layers == 0:
        raise ValueError("model has no decoder (decoder_layers = 0)")
    ids = _check_ids(target_ids, cfg.vocab_size)
    b, t = ids.shape
    if memory.ndim != 3 or memory.shape[0] != b:
        raise ValueError("memory must be (batch, slots, d_model)")
    s = memory.shape[1]
    causal = np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, MASK_VALUE)[None, None, :, :]
    if memory_mask is None:
        cross_mask = None
    else:
        memory_mask = np.asarray(memory_mask, dtype=bool)
        if memory_mask.shape != (b, s):
            raise ValueError("memory mask shape must match memory slots")
        cross_mask = np.where(memory_mask, 0.0, MASK_VALUE)[:, None, None, :]

    x = _embed(params, ids, dropout_rng)
    for i in range(cfg.decoder_layers):
        pre = ag.layer_norm(x, params[f"dec.{i}.ln1.g"], params[f"dec.{i}.ln1.b"])
        a = _attention(params, f"dec.{i}.attn", pre, pre, causal, None)
        x = ag.add(x, _maybe_dropout(a, cfg.dropout, dropout_rng))
        pre = ag.layer_norm(x, params[f"dec.{i}.lnc.g"], params[f"dec.{i}.lnc.b"])
        c = _attention(params, f"dec.{i}.cross", pre, memory, cross_mask, cross_probs_out)
        x = ag.add(x, _maybe_dropout(c, cfg.dropout, dropout_rng))
        pre = ag.layer_norm(x, params[f"dec.{i}.ln2.g"], params[f"dec.{i}.ln2.b"])
        f = ag.add(ag.matmul(ag.gelu(ag.add(ag.matmul(pre, params[f"dec.{i}.ffn.w1"]),
                                            params[f"dec.{i}.ffn.b1"])),
                             params[f"dec.{i}.ffn.w2"]),
                   params[f"dec.{i}.ffn.b2"])
        x = ag.add(x, _maybe_dropout(f, cfg.dropout, dropout_rng))
    x = ag.layer_norm(x, params["dec_ln.g"], params["dec_ln.b"])
    return ag.add(ag.matmul(x, params["dec_head.w"]), params["dec_head.b"])


def mark_position(token_ids, token_index: int) -> tuple[list[int], int]:
    """Insert the MARK token immediately before token_index.

    Returns (marked ids, index of the original token in the marked
    sequence); the hidden state at that index is the definition memory.
    """
    ids = list(token_ids)
    if not 0 <= token_index < len(ids):
        raise ValueError(f"token index {token_index} out of range for length {len(ids)}")
    return ids[:token_index] + [MARK_ID] + ids[token_index:], token_index + 1


def locate_token(offsets: list[tuple[int, int]], char_span: tuple[int, int]) -> int:
    """First token whose character span overlaps char_span (for marking)."""
    lo, hi = char_span
    for i, (s, e) in enumerate(offsets):
        if s < hi and lo < e:
            return i
    raise ValueError(f"no token overlaps character span {char_span}")


def backward(params: ParameterSet, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss for every parameter (zeros if unused).

    Clears the stored gradients afterwards so the next step starts clean.
    """
    if not np.all(np.isfinite(loss.data)):
        raise ValueError("loss is not finite")
    ag.backward(loss)
    grads: dict[str, np.ndarray] = {}
    for name, t in params.items():
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        t.grad = None
    return grads


def strip_decoder(params: ParameterSet) -> ParameterSet:
    """Drop decoder tensors; encoder and MLM head are kept bit-exactly."""
    cfg = replace(params.config, decoder_layers=0)
    kept = {n: t for n, t in params.items()
            if not (n.startswith("dec.") or n.startswith("dec_"))}
    return ParameterSet(cfg, kept)


def greedy_decode(params: ParameterSet, memory: Tensor,
                  memory_mask: np.ndarray | None = None,
                  max_len: int = 32) -> list[int]:
    """Greedy next-token decoding from CLS until SEP (test harness use)."""
    out = [CLS_ID]
    with ag.no_grad():
        for _ in range(max_len):
            logits = decoder_forward(params, np.asarray([out]), memory, memory_mask)
            nxt = int(np.argmax(logits.data[0, -1]))
            if nxt == SEP_ID:
                break
            out.append(nxt)
    return out[1:]


# -- checkpoint io -----------------------------------------------------------

def save_checkpoint(params: ParameterSet, path: str | Path) -> None:
    """Versioned binary checkpoint: JSON header + float32 LE tensor data."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "tensors": [[n, list(t.data.shape)] for n, t in params.items()],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    for _, t in params.items():
        buf.write(t.data.astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> ParameterSet:
    blob = Path(path).read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off: off + hlen].decode("utf-8"))
    off += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    config = ModelConfig(**header["config"])
    tensors: dict[str, Tensor] = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float64)
        off += n * 4
        tensors[name] = Tensor(arr.reshape(shape), requires_grad=True)
    return ParameterSet(config, tensors)
