"""Bidirectional Transformer encoder with bucketed relative-position attention bias.

One Encoder class serves both roles in the dual-model setup: a shallow
auxiliary encoder with a masked-LM head (projection then tied output
embedding) and the full-depth main encoder with a corrective-LM head (tied
output embedding without projection, plus a copy-gate vector) and a separate
replaced-token-detection head for ablations. The token embedding matrix is a
single tensor referenced by both encoders' input layers and both LM output
layers.

Blocks are pre-layer-norm with a final layer norm; weights start at
normal(0, 0.02), biases at zero, layer-norm gains at one, and the
relative-position bias table at zero.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD_BIAS = -1e9  # added to attention logits at padded key positions

_bucket_cache: dict[tuple, np.ndarray] = {}


@dataclass
class EncoderConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int
    dropout: float = 0.1
    relpos_num_buckets: int = 32
    relpos_max_distance: int = 128
    max_seq_len: int = 512

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.relpos_num_buckets % 2 != 0:
            raise ValueError("relpos_num_buckets must be even")
        if self.relpos_max_distance <= self.relpos_num_buckets // 4:
            raise ValueError("relpos_max_distance too small for bucket layout")


def relpos_bucket(relative_position: int, num_buckets: int, max_distance: int) -> int:
    """Map a signed key-minus-query offset to a bucket index.

    Sign picks the half: negative offsets use [0, num_buckets/2), positive
    use [num_buckets/2, num_buckets). Within a half the smallest offsets get
    exact buckets and the rest grow logarithmically until they clamp at
    max_distance.
    """
    half = num_buckets // 2
    base = half if relative_position > 0 else 0
    n = abs(int(relative_position))
    max_exact = half // 2
    if n < max_exact:
        val = n
    else:
        val = max_exact + int(
            math.log(n / max_exact) / math.log(max_distance / max_exact) * (half - max_exact)
        )
        val = min(val, half - 1)
    return base + val


def relpos_bucket_matrix(seq_len: int, num_buckets: int, max_distance: int) -> np.ndarray:
    """(seq_len, seq_len) bucket ids for rel = key_pos - query_pos, cached."""
    key = (seq_len, num_buckets, max_distance)
    if key not in _bucket_cache:
        mat = np.empty((seq_len, seq_len), dtype=np.int64)
        for i in range(seq_len):
            for j in range(seq_len):
                mat[i, j] = relpos_bucket(j - i, num_buckets, max_distance)
        _bucket_cache[key] = mat
    return _bucket_cache[key]


def dump_relpos_table(path, num_buckets: int, max_distance: int) -> None:
    """Write the distance-to-bucket table as TSV, covering the clamp region."""
    span = max_distance + 8
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("distance\tbucket\n")
        for d in range(-span, span + 1):
            fh.write(f"{d}\t{relpos_bucket(d, num_buckets, max_distance)}\n")


def _normal(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(0.0, 0.02, size=shape)


class Encoder:
    """Stack of pre-layer-norm self-attention and feed-forward blocks."""

    def __init__(self, config: EncoderConfig, embedding: Tensor, rng: np.random.Generator):
        self.config = config
        self.embedding = embedding
        if embedding.data.shape[1] != config.hidden_dim:
            raise ValueError("embedding width must equal hidden_dim")
        p: "OrderedDict[str, Tensor]" = OrderedDict()
        d, f = config.hidden_dim, config.ffn_dim
        p["relpos_table"] = Tensor(np.zeros((config.relpos_num_buckets, config.num_heads)),
                                   requires_grad=True)
        for i in range(config.num_layers):
            pre = f"layers.{i}."
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + f"attn.{name}"] = Tensor(_normal(rng, (d, d)), requires_grad=True)
                p[pre + f"attn.{name[1]}b"] = Tensor(np.zeros(d), requires_grad=True)
            p[pre + "ln1.gain"] = Tensor(np.ones(d), requires_grad=True)
            p[pre + "ln1.bias"] = Tensor(np.zeros(d), requires_grad=True)
            p[pre + "ffn.w1"] = Tensor(_normal(rng, (d, f)), requires_grad=True)
            p[pre + "ffn.b1"] = Tensor(np.zeros(f), requires_grad=True)
            p[pre + "ffn.w2"] = Tensor(_normal(rng, (f, d)), requires_grad=True)
            p[pre + "ffn.b2"] = Tensor(np.zeros(d), requires_grad=True)
            p[pre + "ln2.gain"] = Tensor(np.ones(d), requires_grad=True)
            p[pre + "ln2.bias"] = Tensor(np.zeros(d), requires_grad=True)
        p["ln_final.gain"] = Tensor(np.ones(d), requires_grad=True)
        p["ln_final.bias"] = Tensor(np.zeros(d), requires_grad=True)
        self.params = p

    def encode(self, ids: np.ndarray, pad_mask: np.ndarray | None = None,
               train_mode: bool = False, rng: np.random.Generator | None = None,
               attn_sink: list | None = None) -> Tensor:
        """Contextualize a padded id batch into hidden states (B, L, D).

        ``pad_mask`` marks real tokens with 1.0; padded key positions are
        excluded from everyone's attention. Dropout fires only in train mode
        (an rng is then required when the configured rate is nonzero).
        """
        cfg = self.config
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError("ids must be (batch, seq_len)")
        if ids.size and (ids.min() < 0 or ids.max() >= self.embedding.data.shape[0]):
            raise ValueError("token id out of range")
        if ids.shape[1] > cfg.max_seq_len:
            raise ValueError("sequence longer than max_seq_len")
        if train_mode and cfg.dropout > 0.0 and rng is None:
            raise ValueError("train_mode with dropout requires an rng")
        B, L = ids.shape
        if pad_mask is None:
            pad_mask = np.ones((B, L))
        pad_bias = Tensor(((1.0 - pad_mask) * PAD_BIAS)[:, None, None, :])

        buckets = relpos_bucket_matrix(L, cfg.relpos_num_buckets, cfg.relpos_max_distance)
        rel = ad.embedding_gather(self.params["relpos_table"], buckets)  # (L, L, H)
        rel = ad.reshape(ad.transpose(rel, (2, 0, 1)), (1, cfg.num_heads, L, L))

        x = ad.embedding_gather(self.embedding, ids)
        x = ad.dropout(x, cfg.dropout, rng, train_mode)
        for i in range(cfg.num_layers):
            pre = f"layers.{i}."
            a = ad.layer_norm(x, self.params[pre + "ln1.gain"], self.params[pre + "ln1.bias"])
            att = self._attention(a, pre, rel, pad_bias, train_mode, rng, attn_sink)
            att = ad.dropout(att, cfg.dropout, rng, train_mode)
            x = ad.add(x, att)
            h = ad.layer_norm(x, self.params[pre + "ln2.gain"], self.params[pre + "ln2.bias"])
            h = ad.matmul(h, self.params[pre + "ffn.w1"]) + self.params[pre + "ffn.b1"]
            h = ad.gelu(h)
            h = ad.matmul(h, self.params[pre + "ffn.w2"]) + self.params[pre + "ffn.b2"]
            h = ad.dropout(h, cfg.dropout, rng, train_mode)
            x = ad.add(x, h)
        return ad.layer_norm(x, self.params["ln_final.gain"], self.params["ln_final.bias"])

    def _attention(self, a: Tensor, pre: str, rel: Tensor, pad_bias: Tensor,
                   train_mode: bool, rng, attn_sink) -> Tensor:
        cfg = self.config
        B, L, D = a.shape
        nh = cfg.num_heads
        dh = D // nh

        def heads(t):
            return ad.transpose(ad.reshape(t, (B, L, nh, dh)), (0, 2, 1, 3))

        p = self.params
        q = heads(ad.matmul(a, p[pre + "attn.wq"]) + p[pre + "attn.qb"])
        k = heads(ad.matmul(a, p[pre + "attn.wk"]) + p[pre + "attn.kb"])
        v = heads(ad.matmul(a, p[pre + "attn.wv"]) + p[pre + "attn.vb"])
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), Tensor(1.0 / math.sqrt(dh)))
        scores = ad.add(ad.add(scores, rel), pad_bias)
        probs = ad.softmax(scores, axis=-1)
        if attn_sink is not None:
            attn_sink.append(probs.data.copy())
        probs = ad.dropout(probs, cfg.dropout, rng, train_mode)
        ctx = ad.matmul(probs, v)  # (B, nh, L, dh)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, L, D))
        return ad.matmul(ctx, p[pre + "attn.wo"]) + p[pre + "attn.ob"]


def sequence_embedding(hidden: Tensor) -> Tensor:
    """Per-sequence representation: the hidden state at position 0."""
    B, _, D = hidden.shape
    return ad.reshape(ad.narrow(hidden, 1, 0, 1), (B, D))


def gather_positions(hidden: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Select (row, col) hidden vectors from (B, L, D) into (K, D)."""
    B, L, D = hidden.shape
    flat = ad.reshape(hidden, (B * L, D))
    return ad.embedding_gather(flat, np.asarray(rows) * L + np.asarray(cols))


class DualModel:
    """Auxiliary and main encoders sharing one token-embedding tensor four ways.

    The embedding matrix feeds both input layers and both LM output layers;
    output biases are per-model. The auxiliary depth defaults to a third of
    the main depth, rounded up, at the same width.
    """

    def __init__(self, vocab_size: int, main_cfg: EncoderConfig, aux_cfg: EncoderConfig,
                 rng: np.random.Generator):
        if aux_cfg.hidden_dim != main_cfg.hidden_dim:
            raise ValueError("auxiliary and main hidden dims must match")
        d = main_cfg.hidden_dim
        self.vocab_size = vocab_size
        self.embedding = Tensor(_normal(rng, (vocab_size, d)), requires_grad=True)
        self.aux = Encoder(aux_cfg, self.embedding, rng)
        self.main = Encoder(main_cfg, self.embedding, rng)
        self.aux_head = OrderedDict(
            proj_w=Tensor(_normal(rng, (d, d)), requires_grad=True),
            proj_b=Tensor(np.zeros(d), requires_grad=True),
            out_bias=Tensor(np.zeros(vocab_size), requires_grad=True),
        )
        self.main_head = OrderedDict(
            w_copy=Tensor(_normal(rng, (d, 1)), requires_grad=True),
            lm_bias=Tensor(np.zeros(vocab_size), requires_grad=True),
            w_rtd=Tensor(_normal(rng, (d, 1)), requires_grad=True),
            b_rtd=Tensor(np.zeros(1), requires_grad=True),
        )

    @staticmethod
    def default_aux_layers(main_layers: int, ratio: float = 1 / 3) -> int:
        return max(1, math.ceil(main_layers * ratio))

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        out["embedding"] = self.embedding
        for name, t in self.aux.params.items():
            out[f"aux.{name}"] = t
        for name, t in self.aux_head.items():
            out[f"aux_head.{name}"] = t
        for name, t in self.main.params.items():
            out[f"main.{name}"] = t
        for name, t in self.main_head.items():
            out[f"main_head.{name}"] = t
        return out

    def mlm_logits(self, hidden_rows: Tensor) -> Tensor:
        """Auxiliary MLM logits for selected positions: project, then tied embedding."""
        h = ad.matmul(hidden_rows, self.aux_head["proj_w"]) + self.aux_head["proj_b"]
        return ad.matmul(h, ad.transpose(self.embedding, (1, 0))) + self.aux_head["out_bias"]

    def clm_head(self, hidden: Tensor) -> tuple[Tensor, Tensor]:
        """(lm_logits over vocab, copy logit) per position; no projection layer."""
        B, L, D = hidden.shape
        lm = ad.matmul(hidden, ad.transpose(self.embedding, (1, 0))) + self.main_head["lm_bias"]
        copy = ad.reshape(ad.matmul(hidden, self.main_head["w_copy"]), (B, L))
        return lm, copy

    def rtd_head(self, hidden: Tensor) -> Tensor:
        """Independent per-position binary logit (replaced-token detection)."""
        B, L, D = hidden.shape
        return ad.reshape(ad.matmul(hidden, self.main_head["w_rtd"]) + self.main_head["b_rtd"],
                          (B, L))
