"""Dual encoders: a small residual CNN for images and a small pre-norm
transformer for captions, both projecting into a shared unit-norm embedding
space.

Parameters live in a flat ``dict[str, Tensor]`` so the optimizer and the
checkpoint format can treat them uniformly.  Both encode functions are pure:
the output depends only on (parameters, input).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[BOS]", "[EOS]", "[UNK]")

_ATTN_MASK_VALUE = -1e30


class Vocabulary:
    """Closed word vocabulary: 4 special tokens, then words sorted lexicographically."""

    def __init__(self, words):
        words = sorted(set(words))
        for w in words:
            if w in SPECIAL_TOKENS:
                raise ValueError(f"word collides with a special token: {w!r}")
        self.tokens = list(SPECIAL_TOKENS) + words
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    @classmethod
    def from_tokens(cls, tokens) -> "Vocabulary":
        """Rebuild from a serialized token list (checkpoint header)."""
        if list(tokens[:4]) != list(SPECIAL_TOKENS):
            raise ValueError("token list does not start with the special tokens")
        return cls(tokens[4:])


def tokenize(caption: str, vocab: Vocabulary, max_seq_len: int) -> np.ndarray:
    """[BOS] + word ids + [EOS], padded to max_seq_len; truncation keeps [EOS] last."""
    ids = [BOS_ID] + [vocab.id_of(w) for w in caption.split()]
    if len(ids) > max_seq_len - 1:
        ids = ids[:max_seq_len - 1]
    ids.append(EOS_ID)
    ids.extend([PAD_ID] * (max_seq_len - len(ids)))
    return np.asarray(ids, dtype=np.int64)


@dataclass
class ImageEncoderConfig:
    input_size: int = 64
    stem_channels: int = 16
    num_residual_blocks: int = 4
    embed_dim: int = 64

    def __post_init__(self):
        if self.embed_dim < 8:
            raise ValueError("embed_dim must be >= 8")
        stages = (self.num_residual_blocks + 1) // 2
        if self.input_size % (2 ** stages) != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^{stages}")

    def block_channels(self, i: int) -> int:
        # channels double every two blocks
        return self.stem_channels * (2 ** (i // 2))

    def block_stride(self, i: int) -> int:
        # stride-2 downsampling every two blocks (at even block indices)
        return 2 if i % 2 == 0 else 1

    @property
    def final_channels(self) -> int:
        return self.block_channels(self.num_residual_blocks - 1)


@dataclass
class TextEncoderConfig:
    vocab_size: int = 0
    max_seq_len: int = 32
    model_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    embed_dim: int = 64

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.embed_dim < 8:
            raise ValueError("embed_dim must be >= 8")


def _kaiming(rng: Rng, shape, fan_in: int) -> Tensor:
    std = math.sqrt(2.0 / fan_in)
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_image_encoder(config: ImageEncoderConfig, rng: Rng) -> dict:
    """Kaiming fan-in weights, zero biases, unit layer-norm gains."""
    p = {}
    c = config.stem_channels
    p["image.stem.w"] = _kaiming(rng, (c, 3, 3, 3), 3 * 9)
    p["image.stem.b"] = _zeros(c)
    p["image.stem.ln_g"] = _ones(c)
    p["image.stem.ln_b"] = _zeros(c)
    in_c = c
    for i in range(config.num_residual_blocks):
        out_c = config.block_channels(i)
        stride = config.block_stride(i)
        k = f"image.block{i}"
        p[f"{k}.conv1.w"] = _kaiming(rng, (out_c, in_c, 3, 3), in_c * 9)
        p[f"{k}.conv1.b"] = _zeros(out_c)
        p[f"{k}.ln1.g"] = _ones(out_c)
        p[f"{k}.ln1.b"] = _zeros(out_c)
        p[f"{k}.conv2.w"] = _kaiming(rng, (out_c, out_c, 3, 3), out_c * 9)
        p[f"{k}.conv2.b"] = _zeros(out_c)
        p[f"{k}.ln2.g"] = _ones(out_c)
        p[f"{k}.ln2.b"] = _zeros(out_c)
        if stride != 1 or in_c != out_c:
            p[f"{k}.proj.w"] = _kaiming(rng, (out_c, in_c, 1, 1), in_c)
            p[f"{k}.proj.b"] = _zeros(out_c)
        in_c = out_c
    p["image.head.w"] = _kaiming(rng, (2 * in_c, config.embed_dim), 2 * in_c)
    p["image.head.b"] = _zeros(config.embed_dim)
    return p


def init_text_encoder(config: TextEncoderConfig, rng: Rng) -> dict:
    if config.vocab_size < len(SPECIAL_TOKENS):
        raise ValueError("vocab_size must cover the special tokens")
    d = config.model_dim
    p = {
        "text.tok_emb": Tensor(rng.standard_normal((config.vocab_size, d)) * 0.02,
                               requires_grad=True),
        "text.pos_emb": Tensor(rng.standard_normal((config.max_seq_len, d)) * 0.02,
                               requires_grad=True),
    }
    for i in range(config.num_layers):
        k = f"text.layer{i}"
        p[f"{k}.ln1.g"] = _ones(d)
        p[f"{k}.ln1.b"] = _zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{k}.attn.{name}"] = _kaiming(rng, (d, d), d)
        for name in ("bq", "bk", "bv", "bo"):
            p[f"{k}.attn.{name}"] = _zeros(d)
        p[f"{k}.ln2.g"] = _ones(d)
        p[f"{k}.ln2.b"] = _zeros(d)
        p[f"{k}.ff.w1"] = _kaiming(rng, (d, 4 * d), d)
        p[f"{k}.ff.b1"] = _zeros(4 * d)
        p[f"{k}.ff.w2"] = _kaiming(rng, (4 * d, d), 4 * d)
        p[f"{k}.ff.b2"] = _zeros(d)
    p["text.ln_f.g"] = _ones(d)
    p["text.ln_f.b"] = _zeros(d)
    p["text.head.w"] = _kaiming(rng, (d, config.embed_dim), d)
    p["text.head.b"] = _zeros(config.embed_dim)
    return p


def _conv(x, w, b, stride: int, padding: int):
    y = ad.conv2d(x, w, stride=stride, padding=padding)
    return ad.add(y, ad.reshape(b, (1, -1, 1, 1)))


def _channel_norm(x, g, b):
    """Layer norm over the channel axis of a [B,C,H,W] map, with affine."""
    t = ad.transpose(x, (0, 2, 3, 1))
    t = ad.layer_norm(t, axis=-1)
    t = ad.add(ad.multiply(t, g), b)
    return ad.transpose(t, (0, 3, 1, 2))


def encode_image(config: ImageEncoderConfig, params: dict, batch) -> Tensor:
    """[B,3,S,S] pixel batch in [0,1] -> [B,d] unit-norm embeddings."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    s = config.input_size
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
        raise ad.ShapeError("encode_image", x.shape, (-1, 3, s, s))
    h = _conv(x, params["image.stem.w"], params["image.stem.b"], 1, 1)
    h = ad.relu(_channel_norm(h, params["image.stem.ln_g"], params["image.stem.ln_b"]))
    for i in range(config.num_residual_blocks):
        k = f"image.block{i}"
        stride = config.block_stride(i)
        y = _conv(h, params[f"{k}.conv1.w"], params[f"{k}.conv1.b"], stride, 1)
        y = ad.relu(_channel_norm(y, params[f"{k}.ln1.g"], params[f"{k}.ln1.b"]))
        y = _conv(y, params[f"{k}.conv2.w"], params[f"{k}.conv2.b"], 1, 1)
        y = ad.relu(_channel_norm(y, params[f"{k}.ln2.g"], params[f"{k}.ln2.b"]))
        if f"{k}.proj.w" in params:
            skip = _conv(h, params[f"{k}.proj.w"], params[f"{k}.proj.b"], stride, 0)
        else:
            skip = h
        h = ad.add(y, skip)
    # average pooling summarizes global tone; max pooling keeps small localized
    # findings (a few bright pixels, e.g. an enlarged cup) visible to the head
    pooled = ad.concat([ad.mean(h, axis=(2, 3)), ad.amax(h, axis=(2, 3))], axis=1)
    out = ad.add(ad.matmul(pooled, params["image.head.w"]), params["image.head.b"])
    return ad.l2_normalize(out, axis=-1)


def _affine_norm(x, g, b):
    return ad.add(ad.multiply(ad.layer_norm(x, axis=-1), g), b)


def encode_text(config: TextEncoderConfig, params: dict, tokens) -> Tensor:
    """[B,T] token ids -> [B,d] unit-norm embeddings, pooled at the first [EOS].

    Positions after the first [EOS] are masked out of attention regardless of
    their content, so any padding tail yields the same embedding.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] > config.max_seq_len:
        raise ad.ShapeError("encode_text", tokens.shape, (-1, config.max_seq_len))
    B, T = tokens.shape
    d = config.model_dim
    nh = config.num_heads
    dh = d // nh

    pos_ids = np.arange(T)
    x = ad.add(ad.embedding_lookup(params["text.tok_emb"], tokens),
               ad.embedding_lookup(params["text.pos_emb"], pos_ids))

    is_eos = tokens == EOS_ID
    eos_pos = np.where(is_eos.any(axis=1), is_eos.argmax(axis=1), T - 1)
    valid = pos_ids[None, :] <= eos_pos[:, None]
    mask_add = Tensor(np.where(valid, 0.0, _ATTN_MASK_VALUE)[:, None, None, :])

    def heads(t):  # [B,T,D] -> [B,H,T,dh]
        return ad.transpose(ad.reshape(t, (B, T, nh, dh)), (0, 2, 1, 3))

    for i in range(config.num_layers):
        k = f"text.layer{i}"
        y = _affine_norm(x, params[f"{k}.ln1.g"], params[f"{k}.ln1.b"])
        q = heads(ad.add(ad.matmul(y, params[f"{k}.attn.wq"]), params[f"{k}.attn.bq"]))
        kk = heads(ad.add(ad.matmul(y, params[f"{k}.attn.wk"]), params[f"{k}.attn.bk"]))
        v = heads(ad.add(ad.matmul(y, params[f"{k}.attn.wv"]), params[f"{k}.attn.bv"]))
        scores = ad.scalar_multiply(ad.matmul(q, ad.transpose(kk, (0, 1, 3, 2))),
                                    1.0 / math.sqrt(dh))
        attn = ad.softmax(ad.add(scores, mask_add), axis=-1)
        o = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, T, d))
        o = ad.add(ad.matmul(o, params[f"{k}.attn.wo"]), params[f"{k}.attn.bo"])
        x = ad.add(x, o)
        y = _affine_norm(x, params[f"{k}.ln2.g"], params[f"{k}.ln2.b"])
        f = ad.gelu(ad.add(ad.matmul(y, params[f"{k}.ff.w1"]), params[f"{k}.ff.b1"]))
        f = ad.add(ad.matmul(f, params[f"{k}.ff.w2"]), params[f"{k}.ff.b2"])
        x = ad.add(x, f)

    x = _affine_norm(x, params["text.ln_f.g"], params["text.ln_f.b"])
    onehot = np.zeros((B, 1, T))
    onehot[np.arange(B), 0, eos_pos] = 1.0
    pooled = ad.reshape(ad.matmul(Tensor(onehot), x), (B, d))
    out = ad.add(ad.matmul(pooled, params["text.head.w"]), params["text.head.b"])
    return ad.l2_normalize(out, axis=-1)


def parameter_count(params: dict) -> int:
    return sum(p.size for p in params.values())
