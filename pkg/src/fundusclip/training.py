"""Contrastive training loop, retrieval validation, and checkpoint persistence.

The model is the pair of encoders plus one learnable scalar, the log
temperature.  A batch of image-caption pairs is embedded by both encoders and
scored with the symmetric InfoNCE loss; the matched pair sits on the diagonal
of the similarity matrix.  Checkpoints are a small binary format ("VCLP") that
round-trips byte-exactly.
"""

import csv
import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import (
    ImageEncoderConfig, TextEncoderConfig, Vocabulary,
    init_image_encoder, init_text_encoder, encode_image, encode_text, tokenize,
)
from .rng import Rng

CHECKPOINT_MAGIC = b"VCLP"
CHECKPOINT_VERSION = 1
LOGIT_SCALE_MAX = 100.0
DEFAULT_LOG_TEMPERATURE = math.log(1.0 / 0.07)


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 5
    learning_rate: float = 1e-3
    init_log_temperature: float = DEFAULT_LOG_TEMPERATURE
    seed: int = 0
    image: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["image"] = ImageEncoderConfig(**d["image"])
        d["text"] = TextEncoderConfig(**d["text"])
        return cls(**d)


def logit_scale(log_temperature) -> Tensor:
    """exp(log_temperature) capped at LOGIT_SCALE_MAX.

    The cap is written as ``c - relu(c - exp(t))`` so it stays inside the
    differentiable op set and contributes a zero gradient above the cap.
    """
    t = log_temperature if isinstance(log_temperature, Tensor) else Tensor(log_temperature)
    c = LOGIT_SCALE_MAX
    return ad.subtract(c, ad.relu(ad.subtract(c, ad.exp(t))))


def _cross_entropy_diag(logits: Tensor) -> Tensor:
    """Mean cross-entropy of each row against its diagonal target."""
    B = logits.shape[0]
    shift = logits.data.max(axis=1, keepdims=True)  # constant, no grad needed
    lse = ad.add(ad.log(ad.sum_(ad.exp(ad.subtract(logits, shift)),
                                axis=1, keepdims=True)), shift)
    diag = ad.sum_(ad.multiply(logits, np.eye(B)), axis=1, keepdims=True)
    return ad.mean(ad.subtract(lse, diag))


def contrastive_loss(image_emb: Tensor, text_emb: Tensor, log_temperature) -> Tensor:
    """Symmetric InfoNCE over a batch of matched (image, text) embedding rows."""
    if image_emb.shape != text_emb.shape or image_emb.ndim != 2:
        raise ad.ShapeError("contrastive_loss", image_emb.shape, text_emb.shape)
    B = image_emb.shape[0]
    if B < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 pairs")
    for name, emb in (("image", image_emb), ("text", text_emb)):
        norms = np.linalg.norm(emb.data, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError(f"{name} embedding rows are not unit-norm")
    scale = logit_scale(log_temperature)
    logits = ad.multiply(scale, ad.matmul(image_emb, ad.transpose(text_emb)))
    loss_i = _cross_entropy_diag(logits)
    loss_t = _cross_entropy_diag(ad.transpose(logits))
    return ad.scalar_multiply(ad.add(loss_i, loss_t), 0.5)


# ---------------------------------------------------------------------------
# model assembly


def init_model(config: TrainConfig, rng: Rng) -> dict:
    """Flat parameter dict for both encoders plus the log temperature."""
    params = init_image_encoder(config.image, rng.derive(0))
    params.update(init_text_encoder(config.text, rng.derive(1)))
    params["log_temperature"] = Tensor(config.init_log_temperature,
                                       requires_grad=True)
    return params


def _batch_arrays(pairs, vocab: Vocabulary, max_seq_len: int):
    images = np.stack([np.asarray(p.image, dtype=np.float64) for p in pairs])
    tokens = np.stack([tokenize(p.caption, vocab, max_seq_len) for p in pairs])
    return images, tokens


def embed_pairs(config: TrainConfig, params: dict, pairs, vocab: Vocabulary):
    """(image_emb, text_emb) Tensors for a list of pairs."""
    images, tokens = _batch_arrays(pairs, vocab, config.text.max_seq_len)
    return (encode_image(config.image, params, images),
            encode_text(config.text, params, tokens))


# ---------------------------------------------------------------------------
# training log


@dataclass
class StepRecord:
    epoch: int
    step: int
    loss: float
    scale: float


@dataclass
class EpochRecord:
    epoch: int
    val_loss: float
    image_to_text_r1: float
    image_to_text_r5: float
    text_to_image_r1: float
    text_to_image_r5: float


LOG_COLUMNS = ["kind", "epoch", "step", "loss", "scale", "val_loss",
               "image_to_text_r1", "image_to_text_r5",
               "text_to_image_r1", "text_to_image_r5"]


class TrainingLog:
    """Append-only record of training steps and per-epoch validation."""

    def __init__(self):
        self.steps: list[StepRecord] = []
        self.epochs: list[EpochRecord] = []

    def add_step(self, rec: StepRecord) -> None:
        if self.steps and rec.step <= self.steps[-1].step:
            raise ValueError("step numbers must be strictly increasing")
        self.steps.append(rec)

    def add_epoch(self, rec: EpochRecord) -> None:
        self.epochs.append(rec)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.steps:
                w.writerow(["step", r.epoch, r.step,
                            f"{r.loss:.17g}", f"{r.scale:.17g}",
                            "", "", "", "", ""])
            for r in self.epochs:
                w.writerow(["epoch", r.epoch, "", "", "",
                            f"{r.val_loss:.17g}",
                            f"{r.image_to_text_r1:.17g}",
                            f"{r.image_to_text_r5:.17g}",
                            f"{r.text_to_image_r1:.17g}",
                            f"{r.text_to_image_r5:.17g}"])


# ---------------------------------------------------------------------------
# training loop


def train_epoch(params: dict, adam: ad.Adam, train_pairs, config: TrainConfig,
                vocab: Vocabulary, epoch: int, log: TrainingLog,
                start_step: int = 0) -> int:
    """One pass over the train split; returns the next global step number."""
    n = len(train_pairs)
    B = config.batch_size
    if n < B:
        raise ValueError(f"train split of {n} pairs is smaller than one batch")
    order = Rng(config.seed, stream=0xE70C).derive(epoch + 1).permutation(n)
    step = start_step
    for lo in range(0, n - B + 1, B):  # drop the last partial batch
        batch = [train_pairs[i] for i in order[lo:lo + B]]
        try:
            img_emb, txt_emb = embed_pairs(config, params, batch, vocab)
            loss = contrastive_loss(img_emb, txt_emb, params["log_temperature"])
        except (ad.ShapeError, ValueError) as err:
            raise type(err)(f"batch starting at index {lo}: {err}") from err
        adam.zero_grad()
        ad.backward(loss)
        adam.step()
        step += 1
        scale = float(logit_scale(params["log_temperature"]).data)
        log.add_step(StepRecord(epoch=epoch, step=step,
                                loss=loss.item(), scale=scale))
    return step


def validate_retrieval(config: TrainConfig, params: dict, val_pairs,
                       vocab: Vocabulary, ks=(1, 5)) -> dict:
    """Recall@k in both directions over the full similarity matrix.

    Ties are broken toward the lower index (stable sort on descending score).
    """
    n = len(val_pairs)
    if n == 0:
        raise ValueError("validation split is empty")
    if n < max(ks):
        ks = tuple(k for k in ks if k <= n)
    img_emb, txt_emb = embed_pairs(config, params, val_pairs, vocab)
    sim = img_emb.data @ txt_emb.data.T
    out = {}
    for tag, mat in (("image_to_text", sim), ("text_to_image", sim.T)):
        ranks = np.argsort(-mat, axis=1, kind="stable")
        for k in ks:
            hits = (ranks[:, :k] == np.arange(n)[:, None]).any(axis=1)
            out[f"{tag}_r{k}"] = float(hits.mean())
    return out


def validation_loss(config: TrainConfig, params: dict, val_pairs,
                    vocab: Vocabulary) -> float:
    img_emb, txt_emb = embed_pairs(config, params, val_pairs, vocab)
    return contrastive_loss(img_emb, txt_emb, params["log_temperature"]).item()


def train_model(config: TrainConfig, train_pairs, val_pairs,
                vocab: Vocabulary) -> tuple[dict, TrainingLog]:
    """Full training run: init, epochs with validation, return params and log."""
    params = init_model(config, Rng(config.seed))
    adam = ad.Adam(params, learning_rate=config.learning_rate)
    log = TrainingLog()
    step = 0
    for epoch in range(config.epochs):
        step = train_epoch(params, adam, train_pairs, config, vocab,
                           epoch, log, start_step=step)
        if val_pairs:
            recalls = validate_retrieval(config, params, val_pairs, vocab)
            # the loss needs at least two pairs of in-batch negatives
            vloss = (validation_loss(config, params, val_pairs, vocab)
                     if len(val_pairs) >= 2 else math.nan)
            log.add_epoch(EpochRecord(
                epoch=epoch,
                val_loss=vloss,
                image_to_text_r1=recalls.get("image_to_text_r1", 0.0),
                image_to_text_r5=recalls.get("image_to_text_r5",
                                             recalls.get("image_to_text_r1", 0.0)),
                text_to_image_r1=recalls.get("text_to_image_r1", 0.0),
                text_to_image_r5=recalls.get("text_to_image_r5",
                                             recalls.get("text_to_image_r1", 0.0))))
    return params, log


# ---------------------------------------------------------------------------
# checkpoint persistence


@dataclass
class Checkpoint:
    params: dict
    config: TrainConfig
    vocab: Vocabulary
    epoch: int
    metrics: dict


def save_checkpoint(path, params: dict, config: TrainConfig, vocab: Vocabulary,
                    epoch: int = 0, metrics: dict | None = None) -> None:
    names = sorted(params)
    header = {
        "config": config.to_dict(),
        "vocabulary": vocab.tokens,
        "epoch": int(epoch),
        "metrics": metrics or {},
        "parameters": [[name, list(params[name].shape)] for name in names],
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for name in names:
            fh.write(np.ascontiguousarray(params[name].data,
                                          dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"not a checkpoint file: magic {blob[:4]!r}")
    if len(blob) < 12:
        raise TruncatedPayloadError("checkpoint header is incomplete")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(blob) < 12 + header_len:
        raise TruncatedPayloadError("checkpoint header is incomplete")
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    params = {}
    offset = 12 + header_len
    for name, shape in header["parameters"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(blob) < offset + nbytes:
            raise TruncatedPayloadError(
                f"checkpoint payload truncated at parameter {name!r}")
        data = np.frombuffer(blob, dtype="<f8", count=count,
                             offset=offset).reshape(shape)
        params[name] = Tensor(data.astype(np.float64), requires_grad=True)
        offset += nbytes
    if offset != len(blob):
        raise TruncatedPayloadError("checkpoint has trailing bytes")
    return Checkpoint(params=params,
                      config=TrainConfig.from_dict(header["config"]),
                      vocab=Vocabulary.from_tokens(header["vocabulary"]),
                      epoch=header["epoch"], metrics=header["metrics"])
