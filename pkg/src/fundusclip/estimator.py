"""scikit-learn style wrapper around the training and zero-shot pipeline.

``FundusClip`` is a thin estimator facade: ``fit`` trains the dual encoder on
a list of image-caption pairs, ``transform`` maps images to unit-norm
embeddings, and ``predict`` runs zero-shot classification with one of the
built-in tasks.  Hyperparameters mirror the CLI config keys.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .encoders import ImageEncoderConfig, TextEncoderConfig, Vocabulary, encode_image
from .syndata import caption_vocabulary_words
from .training import (
    TrainConfig, train_model, save_checkpoint, load_checkpoint,
)
from .zeroshot import builtin_tasks, build_class_embeddings, classify_embeddings


def check_image_batch(X, size: int) -> np.ndarray:
    """Validate and coerce a [N, 3, size, size] pixel batch in [0, 1]."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != (3, size, size):
        raise ValueError(
            f"expected images shaped [n, 3, {size}, {size}], got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return arr


def check_pair_list(X) -> list:
    """Validate a fit corpus: objects carrying .image and .caption."""
    pairs = list(X)
    if not pairs:
        raise ValueError("fit needs a non-empty list of image-caption pairs")
    for i, p in enumerate(pairs):
        if not hasattr(p, "image") or not hasattr(p, "caption"):
            raise ValueError(f"item {i} lacks .image/.caption attributes")
    return pairs


class FundusClip(TransformerMixin, BaseEstimator):
    def __init__(self, batch_size=32, epochs=5, learning_rate=1e-3, seed=0,
                 image_size=64, stem_channels=16, num_residual_blocks=4,
                 embed_dim=64, text_model_dim=64, text_num_layers=2,
                 text_num_heads=4, text_max_seq_len=32,
                 task="glaucoma-screening"):
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.seed = seed
        self.image_size = image_size
        self.stem_channels = stem_channels
        self.num_residual_blocks = num_residual_blocks
        self.embed_dim = embed_dim
        self.text_model_dim = text_model_dim
        self.text_num_layers = text_num_layers
        self.text_num_heads = text_num_heads
        self.text_max_seq_len = text_max_seq_len
        self.task = task

    def _build_config(self, vocab_size: int) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, epochs=self.epochs,
            learning_rate=self.learning_rate, seed=self.seed,
            image=ImageEncoderConfig(
                input_size=self.image_size,
                stem_channels=self.stem_channels,
                num_residual_blocks=self.num_residual_blocks,
                embed_dim=self.embed_dim),
            text=TextEncoderConfig(
                vocab_size=vocab_size, max_seq_len=self.text_max_seq_len,
                model_dim=self.text_model_dim,
                num_layers=self.text_num_layers,
                num_heads=self.text_num_heads,
                embed_dim=self.embed_dim))

    def fit(self, X, y=None, validation_pairs=None):
        pairs = check_pair_list(X)
        self.vocab_ = Vocabulary(caption_vocabulary_words())
        self.config_ = self._build_config(self.vocab_.size)
        self.params_, self.log_ = train_model(
            self.config_, pairs, list(validation_pairs or []), self.vocab_)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        batch = check_image_batch(X, self.config_.image.input_size)
        out = []
        for lo in range(0, len(batch), 64):
            out.append(encode_image(self.config_.image, self.params_,
                                    batch[lo:lo + 64]).data)
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        tasks = builtin_tasks()
        if self.task not in tasks:
            raise ValueError(f"unknown task {self.task!r}; valid tasks: "
                             + ", ".join(sorted(tasks)))
        class_emb = build_class_embeddings(self.config_, self.params_,
                                           tasks[self.task], self.vocab_)
        return classify_embeddings(self.transform(X), class_emb)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.config_, self.vocab_,
                        epoch=self.epochs)

    @classmethod
    def from_checkpoint(cls, path) -> "FundusClip":
        ck = load_checkpoint(path)
        est = cls(batch_size=ck.config.batch_size, epochs=ck.config.epochs,
                  learning_rate=ck.config.learning_rate, seed=ck.config.seed,
                  image_size=ck.config.image.input_size,
                  stem_channels=ck.config.image.stem_channels,
                  num_residual_blocks=ck.config.image.num_residual_blocks,
                  embed_dim=ck.config.image.embed_dim,
                  text_model_dim=ck.config.text.model_dim,
                  text_num_layers=ck.config.text.num_layers,
                  text_num_heads=ck.config.text.num_heads,
                  text_max_seq_len=ck.config.text.max_seq_len)
        est.params_ = ck.params
        est.config_ = ck.config
        est.vocab_ = ck.vocab
        est.log_ = None
        return est
