"""Scikit-learn style facade so the pipeline composes with the wider
ecosystem: a transform-shaped feature extractor and a fit/predict annotator.

Both estimators store their constructor arguments verbatim (get_params /
set_params / clone all behave), take a list of FhrRecord as X, and validate
inputs before touching them.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin

from .model import build_model, predict_record, run_pretraining, run_supervised_training
from .preprocess import build_features
from .types import EngineConfig, FhrRecord, validate_record


def check_records(X) -> list[FhrRecord]:
    """Validate a record collection; raises ValueError naming the first
    violations instead of failing deep inside the pipeline."""
    records = list(X)
    if not records:
        raise ValueError("X must contain at least one record")
    for rec in records:
        if not isinstance(rec, FhrRecord):
            raise ValueError(f"X must contain FhrRecord objects, got {type(rec).__name__}")
        problems = validate_record(rec)
        if problems:
            raise ValueError(f"record {rec.id!r}: " + "; ".join(problems))
    return records


class CtgFeatureExtractor(BaseEstimator, TransformerMixin):
    """Stateless transformer from records to four-branch feature bundles."""

    def __init__(self, big_window=12, small_window=3, keep_per_small_window=1, seed=0):
        self.big_window = big_window
        self.small_window = small_window
        self.keep_per_small_window = keep_per_small_window
        self.seed = seed

    def _config(self) -> EngineConfig:
        return EngineConfig(
            big_window=self.big_window,
            small_window=self.small_window,
            keep_per_small_window=self.keep_per_small_window,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        check_records(X)
        return self

    def transform(self, X):
        cfg = self._config()
        return [
            build_features(rec, cfg, self.seed + i)
            for i, rec in enumerate(check_records(X))
        ]


class CtgAnnotator(BaseEstimator):
    """Trainable annotator: fit on labeled records, predict tag spans and
    variability classes for new ones.

    fit() optionally runs masked-recovery pretraining on the raw signals
    before the supervised epochs; predictions come back as model.Prediction
    objects (spans + class probabilities).
    """

    def __init__(
        self,
        embed_dim=64,
        heads=4,
        decoder_layers=2,
        pe_base=10000.0,
        pretrain_steps=0,
        pretrain_lr=0.2,
        epochs=20,
        lr=0.5,
        batch_size=1,
        seed=0,
    ):
        self.embed_dim = embed_dim
        self.heads = heads
        self.decoder_layers = decoder_layers
        self.pe_base = pe_base
        self.pretrain_steps = pretrain_steps
        self.pretrain_lr = pretrain_lr
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _config(self) -> EngineConfig:
        return EngineConfig(
            embed_dim=self.embed_dim,
            heads=self.heads,
            decoder_layers=self.decoder_layers,
            pe_base=self.pe_base,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        records = check_records(X)
        model = build_model(self._config())
        self.pretrain_losses_ = []
        if self.pretrain_steps:
            self.pretrain_losses_ = run_pretraining(
                model, records, self.pretrain_steps, self.pretrain_lr, self.seed
            )
        self.epoch_losses_ = run_supervised_training(
            model, records, self.epochs, self.lr, self.seed, self.batch_size
        )
        self.model_ = model
        return self

    def predict(self, X):
        if not hasattr(self, "model_"):
            raise ValueError("this annotator is not fitted; call fit first")
        records = check_records(X)
        return [
            predict_record(self.model_, rec, self.seed + i)
            for i, rec in enumerate(records)
        ]
