"""Scikit-learn style estimators wrapping the two-stage training pipeline.

``X`` is a mapping (or canonical-order sequence) of per-modality feature
matrices; an optional ``observed`` mask marks which cells are present.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin

from .data import MODALITIES, LabelSet, MissingMask, ModalityBatch, apply_mask
from .training import (
    TrainConfig,
    build_net,
    predict_all,
    prepare_split,
    set_determinism,
    train_stage1,
    train_stage2,
)
from .validation import ValidationError, check_binary_vector, check_modal_arrays


class _CrossPromptBase(BaseEstimator):
    _task = "classification"

    def __init__(
        self,
        d=32,
        p=8,
        c=8,
        num_blocks=2,
        m_msa=1,
        heads=2,
        momentum=0.5,
        dropout_pg=0.1,
        epochs_stage1=30,
        epochs_stage2=20,
        batch_n=32,
        eta=1e-3,
        lr_stage2=5e-4,
        optimizer="adam",
        aux_task_weight=0.3,
        kp=True,
        pg=True,
        cr=True,
        gm=True,
        freeze_encoders=False,
        w_min=0.0,
        w_max=1.0,
        seed=0,
    ):
        self.d = d
        self.p = p
        self.c = c
        self.num_blocks = num_blocks
        self.m_msa = m_msa
        self.heads = heads
        self.momentum = momentum
        self.dropout_pg = dropout_pg
        self.epochs_stage1 = epochs_stage1
        self.epochs_stage2 = epochs_stage2
        self.batch_n = batch_n
        self.eta = eta
        self.lr_stage2 = lr_stage2
        self.optimizer = optimizer
        self.aux_task_weight = aux_task_weight
        self.kp = kp
        self.pg = pg
        self.cr = cr
        self.gm = gm
        self.freeze_encoders = freeze_encoders
        self.w_min = w_min
        self.w_max = w_max
        self.seed = seed

    # -- helpers ------------------------------------------------------------

    def _config(self) -> TrainConfig:
        return TrainConfig(
            d=self.d,
            p=self.p,
            c=self.c,
            num_blocks=self.num_blocks,
            m_msa=self.m_msa,
            heads=self.heads,
            momentum=self.momentum,
            dropout_pg=self.dropout_pg,
            epochs_stage1=self.epochs_stage1,
            epochs_stage2=self.epochs_stage2,
            batch_n=self.batch_n,
            eta=self.eta,
            lr_stage2=self.lr_stage2,
            optimizer=self.optimizer,
            aux_task_weight=self.aux_task_weight,
            kp=self.kp,
            pg=self.pg,
            cr=self.cr,
            gm=self.gm,
            freeze_encoders=self.freeze_encoders,
            w_min=self.w_min,
            w_max=self.w_max,
            seed=self.seed,
        )

    def _to_batches(self, X, observed) -> list[ModalityBatch]:
        xs = check_modal_arrays(X, MODALITIES)
        n = next(iter(xs.values())).shape[0]
        if observed is None:
            mask = MissingMask(observed=np.ones((n, len(MODALITIES)), dtype=np.int8), mr=0.0)
        elif isinstance(observed, MissingMask):
            mask = observed
        else:
            obs = np.asarray(observed)
            if obs.shape != (n, len(MODALITIES)):
                raise ValidationError(
                    f"observed must be [{n}, {len(MODALITIES)}], got {obs.shape}"
                )
            for j in range(obs.shape[1]):
                check_binary_vector(obs[:, j], n=n, name="observed")
            mask = MissingMask(observed=obs.astype(np.int8), mr=float(1 - obs.mean()))
        raw = [
            ModalityBatch(modality_id=u, X=xs[u], observed=np.ones(n, dtype=np.int8))
            for u in MODALITIES
        ]
        return apply_mask(raw, mask)

    def _labels(self, y) -> LabelSet:
        raise NotImplementedError

    # -- sklearn API ----------------------------------------------------------

    def fit(self, X, y, observed=None):
        """Run both training stages on per-modality features.

        ``observed`` is an optional [n, 3] 0/1 matrix (or MissingMask); rows
        absent everywhere are rejected by the mask model.
        """
        batches = self._to_batches(X, observed)
        labels = self._labels(y)
        cfg = self._config()
        set_determinism(cfg.seed)
        data = prepare_split(batches, labels, dtype=cfg.torch_dtype())
        net, hist1 = train_stage1(data, cfg)
        hist2 = train_stage2(net, data, cfg)
        self.model_ = net
        self.config_ = cfg
        self.history_ = hist1 + hist2
        self.n_features_in_ = sum(x.shape[1] for x in data.x_hats.values())
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ValidationError("estimator is not fitted yet; call fit first")

    def _forward(self, X, observed):
        self._check_fitted()
        batches = self._to_batches(X, observed)
        data = prepare_split(
            batches, self._placeholder_labels(batches[0].n_samples), dtype=self.config_.torch_dtype()
        )
        return predict_all(self.model_, data, stage2=True)

    def _placeholder_labels(self, n: int) -> LabelSet:
        raise NotImplementedError

    def transform(self, X, observed=None) -> np.ndarray:
        """Coordinator-weighted fused representation (width 3*d)."""
        return self._forward(X, observed)["fused"].cpu().numpy()


class CrossPromptClassifier(ClassifierMixin, _CrossPromptBase):
    """Emotion classifier over three zero-imputable modality feature blocks."""

    def _labels(self, y) -> LabelSet:
        y = np.asarray(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.shape[0] < 2:
            raise ValidationError("need at least 2 classes")
        return LabelSet(
            task="classification", y=encoded.astype(np.int64), num_classes=len(self.classes_)
        )

    def _placeholder_labels(self, n: int) -> LabelSet:
        return LabelSet(
            task="classification",
            y=np.zeros(n, dtype=np.int64),
            num_classes=len(self.classes_),
        )

    def predict_proba(self, X, observed=None) -> np.ndarray:
        return self._forward(X, observed)["y_prime"].cpu().numpy()

    def predict(self, X, observed=None) -> np.ndarray:
        proba = self.predict_proba(X, observed)
        return self.classes_[proba.argmax(axis=1)]


class CrossPromptRegressor(RegressorMixin, _CrossPromptBase):
    """Sentiment-score regressor over three zero-imputable modality feature blocks."""

    _task = "regression"

    def _labels(self, y) -> LabelSet:
        return LabelSet(task="regression", y=np.asarray(y, dtype=np.float64))

    def _placeholder_labels(self, n: int) -> LabelSet:
        return LabelSet(task="regression", y=np.zeros(n))

    def predict(self, X, observed=None) -> np.ndarray:
        return self._forward(X, observed)["y_prime"].cpu().numpy()
