"""scikit-learn style front end: ``MFEFClassifier().fit(X, y).predict(X)``."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from .data import AugmentPolicy, LabeledSet, attach_stats
from .models import arch_spec
from .trainer import CohortConfig, predict_logits, train
from .validation import check_images, check_images_labels


class MFEFClassifier(ClassifierMixin, BaseEstimator):
    """Cohort of student CNNs trained with multi-scale feature fusion distillation.

    After ``fit`` the auxiliary extraction/fusion path is kept for inspection,
    but ``predict`` uses a single student (``predict_with="best"`` picks the
    one with the lowest training error) unless ``predict_with="fusion"``.

    Parameters mirror :class:`mfef.trainer.CohortConfig`; ``augment_pad`` and
    ``flip_prob`` configure pad-and-crop / horizontal flip augmentation.
    """

    def __init__(self, archs=("tiny-res-8", "tiny-res-8"), temperature=3.0, alpha=80.0, ramp="exp",
                 epochs=300, batch_size=128, lr=0.1, lr_milestones=(150, 225), lr_factor=0.1, momentum=0.9,
                 weight_decay_students=1e-4, weight_decay_fusion=1e-5, use_msfe=True,
                 use_dual_attention=True, use_okd=True, msfe_groups=4, reduction_ratio=4,
                 spatial_kernel=7, transfer_depth=2, augment_pad=0, flip_prob=0.0, predict_with="best",
                 image_shape=None, random_state=0):
        self.archs = archs
        self.temperature = temperature
        self.alpha = alpha
        self.ramp = ramp
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_milestones = lr_milestones
        self.lr_factor = lr_factor
        self.momentum = momentum
        self.weight_decay_students = weight_decay_students
        self.weight_decay_fusion = weight_decay_fusion
        self.use_msfe = use_msfe
        self.use_dual_attention = use_dual_attention
        self.use_okd = use_okd
        self.msfe_groups = msfe_groups
        self.reduction_ratio = reduction_ratio
        self.spatial_kernel = spatial_kernel
        self.transfer_depth = transfer_depth
        self.augment_pad = augment_pad
        self.flip_prob = flip_prob
        self.predict_with = predict_with
        self.image_shape = image_shape
        self.random_state = random_state

    def _cohort_config(self) -> CohortConfig:
        return CohortConfig(
            n=len(self.archs), temperature=self.temperature, alpha=self.alpha, ramp=self.ramp,
            epochs=self.epochs, batch_size=self.batch_size, lr_initial=self.lr,
            lr_milestones=tuple(self.lr_milestones), lr_factor=self.lr_factor, momentum=self.momentum,
            weight_decay_students=self.weight_decay_students, weight_decay_fusion=self.weight_decay_fusion,
            use_msfe=self.use_msfe, use_dual_attention=self.use_dual_attention, use_okd=self.use_okd,
            msfe_groups=self.msfe_groups, reduction_ratio=self.reduction_ratio,
            spatial_kernel=self.spatial_kernel, transfer_depth=self.transfer_depth,
        )

    def fit(self, X, y):
        X, y = check_images_labels(X, y, self.image_shape)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        codes = self._encoder.transform(y).astype(np.int64)
        data = LabeledSet(X, codes, len(self.classes_))
        attach_stats(data)
        policy = None
        if self.augment_pad or self.flip_prob:
            policy = AugmentPolicy(pad=self.augment_pad, crop=X.shape[2], horizontal_flip_prob=self.flip_prob)
        specs = [arch_spec(a, num_classes=len(self.classes_), in_channels=X.shape[1]) for a in self.archs]
        self.report_ = train(self._cohort_config(), specs, data, seed=self.random_state, policy=policy)
        self.state_ = self.report_.state
        self._mean, self._std = data.mean, data.std
        errs = self.report_.summary["train_error_students"]
        if self.predict_with == "best":
            self.student_ = int(np.argmin(errs))
        elif self.predict_with == "fusion":
            if not self.use_okd:
                raise ValueError("predict_with='fusion' requires use_okd=True")
            self.student_ = "fusion"
        else:
            self.student_ = int(self.predict_with)
            if not 0 <= self.student_ < len(self.archs):
                raise ValueError(f"predict_with index {self.student_} out of range")
        return self

    def _logits(self, X) -> torch.Tensor:
        check_is_fitted(self, "state_")
        X = check_images(X, self.image_shape)
        Xn = ((X - self._mean[None, :, None, None]) / self._std[None, :, None, None]).astype(np.float32)
        students, fusion = predict_logits(self.state_, Xn)
        return fusion if self.student_ == "fusion" else students[self.student_]

    def predict_proba(self, X) -> np.ndarray:
        return torch.softmax(self._logits(X), dim=1).double().numpy()

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "classes_")
        return self.classes_[self._logits(X).argmax(dim=1).numpy()]
