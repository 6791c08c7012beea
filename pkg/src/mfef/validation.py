"""Input checks for the estimator front end."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length


def check_images(X, image_shape=None) -> np.ndarray:
    """Return ``X`` as a float32 ``(N, C, H, W)`` array.

    Flat ``(N, C*H*W)`` input is accepted when ``image_shape=(C, H, W)`` is given.
    """
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True, ensure_2d=False)
    if X.ndim == 2:
        if image_shape is None:
            raise ValueError("flat input needs image_shape=(C, H, W)")
        X = X.reshape((len(X),) + tuple(image_shape))
    if X.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) images, got shape {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"expected square images, got {X.shape[2]}x{X.shape[3]}")
    return X


def check_images_labels(X, y, image_shape=None):
    X = check_images(X, image_shape)
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1-D, got shape {y.shape}")
    check_consistent_length(X, y)
    return X, y
