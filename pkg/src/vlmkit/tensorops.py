"""Token-grid transforms applied to vision-encoder features.

Feature maps are plain ``(rows, cols, channels)`` numpy arrays.
"""
from __future__ import annotations

import math

import numpy as np


def check_feature_map(fm: np.ndarray, name: str = "feature map") -> np.ndarray:
    fm = np.asarray(fm)
    if fm.ndim != 3:
        raise ValueError(f"{name} must be (rows, cols, channels), got shape {fm.shape}")
    if not np.all(np.isfinite(fm)):
        raise ValueError(f"{name} contains non-finite values")
    return fm


def block_size(factor: float) -> int:
    """Side of the square block merged into one token for a token-count ``factor``."""
    if not 0 < factor <= 1:
        raise ValueError(f"factor must be in (0, 1], got {factor}")
    b = round(1 / math.sqrt(factor))
    if b < 1 or not math.isclose(1 / (b * b), factor, rel_tol=1e-9):
        raise ValueError(f"factor must be 1/b^2 for an integer b, got {factor}")
    return b


def pixel_shuffle(fm: np.ndarray, factor: float = 0.25) -> np.ndarray:
    """Fold each b x b block of tokens into one token with b*b times the channels.

    Block cells are laid out row-major, each cell's channels kept contiguous:
    a 2x2 single-channel grid [[a, b], [c, d]] becomes one token [a, b, c, d].
    """
    fm = check_feature_map(fm)
    b = block_size(factor)
    rows, cols, ch = fm.shape
    if rows % b or cols % b:
        raise ValueError(f"grid {rows}x{cols} is not divisible by block size {b}")
    out = fm.reshape(rows // b, b, cols // b, b, ch).transpose(0, 2, 1, 3, 4)
    return out.reshape(rows // b, cols // b, b * b * ch).copy()


def pixel_unshuffle(fm: np.ndarray, factor: float = 0.25) -> np.ndarray:
    """Exact inverse of :func:`pixel_shuffle` for the same ``factor``."""
    fm = check_feature_map(fm)
    b = block_size(factor)
    rows, cols, ch = fm.shape
    if ch % (b * b):
        raise ValueError(f"{ch} channels cannot be split into {b}x{b} blocks")
    out = fm.reshape(rows, cols, b, b, ch // (b * b)).transpose(0, 2, 1, 3, 4)
    return out.reshape(rows * b, cols * b, ch // (b * b)).copy()


def fuse_features(general: np.ndarray, ocr: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Convex blend ``alpha * general + (1 - alpha) * ocr``."""
    general = check_feature_map(general, "general")
    ocr = check_feature_map(ocr, "ocr")
    if general.shape != ocr.shape:
        raise ValueError(f"shape mismatch: general {general.shape} vs ocr {ocr.shape}")
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    # endpoints must return the inputs bit-exactly
    if alpha == 1:
        return general.copy()
    if alpha == 0:
        return ocr.copy()
    return ocr + alpha * (general - ocr)
