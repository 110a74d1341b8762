"""Independent reference computations used to check the models."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidArgument


def ncc_map(template, image) -> np.ndarray:
    """Normalized cross-correlation at every integer placement fully inside ``image``.

    Flat windows (zero variance) score 0.
    """
    t = np.asarray(template, dtype=np.float64)
    im = np.asarray(image, dtype=np.float64)
    if t.shape[0] > im.shape[0] or t.shape[1] > im.shape[1]:
        raise InvalidArgument("template larger than image")
    tc = t - t.mean()
    tn = np.sqrt((tc ** 2).sum())
    win = sliding_window_view(im, t.shape)
    wc = win - win.mean(axis=(2, 3), keepdims=True)
    wn = np.sqrt((wc ** 2).sum(axis=(2, 3)))
    num = (wc * tc).sum(axis=(2, 3))
    den = wn * tn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 1e-12, num / den, 0.0)


def ncc_best(template, image):
    """(score, (row, col)) of the best placement; ties go to the lowest (row, col)."""
    m = ncc_map(template, image)
    flat = int(np.argmax(m))          # first max in row-major order
    r, c = divmod(flat, m.shape[1])
    return float(m[r, c]), (r, c)


def ncc_recognize(templates, image):
    """Best template by NCC, ties to the lower index: (index, score, (row, col))."""
    best = None
    for i, t in enumerate(templates):
        score, at = ncc_best(t, image)
        if best is None or score > best[1]:
            best = (i, score, at)
    return best


def topk_bruteforce(sim: np.ndarray, k: int) -> np.ndarray:
    """Per-row top-k column ids by a full stable sort (reference for link pruning)."""
    return np.argsort(-np.asarray(sim), axis=1, kind="stable")[:, :k]
