"""Pixel-space image metrics and the CSV evaluation report."""

from __future__ import annotations

import csv
import io
import math
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor

PSNR_CAP_DB = 99.0


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def mse(a, b) -> float:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def psnr(a, b, peak: float = 2.0) -> float:
    """10 log10(peak^2 / mse) in dB; identical inputs give the 99 dB cap."""
    m = mse(a, b)
    if m == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak * peak / m), PSNR_CAP_DB)


def format_report(rows: Sequence[tuple[str, float, float]]) -> str:
    """CSV with columns ``triplet_id,psnr_db,mse`` and a trailing ``mean`` row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["triplet_id", "psnr_db", "mse"])
    for name, p, m in rows:
        w.writerow([name, f"{p:.4f}", f"{m:.6f}"])
    if rows:
        w.writerow(["mean", f"{np.mean([r[1] for r in rows]):.4f}", f"{np.mean([r[2] for r in rows]):.6f}"])
    return buf.getvalue()
