"""Distributional objectives between a teacher ``p`` and a student ``q``.

All divergences reduce over the last (vocabulary) axis, giving one value per
row, and are then averaged over rows (optionally under a position mask).
Logs use the natural base and every log argument is floored at
``PROB_FLOOR``.
"""

from __future__ import annotations

import enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_FLOOR = 1e-12
LN2 = float(np.log(2.0))


class DivergenceKind(str, enum.Enum):
    FKL = "fkl"
    RKL = "rkl"
    JSD = "jsd"
    JEFFREYS = "jeffreys"


def check_distribution(p, atol: float = 1e-9) -> np.ndarray:
    arr = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("distribution has negative entries")
    if not np.allclose(arr.sum(axis=-1), 1.0, rtol=0, atol=atol):
        raise ValueError("distribution rows do not sum to 1")
    return arr


def _pair(p, q) -> tuple[Tensor, Tensor]:
    p, q = ad.as_tensor(p), ad.as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    return p, q


def _flog(x: Tensor) -> Tensor:
    return ad.log(ad.clamp_min(x, PROB_FLOOR))


def kl_rows(p, q) -> Tensor:
    """sum_i p_i (log p_i - log q_i) per row."""
    p, q = _pair(p, q)
    return ad.tsum(p * (_flog(p) - _flog(q)), axis=-1)


def mixture(p, q) -> Tensor:
    p, q = _pair(p, q)
    return (p + q) * 0.5


def forward_kl_rows(p, q) -> Tensor:
    return kl_rows(p, q)


def reverse_kl_rows(p, q) -> Tensor:
    return kl_rows(q, p)


def jsd_rows(p, q) -> Tensor:
    p, q = _pair(p, q)
    m = mixture(p, q)
    return (kl_rows(p, m) + kl_rows(q, m)) * 0.5


def jeffreys_rows(p, q) -> Tensor:
    p, q = _pair(p, q)
    return kl_rows(p, q) + kl_rows(q, p)


_ROWS = {
    DivergenceKind.FKL: forward_kl_rows,
    DivergenceKind.RKL: reverse_kl_rows,
    DivergenceKind.JSD: jsd_rows,
    DivergenceKind.JEFFREYS: jeffreys_rows,
}


def divergence_rows(kind, p, q) -> Tensor:
    return _ROWS[DivergenceKind(kind)](p, q)


def reduce_rows(rows: Tensor, mask=None) -> Tensor:
    """Mean over all rows, or over rows where ``mask`` is set."""
    if rows.ndim == 0:
        return rows
    if mask is None:
        return ad.mean(rows)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != rows.shape:
        raise ValueError(f"mask shape {m.shape} != row shape {rows.shape}")
    count = m.sum()
    if count <= 0:
        raise ValueError("mask selects no positions")
    return ad.tsum(rows * m) * (1.0 / count)


def divergence(kind, p, q, mask=None) -> Tensor:
    return reduce_rows(divergence_rows(kind, p, q), mask)


def forward_kl(p, q, mask=None) -> Tensor:
    return divergence(DivergenceKind.FKL, p, q, mask)


def reverse_kl(p, q, mask=None) -> Tensor:
    return divergence(DivergenceKind.RKL, p, q, mask)


def jsd(p, q, mask=None) -> Tensor:
    return divergence(DivergenceKind.JSD, p, q, mask)


def jeffreys(p, q, mask=None) -> Tensor:
    return divergence(DivergenceKind.JEFFREYS, p, q, mask)


# -- per-class landscapes in terms of the confidence ratio c = q / p --------

def jsd_perclass_g(c):
    """c ln c - (1 + c) ln((1 + c) / 2); equals ln 2 at c = 0."""
    c = np.asarray(c, dtype=np.float64)
    if np.any(c < 0):
        raise ValueError("confidence ratio must be non-negative")
    clogc = np.where(c > 0, c * np.log(np.where(c > 0, c, 1.0)), 0.0)
    out = clogc - (1.0 + c) * np.log((1.0 + c) / 2.0)
    return float(out) if out.ndim == 0 else out


def jd_perclass_g(c):
    """(c - 1) ln c; unbounded as c -> 0 and c -> inf."""
    c = np.asarray(c, dtype=np.float64)
    if np.any(c <= 0):
        raise ValueError("confidence ratio must be positive")
    out = (c - 1.0) * np.log(c)
    return float(out) if out.ndim == 0 else out


def confidence(p, q, floor: float = PROB_FLOOR) -> np.ndarray:
    """Student-to-teacher probability ratio q_i / max(p_i, floor)."""
    p, q = _pair(p, q)
    return q.data / np.maximum(p.data, floor)


def landscape_curve(cmin: float, cmax: float, points: int) -> np.ndarray:
    """Rows of (c, g_jsd(c), g_jd(c)) on a log-spaced grid that contains c = 1 when in range."""
    if not 0 < cmin < cmax:
        raise ValueError("need 0 < cmin < cmax")
    if points < 2:
        raise ValueError("need at least 2 points")
    c = np.logspace(np.log10(cmin), np.log10(cmax), points)
    if cmin <= 1.0 <= cmax:
        c[np.argmin(np.abs(np.log(c)))] = 1.0
    return np.column_stack([c, jsd_perclass_g(c), jd_perclass_g(c)])


# -- hidden-state regression baseline ---------------------------------------

def mse_feature_loss(h_p, h_q, W_s) -> Tensor:
    """||W_s h_p - h_q||^2 summed over features, averaged over all other axes.

    ``W_s`` has shape [d_student, d_teacher].
    """
    h_p, h_q, W_s = ad.as_tensor(h_p), ad.as_tensor(h_q), ad.as_tensor(W_s)
    if W_s.shape != (h_q.shape[-1], h_p.shape[-1]):
        raise ValueError(
            f"W_s shape {W_s.shape} does not map width {h_p.shape[-1]} to {h_q.shape[-1]}"
        )
    if h_p.shape[:-1] != h_q.shape[:-1]:
        raise ValueError(f"leading shapes differ: {h_p.shape} vs {h_q.shape}")
    diff = ad.matmul(h_p, W_s.transpose(1, 0)) - h_q
    rows = ad.tsum(ad.square(diff), axis=-1)
    return rows if rows.ndim == 0 else ad.mean(rows)
