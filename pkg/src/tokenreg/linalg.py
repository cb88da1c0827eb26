"""Singular values of small dense matrices by one-sided (Hestenes) Jacobi rotations."""

import math
from typing import Tuple

import numpy as np

MAX_SWEEPS = 60
ORTHOGONALITY_TOL = 1e-15


def jacobi_singular_values(a: np.ndarray) -> np.ndarray:
    """
    Singular values of `a` in descending order, min(rows, cols) of them.

    Columns are rotated pairwise until mutually orthogonal; the column norms are then
    the singular values.
    """
    m = np.array(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.shape[1] > m.shape[0]:
        m = m.T.copy()
    cols = m.shape[1]
    if m.size == 0:
        return np.zeros(0)

    for _ in range(MAX_SWEEPS):
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                mp, mq = m[:, p], m[:, q]
                alpha = float(mp @ mp)
                beta = float(mq @ mq)
                gamma = float(mp @ mq)
                if gamma == 0.0 or abs(gamma) <= ORTHOGONALITY_TOL * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * mp - s * mq
                new_q = s * mp + c * mq
                m[:, p], m[:, q] = new_p, new_q
        if not rotated:
            break

    return np.sort(np.linalg.norm(m, axis=0))[::-1]


def singular_extremes(a: np.ndarray) -> Tuple[float, float]:
    s = jacobi_singular_values(a)
    return float(s[-1]), float(s[0])


def lower_gain(a: np.ndarray) -> float:
    """
    sqrt(lambda_min(A A^T)): the smallest factor by which a row covector x can be
    shrunk by x @ A. Zero when A has more rows than columns.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape[0] > a.shape[1]:
        return 0.0
    return singular_extremes(a)[0]


def upper_gain(a: np.ndarray) -> float:
    """Spectral norm of A."""
    return singular_extremes(a)[1]
