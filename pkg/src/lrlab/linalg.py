"""Dense linear algebra kernels: SVD, low-rank factorization, condition
numbers, and convolution-kernel slicing.

Everything operates on float64 numpy arrays.  The SVD is a one-sided Jacobi
implementation sized for the small matrices this project manipulates (layer
weight matrices, desk-scale experiment sweeps); it trades speed for
simplicity and accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Relative threshold below which a singular value counts as numerically zero.
RANK_RTOL = 1e-10
# Jacobi convergence: largest relative off-diagonal column correlation.
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60
# sigma_min below this fraction of sigma_max: the matrix is treated as singular.
COND_RTOL = 1e-14
# Output norms below this are treated as a degenerate (maximally unstable) map.
OUTPUT_NORM_FLOOR = 1e-12


def check_matrix(a, name="matrix"):
    """Coerce to a 2-D float64 array, rejecting empty or non-finite input."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must be nonempty, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def check_tensor4(t, name="tensor"):
    """Coerce to a 4-D float64 kernel tensor (height, width, in, out)."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 4:
        raise ValueError(f"{name} must be 4-D, got shape {t.shape}")
    if min(t.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError(f"{name} contains non-finite entries")
    return t


@dataclass
class SvdResult:
    """Thin SVD.  u: (n, r), sigma: (r,) nonincreasing, v: (m, r), r = min(n, m)."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self):
        return (self.u * self.sigma) @ self.v.T


@dataclass
class LrfPair:
    """Rank-k factorization A ~ v_factor @ u_factor with v: (n, k), u: (k, m)."""

    v_factor: np.ndarray
    u_factor: np.ndarray
    k: int


def _fill_null_columns(u, null_cols):
    """Replace (near-)zero columns of u with unit vectors orthogonal to the rest.

    Keeps u column-orthonormal when the input matrix was rank deficient.  The
    candidate basis vectors are fixed, so the completion is deterministic.
    """
    n = u.shape[0]
    for j in null_cols:
        u[:, j] = 0.0
        best, best_norm = None, -1.0
        for cand_idx in range(n):
            cand = np.zeros(n)
            cand[cand_idx] = 1.0
            resid = cand - u @ (u.T @ cand)
            norm = np.linalg.norm(resid)
            if norm > best_norm:
                best, best_norm = resid, norm
        # re-orthogonalize once more for 1e-10-level orthonormality
        best = best - u @ (u.T @ best)
        u[:, j] = best / np.linalg.norm(best)
    return u


def svd(a):
    """One-sided Jacobi SVD of a dense matrix.

    Returns an SvdResult whose factors satisfy u.T @ u = I, v.T @ v = I and
    (u * sigma) @ v.T = a to roughly machine precision.  Rotations stop once
    every column pair is relatively orthogonal to JACOBI_TOL or after
    JACOBI_MAX_SWEEPS sweeps.
    """
    a = check_matrix(a)
    n, m = a.shape
    if n < m:
        flipped = svd(a.T)
        return SvdResult(u=flipped.v, sigma=flipped.sigma, v=flipped.u)

    b = a.copy()
    v = np.eye(m)
    for _ in range(JACOBI_MAX_SWEEPS):
        rotated = False
        for p in range(m - 1):
            for q in range(p + 1, m):
                app = b[:, p] @ b[:, p]
                aqq = b[:, q] @ b[:, q]
                apq = b[:, p] @ b[:, q]
                denom = math.sqrt(app * aqq)
                if denom == 0.0 or abs(apq) <= JACOBI_TOL * denom:
                    continue
                rotated = True
                zeta = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                bp = b[:, p].copy()
                b[:, p] = c * bp - s * b[:, q]
                b[:, q] = s * bp + c * b[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if not rotated:
            break

    sigma = np.linalg.norm(b, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    b = b[:, order]
    v = v[:, order]

    u = np.zeros_like(b)
    tiny = max(n, m) * np.finfo(np.float64).eps * (sigma[0] if sigma[0] > 0 else 1.0)
    null_cols = []
    for j in range(m):
        if sigma[j] > tiny:
            u[:, j] = b[:, j] / sigma[j]
        else:
            null_cols.append(j)
    if null_cols:
        u = _fill_null_columns(u, null_cols)
    return SvdResult(u=u, sigma=sigma, v=v)


def matrix_rank(a):
    """Numerical rank: count of singular values above RANK_RTOL * sigma_max."""
    sigma = svd(a).sigma
    if sigma[0] == 0.0:
        return 0
    return int(np.sum(sigma > RANK_RTOL * sigma[0]))


def lrf(a, k):
    """Best rank-k factorization of a in Frobenius norm, via truncated SVD.

    Requires 1 <= k < numerical rank of a; the residual of the returned pair
    equals sqrt(sum of the squared singular values beyond index k).
    """
    a = check_matrix(a)
    k = int(k)
    rank = matrix_rank(a)
    if k < 1:
        raise ValueError(f"rank k must be >= 1, got {k}")
    if k >= rank:
        raise ValueError(f"k={k} must be below the matrix rank {rank}; nothing to truncate")
    res = svd(a)
    v_factor = res.u[:, :k] * res.sigma[:k]
    u_factor = res.v[:, :k].T.copy()
    return LrfPair(v_factor=v_factor, u_factor=u_factor, k=k)


def lrf_reconstruct(pair):
    """Multiply the factors back into a full matrix of the original shape."""
    return pair.v_factor @ pair.u_factor


def matrix_condition_number(a):
    """sigma_max / sigma_min, or +inf when the matrix is numerically singular."""
    sigma = svd(a).sigma
    smax, smin = sigma[0], sigma[-1]
    if smax == 0.0 or smin < COND_RTOL * smax:
        return math.inf
    return float(smax / smin)


def map_condition_number(jacobian_norm, param_norm, output_norm):
    """Condition number of a parameterized map: ||J|| ||theta|| / ||f||.

    A vanishing output norm means the map is maximally unstable; the sentinel
    +inf is returned instead of dividing by (near) zero.
    """
    if output_norm < OUTPUT_NORM_FLOOR:
        return math.inf
    return float(jacobian_norm * param_norm / output_norm)


def slice_tensor(t):
    """Slice a 4-D kernel into one (height*width, out) matrix per input channel."""
    t = check_tensor4(t)
    fh, fw, in_ch, fn = t.shape
    return [t[:, :, c, :].reshape(fh * fw, fn).copy() for c in range(in_ch)]


def unslice_tensor(slices, filter_hw):
    """Inverse of slice_tensor: rebuild the kernel from per-channel matrices."""
    fh, fw = filter_hw
    if not slices:
        raise ValueError("need at least one slice")
    fn = slices[0].shape[1]
    planes = [np.asarray(s, dtype=np.float64).reshape(fh, fw, fn) for s in slices]
    return np.stack(planes, axis=2)
