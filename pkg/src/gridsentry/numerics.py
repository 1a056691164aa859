"""Dense linear algebra and proximal operators for the structure optimizer.

Matrices throughout this package are dense two-dimensional float64 ndarrays
(row-major). Public operations validate that inputs and results are finite.
All randomness flows through :func:`make_rng`, a seeded PCG64 generator: the
same seed reproduces the identical stream within one build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError

# Dense SVD is only meant for desk-scale problems.
_MAX_SVD_SIDE = 2000


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds yield identical streams."""
    return np.random.default_rng(int(seed))


def require_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array or raise ValueError."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD factors; ``u @ diag(singular_values) @ vt`` rebuilds the input."""

    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.vt


def _symmetric_svd(arr: np.ndarray) -> SvdResult:
    # SVD of a symmetric matrix via its eigendecomposition: for S = Q L Q^T,
    # the singular values are |L| and U picks up the eigenvalue signs. The
    # syevd path converges on iterates that occasionally defeat gesdd.
    eigvals, eigvecs = np.linalg.eigh(arr)
    order = np.argsort(np.abs(eigvals))[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    signs = np.where(eigvals < 0.0, -1.0, 1.0)
    return SvdResult(u=eigvecs * signs, singular_values=np.abs(eigvals),
                     vt=eigvecs.T)


def svd(m) -> SvdResult:
    """Thin SVD with singular values sorted non-increasing.

    Backed by LAPACK's gesdd driver. When gesdd fails to converge on a
    symmetric input (a known weakness of the divide-and-conquer driver),
    the factorization is recovered from the symmetric eigendecomposition
    instead; only an unsalvageable failure raises NumericError.
    """
    arr = require_matrix(m, "svd input")
    if min(arr.shape) > _MAX_SVD_SIDE:
        raise ValueError(
            f"svd supports min(rows, cols) <= {_MAX_SVD_SIDE}, got shape {arr.shape}"
        )
    try:
        u, s, vt = np.linalg.svd(arr, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        if arr.shape[0] == arr.shape[1] and np.array_equal(arr, arr.T):
            try:
                return _symmetric_svd(arr)
            except np.linalg.LinAlgError:
                pass
        raise NumericError(
            "svd did not converge within the LAPACK gesdd iteration cap"
        ) from exc
    return SvdResult(u=u, singular_values=s, vt=vt)


def soft_threshold(m, tau: float) -> np.ndarray:
    """Elementwise shrinkage sign(x) * max(|x| - tau, 0)."""
    if tau < 0:
        raise ValueError(f"soft_threshold needs tau >= 0, got {tau}")
    arr = require_matrix(m, "soft_threshold input")
    if tau == 0:
        return arr.copy()
    return np.sign(arr) * np.maximum(np.abs(arr) - tau, 0.0)


def svt(m, tau: float) -> np.ndarray:
    """Singular value thresholding: soft-threshold the spectrum by tau."""
    if tau < 0:
        raise ValueError(f"svt needs tau >= 0, got {tau}")
    arr = require_matrix(m, "svt input")
    if tau == 0:
        return arr.copy()
    factors = svd(arr)
    shrunk = np.maximum(factors.singular_values - tau, 0.0)
    out = (factors.u * shrunk) @ factors.vt
    if not np.all(np.isfinite(out)):
        raise NumericError("svt produced non-finite entries")
    return out


def symmetrize_clamp(s) -> np.ndarray:
    """Average with the transpose, clamp entries to [0, 1], zero the diagonal."""
    arr = require_matrix(s, "symmetrize_clamp input")
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"symmetrize_clamp needs a square matrix, got {arr.shape}")
    out = np.clip((arr + arr.T) / 2.0, 0.0, 1.0)
    np.fill_diagonal(out, 0.0)
    return out
