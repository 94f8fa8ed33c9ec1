"""Unit-sphere embeddings: row normalization, Gram matrices and the
normalization Jacobian.

Matrices are plain ``float64`` numpy arrays with one embedding per row.
Long-double inputs are passed through untouched so that verification
oracles can run the same code at extended precision.
"""

import numpy as np

DEFAULT_EPS = 1e-12


class DegenerateRowError(ValueError):
    """Raised when a row is too short to be projected onto the sphere."""

    def __init__(self, row, norm):
        self.row = int(row)
        self.norm = float(norm)
        super().__init__(f"row {self.row} has norm {self.norm:.3e}, cannot normalize")


def as_real(x):
    """float64 array, or long double if the input already is one."""
    x = np.asarray(x)
    return x if x.dtype == np.longdouble else x.astype(np.float64, copy=False)


def _as_matrix(W):
    W = as_real(W)
    if W.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValueError("matrix contains non-finite entries")
    return W


def row_norms(W, eps=DEFAULT_EPS):
    """Euclidean norm of each row; raises DegenerateRowError below ``eps``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    norms = np.linalg.norm(W, axis=1)
    bad = np.flatnonzero(norms < eps)
    if bad.size:
        raise DegenerateRowError(bad[0], norms[bad[0]])
    return norms


def normalize_rows(W, eps=DEFAULT_EPS):
    """Project every row of ``W`` onto the unit sphere."""
    W = _as_matrix(W)
    return W / row_norms(W, eps)[:, None]


def is_unit_rows(Z, tol=1e-12):
    Z = as_real(Z)
    return Z.ndim == 2 and bool(np.all(np.abs(np.linalg.norm(Z, axis=1) - 1.0) <= tol))


def pairwise_inner(Z):
    """Gram matrix ``Z @ Z.T`` of a set of unit rows."""
    Z = _as_matrix(Z)
    if Z.shape[0] == 0:
        raise ValueError("need at least one row")
    G = Z @ Z.T
    # exact symmetry; the BLAS product can differ in the last bit
    return 0.5 * (G + G.T)


def normalization_jacobian_apply(w, g_z, eps=DEFAULT_EPS):
    """Pull a gradient back through ``z = w / ||w||``.

    Returns ``(g_z - (z . g_z) z) / ||w||``, i.e. ``(I - z z^T) g_z / ||w||``.
    Works on single vectors or row-wise on matrices of matching shape.
    """
    w = as_real(w)
    g_z = as_real(g_z)
    if w.shape != g_z.shape:
        raise ValueError(f"shape mismatch {w.shape} vs {g_z.shape}")
    single = w.ndim == 1
    W = np.atleast_2d(w)
    G = np.atleast_2d(g_z)
    norms = row_norms(W, eps)
    Z = W / norms[:, None]
    radial = np.einsum("ij,ij->i", Z, G)
    out = (G - radial[:, None] * Z) / norms[:, None]
    return out[0] if single else out
