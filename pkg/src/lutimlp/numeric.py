"""Small dense linear algebra helpers used by the solver and the tests."""

import numpy as np

DEFAULT_RIDGE = 1e-9


def _as_finite(x, name):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def matmul(a, b):
    """Matrix product with explicit shape checking."""
    a = _as_finite(a, "a")
    b = _as_finite(b, "b")
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def pinv_apply(j, r, ridge=DEFAULT_RIDGE):
    """Least-squares solution of ``j @ x ~= r`` through the normal equations.

    Solves ``(j.T j + ridge I) x = j.T r``. The systems seen here are K x 6,
    so forming the 6 x 6 normal matrix is cheap and well enough conditioned.
    """
    j = _as_finite(j, "j")
    r = _as_finite(r, "r")
    if j.ndim != 2 or r.ndim != 1:
        raise ValueError(f"expected matrix and vector, got {j.shape} and {r.shape}")
    if j.shape[0] != r.shape[0]:
        raise ValueError(f"row mismatch: J has {j.shape[0]} rows, r has {r.shape[0]}")
    if j.shape[1] > j.shape[0]:
        raise ValueError(f"underdetermined system {j.shape}; need cols <= rows")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")

    jtj = j.T @ j
    jtr = j.T @ r
    if ridge > 0:
        jtj = jtj + ridge * np.eye(j.shape[1])
    try:
        chol = np.linalg.cholesky(jtj)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            "normal matrix J^T J is singular; use ridge > 0"
        ) from None
    # cholesky succeeds on some numerically singular matrices
    if np.min(np.abs(np.diag(chol))) <= np.finfo(float).eps * np.max(np.abs(np.diag(chol))):
        raise np.linalg.LinAlgError("normal matrix J^T J is singular; use ridge > 0")
    y = np.linalg.solve(chol, jtr)
    return np.linalg.solve(chol.T, y)
