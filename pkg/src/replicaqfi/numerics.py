"""Dense complex linear-algebra kernels and superoperator constructors.

The vectorization convention is column-stacking everywhere: ``vec(X)`` stacks
the columns of ``X``, so that ``vec(A X B) = (B^T kron A) vec(X)``.  Mixing
conventions silently corrupts every downstream quantity, so all modules must
go through the helpers defined here.
"""

import numpy as np
import scipy.linalg

from .errors import NumericsError, ResourceLimitError

# Largest dimension `kron` will produce before refusing.
MAX_KRON_DIM = 1 << 22


def _as_complex_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise NumericsError(f"{name} must be a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericsError(f"{name} contains non-finite entries")
    return a


def vec(x):
    """Column-stacking vectorization of a matrix."""
    return np.asarray(x, dtype=complex).reshape(-1, order="F")


def unvec(v, dim=None):
    """Inverse of :func:`vec`."""
    v = np.asarray(v)
    if dim is None:
        dim = int(round(np.sqrt(v.size)))
    return v.reshape((dim, dim), order="F")


def dagger(a):
    return np.asarray(a).conj().T


def kron(a, b):
    """Kronecker product with a configurable size guard."""
    a = _as_complex_matrix(a, "a")
    b = _as_complex_matrix(b, "b")
    if a.shape[0] * b.shape[0] > MAX_KRON_DIM:
        raise ResourceLimitError(
            f"kron would produce dimension {a.shape[0] * b.shape[0]} "
            f"> {MAX_KRON_DIM}"
        )
    return np.kron(a, b)


def expm(g, t=1.0):
    """Matrix exponential exp(t*g).

    Scaling-and-squaring Pade approximation via scipy; relative accuracy on
    well-conditioned generators is far below the 1e-12 target, which matters
    because Trotter gates built from this routine are reused thousands of
    times per propagation.
    """
    g = _as_complex_matrix(g, "generator")
    if not np.isfinite(t):
        raise NumericsError("expm: non-finite time")
    if t == 0.0:
        return np.eye(g.shape[0], dtype=complex)
    out = scipy.linalg.expm(t * g)
    if not np.all(np.isfinite(out)):
        raise NumericsError("expm produced non-finite entries")
    return out


def mult_superop(a, side):
    """Superoperator of left or right multiplication by ``a``.

    With column-stacking, left multiplication X -> aX is (I kron a) and right
    multiplication X -> Xa is (a^T kron I).
    """
    a = _as_complex_matrix(a, "a")
    eye = np.eye(a.shape[0], dtype=complex)
    if side == "left":
        return np.kron(eye, a)
    if side == "right":
        return np.kron(a.T, eye)
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def lindblad_dissipator(l):
    """Vectorized dissipator D[L]X = L X L^dag - (L^dag L X + X L^dag L)/2."""
    l = _as_complex_matrix(l, "jump operator")
    eye = np.eye(l.shape[0], dtype=complex)
    ll = dagger(l) @ l
    return (
        np.kron(l.conj(), l)
        - 0.5 * np.kron(eye, ll)
        - 0.5 * np.kron(ll.T, eye)
    )


def svd_truncate(m, chi_max, discard_tol):
    """Truncated SVD keeping the dominant singular values.

    Keeps ``k = min(chi_max, smallest k whose discarded squared-singular-value
    weight is <= discard_tol * total)`` values (at least one).  Returns
    ``(u, s, vh, truncation_weight)`` where the weight is the discarded ratio
    of squared singular values.  Ties are broken by keeping the earliest
    columns as produced by the factorization.
    """
    if chi_max < 1:
        raise ValueError("chi_max must be >= 1")
    if discard_tol < 0:
        raise ValueError("discard_tol must be >= 0")
    m = np.ascontiguousarray(m)
    try:
        u, s, vh = scipy.linalg.svd(
            m, full_matrices=False, lapack_driver="gesdd", check_finite=False
        )
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        try:
            u, s, vh = scipy.linalg.svd(
                m, full_matrices=False, lapack_driver="gesvd", check_finite=False
            )
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
            norm = np.linalg.norm(m)
            raise NumericsError(
                f"SVD failed to converge (shape {m.shape}, frobenius {norm:.3e}, "
                f"max |entry| {np.max(np.abs(m)):.3e})"
            ) from exc
    w = s * s
    total = float(w.sum())
    if total == 0.0:
        return u[:, :1], s[:1], vh[:1], 0.0
    # tail[k] = weight discarded when keeping the first k values
    tail = np.concatenate([np.cumsum(w[::-1])[::-1], [0.0]])
    keep = int(np.argmax(tail <= discard_tol * total))
    k = max(1, min(chi_max, keep))
    weight = float(tail[k] / total)
    return u[:, :k], s[:k], vh[:k], weight
