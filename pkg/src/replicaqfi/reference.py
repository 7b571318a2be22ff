"""Independent small-scale oracles for validating the replica pipeline.

A time-binned collision model builds the output-field density matrix
explicitly (sensor coupled once to each field bin), from which purities,
Renyi traces and the exact eigendecomposition information value follow by
plain dense linear algebra.  None of this shares code paths with the
replica engines, so agreement is a genuine cross-check.  The construction
scales exponentially in the bin count and is for validation only.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.integrate

from .errors import ModelError, NumericsError, PropagationError
from .numerics import dagger, expm, lindblad_dissipator


@dataclass
class BinnedFieldState:
    """Output field on a finite time-bin grid, with its eigensystem."""

    n_bins: int
    trunc: int
    xi: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    top_level_population: float
    photon_number: float

    def purity(self):
        return float(np.sum(self.eigenvalues**2))

    def renyi_trace(self, power):
        return float(np.sum(self.eigenvalues**power))


def collision_field_state(model, theta, t_final, n_bins, trunc=1,
                          leak_tol=None):
    """Explicit output-field state from a time-binned collision model.

    The sensor interacts for one step dt = t_final/n_bins with each field
    bin through exp(sqrt(dt)(J b^dag - h.c.) - i H dt); unmonitored channels
    are applied as exact dissipator half-steps around each bin unitary.
    Leading bias is O(dt).  Exactly one monitored channel is supported.

    When the per-bin truncation keeps three or more levels, a population
    above ``leak_tol`` (default 1e-3) in the top kept level raises, with
    guidance to increase ``trunc``.  At trunc=1 the top level is the
    one-photon sector itself, so the check is reported but not enforced.
    """
    mon = model.monitored_names
    if len(mon) != 1:
        raise ModelError("the collision oracle supports one monitored channel")
    if n_bins < 1 or trunc < 1:
        raise ValueError("need n_bins >= 1 and trunc >= 1")
    d_s = model.dim
    q = trunc + 1
    dim = d_s * q**n_bins
    if dim > 4096:
        raise ModelError(
            f"collision space dimension {dim} too large; reduce n_bins/trunc"
        )
    dt = t_final / n_bins
    sq_dt = math.sqrt(dt)

    lower = np.zeros((q, q), dtype=complex)
    for k in range(q - 1):
        lower[k, k + 1] = math.sqrt(k + 1)

    def embed_bin(op, i):
        out = np.eye(1, dtype=complex)
        out = np.kron(out, np.eye(d_s, dtype=complex))
        for b in range(n_bins):
            out = np.kron(out, op if b == i else np.eye(q, dtype=complex))
        return out

    def embed_sensor(op):
        return np.kron(op, np.eye(q**n_bins, dtype=complex))

    vac = np.zeros((q**n_bins, q**n_bins), dtype=complex)
    vac[0, 0] = 1.0
    rho = np.kron(model.initial_state, vac)

    def sensor_half_step(rho, half4):
        # column-stacking vec index (row, col) = row + col*d, so the reshaped
        # superoperator carries indices [out_col, out_row, in_col, in_row]
        r4 = rho.reshape(d_s, q**n_bins, d_s, q**n_bins)
        r4 = np.einsum("yxba,aibj->xiyj", half4, r4)
        return r4.reshape(dim, dim)

    for i in range(n_bins):
        t_mid = (i + 0.5) * dt
        h_s = np.asarray(model.hamiltonian(theta, t_mid), dtype=complex)
        j_op = model.monitored_jumps(theta, t_mid)[0]
        gen = (-1j * dt * embed_sensor(h_s)
               + sq_dt * (embed_sensor(j_op) @ embed_bin(dagger(lower), i)
                          - embed_sensor(dagger(j_op)) @ embed_bin(lower, i)))
        u = expm(gen)
        unmon = model.unmonitored_jumps(theta, t_mid)
        half4 = None
        if unmon:
            diss = np.zeros((d_s**2, d_s**2), dtype=complex)
            for op, n_th in unmon:
                diss += (n_th + 1.0) * lindblad_dissipator(op)
                if n_th > 0:
                    diss += n_th * lindblad_dissipator(dagger(op))
            half4 = expm(diss, dt / 2.0).reshape(d_s, d_s, d_s, d_s)
            rho = sensor_half_step(rho, half4)
        rho = u @ rho @ dagger(u)
        if half4 is not None:
            rho = sensor_half_step(rho, half4)

    # trace out the sensor
    r4 = rho.reshape(d_s, q**n_bins, d_s, q**n_bins)
    xi = np.einsum("aiaj->ij", r4)
    xi = 0.5 * (xi + dagger(xi))
    tr = float(np.trace(xi).real)
    if abs(tr - 1.0) > 1e-8:
        raise NumericsError(f"binned field trace deviates from 1 by {tr - 1:.2e}")

    top = np.zeros((q, q))
    top[q - 1, q - 1] = 1.0
    number = np.diag(np.arange(q)).astype(complex)
    leak = 0.0
    photons = 0.0
    xi_t = xi.reshape((q,) * n_bins + (q,) * n_bins)
    for i in range(n_bins):
        leak = max(leak, float(_bin_expectation(xi_t, top, i, n_bins).real))
        photons += float(_bin_expectation(xi_t, number, i, n_bins).real)
    if leak_tol is None:
        leak_tol = 1e-3 if trunc >= 2 else np.inf
    if leak > leak_tol:
        raise PropagationError(
            f"top Fock level of a bin reached population {leak:.2e} "
            f"> {leak_tol:.1e}; raise trunc"
        )
    evals, evecs = np.linalg.eigh(xi)
    if np.min(evals) < -1e-10:
        raise NumericsError(
            f"binned field has negative eigenvalue {np.min(evals):.2e}")
    return BinnedFieldState(n_bins=n_bins, trunc=trunc, xi=xi,
                            eigenvalues=evals, eigenvectors=evecs,
                            top_level_population=leak, photon_number=photons)


def _bin_expectation(xi_tensor, op, i, n_bins):
    ket = list(range(n_bins))
    bra = list(range(n_bins))
    bra[i] = n_bins  # open the i-th bra index
    out = np.einsum(xi_tensor, ket + bra, op, [n_bins, i])
    return out


def exact_qfi_eigen(center, plus, minus, h, cutoff=1e-12):
    """Information value from the eigendecomposition of the binned field.

    I = sum over eigenpairs with lambda + lambda' > cutoff of
    2 |<l| dXi |l'>|^2 / (lambda + lambda'), with dXi the central finite
    difference (Xi(theta+h) - Xi(theta-h)) / 2h.
    """
    d_xi = (plus.xi - minus.xi) / (2.0 * h)
    lam = center.eigenvalues
    v = center.eigenvectors
    m = dagger(v) @ d_xi @ v
    pair_sum = lam[:, None] + lam[None, :]
    mask = pair_sum > cutoff
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(mask, 2.0 * np.abs(m) ** 2 / pair_sum, 0.0)
    return float(np.sum(terms))


def analytic_decay_qfi(gamma, t_final):
    """Closed-form information for rate estimation of an exponential photon.

    Evaluates 4(<du|du> - |<u|du>|^2) for u(t) = sqrt(gamma) e^{-gamma t/2}
    on [0, t_final] by quadrature; the t_final -> infinity limit is exactly
    1/gamma^2.
    """
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    if t_final == 0:
        return 0.0

    def u(t):
        return math.sqrt(gamma) * math.exp(-0.5 * gamma * t)

    def du(t):
        return (1.0 / (2.0 * gamma) - 0.5 * t) * u(t)

    dudu, _ = scipy.integrate.quad(lambda t: du(t) ** 2, 0, t_final, limit=400)
    udu, _ = scipy.integrate.quad(lambda t: u(t) * du(t), 0, t_final, limit=400)
    return 4.0 * (dudu - udu**2)


def fm_from_states(plus, minus, m, h, form="closed"):
    """f_m evaluated directly on explicit field states (oracle path).

    ``closed`` uses 2 sum_l C(m,l) tr[dXi Xi^{m-l} dXi Xi^l] with the
    central-difference dXi and Xi = (Xi_+ + Xi_-)/2; ``stencil`` applies the
    4-point mixed-derivative combination of tr[Xi(mu)^{l+1} Xi(nu)^{m-l+1}]
    with the integer coefficients, on the same pair of states.  Both are
    plain matrix algebra, independent of the replica engines.
    """
    from .qfi import coeff_D

    xi_p, xi_m = plus.xi, minus.xi
    if form == "closed":
        d_xi = (xi_p - xi_m) / (2.0 * h)
        xi0 = 0.5 * (xi_p + xi_m)
        powers = [np.eye(xi0.shape[0], dtype=complex)]
        for _ in range(m):
            powers.append(powers[-1] @ xi0)
        total = 0.0
        for l in range(m + 1):
            total += (math.comb(m, l)
                      * np.trace(d_xi @ powers[m - l] @ d_xi @ powers[l]).real)
        return 2.0 * total
    if form == "stencil":
        def tr_block(a_mat, a_pow, b_mat, b_pow):
            return np.trace(np.linalg.matrix_power(a_mat, a_pow)
                            @ np.linalg.matrix_power(b_mat, b_pow)).real

        total = 0.0
        for l in range(m + 1):
            d_ml = coeff_D(m, l)
            if d_ml == 0:
                continue
            a, b = l + 1, m - l + 1
            stencil = (tr_block(xi_p, a, xi_p, b) - tr_block(xi_p, a, xi_m, b)
                       - tr_block(xi_m, a, xi_p, b)
                       + tr_block(xi_m, a, xi_m, b))
            total += d_ml * stencil / (4.0 * h * h)
        return total
    raise ValueError(f"unknown form {form!r}")
