"""Exact dense propagation of the replica master equation.

The replica state lives in the tensor product of one Liouville space (of
dimension D^2) per replica.  The generator is the sum of an independent
no-jump Liouvillian per replica plus, for every monitored channel, a
collective jump term that left-multiplies replica alpha+1 and
right-multiplies replica alpha, with periodic boundary on the replica index.
This module is the oracle for the tensor-network engine and the production
path for small replica counts.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse

from ._threads import small_matrix_threads
from .bargmann import BargmannSeries, ReplicaPattern
from .errors import PropagationError, ResourceLimitError
from .model import build_liouvillian_L0
from .numerics import dagger, mult_superop, vec

DENSE_LIMIT = 4**10
MATERIALIZE_LIMIT = 4**6
SPARSE_MAX_NNZ = 6_000_000


@dataclass
class ReplicaStateDense:
    """Full replica state as a (d, d, ..., d) tensor, d = D^2 per replica."""

    amplitudes: np.ndarray
    pattern: ReplicaPattern
    t: float = 0.0


def initial_replica_state(model, pattern):
    """Product initial condition: one vectorized initial state per replica."""
    v0 = vec(model.initial_state)
    amp = v0
    for _ in range(pattern.n_replicas - 1):
        amp = np.multiply.outer(amp, v0)
    return ReplicaStateDense(amplitudes=amp, pattern=pattern, t=0.0)


def _term_matrices(model, pattern, t, channels=None):
    """Per-replica small matrices implementing the generator term by term.

    Returns (l0_mats, jump_terms) where jump_terms is a list of
    (axis_right, right_matrix, axis_left, left_matrix): the collective jump
    of replica pair (alpha, alpha+1) right-multiplies axis alpha by
    J^dag(theta_alpha) and left-multiplies axis alpha+1 by J(theta_alpha+1).
    """
    p = pattern.n_replicas
    thetas = pattern.thetas
    sel = model.monitored_names if channels is None else tuple(channels)
    l0_cache = {}
    for th in set(thetas):
        l0_cache[th] = build_liouvillian_L0(model, th, t, channels=sel)
    l0_mats = [l0_cache[thetas[a]] for a in range(p)]
    jmp_cache = {}
    for th in set(thetas):
        jmp_cache[th] = model.monitored_jumps(th, t, names=sel)
    jump_terms = []
    for a in range(p):
        nxt = (a + 1) % p
        for j_cur, j_nxt in zip(jmp_cache[thetas[a]], jmp_cache[thetas[nxt]]):
            jump_terms.append((
                a, mult_superop(dagger(j_cur), "right"),
                nxt, mult_superop(j_nxt, "left"),
            ))
    return l0_mats, jump_terms


def _apply_axis(mat, tensor, axis):
    out = np.tensordot(mat, tensor, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def _apply_generator(tensor, l0_mats, jump_terms):
    out = np.zeros_like(tensor)
    for axis, mat in enumerate(l0_mats):
        out += _apply_axis(mat, tensor, axis)
    for a, rmat, b, lmat in jump_terms:
        out += _apply_axis(lmat, _apply_axis(rmat, tensor, a), b)
    return out


def _sparse_generator(l0_mats, jump_terms, d, p, max_nnz=SPARSE_MAX_NNZ):
    """Assemble the full generator as one CSR matrix, or None if too large."""
    nnz_estimate = sum(np.count_nonzero(m) for m in l0_mats) * d ** (p - 1)
    for _, rmat, _, lmat in jump_terms:
        nnz_estimate += (np.count_nonzero(rmat) * np.count_nonzero(lmat)
                         * d ** (p - 2))
    if nnz_estimate > max_nnz:
        return None

    def embed(slot_mats):
        blocks = []
        pos = 0
        for axis in sorted(slot_mats):
            if axis > pos:
                blocks.append(scipy.sparse.identity(d ** (axis - pos),
                                                    dtype=complex, format="csr"))
            blocks.append(scipy.sparse.csr_matrix(slot_mats[axis]))
            pos = axis + 1
        if pos < p:
            blocks.append(scipy.sparse.identity(d ** (p - pos), dtype=complex,
                                                format="csr"))
        out = blocks[0]
        for blk in blocks[1:]:
            out = scipy.sparse.kron(out, blk, format="csr")
        return out

    gen = embed({0: l0_mats[0]})
    for axis in range(1, p):
        gen = gen + embed({axis: l0_mats[axis]})
    for a, rmat, b, lmat in jump_terms:
        gen = gen + embed({a: rmat, b: lmat})
    return gen.tocsr()


def build_replica_generator(model, pattern, t=0.0, channels=None,
                            dense_limit=DENSE_LIMIT):
    """Materialized generator matrix on the replica Liouville space.

    Only intended for small sizes and unit tests; propagation applies the
    generator term by term (or as a sparse matrix) without ever forming the
    full square matrix.
    """
    d = model.dim**2
    size = d ** pattern.n_replicas
    if size > dense_limit:
        raise ResourceLimitError(
            f"replica Liouville dimension {size} exceeds the dense limit "
            f"{dense_limit}; use the tensor-network engine"
        )
    if size > MATERIALIZE_LIMIT:
        raise ResourceLimitError(
            f"refusing to materialize a {size}x{size} generator; propagate "
            "matrix-free instead"
        )
    l0_mats, jump_terms = _term_matrices(model, pattern, t, channels)
    gen = _sparse_generator(l0_mats, jump_terms, d, pattern.n_replicas,
                            max_nnz=np.inf)
    return gen.toarray()


def _trace_functional(tensor, d, dim):
    tvec = vec(np.eye(dim))
    out = tensor
    for _ in range(tensor.ndim):
        out = np.tensordot(tvec, out, axes=([0], [0]))
    return complex(out)


def propagate_dense(state, model, t_grid, dt=1e-3, channels=None,
                    dense_limit=DENSE_LIMIT, self_check=False,
                    self_check_tol=1e-8, expm_step=False):
    """Integrate the replica master equation and record the trace.

    Classic fixed-step RK4; for time-dependent models the generator is
    frozen at each step midpoint.  Exact exponential stepping is available
    for time-independent generators small enough to exponentiate.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    d = model.dim**2
    p = state.pattern.n_replicas
    if d**p > dense_limit:
        raise ResourceLimitError(
            f"replica Liouville dimension {d**p} exceeds the dense limit "
            f"{dense_limit}; use the tensor-network engine"
        )
    values = np.empty(len(t_grid), dtype=complex)
    tensor = state.amplitudes.astype(complex, copy=True)
    values[0] = _trace_functional(tensor, d, model.dim)

    static = not model.time_dependent
    l0_mats = jump_terms = gen = step_mat = None
    if static:
        l0_mats, jump_terms = _term_matrices(model, state.pattern, 0.0, channels)
        if expm_step:
            if d**p > MATERIALIZE_LIMIT:
                raise ResourceLimitError(
                    "exponential stepping needs a materialized generator; "
                    f"dimension {d**p} is too large"
                )
            spacing = np.diff(t_grid)
            if len(spacing) and np.max(np.abs(spacing - spacing[0])) > 1e-12:
                raise PropagationError("exponential stepping needs a uniform grid")
            from .numerics import expm as _expm
            gen_mat = build_replica_generator(model, state.pattern, 0.0, channels,
                                              dense_limit)
            step_mat = _expm(gen_mat, float(spacing[0])) if len(spacing) else None
        else:
            gen = _sparse_generator(l0_mats, jump_terms, d, p)

    def rk4_span(tensor, t0, t1):
        n_sub = max(1, int(round((t1 - t0) / dt)))
        h = (t1 - t0) / n_sub
        if static and gen is not None:
            v = tensor.reshape(-1)
            for _ in range(n_sub):
                k1 = gen @ v
                k2 = gen @ (v + 0.5 * h * k1)
                k3 = gen @ (v + 0.5 * h * k2)
                k4 = gen @ (v + h * k3)
                v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            return v.reshape((d,) * p)
        for k in range(n_sub):
            if static:
                mats = (l0_mats, jump_terms)
            else:
                mats = _term_matrices(model, state.pattern,
                                      t0 + (k + 0.5) * h, channels)
            k1 = _apply_generator(tensor, *mats)
            k2 = _apply_generator(tensor + 0.5 * h * k1, *mats)
            k3 = _apply_generator(tensor + 0.5 * h * k2, *mats)
            k4 = _apply_generator(tensor + h * k3, *mats)
            tensor = tensor + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return tensor

    with small_matrix_threads():
        for i in range(1, len(t_grid)):
            if step_mat is not None:
                tensor = (step_mat @ tensor.reshape(-1)).reshape((d,) * p)
            else:
                tensor = rk4_span(tensor, t_grid[i - 1], t_grid[i])
            if not np.all(np.isfinite(tensor)):
                raise PropagationError(
                    f"non-finite replica amplitudes at t={t_grid[i]:.6g} "
                    f"(dt={dt:.3e}, pattern size {p})"
                )
            values[i] = _trace_functional(tensor, d, model.dim)

    diagnostics = {
        "max_chi": np.zeros(len(t_grid), dtype=int),
        "max_entropy": np.zeros(len(t_grid)),
        "trunc_weight": np.zeros(len(t_grid)),
    }
    if self_check and len(t_grid) > 1:
        half = propagate_dense(state, model, t_grid, dt=dt / 2.0,
                               channels=channels, dense_limit=dense_limit,
                               self_check=False, expm_step=expm_step)
        delta = float(np.max(np.abs(half.values - values)))
        diagnostics["self_check_delta"] = delta
        if delta > self_check_tol:
            warnings.warn(
                f"halving dt changes the trace by {delta:.2e} "
                f"(> {self_check_tol:.0e}); decrease dt", stacklevel=2
            )
    state.amplitudes = tensor
    state.t = float(t_grid[-1])
    return BargmannSeries(pattern=state.pattern, times=t_grid, values=values,
                          engine="dense", diagnostics=diagnostics)


def bargmann_dense(model, pattern, t_grid, dt=1e-3, channels=None,
                   dense_limit=DENSE_LIMIT, **kwargs):
    """Product initial condition, propagate, emit the trace series."""
    if not isinstance(pattern, ReplicaPattern):
        pattern = ReplicaPattern(tuple(pattern))
    state = initial_replica_state(model, pattern)
    return propagate_dense(state, model, t_grid, dt=dt, channels=channels,
                           dense_limit=dense_limit, **kwargs)
