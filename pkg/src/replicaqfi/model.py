"""Declarative construction of parameterized open-sensor models.

A :class:`SensorModel` bundles the Hamiltonian, the monitored emission
channels and the unmonitored (traced-out) channels of one open quantum
sensor, all as functions of a single named scalar parameter ``theta`` and of
time.  Builders are provided for the driven two-level and D-level emitters,
for cascading an upstream photon source into the monitored waveguide, and
for embedding structured (non-Markovian) environments as damped auxiliary
modes.
"""

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.integrate
import scipy.optimize

from .errors import ModelError, PropagationError
from .numerics import dagger, kron, lindblad_dissipator, mult_superop

HERM_TOL = 1e-12


@dataclass(frozen=True)
class Channel:
    """One emission channel: a jump-operator function plus its bookkeeping.

    ``op(theta, t)`` returns the jump operator (rate absorbed inside).
    Monitored channels are measured output fields; unmonitored ones are
    traced out and may carry a thermal occupation ``n_thermal``.
    """

    name: str
    op: object
    monitored: bool
    n_thermal: float = 0.0


@dataclass(frozen=True, eq=False)
class SensorModel:
    """Immutable definition of one open sensor.

    ``hamiltonian(theta, t)`` and every channel operator must be pure
    functions (same arguments give the same matrix), which makes the model
    safely shareable across worker threads.
    """

    dim: int
    hamiltonian: object
    channels: tuple
    initial_state: np.ndarray
    theta_ref: float = 0.0
    time_dependent: bool = False
    cache_token: str = ""
    mode_projectors: tuple = ()

    def __post_init__(self):
        rho = np.asarray(self.initial_state, dtype=complex)
        object.__setattr__(self, "initial_state", rho)
        if rho.shape != (self.dim, self.dim):
            raise ModelError(f"initial state must be {self.dim}x{self.dim}")
        if np.max(np.abs(rho - dagger(rho))) > HERM_TOL:
            raise ModelError("initial state is not Hermitian")
        if abs(np.trace(rho) - 1.0) > HERM_TOL:
            raise ModelError("initial state trace differs from 1")
        if np.min(np.linalg.eigvalsh(rho)) < -1e-10:
            raise ModelError("initial state is not positive semidefinite")
        h = np.asarray(self.hamiltonian(self.theta_ref, 0.0))
        if h.shape != (self.dim, self.dim):
            raise ModelError("hamiltonian has wrong dimension")
        if np.max(np.abs(h - dagger(h))) > 1e-10:
            raise ModelError("hamiltonian is not Hermitian at (theta_ref, 0)")
        for c in self.channels:
            if c.monitored and c.n_thermal != 0.0:
                raise ModelError(
                    f"channel {c.name!r}: thermal occupation is only supported "
                    "on unmonitored channels (monitored input must be vacuum)"
                )
            op = np.asarray(c.op(self.theta_ref, 0.0))
            if op.shape != (self.dim, self.dim):
                raise ModelError(f"channel {c.name!r} operator has wrong dimension")

    @property
    def monitored_names(self):
        return tuple(c.name for c in self.channels if c.monitored)

    def monitored_jumps(self, theta, t=0.0, names=None):
        """Jump operators of the monitored channels, in channel order."""
        sel = self.monitored_names if names is None else tuple(names)
        by_name = {c.name: c for c in self.channels}
        return [np.asarray(by_name[n].op(theta, t), dtype=complex) for n in sel]

    def unmonitored_jumps(self, theta, t=0.0):
        """(operator, thermal occupation) pairs of the unmonitored channels."""
        return [
            (np.asarray(c.op(theta, t), dtype=complex), c.n_thermal)
            for c in self.channels
            if not c.monitored
        ]


def retag_monitored(model, names):
    """Copy of ``model`` with the monitored set replaced by ``names``."""
    names = tuple(names)
    known = {c.name for c in model.channels}
    unknown = set(names) - known
    if unknown:
        raise ModelError(f"unknown channel names {sorted(unknown)}")
    channels = tuple(
        replace(c, monitored=c.name in names) for c in model.channels
    )
    for c in channels:
        if c.monitored and c.n_thermal != 0.0:
            raise ModelError(f"cannot monitor thermal channel {c.name!r}")
    token = f"{model.cache_token}|mon={','.join(sorted(names))}"
    return replace(model, channels=channels, cache_token=token)


def build_liouvillian_L0(model, theta, t=0.0, channels=None):
    """No-jump Liouvillian of the sensor, vectorized.

    Monitored channels contribute only the -{J^dag J, .}/2 anticommutator
    (their emission is accounted for by collective jump terms elsewhere);
    unmonitored channels enter as full dissipators, thermally weighted as
    (n+1) D[L] + n D[L^dag].
    """
    d = model.dim
    eye = np.eye(d, dtype=complex)
    h = np.asarray(model.hamiltonian(theta, t), dtype=complex)
    l0 = -1j * (np.kron(eye, h) - np.kron(h.T, eye))
    sel = model.monitored_names if channels is None else tuple(channels)
    for c in model.channels:
        op = np.asarray(c.op(theta, t), dtype=complex)
        if c.name in sel:
            q = dagger(op) @ op
            l0 -= 0.5 * (np.kron(eye, q) + np.kron(q.T, eye))
        else:
            l0 += (c.n_thermal + 1.0) * lindblad_dissipator(op)
            if c.n_thermal > 0.0:
                l0 += c.n_thermal * lindblad_dissipator(dagger(op))
    return l0


def _sqrt_rate(value, name):
    if value < 0:
        raise ModelError(f"negative rate for {name}: {value}")
    return math.sqrt(value)


def _tls_initial(initial_state):
    if isinstance(initial_state, str):
        if initial_state == "g":
            return np.diag([1.0, 0.0]).astype(complex)
        if initial_state == "e":
            return np.diag([0.0, 1.0]).astype(complex)
        raise ModelError(f"unknown initial state {initial_state!r}")
    return np.asarray(initial_state, dtype=complex)


def build_tls(delta, omega, gamma_f, gamma_b, monitored=("f",), theta="omega",
              initial_state="g"):
    """Driven two-level emitter coupled to forward (f) and backward (b) fields.

    Basis ordering is (g, e).  The Hamiltonian in the rotating frame is
    -delta |e><e| + (omega |e><g| + h.c.)/2 and each channel couples through
    sqrt(rate) |g><e|.  ``theta`` names the parameter that the scalar
    argument of the operator functions replaces.
    """
    return build_dlevel(2, delta, omega, gamma_f, gamma_b,
                        monitored=monitored, theta=theta,
                        initial_state=initial_state, _token_head="tls")


def build_dlevel(levels, delta, omega, gamma_f, gamma_b, monitored=("f",),
                 theta="omega", initial_state="g", _token_head="dlevel"):
    """Bidirectional D-level emitter with a truncated ladder operator.

    The lowering operator is sum_d sqrt(d+1)|d><d+1|, the Hamiltonian is
    -delta a^dag a + (omega a^dag + h.c.)/2 and both channels couple via
    sqrt(rate) a.  ``levels`` = 2 reduces to :func:`build_tls`.
    """
    if levels < 2:
        raise ModelError("a D-level emitter needs at least 2 levels")
    if gamma_f < 0 or gamma_b < 0:
        raise ModelError("emission rates must be >= 0")
    base = {"delta": float(delta), "omega": float(omega),
            "gamma_f": float(gamma_f), "gamma_b": float(gamma_b)}
    if theta not in base:
        raise ModelError(f"unknown parameter name {theta!r}")
    monitored = tuple(monitored)
    if not set(monitored) <= {"f", "b"}:
        raise ModelError("monitored must be a subset of {'f', 'b'}")
    if not monitored or all(base[f"gamma_{c}"] == 0.0 for c in monitored):
        if base["omega"] != 0.0:
            warnings.warn("no monitored emission: nothing to measure",
                          stacklevel=2)

    a = np.zeros((levels, levels), dtype=complex)
    for d in range(levels - 1):
        a[d, d + 1] = math.sqrt(d + 1)
    num = dagger(a) @ a

    def resolve(th):
        p = dict(base)
        p[theta] = float(th)
        return p

    def ham(th, t):
        p = resolve(th)
        return -p["delta"] * num + 0.5 * (p["omega"] * dagger(a)
                                          + np.conj(p["omega"]) * a)

    def jump(channel):
        def op(th, t):
            p = resolve(th)
            return _sqrt_rate(p[f"gamma_{channel}"], f"gamma_{channel}") * a
        return op

    channels = tuple(
        Channel(name, jump(name), monitored=name in monitored)
        for name in ("f", "b")
    )
    if isinstance(initial_state, str) and initial_state in ("g", "ground"):
        rho0 = np.zeros((levels, levels), dtype=complex)
        rho0[0, 0] = 1.0
    elif isinstance(initial_state, str) and initial_state == "e":
        rho0 = np.zeros((levels, levels), dtype=complex)
        rho0[1, 1] = 1.0
    else:
        rho0 = _tls_initial(initial_state) if levels == 2 else np.asarray(
            initial_state, dtype=complex)
    token = (f"{_token_head}(D={levels},{','.join(f'{k}={v}' for k, v in base.items())},"
             f"theta={theta},mon={','.join(monitored)},init={_initial_token(rho0)})")
    return SensorModel(dim=levels, hamiltonian=ham, channels=channels,
                       initial_state=rho0, theta_ref=base[theta],
                       cache_token=token)


def _initial_token(rho):
    return "p" + "".join(f"{abs(x):.6g}" for x in np.diag(rho))


# ---------------------------------------------------------------------------
# Upstream photon sources (cascaded construction)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SourceSpec:
    """Ancillary open system that synthesizes the waveguide input field."""

    ancilla_dim: int
    ancilla_initial: np.ndarray
    wavepacket: object
    emission_rate: object
    hamiltonian: object
    gamma_cap: float
    token: str = "source"


def single_photon_source(u, gamma_cap=None, t_max=40.0, grid_points=1 << 18,
                         freeze_eps=1e-8):
    """Two-level ancilla emitting a single photon with temporal profile ``u``.

    The decay rate that realizes the profile is u(t)^2 / (1 - int_0^t u^2),
    capped at ``gamma_cap`` (default 50 / rms width of u) and frozen to zero
    once the residual photon weight 1 - int u^2 drops below ``freeze_eps``,
    where the exact expression diverges while the remaining weight is below
    discretization error.
    """
    grid = np.linspace(0.0, float(t_max), int(grid_points))
    u2 = np.asarray([u(t) for t in grid], dtype=float) ** 2
    cum = scipy.integrate.cumulative_simpson(u2, x=grid, initial=0.0)
    norm = cum[-1]
    if abs(norm - 1.0) > 1e-6:
        raise ModelError(
            f"wavepacket is not square-normalized on [0, {t_max}]: "
            f"integral = {norm:.8f}"
        )
    if np.min(1.0 - cum) < -1e-6:
        raise ModelError("cumulative wavepacket weight exceeds 1")
    if gamma_cap is None:
        t_mean = float(np.trapezoid(grid * u2, grid))
        t_sq = float(np.trapezoid(grid**2 * u2, grid))
        tau = math.sqrt(max(t_sq - t_mean**2, 1e-12))
        gamma_cap = 50.0 / tau
    gamma_cap = float(gamma_cap)

    def emission_rate(t):
        remaining = 1.0 - float(np.interp(t, grid, cum, right=cum[-1]))
        if remaining < freeze_eps:
            return 0.0
        ut = u(t)
        return min(ut * ut / remaining, gamma_cap)

    rho_a = np.diag([0.0, 1.0]).astype(complex)
    return SourceSpec(
        ancilla_dim=2,
        ancilla_initial=rho_a,
        wavepacket=u,
        emission_rate=emission_rate,
        hamiltonian=lambda t: np.zeros((2, 2), dtype=complex),
        gamma_cap=gamma_cap,
        token=f"sps(cap={gamma_cap:.6g},tmax={t_max:.6g})",
    )


def cascade_with_source(model, source):
    """Composite model with ``source`` feeding the monitored waveguide.

    The ancilla sits upstream, so the composite Hamiltonian gains
    H_A + (i/2)(J J_A^dag - J_A J^dag) and the monitored jump becomes
    J + J_A.  Exactly one monitored channel is required (the photon is
    injected into a single waveguide); other channels are embedded
    unchanged.
    """
    mon = model.monitored_names
    if len(mon) != 1:
        raise ModelError(
            "cascading requires exactly one monitored channel on the sensor, "
            f"got {mon}"
        )
    target = mon[0]
    da, ds = source.ancilla_dim, model.dim
    eye_a = np.eye(da, dtype=complex)
    eye_s = np.eye(ds, dtype=complex)
    lower = np.zeros((da, da), dtype=complex)
    for k in range(da - 1):
        lower[k, k + 1] = math.sqrt(k + 1)

    def emb_a(x):
        return np.kron(x, eye_s)

    def emb_s(x):
        return np.kron(eye_a, x)

    def jump_a(t):
        return math.sqrt(source.emission_rate(t)) * lower

    by_name = {c.name: c for c in model.channels}
    target_op = by_name[target].op

    def ham(th, t):
        js = emb_s(np.asarray(target_op(th, t), dtype=complex))
        ja = emb_a(jump_a(t))
        h_casc = 0.5j * (js @ dagger(ja) - ja @ dagger(js))
        return (emb_a(np.asarray(source.hamiltonian(t), dtype=complex))
                + emb_s(np.asarray(model.hamiltonian(th, t), dtype=complex))
                + h_casc)

    def monitored_op(th, t):
        return emb_s(np.asarray(target_op(th, t), dtype=complex)) + emb_a(jump_a(t))

    channels = []
    for c in model.channels:
        if c.name == target:
            channels.append(Channel(c.name, monitored_op, monitored=True))
        else:
            op = c.op
            channels.append(Channel(
                c.name,
                lambda th, t, _op=op: emb_s(np.asarray(_op(th, t), dtype=complex)),
                monitored=c.monitored,
                n_thermal=c.n_thermal,
            ))
    rho0 = np.kron(source.ancilla_initial, model.initial_state)
    return SensorModel(
        dim=da * ds,
        hamiltonian=ham,
        channels=tuple(channels),
        initial_state=rho0,
        theta_ref=model.theta_ref,
        time_dependent=True,
        cache_token=f"casc[{model.cache_token}|{source.token}]",
    )


# ---------------------------------------------------------------------------
# Pseudomode embedding of structured environments
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PseudomodeSpec:
    """Damped auxiliary modes replicating a structured environment.

    Each mode is (frequency nu, correlation decay rate gamma, coupling g,
    fock_truncation n_max); the reproduced spectrum is
    S(w) = sum_r |g_r|^2 gamma_r / (gamma_r^2 + (w - nu_r)^2), i.e. the
    environment correlation function decays as |g_r|^2 e^{-i nu_r t - gamma_r t}.
    """

    modes: tuple
    coupling_operator: np.ndarray = None
    fit_residual: float = None


def lorentzian_spectrum(spec, omega):
    """Spectrum reproduced by a :class:`PseudomodeSpec` on a frequency grid."""
    omega = np.asarray(omega, dtype=float)
    total = np.zeros_like(omega)
    for nu, gamma, g, _ in spec.modes:
        total += (abs(g) ** 2) * gamma / (gamma**2 + (omega - nu) ** 2)
    return total


def attach_pseudomodes(model, spec):
    """Composite model of the sensor plus its damped auxiliary modes.

    Appends nu_r c_r^dag c_r to the Hamiltonian, the sensor-mode coupling
    A_S (g_r c_r + h.c.), and an unmonitored damping channel per mode with
    rate 2*gamma_r, which makes the mode correlation function decay exactly
    at gamma_r as demanded by the Lorentzian spectrum convention above.
    Monitored jumps act on the sensor factor unchanged; modes start in the
    ground state.
    """
    if spec.coupling_operator is None:
        raise ModelError("pseudomode spec has no coupling operator")
    a_s = np.asarray(spec.coupling_operator, dtype=complex)
    if a_s.shape != (model.dim, model.dim):
        raise ModelError("coupling operator has wrong dimension")
    mode_dims = []
    for nu, gamma, g, n_max in spec.modes:
        if n_max < 1:
            raise ModelError("fock truncation must be >= 1")
        if gamma <= 0:
            raise ModelError("mode damping must be > 0")
        mode_dims.append(int(n_max) + 1)
    dim_p = int(np.prod(mode_dims))
    eye_s = np.eye(model.dim, dtype=complex)

    def emb_s(x):
        return np.kron(x, np.eye(dim_p, dtype=complex))

    def emb_mode(x, r):
        out = x if r == 0 else np.eye(mode_dims[0], dtype=complex)
        for k in range(1, len(mode_dims)):
            blk = x if k == r else np.eye(mode_dims[k], dtype=complex)
            out = np.kron(out, blk)
        return np.kron(eye_s, out)

    lowers, numbers, tops = [], [], []
    for r, q in enumerate(mode_dims):
        c = np.zeros((q, q), dtype=complex)
        for k in range(q - 1):
            c[k, k + 1] = math.sqrt(k + 1)
        lowers.append(emb_mode(c, r))
        numbers.append(emb_mode(dagger(c) @ c, r))
        top = np.zeros((q, q), dtype=complex)
        top[q - 1, q - 1] = 1.0
        tops.append(emb_mode(top, r))

    h_modes = np.zeros((model.dim * dim_p,) * 2, dtype=complex)
    for (nu, gamma, g, n_max), c_emb, n_emb in zip(spec.modes, lowers, numbers):
        h_modes = h_modes + nu * n_emb
        coupling = g * c_emb + np.conj(g) * dagger(c_emb)
        h_modes = h_modes + emb_s(a_s) @ coupling

    def ham(th, t):
        return emb_s(np.asarray(model.hamiltonian(th, t), dtype=complex)) + h_modes

    channels = []
    for c in model.channels:
        op = c.op
        channels.append(Channel(
            c.name,
            lambda th, t, _op=op: emb_s(np.asarray(_op(th, t), dtype=complex)),
            monitored=c.monitored,
            n_thermal=c.n_thermal,
        ))
    for r, ((nu, gamma, g, n_max), c_emb) in enumerate(zip(spec.modes, lowers)):
        damp = math.sqrt(2.0 * gamma) * c_emb
        channels.append(Channel(
            f"mode{r}", lambda th, t, _m=damp: _m, monitored=False))

    ground = np.zeros((dim_p, dim_p), dtype=complex)
    ground[0, 0] = 1.0
    rho0 = np.kron(model.initial_state, ground)
    modes_token = ";".join(
        f"{nu:.6g},{gamma:.6g},{abs(g):.6g},{n_max}" for nu, gamma, g, n_max in spec.modes
    )
    return SensorModel(
        dim=model.dim * dim_p,
        hamiltonian=ham,
        channels=tuple(channels),
        initial_state=rho0,
        theta_ref=model.theta_ref,
        time_dependent=model.time_dependent,
        cache_token=f"pm[{model.cache_token}|{modes_token}]",
        mode_projectors=tuple(tops),
    )


def fit_lorentzians(omega, s_target, n_modes, coupling_operator=None,
                    fock_truncation=3):
    """Least-squares fit of a tabulated spectrum by a sum of Lorentzians.

    Fits sum_r w_r gamma_r / (gamma_r^2 + (w - nu_r)^2) with w_r = |g_r|^2 and
    returns a :class:`PseudomodeSpec` carrying the maximum pointwise residual.
    """
    omega = np.asarray(omega, dtype=float)
    s_target = np.asarray(s_target, dtype=float)
    if np.any(s_target < 0):
        raise ModelError("target spectrum must be >= 0")
    if n_modes < 1:
        raise ModelError("need at least one mode")
    span = omega[-1] - omega[0]

    def unpack(params):
        return params.reshape(n_modes, 3)

    def spectrum(params):
        out = np.zeros_like(omega)
        for nu, log_g, log_w in unpack(params):
            gam = np.exp(log_g)
            out += np.exp(log_w) * gam / (gam**2 + (omega - nu) ** 2)
        return out

    # Seed modes one by one at the peak of the running residual.
    params = []
    residual = s_target.copy()
    for _ in range(n_modes):
        i = int(np.argmax(residual))
        peak = max(residual[i], 1e-12)
        half = peak / 2.0
        above = np.nonzero(residual >= half)[0]
        width = max((omega[above[-1]] - omega[above[0]]) / 2.0, span / 50.0) \
            if above.size > 1 else span / 20.0
        params.extend([omega[i], math.log(width), math.log(peak * width)])
        residual = np.maximum(s_target - spectrum(np.array(params)), 0.0)
    params = np.asarray(params, dtype=float)

    result = scipy.optimize.least_squares(
        lambda p: spectrum(p) - s_target, params, method="lm", xtol=1e-14,
        ftol=1e-14, gtol=1e-14, max_nfev=20000,
    )
    max_resid = float(np.max(np.abs(spectrum(result.x) - s_target)))
    if not result.success and max_resid > 1e-3 * max(np.max(s_target), 1e-30):
        raise ModelError(
            f"lorentzian fit did not converge: max residual {max_resid:.3e}"
        )
    modes = tuple(
        (float(nu), float(np.exp(log_g)), float(math.sqrt(np.exp(log_w))),
         int(fock_truncation))
        for nu, log_g, log_w in unpack(result.x)
    )
    return PseudomodeSpec(modes=modes, coupling_operator=coupling_operator,
                          fit_residual=max_resid)


def check_pseudomode_truncation(model, t_final, dt=1e-2, theta=None,
                                max_population=1e-4):
    """Propagate the physical master equation and watch the top Fock levels.

    Raises if any auxiliary mode accumulates more than ``max_population`` in
    its highest retained Fock state, with guidance to raise the truncation.
    """
    if not model.mode_projectors:
        return 0.0
    theta = model.theta_ref if theta is None else theta
    d = model.dim
    gen = build_liouvillian_L0(model, theta, 0.0)
    for j in model.monitored_jumps(theta, 0.0):
        gen = gen + mult_superop(j, "left") @ mult_superop(dagger(j), "right")
    projs = [p.diagonal().real for p in model.mode_projectors]
    v = model.initial_state.reshape(-1, order="F")
    n_steps = max(1, int(round(t_final / dt)))
    h = t_final / n_steps
    worst = 0.0
    for step in range(n_steps):
        if model.time_dependent:
            gen = build_liouvillian_L0(model, theta, (step + 0.5) * h)
            for j in model.monitored_jumps(theta, (step + 0.5) * h):
                gen = gen + mult_superop(j, "left") @ mult_superop(dagger(j), "right")
        k1 = gen @ v
        k2 = gen @ (v + 0.5 * h * k1)
        k3 = gen @ (v + 0.5 * h * k2)
        k4 = gen @ (v + h * k3)
        v = v + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        rho_diag = v.reshape(d, d, order="F").diagonal().real
        worst = max(worst, max(float(p @ rho_diag) for p in projs))
        if worst > max_population:
            raise PropagationError(
                f"pseudomode truncation too small: top Fock population reached "
                f"{worst:.2e} > {max_population:.0e}; raise the mode's "
                "fock truncation"
            )
    return worst
