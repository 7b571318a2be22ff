"""Named model presets consumed by the batch CLI.

Each entry documents its parameters and builds a :class:`SensorModel` from a
parameter dictionary, a monitored-channel selection and the name of the
swept/estimated parameter.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import (PseudomodeSpec, attach_pseudomodes, build_dlevel,
                    build_tls, cascade_with_source, retag_monitored,
                    single_photon_source)

SENSOR_THETA = ("delta", "omega", "gamma_f", "gamma_b")


@dataclass(frozen=True)
class RegistryEntry:
    description: str
    parameters: dict
    channels: tuple
    theta_choices: tuple
    default_monitored: tuple
    build: object


def _build_tls(params, monitored, theta):
    return build_tls(params["delta"], params["omega"], params["gamma_f"],
                     params["gamma_b"], monitored=monitored, theta=theta,
                     initial_state=params.get("initial", "g"))


def _build_dlevel(params, monitored, theta):
    return build_dlevel(int(params["levels"]), params["delta"],
                        params["omega"], params["gamma_f"], params["gamma_b"],
                        monitored=monitored, theta=theta,
                        initial_state=params.get("initial", "g"))


def _build_tls_sps(params, monitored, theta):
    t0, tau = params["t0"], params["tau"]
    t_max = t0 + 12.0 * tau
    raw = lambda t: math.exp(-((t - t0) ** 2) / (2.0 * tau**2))
    grid = np.linspace(0.0, t_max, 1 << 16)
    norm = math.sqrt(np.trapezoid(np.array([raw(t) for t in grid]) ** 2, grid))
    u = lambda t: raw(t) / norm
    cap = params.get("gamma_cap") or None
    source = single_photon_source(u, gamma_cap=cap, t_max=t_max)
    sensor = build_tls(params["delta"], params["omega"], params["gamma_f"],
                       params["gamma_b"], monitored=("f",), theta=theta,
                       initial_state=params.get("initial", "g"))
    composite = cascade_with_source(sensor, source)
    return retag_monitored(composite, monitored)


def _build_tls_pm(params, monitored, theta):
    sensor = build_tls(params["delta"], params["omega"], params["gamma_f"],
                       params["gamma_b"], monitored=monitored, theta=theta,
                       initial_state=params.get("initial", "g"))
    sigma_z = np.diag([1.0, -1.0]).astype(complex)
    spec = PseudomodeSpec(
        modes=((0.0, params["mode_gamma"], params["mode_coupling"],
                int(params["fock_levels"])),),
        coupling_operator=sigma_z,
    )
    return attach_pseudomodes(sensor, spec)


MODELS = {
    "tls": RegistryEntry(
        description="Driven two-level emitter, forward/backward channels",
        parameters={"delta": 0.5, "omega": 0.5, "gamma_f": 1.0,
                    "gamma_b": 0.5},
        channels=("f", "b"),
        theta_choices=SENSOR_THETA,
        default_monitored=("f",),
        build=_build_tls,
    ),
    "dlevel": RegistryEntry(
        description="Driven D-level emitter (truncated ladder operator)",
        parameters={"levels": 5, "delta": 0.0, "omega": 5.0, "gamma_f": 1.0,
                    "gamma_b": 0.5},
        channels=("f", "b"),
        theta_choices=SENSOR_THETA,
        default_monitored=("f",),
        build=_build_dlevel,
    ),
    "tls+single_photon_source": RegistryEntry(
        description=("Two-level emitter driven by a single photon in a "
                     "Gaussian wavepacket (upstream cascaded source); the "
                     "wavepacket is renormalized on [0, t0+12 tau]"),
        parameters={"delta": 0.0, "omega": 0.0, "gamma_f": 1.0,
                    "gamma_b": 0.5, "t0": 16.0 / 3.0, "tau": 2.0,
                    "gamma_cap": 0.0},
        channels=("f", "b"),
        theta_choices=SENSOR_THETA,
        default_monitored=("f",),
        build=_build_tls_sps,
    ),
    "tls+pseudomode_dephasing": RegistryEntry(
        description=("Unidirectional two-level emitter dephased by an "
                     "environment with Lorentzian spectrum of half-width "
                     "mode_gamma and weight mode_coupling^2, embedded as one "
                     "damped auxiliary mode"),
        parameters={"delta": 0.5, "omega": 0.5, "gamma_f": 1.0,
                    "gamma_b": 0.0, "mode_gamma": 5.0, "mode_coupling": 1.0,
                    "fock_levels": 3},
        channels=("f", "b"),
        theta_choices=SENSOR_THETA,
        default_monitored=("f",),
        build=_build_tls_pm,
    ),
}


def build_model(name, params=None, monitored=None, theta="omega"):
    """Instantiate a registry model with parameter overrides."""
    if name not in MODELS:
        raise ConfigError(f"unknown model {name!r}; known: {sorted(MODELS)}")
    entry = MODELS[name]
    merged = dict(entry.parameters)
    extra = set(params or {}) - set(merged) - {"initial"}
    if extra:
        raise ConfigError(f"unknown parameters for {name!r}: {sorted(extra)}")
    merged.update(params or {})
    if theta not in entry.theta_choices:
        raise ConfigError(
            f"parameter {theta!r} cannot be estimated for {name!r}; "
            f"choices: {entry.theta_choices}")
    monitored = tuple(monitored) if monitored else entry.default_monitored
    if not set(monitored) <= set(entry.channels):
        raise ConfigError(
            f"monitored {monitored} not among channels {entry.channels}")
    return entry.build(merged, monitored, theta)


def describe_models():
    """Human-readable registry listing for the CLI."""
    lines = []
    for name, entry in MODELS.items():
        lines.append(f"{name}")
        lines.append(f"  {entry.description}")
        lines.append(f"  channels: {', '.join(entry.channels)}   "
                     f"estimable: {', '.join(entry.theta_choices)}")
        pars = "  ".join(f"{k}={v}" for k, v in entry.parameters.items())
        lines.append(f"  defaults: {pars}")
    return "\n".join(lines)
