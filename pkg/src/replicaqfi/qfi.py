"""Assembly of Bargmann invariants into the information series.

The information about a parameter theta carried by the monitored output
field is approached from below by a series I_n built from mixed second
derivatives of traces of products of output-field states at shifted
parameter values.  Those traces are block-pattern Bargmann invariants,
evaluated by the dense or tensor-network replica engines; derivatives are
4-point central finite differences in the parameter shift h.  Evaluations
are cached by canonical block pattern with single-flight semantics so that
concurrent requests trigger one propagation per pattern.
"""

import math
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._threads import small_matrix_threads
from .bargmann import ReplicaPattern
from .errors import NumericsError
from .model import retag_monitored
from .replica_dense import bargmann_dense
from .replica_tebd import bargmann_tebd


def _binom(m, l):
    if l < 0 or l > m:
        return 0
    return math.comb(m, l)


def coeff_D(m, l):
    """Integer stencil coefficient 2*C(m,l) - C(m,l+1) - C(m,l-1)."""
    if not 0 <= l <= m:
        raise ValueError(f"l must be in [0, {m}], got {l}")
    return 2 * _binom(m, l) - _binom(m, l + 1) - _binom(m, l - 1)


@dataclass(frozen=True)
class EngineConfig:
    """Propagation settings shared by every pattern evaluation of one run."""

    engine: str = "auto"          # auto | dense | tebd
    dt: float = 1e-3
    scheme: str = "trotter1"      # tebd splitting: trotter1 | strang
    chi_max: int = 32
    discard_tol: float = 1e-12
    dense_limit: int = 4**10
    dense_auto_limit: int = 4**6
    abort_trunc: float = 1e-3
    expm_step: bool = False


def evaluate_pattern(model, thetas, t_grid, config=EngineConfig(),
                     diagnostics_path=None):
    """Run one replica pattern on the configured engine."""
    pattern = ReplicaPattern(tuple(thetas))
    size = (model.dim**2) ** pattern.n_replicas
    engine = config.engine
    if engine == "auto":
        engine = "dense" if size <= config.dense_auto_limit else "tebd"
    if engine == "dense":
        return bargmann_dense(model, pattern, t_grid, dt=config.dt,
                              dense_limit=config.dense_limit,
                              expm_step=config.expm_step)
    if engine == "tebd":
        return bargmann_tebd(model, pattern, t_grid, dt=config.dt,
                             chi_max=config.chi_max,
                             discard_tol=config.discard_tol,
                             scheme=config.scheme,
                             abort_trunc=config.abort_trunc,
                             diagnostics_path=diagnostics_path)
    raise ValueError(f"unknown engine {config.engine!r}")


class _PatternCache:
    """Concurrent map with single-flight semantics (one run per key)."""

    def __init__(self):
        self._data = {}
        self._locks = {}
        self._guard = threading.Lock()

    def get_or_compute(self, key, fn):
        with self._guard:
            if key in self._data:
                return self._data[key]
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            with self._guard:
                if key in self._data:
                    return self._data[key]
            value = fn()
            with self._guard:
                self._data[key] = value
            return value

    def peek(self, key):
        with self._guard:
            return self._data.get(key)


def _canonical_blocks(blocks):
    """Canonical cache key of a (count, shift) block pattern.

    Equal-shift blocks merge into one uniform block; two-block patterns are
    invariant under cyclic exchange of the blocks.
    """
    blocks = tuple((int(c), int(s)) for c, s in blocks if c > 0)
    if len(blocks) == 2 and blocks[0][1] == blocks[1][1]:
        blocks = ((blocks[0][0] + blocks[1][0], blocks[0][1]),)
    if len(blocks) == 2:
        a, b = blocks
        blocks = min((a, b), (b, a))
    return blocks


class QfiEvaluator:
    """Caches block-pattern Bargmann series for one (model, theta, grid).

    All public quantities (f_m, Lambda_q, Renyi traces) are assembled from
    the cached series, so repeated and concurrent requests share
    propagations.
    """

    def __init__(self, model, theta, t_grid, h=None, config=EngineConfig(),
                 workers=1, cache=None):
        self.model = model
        self.theta = float(theta)
        self.t_grid = np.asarray(t_grid, dtype=float)
        self.h = float(h) if h is not None else 1e-3 * max(1.0, abs(theta))
        if self.h <= 0:
            raise ValueError("finite-difference step must be > 0")
        self.config = config
        self.workers = max(1, int(workers))
        self.cache = cache if cache is not None else _PatternCache()
        self._used_keys = set()
        self._used_lock = threading.Lock()

    def _thetas_of(self, blocks):
        out = []
        for count, shift in blocks:
            out.extend([self.theta + shift * self.h] * count)
        return tuple(out)

    def _key(self, blocks):
        return (self.model.cache_token, self.model.monitored_names,
                self.config, round(self.theta, 15), round(self.h, 15),
                blocks)

    def block_series(self, blocks):
        """Bargmann series of a block pattern, from cache or a fresh run."""
        blocks = _canonical_blocks(blocks)
        key = self._key(blocks)
        with self._used_lock:
            self._used_keys.add(key)
        return self.cache.get_or_compute(
            key,
            lambda: evaluate_pattern(self.model, self._thetas_of(blocks),
                                     self.t_grid, self.config),
        )

    def prefetch(self, block_list):
        """Evaluate a batch of patterns, in parallel when workers > 1."""
        keys = []
        seen = set()
        for blocks in block_list:
            cb = _canonical_blocks(blocks)
            if cb not in seen:
                seen.add(cb)
                keys.append(cb)
        if self.workers == 1 or len(keys) <= 1:
            for cb in keys:
                self.block_series(cb)
            return
        with small_matrix_threads():
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                list(pool.map(self.block_series, keys))

    # -- assembled quantities --------------------------------------------

    def _fm_blocks(self, m):
        needed = []
        for l in range(m + 1):
            if coeff_D(m, l) == 0:
                continue
            a, b = l + 1, m - l + 1
            for s_mu, s_nu in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                needed.append(((a, s_mu), (b, s_nu)))
        return needed

    def fm(self, m):
        """Second-derivative combination f_m(T) by the 4-point stencil."""
        self.prefetch(self._fm_blocks(m))
        total = np.zeros(len(self.t_grid))
        inv = 1.0 / (4.0 * self.h * self.h)
        for l in range(m + 1):
            d_ml = coeff_D(m, l)
            if d_ml == 0:
                continue
            a, b = l + 1, m - l + 1
            bpp = self.block_series(((a, 1), (b, 1))).values.real
            bpm = self.block_series(((a, 1), (b, -1))).values.real
            bmp = self.block_series(((a, -1), (b, 1))).values.real
            bmm = self.block_series(((a, -1), (b, -1))).values.real
            total += d_ml * (bpp - bpm - bmp + bmm) * inv
        return total

    def fm_noise_floor(self, m):
        """Crude estimate of finite-difference noise in f_m.

        Scales the per-evaluation trace accuracy (engine dependent) by the
        stencil amplification sum_l |D^m_l| / h^2.
        """
        engine = self.config.engine
        if engine == "auto":
            size = (self.model.dim**2) ** (m + 2)
            engine = "dense" if size <= self.config.dense_auto_limit else "tebd"
        eps = 1e-11 if engine == "dense" else 1e-9
        amp = sum(abs(coeff_D(m, l)) for l in range(m + 1))
        return amp * eps / (self.h * self.h)

    def uniform_trace(self, power, shift=0):
        """tr Xi^power at theta + shift*h (one equal-parameter run)."""
        return self.block_series(((power, shift),)).values

    def lambda_q(self, q=2):
        """Series scale 2 * (tr Xi^q)^(1/q), default q = 2."""
        if q < 2:
            raise ValueError("q must be >= 2")
        tr_q = self.uniform_trace(q).real
        if np.any(tr_q <= 0):
            raise NumericsError(
                "non-positive trace of Xi^q; tighten engine settings"
            )
        return 2.0 * tr_q ** (1.0 / q)

    def diagnostics(self):
        """Elementwise maxima of engine diagnostics over all runs used."""
        n = len(self.t_grid)
        out = {"max_chi": np.zeros(n, dtype=int), "max_entropy": np.zeros(n),
               "trunc_weight": np.zeros(n)}
        with self._used_lock:
            keys = list(self._used_keys)
        for key in keys:
            series = self.cache.peek(key)
            if series is None:
                continue
            for name in out:
                if name in series.diagnostics:
                    out[name] = np.maximum(out[name], series.diagnostics[name])
        return out


@dataclass
class QfiResult:
    """Per-time f_m, Lambda and I_n values plus convergence bookkeeping."""

    times: np.ndarray
    lambda_series: np.ndarray
    f_values: np.ndarray        # shape (n_max + 1, n_times)
    i_values: np.ndarray        # shape (n_max + 1, n_times)
    converged: np.ndarray       # bool per time
    fd_step: float
    coefficients: np.ndarray    # D^m_l, shape (n_max + 1, n_max + 1)
    noise_floor: np.ndarray     # per-order estimate, shape (n_max + 1,)
    diagnostics: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def n_max(self):
        return self.i_values.shape[0] - 1

    def to_csv(self, path):
        n_max = self.n_max
        cols = (["T", "Lambda"]
                + [f"f_{m}" for m in range(n_max + 1)]
                + [f"I_{n}" for n in range(n_max + 1)]
                + ["converged", "max_chi", "max_entropy", "trunc_weight"])
        diag = self.diagnostics
        n = len(self.times)
        max_chi = diag.get("max_chi", np.zeros(n, dtype=int))
        max_ent = diag.get("max_entropy", np.zeros(n))
        trunc = diag.get("trunc_weight", np.zeros(n))
        with open(path, "w", newline="") as fh:
            fh.write(",".join(cols) + "\n")
            for i in range(n):
                row = [f"{self.times[i]:.12e}", f"{self.lambda_series[i]:.12e}"]
                row += [f"{self.f_values[m, i]:.12e}" for m in range(n_max + 1)]
                row += [f"{self.i_values[m, i]:.12e}" for m in range(n_max + 1)]
                row += [str(int(self.converged[i])), str(int(max_chi[i])),
                        f"{max_ent[i]:.12e}", f"{trunc[i]:.12e}"]
                fh.write(",".join(row) + "\n")


def compute_fm(model, theta, m, t_grid, h=None, config=EngineConfig(),
               workers=1, evaluator=None):
    """f_m(T) on the grid (4-point mixed central differences)."""
    ev = evaluator or QfiEvaluator(model, theta, t_grid, h=h, config=config,
                                   workers=workers)
    values = ev.fm(m)
    floor = ev.fm_noise_floor(m)
    scale = np.max(np.abs(values))
    if scale > 0 and floor > 0.5 * scale:
        warnings.warn(
            f"finite-difference step h={ev.h:.2e} is near the cancellation "
            f"floor for f_{m}: noise estimate {floor:.2e} vs magnitude "
            f"{scale:.2e}; consider a larger h", stacklevel=2)
    if np.min(values) < -max(floor, 1e-12):
        warnings.warn(
            f"f_{m} is negative beyond the noise floor "
            f"(min {np.min(values):.3e}); flagged, not clipped", stacklevel=2)
    return values


def compute_lambda(model, theta, t_grid, q=2, config=EngineConfig(),
                   workers=1, evaluator=None):
    """Series scale Lambda_q(T) from one equal-parameter run."""
    ev = evaluator or QfiEvaluator(model, theta, t_grid, config=config,
                                   workers=workers)
    return ev.lambda_q(q)


def qfi_series(model, theta, n_max, t_grid, h=None, config=EngineConfig(),
               workers=1, q=2, convergence_rtol=0.05, richardson=False):
    """Information series I_0 .. I_n_max on the time grid.

    Lambda is treated as a constant of the series (evaluated at the
    unshifted theta, no derivative).  The per-time convergence flag marks
    |I_n - I_(n-2)| <= rtol * |I_n| at n = n_max.  With ``richardson`` the
    f_m are refined from steps h and h/2.
    """
    if n_max < 0:
        raise ValueError("n_max must be >= 0")
    ev = QfiEvaluator(model, theta, t_grid, h=h, config=config,
                      workers=workers)
    evaluators = [ev]
    if richardson:
        evaluators.append(QfiEvaluator(model, theta, t_grid, h=ev.h / 2.0,
                                       config=config, workers=workers,
                                       cache=ev.cache))
    # one prefetch across all orders so the worker pool sees every pattern
    blocks = [((q, 0),)]
    for m in range(n_max + 1):
        blocks.extend(ev._fm_blocks(m))
    for e in evaluators:
        e.prefetch(blocks)

    n_times = len(ev.t_grid)
    f_values = np.zeros((n_max + 1, n_times))
    noise = np.zeros(n_max + 1)
    flags = []
    for m in range(n_max + 1):
        if richardson:
            coarse = evaluators[0].fm(m)
            fine = evaluators[1].fm(m)
            f_values[m] = (4.0 * fine - coarse) / 3.0
            noise[m] = evaluators[1].fm_noise_floor(m)
        else:
            f_values[m] = ev.fm(m)
            noise[m] = ev.fm_noise_floor(m)
        if np.min(f_values[m]) < -max(noise[m], 1e-12):
            flags.append(
                f"f_{m} negative beyond noise floor "
                f"(min {np.min(f_values[m]):.3e})")

    lam = ev.lambda_q(q)
    i_values = np.zeros((n_max + 1, n_times))
    for n in range(n_max + 1):
        acc = np.zeros(n_times)
        for m in range(n + 1):
            acc += ((-1) ** m * math.comb(n + 1, m + 1)
                    * f_values[m] / lam ** (m + 1))
        i_values[n] = acc

    if n_max >= 2:
        gap = np.abs(i_values[n_max] - i_values[n_max - 2])
        converged = gap <= convergence_rtol * np.abs(i_values[n_max])
    else:
        converged = np.zeros(n_times, dtype=bool)

    # monotonicity check where the stencil noise is negligible
    noise_total = float(np.max(noise)) if n_max >= 0 else 0.0
    i0_scale = np.abs(i_values[0])
    significant = i0_scale > 100.0 * noise_total
    for n in range(1, n_max + 1):
        bad = significant & (i_values[n] < i_values[n - 1]
                             - 1e-6 * np.abs(i_values[n]) - 1e-10)
        if np.any(bad):
            flags.append(
                f"I_{n} < I_{n - 1} beyond tolerance at "
                f"{int(np.sum(bad))} grid times: finite-difference noise; "
                "consider larger h or tighter engine settings")

    coeffs = np.zeros((n_max + 1, n_max + 1), dtype=int)
    for m in range(n_max + 1):
        for l in range(m + 1):
            coeffs[m, l] = coeff_D(m, l)

    return QfiResult(times=ev.t_grid, lambda_series=lam, f_values=f_values,
                     i_values=i_values, converged=converged, fd_step=ev.h,
                     coefficients=coeffs, noise_floor=noise,
                     diagnostics=ev.diagnostics(), flags=flags)


def renyi_entropy(model, monitored, ell, t_grid, config=EngineConfig(),
                  theta=None, workers=1):
    """Order-ell Renyi entropy of the field emitted into ``monitored``.

    S_ell = ln(tr Xi^ell) / (1 - ell) from one equal-parameter run with ell
    replicas; channels outside ``monitored`` are traced out (full
    dissipators).
    """
    if ell < 2:
        raise ValueError("ell must be >= 2")
    mdl = retag_monitored(model, monitored)
    theta = mdl.theta_ref if theta is None else float(theta)
    ev = QfiEvaluator(mdl, theta, t_grid, config=config, workers=workers)
    tr_l = ev.uniform_trace(int(ell)).real
    if np.any(tr_l <= 0):
        raise NumericsError("non-positive trace of Xi^ell; engine accuracy")
    s = np.log(tr_l) / (1.0 - ell)
    if np.min(s) < -1e-8:
        raise NumericsError(
            f"Renyi entropy significantly negative (min {np.min(s):.3e})")
    return np.maximum(s, 0.0)


@dataclass
class MutualInformationResult:
    times: np.ndarray
    s_a: np.ndarray
    s_b: np.ndarray
    s_joint: np.ndarray
    y: np.ndarray
    rate: np.ndarray


def mutual_information(model, channel_a="f", channel_b="b", ell=2,
                       t_grid=None, config=EngineConfig(), theta=None,
                       workers=1):
    """Inter-field Renyi mutual information Y_ell = S_a + S_b - S_joint.

    Three equal-parameter runs (monitoring a, b, and both jointly, with the
    unmonitored complement adjusted accordingly); also reports the unit-time
    rate Y_ell(T)/T.
    """
    names = {c.name for c in model.channels}
    if not {channel_a, channel_b} <= names:
        raise ValueError(f"model lacks channels {channel_a!r}/{channel_b!r}")
    t_grid = np.asarray(t_grid, dtype=float)
    s_a = renyi_entropy(model, (channel_a,), ell, t_grid, config, theta,
                        workers)
    s_b = renyi_entropy(model, (channel_b,), ell, t_grid, config, theta,
                        workers)
    s_ab = renyi_entropy(model, (channel_a, channel_b), ell, t_grid, config,
                         theta, workers)
    y = s_a + s_b - s_ab
    rate = np.zeros_like(y)
    nz = t_grid > 0
    rate[nz] = y[nz] / t_grid[nz]
    return MutualInformationResult(times=t_grid, s_a=s_a, s_b=s_b,
                                   s_joint=s_ab, y=y, rate=rate)
