"""Simultaneous perturbation stochastic approximation for static parameters.

The gradient of the log-likelihood is never computed: each update evaluates
the objective at theta +- c_k * Delta_k with a Rademacher Delta_k and moves
along the simultaneous finite difference.  Offline mode evaluates the
full-data likelihood twice per iteration; online mode keeps two persistent
systems (particle populations or Kalman states), re-perturbs them around the
current estimate each time step, and uses the two per-observation
bias-corrected log increments.

All updates happen in unconstrained space; positivity-flagged coordinates
are mapped through log/exp at the model boundary.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .hmm import Dataset, HmmModel, substream
from .params import ParamVector
from .reference import kalman_filter
from .smc import FilterFailed, SmcConfig, bias_corrected_log, init_particles, step

POWER_LAW = "power-law"
PAPER_PIECEWISE = "paper-piecewise"


@dataclass(frozen=True)
class GainSchedule:
    """Step sizes a(k) and perturbation sizes c(k), k >= 1.

    power-law:        a(k) = a0 / (k + offset)^alpha,  c(k) = c0 / k^gamma
    paper-piecewise:  a(k) = 1 for k <= j0, (k - j0)^{-0.8} after;
                      c(k) = k^{-0.1}
    """

    kind: str
    a0: float = 1.0
    alpha: float = 0.8
    offset: float = 0.0
    c0: float = 1.0
    gamma: float = 0.1
    j0: int = 10000

    @staticmethod
    def power_law(a0: float, alpha: float, c0: float, gamma: float, offset: float = 0.0) -> "GainSchedule":
        return GainSchedule(POWER_LAW, a0=a0, alpha=alpha, offset=offset, c0=c0, gamma=gamma)

    @staticmethod
    def paper_piecewise(j0: int = 10000, a0: float = 1.0, c0: float = 1.0) -> "GainSchedule":
        """Constant-then-decay steps and slowly shrinking perturbations.

        a0 = c0 = 1 reproduces the published sequences verbatim; the scale
        factors exist because unit-scale perturbations probe a wide secant
        bracket whose curvature bias can dominate the final accuracy.
        """
        return GainSchedule(PAPER_PIECEWISE, j0=j0, a0=a0, c0=c0)

    def a(self, k: int) -> float:
        if self.kind == POWER_LAW:
            return self.a0 / (k + self.offset) ** self.alpha
        return self.a0 * (1.0 if k <= self.j0 else float(k - self.j0) ** -0.8)

    def c(self, k: int) -> float:
        if self.kind == POWER_LAW:
            return self.c0 / k**self.gamma
        return self.c0 * float(k) ** -0.1


def validate_gains(schedule: GainSchedule) -> list[str]:
    """Check the four stochastic-approximation conditions.

    Returns a list of violation descriptions; an empty list means the
    schedule is admissible (a_k > 0, a_k and c_k -> 0, sum a_k diverges,
    sum a_k^2 / c_k^2 converges).
    """
    violations = []
    if schedule.kind == PAPER_PIECEWISE:
        if schedule.j0 < 1:
            violations.append("piecewise switch index j0 must be >= 1")
        if schedule.a0 <= 0.0 or schedule.c0 <= 0.0:
            violations.append("positivity: a0 and c0 must be > 0")
        # exponent arithmetic: 2*0.8 - 2*0.1 = 1.4 > 1 and 0.8 <= 1
        return violations
    if schedule.kind != POWER_LAW:
        return [f"unknown schedule kind {schedule.kind!r}"]
    if schedule.a0 <= 0.0 or schedule.c0 <= 0.0:
        violations.append("positivity: a0 and c0 must be > 0")
    if schedule.alpha <= 0.0:
        violations.append("a_k -> 0 requires alpha > 0")
    if schedule.gamma <= 0.0:
        violations.append("c_k -> 0 requires gamma > 0")
    if schedule.alpha > 1.0:
        violations.append(f"sum a_k = infinity requires alpha <= 1, got alpha={schedule.alpha}")
    if schedule.alpha - schedule.gamma <= 0.5:
        violations.append(
            "sum a_k^2/c_k^2 < infinity requires alpha - gamma > 1/2, got "
            f"{schedule.alpha} - {schedule.gamma} = {schedule.alpha - schedule.gamma:g}"
        )
    if schedule.offset < 0.0:
        violations.append("offset must be >= 0")
    return violations


def sample_perturbation(d_theta: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. Rademacher coordinates (+1 or -1, probability one half each)."""
    if d_theta < 1:
        raise ValueError("d_theta must be >= 1")
    return rng.integers(0, 2, size=d_theta) * 2.0 - 1.0


def spsa_update(theta: np.ndarray, g_plus: float, g_minus: float,
                a_next: float, c_k: float, delta: np.ndarray) -> np.ndarray:
    """theta_{k+1,i} = theta_{k,i} + a_next (g_plus - g_minus) / (2 c_k Delta_i)."""
    if c_k <= 0.0:
        raise ValueError("c_k must be > 0")
    delta = np.asarray(delta, dtype=float)
    return np.asarray(theta, dtype=float) + a_next * (g_plus - g_minus) / (2.0 * c_k) * (1.0 / delta)


@dataclass(frozen=True)
class SpsaOptions:
    """Runner knobs on top of the bare update rule.

    step_clamp bounds every coordinate move in unconstrained space (set to
    None to follow the raw gains verbatim); box projects the iterate onto a
    per-coordinate interval in unconstrained space after each update, the
    usual projected stochastic approximation guard that keeps the aggressive
    constant-gain phase from driving particle systems into regions where
    every weight underflows; crn makes the plus and minus objective
    evaluations share one random stream.
    """

    step_clamp: Optional[float] = 1.0
    box: Optional[tuple] = None        # ((lo, hi), ...) per coordinate
    crn: bool = False


@dataclass
class SpsaTrace:
    """Iteration history in model space plus the gains that produced it."""

    names: tuple[str, ...]
    theta: np.ndarray         # (J+1, d) model space, row 0 is the start
    g_plus: np.ndarray        # (J,)
    g_minus: np.ndarray
    a: np.ndarray
    c: np.ndarray

    @property
    def terminal(self) -> np.ndarray:
        return self.theta[-1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", *self.names, "g_plus", "g_minus", "a_k", "c_k"])
            fmt = lambda v: format(float(v), ".17g")
            writer.writerow([0, *(fmt(v) for v in self.theta[0]), "", "", "", ""])
            for k in range(self.g_plus.size):
                writer.writerow(
                    [k + 1, *(fmt(v) for v in self.theta[k + 1]),
                     fmt(self.g_plus[k]), fmt(self.g_minus[k]), fmt(self.a[k]), fmt(self.c[k])]
                )


def _clamped(move: np.ndarray, clamp: Optional[float]) -> np.ndarray:
    if clamp is None:
        return move
    return np.clip(move, -clamp, clamp)


def _projected(theta_u: np.ndarray, box: Optional[tuple]) -> np.ndarray:
    if box is None:
        return theta_u
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    return np.clip(theta_u, lo, hi)


def _require_valid(schedule: GainSchedule) -> None:
    violations = validate_gains(schedule)
    if violations:
        raise ValueError("invalid gain schedule: " + "; ".join(violations))


def run_offline(
    objective: Callable[[np.ndarray, np.random.Generator], float],
    theta0: ParamVector,
    schedule: GainSchedule,
    iterations: int,
    seed: int,
    options: SpsaOptions = SpsaOptions(),
) -> SpsaTrace:
    """Repeated full-data SPSA passes.

    ``objective(theta_model, rng)`` returns the total (bias-corrected where
    applicable) log-likelihood; it is called twice per iteration at the
    perturbed parameters.  A failed evaluation is retried once with fresh
    randomness before the run aborts.
    """
    _require_valid(schedule)
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    d = len(theta0)
    rng_delta = substream(seed, "spsa-delta")
    theta_u = theta0.to_unconstrained()
    trace_theta = np.empty((iterations + 1, d))
    trace_theta[0] = theta0.values
    g_plus = np.empty(iterations)
    g_minus = np.empty(iterations)
    a_hist = np.empty(iterations)
    c_hist = np.empty(iterations)
    for t in range(1, iterations + 1):
        delta = sample_perturbation(d, rng_delta)
        c_t = schedule.c(t)
        a_t = schedule.a(t)
        plus = theta0.from_unconstrained(theta_u + c_t * delta)
        minus = theta0.from_unconstrained(theta_u - c_t * delta)
        for attempt in (0, 1):
            tag = t if attempt == 0 else -t
            # under CRN both sides get fresh generators with identical state
            rng_plus = substream(seed, "objective", tag, 0)
            rng_minus = substream(seed, "objective", tag, 0 if options.crn else 1)
            try:
                gp = objective(plus.values, rng_plus)
                gm = objective(minus.values, rng_minus)
                break
            except FilterFailed as err:
                if attempt == 1:
                    raise FilterFailed(err.step, f"iteration {t} failed twice: {err}") from err
        diff = gp - gm
        if not math.isfinite(diff):
            diff = 0.0  # overflowed correction term carries no usable signal
        move = _clamped(a_t * diff / (2.0 * c_t) * (1.0 / delta), options.step_clamp)
        theta_u = _projected(theta_u + move, options.box)
        trace_theta[t] = theta0.from_unconstrained(theta_u).values
        g_plus[t - 1], g_minus[t - 1] = gp, gm
        a_hist[t - 1], c_hist[t - 1] = a_t, c_t
    return SpsaTrace(theta0.names, trace_theta, g_plus, g_minus, a_hist, c_hist)


# ---------------------------------------------------------------------------
# Online estimation: persistent plus/minus systems advanced one step per datum
# ---------------------------------------------------------------------------

BC_CORRECTION_CAP = 0.5


def capped_bc_log(log_raw, n_particles: int, cap: float = BC_CORRECTION_CAP):
    """Bias-corrected log increment with the correction term capped.

    The raw correction exp(-2 log_raw) / (2N) diverges as the increment
    shrinks, which would hand the optimizer spurious maxima in regions where
    the filter fits terribly; estimation objectives therefore cap it.  The
    cap never binds near a decent fit (it requires a per-step increment
    below 1/sqrt(2 N cap)).
    """
    log_raw = np.asarray(log_raw, dtype=float)
    with np.errstate(over="ignore"):
        corr = np.exp(-2.0 * log_raw) / (2.0 * n_particles)
    if cap is not None and cap > 0:
        corr = np.minimum(corr, cap)
    return log_raw + corr


class SmcOnlineArm:
    """Persistent particle system advanced with a freshly perturbed theta."""

    def __init__(self, model: HmmModel, config: SmcConfig, bc_cap: float = BC_CORRECTION_CAP):
        self.model = model
        self.config = config
        self.bc_cap = bc_cap
        self.system = None

    def advance(self, theta: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> float:
        if self.system is None:
            self.system = init_particles(self.model, theta, self.config, rng)
        step(self.system, self.model, theta, y, self.config, rng)
        return float(capped_bc_log(self.system.log_increments[-1], self.config.n_particles, self.bc_cap))


class KalmanOnlineArm:
    """Persistent scalar Kalman state for the linear Gaussian model."""

    def __init__(self):
        self.m = None
        self.p = None

    def advance(self, theta: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> float:
        sigma_v, phi, sigma_w = (float(v) for v in theta)
        if self.m is None:
            self.m = 0.0
            self.p = sigma_v**2 / (1.0 - phi**2)
        self.m = phi * self.m
        self.p = phi * phi * self.p + sigma_v**2
        s = self.p + sigma_w**2
        resid = float(np.atleast_1d(y)[0]) - self.m
        log_lik = -0.5 * (math.log(2.0 * math.pi) + math.log(s) + resid * resid / s)
        gain = self.p / s
        self.m += gain * resid
        self.p = (1.0 - gain) * self.p
        return log_lik


@dataclass
class SpsaState:
    """Mutable online-estimation state: current iterate, both persistent
    systems, and their random streams."""

    theta0: ParamVector
    theta_u: np.ndarray
    k: int
    plus_arm: object
    minus_arm: object
    rng_delta: np.random.Generator
    rng_plus: np.random.Generator
    rng_minus: np.random.Generator
    last_delta: Optional[np.ndarray] = None

    @staticmethod
    def fresh(theta0: ParamVector, make_arm: Callable[[], object], seed: int,
              options: SpsaOptions) -> "SpsaState":
        # under CRN the two streams start identical and stay aligned because
        # both arms consume draws at the same rate
        return SpsaState(
            theta0, theta0.to_unconstrained(), 0, make_arm(), make_arm(),
            rng_delta=substream(seed, "spsa-delta"),
            rng_plus=substream(seed, "online", 0),
            rng_minus=substream(seed, "online", 0 if options.crn else 1),
        )


def online_step(state: SpsaState, y: np.ndarray, schedule: GainSchedule,
                options: SpsaOptions) -> tuple[float, float, float, float]:
    """Advance both persistent systems on one observation and update theta."""
    k = state.k + 1
    delta = sample_perturbation(len(state.theta0), state.rng_delta)
    c_k = schedule.c(k)
    a_k = schedule.a(k)
    plus = state.theta0.from_unconstrained(state.theta_u + c_k * delta)
    minus = state.theta0.from_unconstrained(state.theta_u - c_k * delta)
    gp = state.plus_arm.advance(plus.values, y, state.rng_plus)
    gm = state.minus_arm.advance(minus.values, y, state.rng_minus)
    diff = gp - gm
    if not math.isfinite(diff):
        diff = 0.0
    move = _clamped(a_k * diff / (2.0 * c_k) * (1.0 / delta), options.step_clamp)
    state.theta_u = _projected(state.theta_u + move, options.box)
    state.k = k
    state.last_delta = delta
    return gp, gm, a_k, c_k


def run_online(
    make_arm: Callable[[], object],
    dataset: Dataset | np.ndarray,
    theta0: ParamVector,
    schedule: GainSchedule,
    seed: int,
    options: SpsaOptions = SpsaOptions(),
) -> SpsaTrace:
    """One pass over the data with two persistent systems (plus and minus)."""
    _require_valid(schedule)
    observations = dataset.observations if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=float)
    if observations.ndim == 1:
        observations = observations[:, None]
    n = observations.shape[0]
    d = len(theta0)
    state = SpsaState.fresh(theta0, make_arm, seed, options)
    trace_theta = np.empty((n + 1, d))
    trace_theta[0] = theta0.values
    g_plus = np.empty(n)
    g_minus = np.empty(n)
    a_hist = np.empty(n)
    c_hist = np.empty(n)
    for i, y in enumerate(observations):
        gp, gm, a_k, c_k = online_step(state, y, schedule, options)
        trace_theta[i + 1] = theta0.from_unconstrained(state.theta_u).values
        g_plus[i], g_minus[i], a_hist[i], c_hist[i] = gp, gm, a_k, c_k
    return SpsaTrace(theta0.names, trace_theta, g_plus, g_minus, a_hist, c_hist)
