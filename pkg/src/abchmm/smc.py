"""Particle filter for kernel-weighted pseudo-observation targets.

Each step resamples, propagates every particle through the model transition,
draws M pseudo-observations per particle, and weights by the kernel value
averaged over the M draws.  The mean unnormalized weight per step is the raw
likelihood increment whose product estimates the perturbed likelihood up to a
constant that does not depend on the parameter.

Three modes: ``standard`` (kernel weights from sampled pseudo-observations),
``collapsed`` (noise-driven propagation and emission, indicator weights,
no densities of the hidden dynamics needed anywhere), and ``exact``
(weights from the observation density, the classical bootstrap filter used
as a reference arm).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .hmm import AbcKernel, Dataset, HmmModel, INDICATOR, evaluate_kernel, substream

MULTINOMIAL = "multinomial"
SYSTEMATIC = "systematic"

STANDARD = "standard"
COLLAPSED = "collapsed"
EXACT = "exact"

_WEIGHT_TOL = 1e-10


class FilterFailed(RuntimeError):
    """All importance weights vanished at one step (indicator kernel)."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"all particle weights zero at step {step}")


@dataclass(frozen=True)
class Proposal:
    """Custom transition proposal; requires the model's transition density."""

    sample: callable       # (theta, x, rng) -> x_new
    density: callable      # (theta, x, x_new) -> q(x_new | x)


@dataclass(frozen=True)
class SmcConfig:
    n_particles: int
    m_pseudo: int = 1
    kernel: Optional[AbcKernel] = None
    resampling: str = MULTINOMIAL
    resample_threshold: float = 1.0   # ESS fraction; 1.0 resamples every step
    mode: str = STANDARD
    proposal: Optional[Proposal] = None

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.m_pseudo < 1:
            raise ValueError("m_pseudo must be >= 1")
        if self.resampling not in (MULTINOMIAL, SYSTEMATIC):
            raise ValueError(f"unknown resampling scheme {self.resampling!r}")
        if not (0.0 < self.resample_threshold <= 1.0):
            raise ValueError("resample_threshold must lie in (0, 1]")
        if self.mode not in (STANDARD, COLLAPSED, EXACT):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode in (STANDARD, COLLAPSED) and self.kernel is None:
            raise ValueError(f"mode {self.mode!r} needs a kernel")
        if self.mode == COLLAPSED and self.kernel.variant != INDICATOR:
            raise ValueError("collapsed mode requires the indicator kernel")


@dataclass
class ParticleSystem:
    particles: np.ndarray          # (N, d_x)
    weights: np.ndarray            # normalized, length N
    time: int = 0
    log_increments: list = field(default_factory=list)
    ess_history: list = field(default_factory=list)

    @property
    def n_particles(self) -> int:
        return self.weights.size

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def check_normalized(self):
        if abs(self.weights.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError("particle weights are not normalized")


@dataclass
class LikelihoodEstimate:
    """Per-step raw increments and their bias-corrected log versions."""

    per_step_raw: np.ndarray
    per_step_log_bc: np.ndarray
    total_log_bc: float
    per_step_log: np.ndarray = None  # log raw increments, exact in log space

    def __post_init__(self):
        if self.per_step_log is None:
            with np.errstate(divide="ignore"):
                self.per_step_log = np.log(self.per_step_raw)

    @property
    def total_log(self) -> float:
        """Plain sum of log raw increments (no bias correction)."""
        return float(self.per_step_log.sum())


def bias_corrected_log(p_hat: float, n_particles: int) -> float:
    """log(p_hat) + p_hat^{-2} / (2N), the correction for taking the log of
    an unbiased positive estimator."""
    if p_hat <= 0.0:
        raise ValueError(f"bias correction needs a positive estimate, got {p_hat}")
    return math.log(p_hat) + p_hat ** (-2) / (2.0 * n_particles)


def resample(weights: np.ndarray, scheme: str, rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices under multinomial or systematic resampling.

    Both schemes give expected counts N * W_i; systematic uses one shared
    uniform offset so uniform weights reproduce every index exactly once.
    """
    weights = np.asarray(weights, dtype=float)
    n = weights.size
    if abs(weights.sum() - 1.0) > 1e-8:
        raise ValueError("resample requires normalized weights")
    cum = np.cumsum(weights)
    cum[-1] = 1.0  # guard the top edge; sample points are < 1
    if scheme == MULTINOMIAL:
        points = rng.random(n)
    elif scheme == SYSTEMATIC:
        points = (rng.random() + np.arange(n)) / n
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    return cum.searchsorted(points, side="right")


def init_particles(model: HmmModel, theta: np.ndarray, config: SmcConfig,
                   rng: np.random.Generator) -> ParticleSystem:
    n = config.n_particles
    particles = model.sample_initial(np.asarray(theta, dtype=float), n, rng)
    return ParticleSystem(particles=particles, weights=np.full(n, 1.0 / n), time=0)


def _log_kernel_means(kernel: AbcKernel, y: np.ndarray, u: np.ndarray, n: int, m: int) -> np.ndarray:
    """Log of the mean kernel value over each particle's M pseudo-observations.

    Inlined kernel arithmetic: this sits in the hottest loop of every
    estimation run.  The Gaussian variant works in log space because its
    mathematically positive values underflow in linear space once a
    perturbed parameter drives particles far from the data.  u has shape
    (n * m, d_y).
    """
    diff = u.reshape(n, m, -1) - y
    if kernel.variant == INDICATOR:
        hits = (np.abs(diff).sum(axis=2) < kernel.epsilon).mean(axis=1)
        with np.errstate(divide="ignore"):
            return np.log(hits)
    d = y.shape[-1]
    logv = (diff * diff).sum(axis=2) * (-0.5 / kernel.epsilon)
    top = logv.max(axis=1, keepdims=True)
    out = top[:, 0] + np.log(np.exp(logv - top).mean(axis=1))
    return out - 0.5 * d * math.log(2.0 * math.pi * kernel.epsilon)


def _pseudo_obs_logweights(model, theta, x, y, config, rng) -> np.ndarray:
    n, m = x.shape[0], config.m_pseudo
    u = model.sample_observation(theta, np.repeat(x, m, axis=0), rng)
    return _log_kernel_means(config.kernel, y, u, n, m)


def _collapsed_logweights(model, theta, x, y, config, rng) -> np.ndarray:
    nf = model.noise_form
    n, m = x.shape[0], config.m_pseudo
    w = nf.sample_obs_noise(theta, (n * m, model.d_y), rng)
    u = nf.emit(theta, np.repeat(x, m, axis=0), w)
    return _log_kernel_means(config.kernel, y, u, n, m)


def step(system: ParticleSystem, model: HmmModel, theta: np.ndarray, y: np.ndarray,
         config: SmcConfig, rng: np.random.Generator) -> tuple[ParticleSystem, float]:
    """Advance one observation: resample, propagate, weight.

    Returns the updated system and the raw likelihood increment (the
    weighted mean of the unnormalized step weights).  Raises FilterFailed
    after one pseudo-observation retry if every weight is zero.
    """
    theta = np.asarray(theta, dtype=float)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    n = system.n_particles
    k = system.time + 1

    w_prev = system.weights
    ess = 1.0 / float(w_prev @ w_prev)
    if ess < config.resample_threshold * n - 1e-6:
        ancestors = resample(w_prev, config.resampling, rng)
        system.particles = system.particles[ancestors]
        w_prev = np.full(n, 1.0 / n)

    with np.errstate(divide="ignore"):
        log_w_prev = np.log(w_prev)

    if config.mode == COLLAPSED:
        if model.noise_form is None:
            raise ValueError("collapsed mode requires the model's noise_form")
        x = model.noise_form.propagate(
            theta, system.particles, model.noise_form.sample_state_noise(theta, system.particles.shape, rng)
        )
        logw = _collapsed_logweights(model, theta, x, y, config, rng)
        if not np.isfinite(logw + log_w_prev).any():  # retry once with fresh pseudo noise
            logw = _collapsed_logweights(model, theta, x, y, config, rng)
    else:
        log_ratio = 0.0
        if config.proposal is not None:
            if model.transition_density is None:
                raise ValueError("a custom proposal requires the model transition density")
            x = config.proposal.sample(theta, system.particles, rng)
            with np.errstate(divide="ignore"):
                log_ratio = np.log(model.transition_density(theta, system.particles, x)) - np.log(
                    config.proposal.density(theta, system.particles, x)
                )
        else:
            x = model.sample_transition(theta, system.particles, rng)
        if config.mode == EXACT:
            if model.observation_log_density is not None:
                logw = model.observation_log_density(theta, y, x) + log_ratio
            elif model.observation_density is not None:
                with np.errstate(divide="ignore"):
                    logw = np.log(model.observation_density(theta, y, x)) + log_ratio
            else:
                raise ValueError("exact mode requires the model observation density")
        else:
            logw = _pseudo_obs_logweights(model, theta, x, y, config, rng) + log_ratio
            if not np.isfinite(logw + log_w_prev).any():
                logw = _pseudo_obs_logweights(model, theta, x, y, config, rng) + log_ratio

    joint = logw + log_w_prev
    top = float(joint.max())
    if not math.isfinite(top):
        raise FilterFailed(k)
    shifted = np.exp(joint - top)
    log_increment = top + math.log(float(shifted.sum()))

    system.particles = x
    system.weights = shifted / float(shifted.sum())
    system.time = k
    system.log_increments.append(log_increment)
    system.ess_history.append(1.0 / float(system.weights @ system.weights))
    return system, math.exp(log_increment)


def collapsed_step(system: ParticleSystem, model: HmmModel, theta: np.ndarray, y: np.ndarray,
                   config: SmcConfig, rng: np.random.Generator) -> tuple[ParticleSystem, float]:
    """One noise-driven step (indicator weights, no transition density)."""
    if config.mode != COLLAPSED:
        config = SmcConfig(
            n_particles=config.n_particles, m_pseudo=config.m_pseudo, kernel=config.kernel,
            resampling=config.resampling, resample_threshold=config.resample_threshold,
            mode=COLLAPSED,
        )
    return step(system, model, theta, y, config, rng)


def run_filter(model: HmmModel, theta: np.ndarray, dataset: Dataset | np.ndarray,
               config: SmcConfig, seed_or_rng) -> tuple[ParticleSystem, LikelihoodEstimate]:
    """Filter a whole observation record and assemble likelihood estimates."""
    observations = dataset.observations if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=float)
    if observations.ndim == 1:
        observations = observations[:, None]
    if observations.shape[0] < 1:
        raise ValueError("run_filter needs at least one observation")
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else substream(seed_or_rng, "filter")
    system = init_particles(model, theta, config, rng)
    for y in observations:
        step(system, model, theta, y, config, rng)
    log_raws = np.asarray(system.log_increments)
    # the correction term overflows for astronomically small increments;
    # downstream consumers treat non-finite objective values as signal-free
    with np.errstate(over="ignore"):
        log_bc = log_raws + np.exp(-2.0 * log_raws) / (2.0 * config.n_particles)
    return system, LikelihoodEstimate(np.exp(log_raws), log_bc, float(log_bc.sum()), log_raws)


def write_filter_trace(path, estimate: LikelihoodEstimate, system: ParticleSystem) -> None:
    """One CSV row per step: k, raw increment, bias-corrected log increment, ESS."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "raw_increment", "log_increment_bc", "ess"])
        for k, (raw, log_bc, ess) in enumerate(
            zip(estimate.per_step_raw, estimate.per_step_log_bc, system.ess_history), start=1
        ):
            writer.writerow([k, format(raw, ".17g"), format(log_bc, ".17g"), format(ess, ".17g")])
