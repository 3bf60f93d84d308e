"""State-space model contract, comparison kernels, and dataset plumbing.

A model exposes samplers for the initial state, the transition, and the
observation given the state; densities are optional and only needed by the
exact reference methods.  All samplers are vectorized over a batch of states
(rows) and take an explicit ``numpy.random.Generator`` so callers control
the random streams.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .params import ParamVector

INDICATOR = "indicator"
GAUSSIAN = "gaussian"


def substream(master_seed: int, *path) -> np.random.Generator:
    """Independent named stream derived from one master seed.

    Path components may be ints or short strings; strings are hashed with
    crc32 so the derivation is stable across platforms and runs.
    """
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF]
    for part in path:
        if isinstance(part, str):
            entropy.append(zlib.crc32(part.encode("utf-8")))
        else:
            entropy.append(int(part) & 0xFFFFFFFFFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class AbcKernel:
    """Kernel comparing a real observation y against a pseudo-observation u.

    The value depends on (y, u, epsilon) only; it must never involve the
    hidden state or the model parameter, otherwise the per-step weight means
    no longer estimate a quantity proportional to the perturbed likelihood.
    """

    variant: str
    epsilon: float

    def __post_init__(self):
        if self.variant not in (INDICATOR, GAUSSIAN):
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")

    def __call__(self, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        return evaluate_kernel(self, y, u)


def evaluate_kernel(kernel: AbcKernel, y, u) -> np.ndarray:
    """Evaluate the kernel at observation y and pseudo-observation(s) u.

    y has shape (d_y,); u has shape (..., d_y).  Returns shape (...).
    Indicator: 1 inside the L1 ball of radius epsilon, else 0.
    Gaussian: N(y; u, epsilon * I) density.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        u = u.reshape(1)
    if u.shape[-1] != y.shape[-1]:
        raise ValueError(f"dimension mismatch: y has d={y.shape[-1]}, u has d={u.shape[-1]}")
    if kernel.variant == INDICATOR:
        dist = np.abs(u - y).sum(axis=-1)
        return (dist < kernel.epsilon).astype(float)
    # Gaussian kernel with covariance epsilon * I_{d_y}
    d = y.shape[-1]
    sq = ((u - y) ** 2).sum(axis=-1)
    norm = (2.0 * np.pi * kernel.epsilon) ** (-0.5 * d)
    return norm * np.exp(-0.5 * sq / kernel.epsilon)


@dataclass(frozen=True)
class NoiseForm:
    """Noise-driven form of a model: x' = propagate(x, v), u = emit(x, w).

    Lets the collapsed filter run without any density of the hidden dynamics;
    only the noise samplers and the two deterministic maps are required.
    """

    propagate: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    emit: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    sample_state_noise: Callable[[np.ndarray, tuple, np.random.Generator], np.ndarray]
    sample_obs_noise: Callable[[np.ndarray, tuple, np.random.Generator], np.ndarray]


class HmmModel:
    """Behavioral contract for a state-space model.

    Subclasses must implement the three samplers; ``transition_density`` and
    ``observation_density`` stay None unless the model can evaluate them.
    States are (N, d_x) arrays, observations (N, d_y); theta is the
    model-space parameter array.
    """

    d_x: int
    d_y: int
    theta_names: tuple[str, ...] = ()
    theta_transforms: tuple[str, ...] = ()

    transition_density: Optional[Callable] = None
    observation_density: Optional[Callable] = None
    observation_log_density: Optional[Callable] = None
    noise_form: Optional[NoiseForm] = None

    def sample_initial(self, theta: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def sample_transition(self, theta: np.ndarray, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def sample_observation(self, theta: np.ndarray, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def param_template(self) -> ParamVector:
        raise NotImplementedError


@dataclass
class Dataset:
    """Observations y_{1:n} with optional latent truth and provenance."""

    observations: np.ndarray            # (n, d_y)
    latent: Optional[np.ndarray] = None  # (n+1, d_x); row 0 is the initial state
    theta_truth: Optional[ParamVector] = None
    seed: Optional[int] = None

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.shape[0] < 1:
            raise ValueError("dataset needs at least one observation")
        self.observations = obs
        if self.latent is not None:
            lat = np.asarray(self.latent, dtype=float)
            if lat.ndim == 1:
                lat = lat[:, None]
            self.latent = lat

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def d_y(self) -> int:
        return self.observations.shape[1]


def simulate(model: HmmModel, theta: np.ndarray, n: int, seed: int) -> Dataset:
    """Ancestral sampling of x_{0:n} and y_{1:n}; same seed, same dataset."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    theta = np.asarray(theta, dtype=float)
    rng = substream(seed, "simulate")
    x = np.empty((n + 1, model.d_x))
    y = np.empty((n, model.d_y))
    x[0] = model.sample_initial(theta, 1, rng)[0]
    for k in range(1, n + 1):
        x[k] = model.sample_transition(theta, x[k - 1][None, :], rng)[0]
        y[k - 1] = model.sample_observation(theta, x[k][None, :], rng)[0]
    truth = None
    if model.theta_names:
        truth = ParamVector(theta, model.theta_names, model.theta_transforms)
    return Dataset(observations=y, latent=x, theta_truth=truth, seed=seed)
