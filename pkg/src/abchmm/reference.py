"""Benchmark models with exact references.

Two models: a scalar linear Gaussian autoregression with an exact Kalman
filter and grid-search MLE, and the stochastic Lorenz '63 system with RK4
dynamics and correlated observation noise built from a circular Toeplitz
covariance.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .hmm import Dataset, HmmModel, NoiseForm, simulate
from .params import IDENTITY, LOG, ParamVector

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Linear Gaussian model:  X_n = phi X_{n-1} + sigma_v V_n,  Y_n = X_n + sigma_w W_n
# ---------------------------------------------------------------------------

class LinearGaussianModel(HmmModel):
    """Scalar AR(1) state with additive Gaussian observation noise.

    theta = (sigma_v, phi, sigma_w) in model space.  The initial state is
    drawn from the stationary law N(0, sigma_v^2 / (1 - phi^2)) unless an
    explicit (init_mean, init_var) pair is given.
    """

    d_x = 1
    d_y = 1
    theta_names = ("sigma_v", "phi", "sigma_w")
    theta_transforms = (LOG, IDENTITY, LOG)

    def __init__(self, init_mean: float | None = None, init_var: float | None = None):
        if (init_mean is None) != (init_var is None):
            raise ValueError("give both init_mean and init_var or neither")
        self.init_mean = init_mean
        self.init_var = init_var
        self.noise_form = NoiseForm(
            propagate=lambda th, x, v: th[1] * x + th[0] * v,
            emit=lambda th, x, w: x + th[2] * w,
            sample_state_noise=lambda th, shape, rng: rng.standard_normal(shape),
            sample_obs_noise=lambda th, shape, rng: rng.standard_normal(shape),
        )

    def param_template(self) -> ParamVector:
        return ParamVector(np.array([0.2, 0.9, 0.3]), self.theta_names, self.theta_transforms)

    # Estimation runs may probe |phi| >= 1 where no stationary law exists;
    # the initialization variance is continuously capped there so objectives
    # stay defined, and is exact for |phi| <= PHI_STATIONARY_CAP.
    PHI_STATIONARY_CAP = 0.995

    def initial_moments(self, theta: np.ndarray) -> tuple[float, float]:
        if self.init_mean is not None:
            return float(self.init_mean), float(self.init_var)
        sigma_v, phi = float(theta[0]), float(theta[1])
        denom = max(1.0 - phi**2, 1.0 - self.PHI_STATIONARY_CAP**2)
        return 0.0, sigma_v**2 / denom

    def sample_initial(self, theta, n, rng):
        m0, p0 = self.initial_moments(theta)
        return m0 + math.sqrt(p0) * rng.standard_normal((n, 1))

    def sample_transition(self, theta, x, rng):
        return theta[1] * x + theta[0] * rng.standard_normal(x.shape)

    def sample_observation(self, theta, x, rng):
        return x + theta[2] * rng.standard_normal(x.shape)

    def transition_density(self, theta, x, x_new):
        var = theta[0] ** 2
        d = np.asarray(x_new) - theta[1] * np.asarray(x)
        return np.exp(-0.5 * d[..., 0] ** 2 / var) / math.sqrt(2.0 * math.pi * var)

    def observation_density(self, theta, y, x):
        var = theta[2] ** 2
        d = np.asarray(x)[..., 0] - float(np.atleast_1d(y)[0])
        return np.exp(-0.5 * d**2 / var) / math.sqrt(2.0 * math.pi * var)

    def observation_log_density(self, theta, y, x):
        var = theta[2] ** 2
        d = np.asarray(x)[..., 0] - float(np.atleast_1d(y)[0])
        return -0.5 * d**2 / var - 0.5 * math.log(2.0 * math.pi * var)


@dataclass
class KalmanResult:
    pred_means: np.ndarray      # predictive mean of x_k given y_{1:k-1}
    pred_vars: np.ndarray       # predictive variance of x_k given y_{1:k-1}
    per_step_log: np.ndarray    # log p(y_k | y_{1:k-1})
    total_log: float


def kalman_filter(
    theta: np.ndarray,
    observations: np.ndarray,
    init_mean: float | None = None,
    init_var: float | None = None,
) -> KalmanResult:
    """Exact filter and log-likelihood for the linear Gaussian model.

    Defaults to the stationary initialization when no (init_mean, init_var)
    is supplied.  n = 0 observations gives total_log = 0.
    """
    sigma_v, phi, sigma_w = (float(v) for v in theta)
    if sigma_w <= 0.0:
        raise ValueError("sigma_w must be > 0")
    if init_mean is None:
        m, p = LinearGaussianModel().initial_moments(np.asarray(theta, dtype=float))
    else:
        m, p = float(init_mean), float(init_var)
    ys = np.asarray(observations, dtype=float).reshape(-1)
    pred_means = []
    pred_vars = []
    per_step_log = []
    qvar = sigma_v**2
    rvar = sigma_w**2
    log = math.log
    for y in ys.tolist():
        m = phi * m
        p = phi * phi * p + qvar
        s = p + rvar
        resid = y - m
        pred_means.append(m)
        pred_vars.append(p)
        per_step_log.append(-0.5 * (_LOG_2PI + log(s) + resid * resid / s))
        gain = p / s
        m = m + gain * resid
        p = (1.0 - gain) * p
    per_step_log = np.asarray(per_step_log)
    return KalmanResult(np.asarray(pred_means), np.asarray(pred_vars), per_step_log,
                        float(per_step_log.sum()))


def kalman_loglik_grid(
    sigma_v: np.ndarray,
    phi: np.ndarray,
    sigma_w: np.ndarray,
    observations: np.ndarray,
) -> np.ndarray:
    """Kalman total log-likelihood evaluated at many parameter points at once.

    All three arrays broadcast against each other; stationary initialization.
    """
    sigma_v, phi, sigma_w = np.broadcast_arrays(
        np.asarray(sigma_v, float), np.asarray(phi, float), np.asarray(sigma_w, float)
    )
    ys = np.asarray(observations, dtype=float).reshape(-1)
    qvar = sigma_v**2
    rvar = sigma_w**2
    m = np.zeros_like(qvar)
    cap = LinearGaussianModel.PHI_STATIONARY_CAP
    p = qvar / np.maximum(1.0 - phi**2, 1.0 - cap**2)
    total = np.zeros_like(qvar)
    phi2 = phi * phi
    for y in ys:
        m = phi * m
        p = phi2 * p + qvar
        s = p + rvar
        resid = y - m
        total += -0.5 * (_LOG_2PI + np.log(s) + resid * resid / s)
        gain = p / s
        m = m + gain * resid
        p = (1.0 - gain) * p
    return total


def grid_search_mle(
    observations: np.ndarray,
    grids: Sequence[np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive Kalman likelihood maximization over a Cartesian grid.

    ``grids`` holds one 1-D array per coordinate (sigma_v, phi, sigma_w).
    Returns (theta_hat, surface); surface has shape (len(g) for g in grids).
    Ties break toward the first point in scan order.
    """
    grids = [np.asarray(g, dtype=float).reshape(-1) for g in grids]
    if len(grids) != 3 or any(g.size == 0 for g in grids):
        raise ValueError("need three non-empty coordinate grids")
    gv, gp, gw = np.meshgrid(*grids, indexing="ij")
    surface = kalman_loglik_grid(gv, gp, gw, observations)
    flat_idx = int(np.argmax(surface.reshape(-1)))
    idx = np.unravel_index(flat_idx, surface.shape)
    theta_hat = np.array([grids[i][idx[i]] for i in range(3)])
    return theta_hat, surface


# ---------------------------------------------------------------------------
# Lorenz '63 model
# ---------------------------------------------------------------------------

def lorenz_drift(x: np.ndarray, sigma63: float, rho: float, beta: float) -> np.ndarray:
    """Lorenz '63 vector field, vectorized over rows of x (shape (..., 3))."""
    dx = np.empty_like(x)
    dx[..., 0] = sigma63 * (x[..., 1] - x[..., 0])
    dx[..., 1] = rho * x[..., 0] - x[..., 1] - x[..., 0] * x[..., 2]
    dx[..., 2] = x[..., 0] * x[..., 1] - beta * x[..., 2]
    return dx


def lorenz_rk4_step(x: np.ndarray, tau: float, sigma63: float, rho: float, beta: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step of size tau."""
    k1 = lorenz_drift(x, sigma63, rho, beta)
    k2 = lorenz_drift(x + 0.5 * tau * k1, sigma63, rho, beta)
    k3 = lorenz_drift(x + 0.5 * tau * k2, sigma63, rho, beta)
    k4 = lorenz_drift(x + tau * k3, sigma63, rho, beta)
    return x + (tau / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def spherical_taper(z):
    """Compactly supported correlation shape 1 - 1.5 z + 0.5 z^3 on [0, 1]."""
    z = np.asarray(z, dtype=float)
    val = 1.0 - 1.5 * z + 0.5 * z**3
    return np.where((z >= 0.0) & (z <= 1.0), val, 0.0)


@functools.lru_cache(maxsize=512)
def _toeplitz_factor(kappa: float, sigma: float, d: int) -> tuple[np.ndarray, np.ndarray]:
    lags = np.arange(d)
    circ = np.minimum(np.abs(lags[:, None] - lags[None, :]), d - np.abs(lags[:, None] - lags[None, :]))
    t_mat = sigma * spherical_taper(circ / kappa)
    try:
        q = np.linalg.cholesky(t_mat)
    except np.linalg.LinAlgError:
        raise ValueError(f"Toeplitz observation covariance not positive definite at kappa={kappa}, sigma={sigma}")
    t_mat.setflags(write=False)
    q.setflags(write=False)
    return t_mat, q


def observation_operator(d: int) -> np.ndarray:
    """Averaging matrix with 1/2 on the diagonal and first superdiagonal."""
    h = 0.5 * np.eye(d)
    h += 0.5 * np.eye(d, k=1)
    return h


class Lorenz63Model(HmmModel):
    """Discrete-time Lorenz '63 chain with correlated observation noise.

    Dynamics: x_k = rk4(x_{k-1}) + v_k with v_k ~ N(0, tau I_3).
    Observations: y_k = H x_k + Q w_k with w_k ~ N(0, I_3) and Q the lower
    Cholesky factor of the circular Toeplitz matrix built from (kappa, sigma).
    theta = (kappa, sigma, sigma63, rho); beta stays fixed during estimation.
    X_0 is known (a point on the attractor by default).
    """

    d_x = 3
    d_y = 3
    theta_names = ("kappa", "sigma", "sigma63", "rho")
    theta_transforms = (LOG, LOG, LOG, LOG)

    def __init__(self, beta: float = 8.0 / 3.0, tau: float = 0.05, x0: np.ndarray | None = None):
        if tau <= 0.0:
            raise ValueError("tau must be > 0")
        self.beta = float(beta)
        self.tau = float(tau)
        if x0 is None:
            # deterministic spin-up from (1,1,1) onto the attractor
            x = np.array([1.0, 1.0, 1.0])
            for _ in range(500):
                x = lorenz_rk4_step(x, self.tau, 10.0, 28.0, self.beta)
            x0 = x
        self.x0 = np.asarray(x0, dtype=float).reshape(3)

    def param_template(self) -> ParamVector:
        return ParamVector(np.array([2.5, 2.0, 10.0, 28.0]), self.theta_names, self.theta_transforms)

    def rk4_step(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite state passed to rk4_step")
        return lorenz_rk4_step(x, self.tau, float(theta[2]), float(theta[3]), self.beta)

    def noise_factor(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _toeplitz_factor(float(theta[0]), float(theta[1]), self.d_y)

    def sample_initial(self, theta, n, rng):
        return np.tile(self.x0, (n, 1))

    def sample_transition(self, theta, x, rng):
        drifted = self.rk4_step(theta, x)
        return drifted + math.sqrt(self.tau) * rng.standard_normal(x.shape)

    def sample_observation(self, theta, x, rng):
        _, q = self.noise_factor(theta)
        h = observation_operator(self.d_y)
        w = rng.standard_normal((x.shape[0], self.d_y))
        return x @ h.T + w @ q.T

    def observation_log_density(self, theta, y, x):
        t_mat, _ = self.noise_factor(theta)
        h = observation_operator(self.d_y)
        resid = np.atleast_1d(np.asarray(y, float)) - np.asarray(x) @ h.T
        inv = np.linalg.inv(t_mat)
        _, logdet = np.linalg.slogdet(t_mat)
        maha = np.einsum("...i,ij,...j->...", resid, inv, resid)
        return -0.5 * (maha + logdet + self.d_y * _LOG_2PI)

    def observation_density(self, theta, y, x):
        return np.exp(self.observation_log_density(theta, y, x))


def toeplitz_observation(model: Lorenz63Model, theta: np.ndarray | None = None):
    """Return (T, Q, H): the Toeplitz covariance, its lower Cholesky factor,
    and the observation matrix."""
    if theta is None:
        theta = model.param_template().values
    t_mat, q = model.noise_factor(np.asarray(theta, dtype=float))
    return t_mat, q, observation_operator(model.d_y)


def simulate_lorenz(model: Lorenz63Model, theta: np.ndarray, n: int, seed: int) -> Dataset:
    return simulate(model, theta, n, seed)
