"""Execution of resolved run configurations.

Offline estimation objectives return the mean per-observation bias-corrected
log-likelihood (the total divided by n), which puts offline differences on
the same scale as the online per-step ones so one gain schedule serves both.
The maximizer is unchanged by the scaling.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, serialize_config, theta_from_model_block
from .hmm import AbcKernel, Dataset, HmmModel, simulate, substream
from .oracle import (default_grid_model, default_sweep_dataset, filter_derivative_bias,
                     gradient_bias_sweep, GridHmmModel, loglik_bias_sweep, write_sweep_csv)
from .params import ParamVector
from .reference import LinearGaussianModel, Lorenz63Model, kalman_filter
from .replication import ReplicationSummary, summarize_traces
from .smc import FilterFailed, SmcConfig, run_filter, write_filter_trace
from .spsa import (capped_bc_log, GainSchedule, KalmanOnlineArm, SmcOnlineArm,
                   SpsaOptions, run_offline, run_online)

_FMT = ".17g"


def run_seed(master_seed: int, run_index: int) -> int:
    """Stable per-run integer seed derived from the master seed."""
    return int(np.random.SeedSequence([int(master_seed), int(run_index)]).generate_state(1)[0])


def build_model(config: RunConfig) -> HmmModel:
    block = config.model
    if block.kind == "linear-gaussian":
        return LinearGaussianModel()
    if block.kind == "lorenz63":
        return Lorenz63Model(beta=block.beta, tau=block.tau)
    return GridHmmModel(default_grid_model())


def make_smc_config(config: RunConfig) -> SmcConfig:
    smc = config.smc
    kernel = None if smc.mode == "exact" else AbcKernel(smc.kernel, smc.epsilon)
    return SmcConfig(
        n_particles=smc.n_particles, m_pseudo=smc.m_pseudo, kernel=kernel,
        resampling=smc.resampling, resample_threshold=smc.resample_threshold,
        mode=smc.mode,
    )


def make_schedule(config: RunConfig) -> GainSchedule:
    spsa = config.spsa
    if spsa.schedule == "paper-piecewise":
        return GainSchedule.paper_piecewise(spsa.j0, a0=spsa.a0, c0=spsa.c0)
    return GainSchedule.power_law(spsa.a0, spsa.alpha, spsa.c0, spsa.gamma, spsa.offset)


def make_options(config: RunConfig, model: HmmModel) -> SpsaOptions:
    spsa = config.spsa
    clamp = spsa.step_clamp if spsa.step_clamp > 0 else None
    box = None
    if spsa.box == "auto":
        box = default_box(config, model)
    elif spsa.box != "off":
        raise ConfigError(f"spsa.box must be 'auto' or 'off', got {spsa.box!r}")
    return SpsaOptions(step_clamp=clamp, box=box, crn=spsa.crn)


def default_box(config: RunConfig, model: HmmModel) -> tuple | None:
    """Unconstrained-space projection intervals keeping filters evaluable."""
    if config.model.kind == "linear-gaussian":
        s = (math.log(0.02), math.log(5.0))
        return (s, (-0.99, 0.99), s)
    if config.model.kind == "lorenz63":
        truth = theta_from_model_block(config.model)
        return tuple((math.log(v) - 2.3, math.log(v) + 2.3) for v in truth)
    return None


def get_dataset(config: RunConfig) -> Dataset:
    if config.data.path:
        return load_dataset_csv(config.data.path)
    model = build_model(config)
    theta = theta_from_model_block(config.model)
    if config.model.kind == "grid-toy":
        from .oracle import simulate_grid_dataset

        return simulate_grid_dataset(default_grid_model(), float(theta[0]),
                                     config.data.n, config.data.seed)
    return simulate(model, theta, config.data.n, config.data.seed)


def initial_theta(config: RunConfig, model: HmmModel, run_index: int) -> ParamVector:
    """Configured start, or the truth perturbed by +-50% in model space."""
    template = ParamVector(theta_from_model_block(config.model),
                           model.theta_names, model.theta_transforms)
    if config.spsa.theta0:
        values = np.asarray(config.spsa.theta0, dtype=float)
        if values.size != len(template):
            raise ConfigError(f"spsa.theta0 needs {len(template)} values")
        return template.replace_values(values)
    rng = substream(config.seed, "theta0", run_index)
    frac = config.spsa.theta0_perturbation
    signs = rng.integers(0, 2, size=len(template)) * 2.0 - 1.0
    values = template.values * (1.0 + frac * signs)
    for i, (name, transform) in enumerate(zip(template.names, template.transforms)):
        if name == "phi":
            values[i] = template.values[i] * (1.0 - frac)  # keep the AR root stable
    return template.replace_values(values)


# ---------------------------------------------------------------------------
# single-run payloads
# ---------------------------------------------------------------------------

def offline_objective(config: RunConfig, model: HmmModel, dataset: Dataset):
    n = dataset.n
    kind = config.spsa.objective
    if kind == "kalman":
        if config.model.kind != "linear-gaussian":
            raise ConfigError("the kalman objective requires the linear-gaussian model")
        obs = dataset.observations

        def objective(theta, rng):
            return kalman_filter(theta, obs).total_log / n

        return objective
    smc_config = make_smc_config(config)
    if kind == "exact-smc":
        smc_config = SmcConfig(n_particles=smc_config.n_particles, mode="exact",
                               resampling=smc_config.resampling,
                               resample_threshold=smc_config.resample_threshold)

    cap = config.spsa.bc_cap if config.spsa.bc_cap > 0 else None

    def objective(theta, rng):
        _, estimate = run_filter(model, theta, dataset, smc_config, rng)
        return float(capped_bc_log(estimate.per_step_log, smc_config.n_particles, cap).sum()) / n

    return objective


def online_arm_factory(config: RunConfig, model: HmmModel):
    kind = config.spsa.objective
    if kind == "kalman":
        if config.model.kind != "linear-gaussian":
            raise ConfigError("the kalman objective requires the linear-gaussian model")
        return KalmanOnlineArm
    smc_config = make_smc_config(config)
    if kind == "exact-smc":
        smc_config = SmcConfig(n_particles=smc_config.n_particles, mode="exact",
                               resampling=smc_config.resampling,
                               resample_threshold=smc_config.resample_threshold)
    bc_cap = config.spsa.bc_cap if config.spsa.bc_cap > 0 else None
    return lambda: SmcOnlineArm(model, smc_config, bc_cap)


def run_estimation_once(config: RunConfig, dataset: Dataset, run_index: int):
    """One SPSA run (offline or online); returns the trace."""
    model = build_model(config)
    theta0 = initial_theta(config, model, run_index)
    schedule = make_schedule(config)
    options = make_options(config, model)
    seed = run_seed(config.seed, run_index)
    if config.experiment == "estimate-offline":
        objective = offline_objective(config, model, dataset)
        return run_offline(objective, theta0, schedule, config.spsa.iterations, seed, options)
    return run_online(online_arm_factory(config, model), dataset, theta0, schedule, seed, options)


def run_filter_once(config: RunConfig, dataset: Dataset, run_index: int):
    model = build_model(config)
    theta = theta_from_model_block(config.model)
    return run_filter(model, theta, dataset, make_smc_config(config),
                      substream(run_seed(config.seed, run_index), "filter"))


def _estimation_payload(args) -> tuple[int, str, np.ndarray | None]:
    """Worker-pool entry: returns (run_index, status, model-space trace)."""
    config_text, run_index = args
    from .config import parse_config

    config = parse_config(config_text)
    dataset = get_dataset(config)
    try:
        trace = run_estimation_once(config, dataset, run_index)
        return run_index, "ok", trace.theta
    except FilterFailed as err:
        return run_index, f"failed: {err}", None


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    out_dir: Path
    summary: ReplicationSummary | None = None
    failures: list = None


def write_dataset_csv(path, dataset: Dataset) -> None:
    d_y = dataset.d_y
    d_x = dataset.latent.shape[1] if dataset.latent is not None else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k"] + [f"y{i+1}" for i in range(d_y)] + [f"x{i+1}" for i in range(d_x)])
        if dataset.latent is not None:
            writer.writerow([0] + [""] * d_y + [format(v, _FMT) for v in dataset.latent[0]])
        for k in range(dataset.n):
            row = [k + 1] + [format(v, _FMT) for v in dataset.observations[k]]
            if dataset.latent is not None:
                row += [format(v, _FMT) for v in dataset.latent[k + 1]]
            writer.writerow(row)


def write_dataset_meta(path, dataset: Dataset, config: RunConfig) -> None:
    lines = [f"model.kind = {config.model.kind}", f"n = {dataset.n}",
             f"seed = {dataset.seed if dataset.seed is not None else config.data.seed}"]
    if dataset.theta_truth is not None:
        for name, value in dataset.theta_truth.as_dict().items():
            lines.append(f"theta.{name} = {format(value, _FMT)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        y_cols = [i for i, name in enumerate(header) if name.startswith("y")]
        x_cols = [i for i, name in enumerate(header) if name.startswith("x")]
        ys, xs = [], []
        for row in reader:
            if int(row[0]) == 0:
                if x_cols:
                    xs.append([float(row[i]) for i in x_cols])
                continue
            ys.append([float(row[i]) for i in y_cols])
            if x_cols:
                xs.append([float(row[i]) for i in x_cols])
    latent = np.asarray(xs) if xs else None
    return Dataset(observations=np.asarray(ys), latent=latent)


def execute(config: RunConfig) -> ExperimentResult:
    config.validate()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(serialize_config(config))
    kind = config.experiment
    if kind == "simulate":
        dataset = get_dataset(config)
        write_dataset_csv(out / "dataset.csv", dataset)
        write_dataset_meta(out / "dataset.meta", dataset, config)
        return ExperimentResult(out)
    if kind == "verify-bias":
        return _execute_verify_bias(config, out)
    if kind == "filter":
        return _execute_filter(config, out)
    if kind in ("estimate-offline", "estimate-online"):
        return _execute_estimation(config, out)
    if kind == "summarize":
        return summarize_directory(config, out)
    raise ConfigError(f"unknown experiment {kind!r}")


def _execute_filter(config: RunConfig, out: Path) -> ExperimentResult:
    dataset = get_dataset(config)
    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    totals, failures = [], []
    for r in range(config.replication.runs):
        try:
            system, estimate = run_filter_once(config, dataset, r)
        except FilterFailed as err:
            failures.append((r, str(err)))
            continue
        write_filter_trace(runs_dir / f"r{r:03d}.csv", estimate, system)
        totals.append([estimate.total_log, estimate.total_log_bc])
    summary = None
    if totals:
        arr = np.asarray(totals)
        summary = summarize_traces([arr[i:i + 1] for i in range(arr.shape[0])],
                                   names=("total_log", "total_log_bc"),
                                   requested=config.replication.runs)
        summary.write_csv(out / "summary.csv")
    _write_failures(out, failures)
    return ExperimentResult(out, summary, failures)


def _execute_verify_bias(config: RunConfig, out: Path) -> ExperimentResult:
    model = default_grid_model()
    theta = config.model.grid_theta
    ys = default_sweep_dataset(model, theta, max(config.bias.n_values),
                               seed=config.data.seed, noise_inflation=config.bias.noise_inflation)
    n_values = [int(n) for n in config.bias.n_values]
    eps_values = [float(e) for e in config.bias.eps_values]
    rows = loglik_bias_sweep(model, theta, ys, n_values, eps_values)
    rows += gradient_bias_sweep(model, theta, ys, n_values, eps_values, h=config.bias.fd_step)
    rows += filter_derivative_bias(model, theta, ys, n_values, eps_values, h=config.bias.fd_step)
    write_sweep_csv(out / "sweeps.csv", rows)
    if config.figures:
        from . import report

        report.render_bias_sweeps(out / "sweeps.csv", out)
    return ExperimentResult(out)


def _execute_estimation(config: RunConfig, out: Path) -> ExperimentResult:
    dataset = get_dataset(config)
    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    runs = config.replication.runs
    config_text = serialize_config(config)
    results: list[tuple[int, str, np.ndarray | None]] = []
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(_estimation_payload, [(config_text, r) for r in range(runs)]))
    else:
        for r in range(runs):
            results.append(_estimation_payload((config_text, r)))

    model = build_model(config)
    traces, failures = [], []
    for run_index, status, theta_trace in sorted(results):
        if theta_trace is None:
            failures.append((run_index, status))
            continue
        traces.append(theta_trace)
        _write_estimation_run(runs_dir / f"r{run_index:03d}.csv", model.theta_names, theta_trace)
    summary = None
    if traces:
        truth = theta_from_model_block(config.model)
        stride = max(1, len(traces[0]) // 2000)
        summary = summarize_traces(traces, names=model.theta_names, truth=truth,
                                   requested=runs, stride=stride)
        summary.write_csv(out / "summary.csv")
        if config.figures:
            from . import report

            report.render_estimation_summary(summary, truth, out)
    _write_failures(out, failures)
    return ExperimentResult(out, summary, failures)


def _write_estimation_run(path, names, theta_trace: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", *names])
        for k, row in enumerate(theta_trace):
            writer.writerow([k, *(format(v, _FMT) for v in row)])


def _write_failures(out: Path, failures: list) -> None:
    if failures:
        with open(out / "failures.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["run", "reason"])
            writer.writerows(failures)


def summarize_directory(config: RunConfig, out: Path) -> ExperimentResult:
    """Recompute summary.csv (and figures) from runs/*.csv in a run folder."""
    runs_dir = out / "runs"
    paths = sorted(runs_dir.glob("r*.csv"))
    if not paths:
        raise ConfigError(f"no run files under {runs_dir}")
    traces, names = [], None
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            names = tuple(header[1:])
            traces.append(np.array([[float(v) for v in row[1:]] for row in reader]))
    truth = theta_from_model_block(config.model) if names == build_model(config).theta_names else None
    stride = max(1, len(traces[0]) // 2000)
    summary = summarize_traces(traces, names=names, truth=truth, stride=stride)
    summary.write_csv(out / "summary.csv")
    if config.figures:
        from . import report

        report.render_estimation_summary(summary, truth, out)
    return ExperimentResult(out, summary, [])
