"""Flat key = value run configuration with dotted section prefixes.

The format is deliberately plain text so experiment folders diff cleanly:

    experiment = estimate-online
    seed = 42
    model.kind = linear-gaussian
    smc.n_particles = 200

Unknown keys are rejected; parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import get_args, get_origin

EXPERIMENTS = ("simulate", "filter", "estimate-offline", "estimate-online",
               "verify-bias", "summarize")


class ConfigError(ValueError):
    """Raised for unknown keys, bad values, or violated invariants."""


@dataclass
class ModelBlock:
    kind: str = "linear-gaussian"      # linear-gaussian | lorenz63 | grid-toy
    sigma_v: float = 0.2
    phi: float = 0.9
    sigma_w: float = 0.3
    kappa: float = 2.5
    sigma: float = 2.0
    sigma63: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    tau: float = 0.05
    grid_theta: float = 0.8


@dataclass
class DataBlock:
    n: int = 1000
    seed: int = 7
    path: str = ""                     # load a dataset CSV instead of simulating


@dataclass
class SmcBlock:
    n_particles: int = 200
    m_pseudo: int = 10
    kernel: str = "gaussian"           # gaussian | indicator
    epsilon: float = 0.1
    resampling: str = "multinomial"    # multinomial | systematic
    resample_threshold: float = 1.0
    mode: str = "standard"             # standard | collapsed | exact


@dataclass
class SpsaBlock:
    schedule: str = "paper-piecewise"  # paper-piecewise | power-law
    j0: int = 10000
    a0: float = 1.0
    alpha: float = 0.8
    c0: float = 1.0
    gamma: float = 0.1
    offset: float = 0.0
    iterations: int = 1000
    objective: str = "abc-smc"         # abc-smc | exact-smc | kalman
    theta0: tuple = ()                 # model space; empty -> perturbed truth
    theta0_perturbation: float = 0.5
    step_clamp: float = 1.0            # 0 disables the clamp
    box: str = "auto"                  # auto | off; projection region for iterates
    bc_cap: float = 0.5                # cap on the per-step correction term; 0 = verbatim
    crn: bool = False


@dataclass
class BiasBlock:
    n_values: tuple = (10, 20, 40, 80)
    eps_values: tuple = (0.05, 0.1, 0.2)
    fd_step: float = 2.5e-4
    noise_inflation: float = 2.0


@dataclass
class ReplicationBlock:
    runs: int = 1


@dataclass
class RunConfig:
    experiment: str = "filter"
    seed: int = 0
    out: str = "out"
    threads: int = 1
    figures: bool = True
    model: ModelBlock = field(default_factory=ModelBlock)
    data: DataBlock = field(default_factory=DataBlock)
    smc: SmcBlock = field(default_factory=SmcBlock)
    spsa: SpsaBlock = field(default_factory=SpsaBlock)
    bias: BiasBlock = field(default_factory=BiasBlock)
    replication: ReplicationBlock = field(default_factory=ReplicationBlock)

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.model.kind not in ("linear-gaussian", "lorenz63", "grid-toy"):
            raise ConfigError(f"unknown model kind {self.model.kind!r}")
        if self.data.n < 1:
            raise ConfigError("data.n must be >= 1")
        if self.smc.n_particles < 1 or self.smc.m_pseudo < 1:
            raise ConfigError("smc.n_particles and smc.m_pseudo must be >= 1")
        if self.smc.kernel not in ("gaussian", "indicator"):
            raise ConfigError(f"unknown kernel {self.smc.kernel!r}")
        if self.smc.epsilon <= 0.0:
            raise ConfigError("smc.epsilon must be > 0")
        if self.smc.resampling not in ("multinomial", "systematic"):
            raise ConfigError(f"unknown resampling {self.smc.resampling!r}")
        if not (0.0 < self.smc.resample_threshold <= 1.0):
            raise ConfigError("smc.resample_threshold must lie in (0, 1]")
        if self.smc.mode not in ("standard", "collapsed", "exact"):
            raise ConfigError(f"unknown smc mode {self.smc.mode!r}")
        if self.spsa.schedule not in ("paper-piecewise", "power-law"):
            raise ConfigError(f"unknown schedule {self.spsa.schedule!r}")
        if self.spsa.objective not in ("abc-smc", "exact-smc", "kalman"):
            raise ConfigError(f"unknown objective {self.spsa.objective!r}")
        if self.spsa.iterations < 0:
            raise ConfigError("spsa.iterations must be >= 0")
        if self.replication.runs < 1:
            raise ConfigError("replication.runs must be >= 1")
        if any(e <= 0 for e in self.bias.eps_values) or any(n < 1 for n in self.bias.n_values):
            raise ConfigError("bias sweep values must be positive")


_SECTIONS = {
    "model": ModelBlock,
    "data": DataBlock,
    "smc": SmcBlock,
    "spsa": SpsaBlock,
    "bias": BiasBlock,
    "replication": ReplicationBlock,
}
_TOP_FIELDS = ("experiment", "seed", "out", "threads", "figures")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _parse_value(text: str, ftype):
    text = text.strip()
    origin = get_origin(ftype)
    if ftype is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if ftype is int:
        return int(text)
    if ftype is float:
        return float(text)
    if ftype is tuple or origin is tuple:
        if not text:
            return ()
        parts = [p.strip() for p in text.split(",")]
        # sweep lists and theta vectors are numeric; keep ints when exact
        out = []
        for p in parts:
            v = float(p)
            out.append(int(v) if v == int(v) and "." not in p and "e" not in p.lower() else v)
        return tuple(out)
    return text


def serialize_config(config: RunConfig) -> str:
    lines = []
    for name in _TOP_FIELDS:
        lines.append(f"{name} = {_format_value(getattr(config, name))}")
    for section, cls in _SECTIONS.items():
        block = getattr(config, section)
        lines.append("")
        for f in fields(cls):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(block, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    config = RunConfig()
    top_types = {f.name: f.type for f in fields(RunConfig) if f.name in _TOP_FIELDS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." in key:
            section, _, fname = key.partition(".")
            cls = _SECTIONS.get(section)
            if cls is None:
                raise ConfigError(f"line {lineno}: unknown section {section!r}")
            ftypes = {f.name: f.type for f in fields(cls)}
            if fname not in ftypes:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            ftype = ftypes[fname]
            if isinstance(ftype, str):
                ftype = {"str": str, "int": int, "float": float, "bool": bool, "tuple": tuple}[ftype]
            setattr(getattr(config, section), fname, _parse_value(value, ftype))
        else:
            if key not in _TOP_FIELDS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            ftype = top_types[key]
            if isinstance(ftype, str):
                ftype = {"str": str, "int": int, "float": float, "bool": bool}[ftype]
            setattr(config, key, _parse_value(value, ftype))
    config.validate()
    return config


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def theta_from_model_block(block: ModelBlock):
    import numpy as np

    if block.kind == "linear-gaussian":
        return np.array([block.sigma_v, block.phi, block.sigma_w])
    if block.kind == "lorenz63":
        return np.array([block.kappa, block.sigma, block.sigma63, block.rho])
    return np.array([block.grid_theta])
