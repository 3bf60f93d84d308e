"""Named parameter vectors with optional positivity transforms.

Estimation routines operate on an unconstrained vector; coordinates flagged
``"log"`` are stored positive in model space and mapped through log/exp so the
optimizer never produces an invalid value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IDENTITY = "identity"
LOG = "log"
_TRANSFORMS = (IDENTITY, LOG)


@dataclass(frozen=True)
class ParamVector:
    """Model-space parameter values together with names and transforms."""

    values: np.ndarray
    names: tuple[str, ...]
    transforms: tuple[str, ...] = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if not self.transforms:
            object.__setattr__(self, "transforms", (IDENTITY,) * len(self.names))
        if values.ndim != 1 or values.size < 1:
            raise ValueError("parameter vector must be 1-D and non-empty")
        if not (len(self.names) == len(self.transforms) == values.size):
            raise ValueError(
                f"inconsistent lengths: {values.size} values, "
                f"{len(self.names)} names, {len(self.transforms)} transforms"
            )
        for name, transform, value in zip(self.names, self.transforms, values):
            if transform not in _TRANSFORMS:
                raise ValueError(f"unknown transform {transform!r} for {name!r}")
            if transform == LOG and value <= 0.0:
                raise ValueError(f"{name!r} is log-scaled and must be > 0, got {value}")

    def __len__(self) -> int:
        return self.values.size

    def to_unconstrained(self) -> np.ndarray:
        out = self.values.copy()
        for i, transform in enumerate(self.transforms):
            if transform == LOG:
                out[i] = np.log(out[i])
        return out

    def from_unconstrained(self, u: np.ndarray) -> "ParamVector":
        u = np.asarray(u, dtype=float)
        if u.shape != self.values.shape:
            raise ValueError(f"expected shape {self.values.shape}, got {u.shape}")
        out = u.copy()
        for i, transform in enumerate(self.transforms):
            if transform == LOG:
                out[i] = np.exp(out[i])
        return ParamVector(out, self.names, self.transforms)

    def replace_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=float), self.names, self.transforms)

    def as_dict(self) -> dict[str, float]:
        return {name: float(v) for name, v in zip(self.names, self.values)}
