"""SGLD negative sampling and the persistent replay buffer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["SgldConfig", "SgldDivergence", "ReplayBuffer", "sgld_run", "buffer_init_batch",
           "buffer_update", "model_energy_fn"]


class SgldDivergence(FloatingPointError):
    def __init__(self, step: int, what: str):
        super().__init__(f"SGLD diverged at step {step}: non-finite {what}")
        self.step = step


@dataclass(frozen=True)
class SgldConfig:
    """Langevin chain settings.

    ``noise_variance`` is the variance of the injected Gaussian per coordinate;
    ``None`` means "equal to the step size", the literal reading of
    x' = x - (alpha/2) dE/dx + eps, eps ~ N(0, alpha).  Set it to alpha**2
    for the standard-deviation reading.
    """

    step_size: float = 0.075
    steps: int = 60
    noise_variance: float | None = None
    clamp: bool = True

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("SGLD step_size must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("SGLD steps must be a positive integer")
        if self.noise_variance is not None and self.noise_variance < 0:
            raise ValueError("SGLD noise_variance must be non-negative")

    @property
    def noise_std(self) -> float:
        var = self.step_size if self.noise_variance is None else self.noise_variance
        return math.sqrt(var)


EnergyGradFn = Callable[[np.ndarray], tuple]


def model_energy_fn(model) -> EnergyGradFn:
    """Adapter: model -> (x -> (energies, dE/dx))."""
    return model.energy_and_input_grad


def sgld_run(energy_grad: EnergyGradFn, x0, cfg: SgldConfig, rng: np.random.Generator,
             callback: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Run ``cfg.steps`` Langevin updates from ``x0`` and return the last iterate.

    ``energy_grad`` returns per-example energies and the gradient of their sum
    with respect to x.  ``callback(i, x)`` sees every iterate after step i.
    """
    x = np.array(x0, dtype=np.float64)
    half = 0.5 * cfg.step_size
    std = cfg.noise_std
    for i in range(cfg.steps):
        try:
            energy, grad = energy_grad(x)
        except FloatingPointError:
            raise SgldDivergence(i, "energy") from None
        if not np.all(np.isfinite(energy)):
            raise SgldDivergence(i, "energy")
        if not np.all(np.isfinite(grad)):
            raise SgldDivergence(i, "gradient")
        x = x - half * grad
        if std > 0:
            x = x + std * rng.standard_normal(x.shape)
        if cfg.clamp:
            np.clip(x, 0.0, 1.0, out=x)
        if not np.all(np.isfinite(x)):
            raise SgldDivergence(i, "iterate")
        if callback is not None:
            callback(i, x)
    return x


class ReplayBuffer:
    """Fixed-capacity store of past negatives with uniform-random eviction."""

    def __init__(self, capacity: int = 5000, rng: np.random.Generator | None = None):
        if capacity < 1:
            raise ValueError("buffer capacity must be positive")
        self.capacity = int(capacity)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.slots: np.ndarray | None = None
        self.occupancy = 0

    @property
    def sample_shape(self):
        return None if self.slots is None else self.slots.shape[1:]

    def __len__(self):
        return self.occupancy


def buffer_init_batch(buf: ReplayBuffer, batch: int, reinit_prob: float, shape,
                      rng: np.random.Generator) -> np.ndarray:
    """Chain starts: buffer entries w.p. 1 - reinit_prob, else Uniform[0, 1] noise."""
    if not 0.0 <= reinit_prob <= 1.0:
        raise ValueError("reinit_prob must lie in [0, 1]")
    shape = tuple(shape)
    out = rng.random((batch,) + shape)
    if buf.occupancy == 0:
        return out
    if buf.sample_shape != shape:
        raise ValueError(f"buffer holds {buf.sample_shape}, requested {shape}")
    from_buffer = rng.random(batch) >= reinit_prob
    idx = rng.integers(0, buf.occupancy, size=batch)
    out[from_buffer] = buf.slots[idx[from_buffer]]
    return out


def buffer_update(buf: ReplayBuffer, samples) -> int:
    """Append until full, then overwrite uniformly chosen slots.  Returns occupancy."""
    samples = np.asarray(samples, dtype=np.float64)
    if buf.slots is None:
        buf.slots = np.empty((buf.capacity,) + samples.shape[1:])
    elif samples.shape[1:] != buf.sample_shape:
        raise ValueError(f"sample shape {samples.shape[1:]} != buffer shape {buf.sample_shape}")
    for s in samples:
        if buf.occupancy < buf.capacity:
            buf.slots[buf.occupancy] = s
            buf.occupancy += 1
        else:
            buf.slots[buf.rng.integers(0, buf.capacity)] = s
    return buf.occupancy
