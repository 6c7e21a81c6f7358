"""Persistent contrastive divergence training with Adam.

Training works on the closed-form marginal energy E(x), so the latent
variable never has to be sampled: the loss per step is

    mean E(data) - mean E(negatives) + c * (mean E(data)**2 + mean E(negatives)**2)

where the negatives come from SGLD chains warm-started from a replay buffer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .data_io import Dataset, write_csv
from .rng import rng_state, spawn
from .sampler import (
    ReplayBuffer,
    SgldConfig,
    SgldDivergence,
    buffer_init_batch,
    buffer_update,
    sgld_run,
)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "DiagnosticsRow",
    "TrainDiagnostics",
    "TrainingDiverged",
    "AdamState",
    "adam_step",
    "pcd_loss",
    "pcd_gradient",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    total_steps: int = 2000
    l2_energy_coef: float = 0.1
    data_noise_variance: float = 0.03
    reinit_prob: float = 0.05
    buffer_capacity: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sgld: SgldConfig = field(default_factory=SgldConfig)
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "l2_energy_coef", "data_noise_variance", "adam_eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if not 0 <= self.reinit_prob <= 1:
            raise ValueError("reinit_prob must lie in [0, 1]")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be positive")


@dataclass
class DiagnosticsRow:
    step: int
    e_data: float
    e_model: float
    gap: float
    grad_norm: float
    buffer_occ: int = 0


CSV_HEADER = ("step", "e_data", "e_model", "gap", "grad_norm", "buffer_occ")


@dataclass
class TrainDiagnostics:
    rows: list = field(default_factory=list)

    def append(self, row: DiagnosticsRow) -> None:
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    @property
    def gaps(self) -> np.ndarray:
        return np.array([r.gap for r in self.rows])

    def csv_rows(self) -> list:
        return [(r.step, repr(r.e_data), repr(r.e_model), repr(r.gap), repr(r.grad_norm), r.buffer_occ)
                for r in self.rows]

    def write_csv(self, path) -> None:
        write_csv(path, CSV_HEADER, self.csv_rows())


class TrainingDiverged(FloatingPointError):
    """Raised when an energy, gradient, or SGLD iterate goes non-finite."""

    def __init__(self, step: int, reason: str, diagnostics: TrainDiagnostics, last_good):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.step = step
        self.diagnostics = diagnostics
        self.last_good = last_good


# --------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.  Returns new (params, state); inputs are untouched."""
    t = state.step + 1
    new_params, m_new, v_new = dict(params), {}, {}
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(t, m_new, v_new)


def pcd_loss(e_data: np.ndarray, e_neg: np.ndarray, l2_coef: float) -> float:
    """Scalar training loss recomputed from energies (reference for tests)."""
    reg = l2_coef * (np.mean(e_data**2) + np.mean(e_neg**2))
    return float(np.mean(e_data) - np.mean(e_neg) + reg)


def _batch_grads(model, x, sign: float, l2_coef: float):
    """Gradient of sign * mean E + l2_coef * mean E**2 over one batch.

    The per-example weight (sign + 2 c E) / n is treated as a constant, which
    gives the exact gradient of the batch term; flipping ``sign`` negates the
    cotangent bit-for-bit, so identical batches cancel exactly.
    """
    p = model.bind(True)
    tape = Tape()
    with tape:
        e = model.energy_graph(Tensor(x, _check=False), p)
        w = (sign + 2.0 * l2_coef * e.data) / e.shape[0]
        total = ad.sum(ad.mul(e, Tensor(w, _check=False)))
    grads = backward(tape, total, wrt=[p[k] for k in model.trainable])
    return e.data, [grads[p[k]] for k in model.trainable]


def pcd_gradient(model, data_batch, negative_batch, l2_coef: float = 0.1, step: int = 0):
    """Gradient of the regularized contrastive loss w.r.t. the trainable parameters.

    Returns ``(grads, row)`` where ``row`` is the DiagnosticsRow for this batch.
    """
    xd = model.check_input(data_batch)
    xn = model.check_input(negative_batch)
    e_d, g_d = _batch_grads(model, xd, 1.0, l2_coef)
    e_n, g_n = _batch_grads(model, xn, -1.0, l2_coef)
    grads = {k: a + b for k, a, b in zip(model.trainable, g_d, g_n)}
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    mean_d = float(np.mean(e_d))
    mean_n = float(np.mean(e_n))
    row = DiagnosticsRow(step, mean_d, mean_n, mean_d - mean_n, norm)
    if not math.isfinite(norm):
        raise FloatingPointError(f"non-finite gradient at step {step}")
    return grads, row


def train(model, dataset: Dataset, cfg: TrainConfig,
          checkpoint_fn: Callable[[int, object, dict], None] | None = None,
          buffer: ReplayBuffer | None = None):
    """Run PCD training.  Returns ``(model, diagnostics, buffer)``.

    The input model is not modified; the returned model is a trained copy.
    ``checkpoint_fn(step, model, rng_states)`` fires every 10% of ``total_steps`` and
    at the end; ``rng_states`` holds the JSON-safe states of the named streams.
    """
    data_rng, sgld_rng, buf_rng = spawn(cfg.seed, "data", "sgld", "buffer")
    model = model.copy()
    if buffer is None:
        buffer = ReplayBuffer(cfg.buffer_capacity, rng=buf_rng)
    diagnostics = TrainDiagnostics()
    state = AdamState()
    shape = dataset.sample_shape
    n = len(dataset)
    noise_std = math.sqrt(cfg.data_noise_variance)
    every = max(1, cfg.total_steps // 10)
    last_good = model.copy()

    for step in range(1, cfg.total_steps + 1):
        idx = data_rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size)
        x = dataset.images[idx]
        if noise_std > 0:
            x = x + noise_std * data_rng.standard_normal(x.shape)
        try:
            x0 = buffer_init_batch(buffer, cfg.batch_size, cfg.reinit_prob, shape, sgld_rng)
            negatives = sgld_run(model.energy_and_input_grad, x0, cfg.sgld, sgld_rng)
            grads, row = pcd_gradient(model, x, negatives, cfg.l2_energy_coef, step)
        except (SgldDivergence, FloatingPointError) as exc:
            log.error("divergence at step %d: %s", step, exc)
            raise TrainingDiverged(step, str(exc), diagnostics, last_good) from exc
        model.params, state = adam_step(state, model.params, grads, cfg.learning_rate,
                                        cfg.beta1, cfg.beta2, cfg.adam_eps)
        row.buffer_occ = buffer_update(buffer, negatives)
        diagnostics.append(row)
        if step % every == 0 or step == cfg.total_steps:
            last_good = model.copy()
            if checkpoint_fn is not None:
                states = {"data": rng_state(data_rng), "sgld": rng_state(sgld_rng),
                          "buffer": rng_state(buffer.rng)}
                checkpoint_fn(step, model, states)
            log.info("step %d  e_data %.4f  e_model %.4f  gap %.4f", step, row.e_data,
                     row.e_model, row.gap)
    return model, diagnostics, buffer
