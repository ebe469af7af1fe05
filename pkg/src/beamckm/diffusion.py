"""Forward corruption, denoising objective, and ancestral sampling.

All schedule math runs in float64 numpy; only the noise-prediction network
itself is differentiable. Gaussian draws come from numpy Generator streams
(PCG64 + ziggurat standard_normal), seeded explicitly for reproducibility.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .condition import ConditionEncoder
from .dit import BeamDit
from .propagation import BeamVector, ChannelMap, EnvScene, unit_to_db
from .tensor import TensorNode
from .vae import Vae


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray       # beta[t-1] is beta_t
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside schedule range [1, {self.T}]")
        return t


def make_schedule(T: int, beta_1: float = 4e-5, beta_T: float = 5e-3) -> NoiseSchedule:
    """Linear beta schedule from beta_1 to beta_T inclusive."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_1 < beta_T < 1.0:
        raise ValueError(f"need 0 < beta_1 < beta_T < 1, got {beta_1}, {beta_T}")
    beta = np.linspace(beta_1, beta_T, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    sigma[0] = 0.0  # no noise injected on the final (t=1) step
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def q_sample(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward corruption sqrt(ab_t) z0 + sqrt(1-ab_t) eps."""
    t = sched.check_t(t)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 {z0.shape} and eps {eps.shape} shapes differ")
    ab = sched.alpha_bar[t - 1]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def training_loss(model: BeamDit, z0: np.ndarray, c_env: TensorNode,
                  w_flat: np.ndarray, t: np.ndarray, eps: np.ndarray,
                  sched: NoiseSchedule) -> TensorNode:
    """Mean squared noise-prediction error over a batch.

    z0: [N,D,h,w] clean latents; t: [N] steps in 1..T; eps: standard normal.
    """
    t = np.asarray(t)
    ab = sched.alpha_bar[t - 1].reshape(-1, 1, 1, 1)
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    pred = model.forward(z_t.astype(model.dtype), c_env, t, w_flat)
    target = TensorNode(eps.astype(model.dtype))
    return T.tmean((pred - target) ** 2)


def p_sample_step(z_t: np.ndarray, t: int, eps_pred: np.ndarray,
                  sched: NoiseSchedule, rng: np.random.Generator | None) -> np.ndarray:
    """One ancestral update z_{t-1} from z_t and the model's noise prediction."""
    t = sched.check_t(t)
    a = sched.alpha[t - 1]
    ab = sched.alpha_bar[t - 1]
    mean = (z_t - (1.0 - a) / math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(a)
    s = sched.sigma[t - 1]
    if s > 0.0:
        if rng is None:
            raise ValueError("rng required while sigma_t > 0")
        mean = mean + s * rng.standard_normal(z_t.shape)
    return mean


def sample_latents(model: BeamDit, c_env: TensorNode, w_flat: np.ndarray,
                   sched: NoiseSchedule, rng: np.random.Generator,
                   batch: int) -> np.ndarray:
    """Run the full reverse chain from z_T ~ N(0,I); returns z0 [batch,D,h,w]."""
    cfg = model.cfg
    shape = (batch, cfg.latent_channels, cfg.latent_h, cfg.latent_w)
    z = rng.standard_normal(shape)
    with T.no_grad():
        for t in range(sched.T, 0, -1):
            ts = np.full(batch, t)
            pred = model.forward(z.astype(model.dtype), c_env, ts, w_flat)
            z = p_sample_step(z, t, pred.values.astype(np.float64), sched, rng)
    return z


def sample_ckm(scene: EnvScene, w: BeamVector, model: BeamDit,
               cond: ConditionEncoder, vae: Vae, sched: NoiseSchedule,
               rng: np.random.Generator, floor_db: float,
               ceiling_db: float = 0.0) -> ChannelMap:
    """Generate one map prediction for (scene, beam) and de-normalize to dB."""
    buildings = scene.buildings.astype(model.dtype)[None, None]
    tx = scene.tx_onehot().astype(model.dtype)[None, None]
    with T.no_grad():
        c_env = cond.encode(buildings, tx)
    w_flat = np.empty((1, 2 * w.n_antennas))
    w_flat[0, 0::2] = w.weights.real
    w_flat[0, 1::2] = w.weights.imag
    z0 = sample_latents(model, c_env, w_flat, sched, rng, batch=1)
    with T.no_grad():
        unit = vae.decode(z0.astype(vae.dtype)).values[0, 0]
    values = unit_to_db(unit.astype(np.float64), floor_db, ceiling_db)
    occupied = scene.buildings.astype(bool)
    values[occupied] = floor_db
    return ChannelMap(values_db=values, valid_mask=(~occupied).astype(np.uint8),
                      beam=w, scene_id=scene.scene_id)
