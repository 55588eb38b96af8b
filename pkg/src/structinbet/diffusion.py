"""DDPM noise schedule, epsilon-prediction training, and DDPM/DDIM sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import TrainConfig
from .tensor import Tensor, backward, mse_loss, no_grad
from .unet import GuidanceLabels, InbetweenModel, UsageError


class DivergenceError(RuntimeError):
    """Loss or parameters became non-finite."""


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)

    def check_t(self, t) -> None:
        ts = np.asarray(t)
        if np.any(ts < 0) or np.any(ts >= self.steps):
            raise UsageError(f"timestep out of range [0, {self.steps})")


def make_schedule(steps: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if steps < 1:
        raise UsageError("schedule needs at least one step")
    if not 0 < beta_start <= beta_end < 1:
        raise UsageError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def _coef(values: np.ndarray, t, ndim: int) -> np.ndarray:
    c = np.asarray(values[np.asarray(t)], dtype=np.float64)
    return c.reshape(c.shape + (1,) * (ndim - c.ndim)) if c.ndim else c


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` scalar or per batch row."""
    sched.check_t(t)
    x0 = np.asarray(x0)
    if np.shape(eps) != x0.shape:
        raise UsageError(f"eps shape {np.shape(eps)} != x0 shape {x0.shape}")
    ab = _coef(sched.alpha_bars, t, x0.ndim)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def predict_x0(x_t: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    ab = _coef(sched.alpha_bars, t, np.ndim(x_t))
    return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def ddim_step(x_t: np.ndarray, t: int, t_prev: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) update from ``t`` to ``t_prev``; ``t_prev < 0`` lands on x0."""
    x0 = predict_x0(x_t, t, eps, sched)
    ab_prev = sched.alpha_bars[t_prev] if t_prev >= 0 else 1.0
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps


def ddpm_step(x_t: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule, noise: np.ndarray) -> np.ndarray:
    """Ancestral update from ``t`` to ``t - 1`` with posterior variance beta_t."""
    b, a, ab = sched.betas[t], sched.alphas[t], sched.alpha_bars[t]
    mean = (x_t - b / math.sqrt(1.0 - ab) * eps) / math.sqrt(a)
    if t == 0:
        return mean
    ab_prev = sched.alpha_bars[t - 1]
    var = b * (1.0 - ab_prev) / (1.0 - ab)
    return mean + math.sqrt(var) * noise


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, names: Sequence[str], lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8, clip=0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.names = list(names)

    @classmethod
    def from_config(cls, names, tc: TrainConfig) -> "Adam":
        return cls(names, tc.lr, tc.adam_beta1, tc.adam_beta2, tc.adam_eps, tc.grad_clip)

    def step(self, params: dict[str, Tensor]) -> float:
        """Apply one update from ``.grad``; returns the pre-clip global grad norm."""
        grads = {}
        for n in self.names:
            g = params[n].grad
            grads[n] = np.zeros_like(params[n].data) if g is None else g
        sq = sum(float(np.dot(g.ravel().astype(np.float64), g.ravel())) for g in grads.values())
        norm = math.sqrt(sq)
        if not math.isfinite(norm):
            raise DivergenceError("non-finite gradient")
        factor = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.step_count += 1
        k = self.step_count
        c1 = 1.0 - self.beta1 ** k
        c2 = 1.0 - self.beta2 ** k
        for n in self.names:
            p = params[n]
            g = grads[n] * np.float32(factor)
            m = self.m.get(n)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self.v[n]
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[n], self.v[n] = m.astype(p.data.dtype), v.astype(p.data.dtype)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)
            p.grad = None
        return norm

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array([self.step_count], dtype=np.float32)}
        for n in self.m:
            out[f"opt.m.{n}"] = self.m[n]
            out[f"opt.v.{n}"] = self.v[n]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if "opt.step" in state:
            self.step_count = int(state["opt.step"].reshape(-1)[0])
        for n in self.names:
            if f"opt.m.{n}" in state:
                self.m[n] = np.array(state[f"opt.m.{n}"], dtype=np.float32)
                self.v[n] = np.array(state[f"opt.v.{n}"], dtype=np.float32)


# ---------------------------------------------------------------- training


@dataclass
class Batch:
    """Model-ready tensors for a batch of triplets."""

    frame0: np.ndarray  # (B, C, S, S)
    frame_c: np.ndarray
    frameT: np.ndarray
    labels: GuidanceLabels


def diffusion_loss(
    model: InbetweenModel, batch: Batch, t: np.ndarray, eps: np.ndarray, sched: NoiseSchedule
) -> Tensor:
    """Epsilon-prediction MSE for the middle frame noised to timesteps ``t``."""
    x_t = q_sample(batch.frame_c, t, eps, sched)
    cond = model.condition(Tensor(batch.frame0), Tensor(batch.frameT), batch.labels)
    pred = model.predict_eps(Tensor(x_t), t, cond)
    return mse_loss(pred, Tensor(eps))


def training_step(
    batch: Batch, model: InbetweenModel, sched: NoiseSchedule, opt: Adam, rng: np.random.Generator
) -> float:
    B = batch.frame_c.shape[0]
    t = rng.integers(0, sched.steps, size=B)
    eps = rng.standard_normal(batch.frame_c.shape).astype(np.float32)
    loss = diffusion_loss(model, batch, t, eps, sched)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value}")
    backward(loss)
    opt.step(model.params)
    return value


def smoothed(losses: Sequence[float], window: int = 20) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], x]))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# ---------------------------------------------------------------- sampling


def sample_timesteps(steps: int, n: int) -> list[int]:
    """Descending, evenly spaced subset of ``0..steps-1`` with ``n`` entries."""
    n = max(1, min(n, steps))
    ts = np.round(np.linspace(steps - 1, 0, n)).astype(int)
    return list(dict.fromkeys(int(t) for t in ts))


def sample_loop(
    eps_fn: Callable[[np.ndarray, int], np.ndarray], shape, sched: NoiseSchedule, seed: int,
    sampler: str = "ddim", num_steps: int | None = None,
) -> np.ndarray:
    """Generic reverse process from pure noise; ``eps_fn(x_t, t)`` predicts noise."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(np.float32)
    if sampler == "ddim":
        ts = sample_timesteps(sched.steps, num_steps or sched.steps)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else -1
            x = ddim_step(x, t, t_prev, eps_fn(x, t), sched).astype(np.float32)
    elif sampler == "ddpm":
        for t in range(sched.steps - 1, -1, -1):
            noise = rng.standard_normal(shape).astype(np.float32)
            x = ddpm_step(x, t, eps_fn(x, t), sched, noise).astype(np.float32)
    else:
        raise UsageError(f"unknown sampler {sampler!r}")
    return np.clip(x, -1.0, 1.0)


def sample_inbetween(
    keyframe0: np.ndarray, keyframeT: np.ndarray, labels: GuidanceLabels, model: InbetweenModel,
    sched: NoiseSchedule, seed: int = 0, sampler: str = "ddim", num_steps: int | None = None,
) -> np.ndarray:
    """Generate the intermediate frame; conditioning is computed once and held fixed."""
    if model is None:
        raise UsageError("a trained model is required for sampling")
    k0 = np.asarray(keyframe0, dtype=np.float32)
    kT = np.asarray(keyframeT, dtype=np.float32)
    if k0.ndim == 3:
        k0, kT = k0[None], kT[None]
    with no_grad():
        cond = model.condition(Tensor(k0), Tensor(kT), labels)

        def eps_fn(x, t):
            return model.predict_eps(Tensor(x), np.full(x.shape[0], t), cond).data

        return sample_loop(eps_fn, k0.shape, sched, seed, sampler, num_steps)
