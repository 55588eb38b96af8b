"""Training loop over a fixed list of triplets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import Config
from .data import Triplet
from .diffusion import Adam, Batch, NoiseSchedule, make_schedule, training_step
from .unet import GuidanceLabels, InbetweenModel, guidance_labels

log = logging.getLogger(__name__)


def make_batch(triplets: Sequence[Triplet], size: int, radius: int = 1) -> Batch:
    labels = GuidanceLabels.stack([guidance_labels(tr.tracks, tr.c_frac, size, radius) for tr in triplets])
    return Batch(
        np.stack([tr.frames[0] for tr in triplets]).astype(np.float32),
        np.stack([tr.frames[1] for tr in triplets]).astype(np.float32),
        np.stack([tr.frames[2] for tr in triplets]).astype(np.float32),
        labels,
    )


@dataclass
class Trainer:
    cfg: Config
    model: InbetweenModel
    opt: Adam
    sched: NoiseSchedule
    seed: int = 0
    losses: list[tuple[int, float]] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: Config, seed: int = 0) -> "Trainer":
        model = InbetweenModel.create(cfg.model, seed)
        opt = Adam.from_config(sorted(model.params), cfg.train)
        tc = cfg.train
        return cls(cfg, model, opt, make_schedule(tc.diffusion_steps, tc.beta_start, tc.beta_end), seed)

    @property
    def step(self) -> int:
        return self.opt.step_count

    def run(
        self, triplets: Sequence[Triplet], steps: int,
        callback: Callable[[int, float], None] | None = None,
    ) -> list[float]:
        """Train for ``steps`` more steps. Step ``k`` draws from an RNG keyed on
        (seed, k), so a resumed run continues the same stream."""
        size = self.cfg.model.image_size
        radius = self.cfg.model.raster_radius
        cache = {}
        out = []
        n = len(triplets)
        bs = min(self.cfg.train.batch_size, n)
        for _ in range(steps):
            k = self.step
            rng = np.random.default_rng([self.seed, k])
            idx = tuple(sorted(rng.choice(n, size=bs, replace=False).tolist()))
            if idx not in cache:
                cache[idx] = make_batch([triplets[i] for i in idx], size, radius)
            loss = training_step(cache[idx], self.model, self.sched, self.opt, rng)
            self.losses.append((k, loss))
            out.append(loss)
            if callback is not None:
                callback(k, loss)
        return out
