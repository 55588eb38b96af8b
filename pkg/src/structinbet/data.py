"""Synthetic articulated sprites: a stick-figure kinematic chain that moves
between two random poses, rendered with anti-aliased thick strokes.

Each seed fixes the pose pair and an appearance (stroke level, stripe texture,
background level, colour for RGB), so identity consistency across frames is
observable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .guidance import (
    MixedTrajectorySet,
    PixelTrajectory,
    Skeleton,
    build_mixed_trajectories,
    read_guidance,
    skeleton_at,
    write_guidance,
)
from .imageio import read_image, write_image

DEFAULT_T = 8
DEFAULT_SIZE = 32
DEFAULT_JOINTS = 4
DEFAULT_PIXEL_TRACKS = 4
MIN_DISPLACEMENT_PX = 2.0


@dataclass(frozen=True)
class Appearance:
    stroke: np.ndarray  # (C,) base stroke value in [-1, 1]
    background: np.ndarray  # (C,)
    stripe_freq: float
    stripe_amp: float
    stripe_phase: float
    half_width: float  # stroke half width, in pixels


@dataclass
class Motion:
    """Per-frame root position and absolute bone angles of one chain."""

    roots: np.ndarray  # (T+1, 2)
    angles: np.ndarray  # (T+1, J-1) absolute bone angles
    bone_len: float  # normalized length of each bone

    def joints(self, frame: float) -> np.ndarray:
        T = len(self.roots) - 1
        a = frame / T
        root = (1 - a) * self.roots[0] + a * self.roots[-1]
        ang = (1 - a) * self.angles[0] + a * self.angles[-1]
        pts = [root]
        for th in ang:
            pts.append(pts[-1] + self.bone_len * np.array([math.cos(th), math.sin(th)]))
        return np.array(pts)


@dataclass
class Triplet:
    frames: tuple[np.ndarray, np.ndarray, np.ndarray]  # (C, S, S) each, in [-1, 1]
    times: tuple[int, int, int]  # (0, c, T)
    skeletons: tuple[Skeleton, Skeleton, Skeleton]
    tracks: MixedTrajectorySet
    seed: int

    @property
    def c_frac(self) -> float:
        return self.times[1] / self.times[2]


def _chain_parents(J: int) -> list[int]:
    return [0] + list(range(J - 1))


def _appearance(rng: np.random.Generator, S: int, channels: int) -> Appearance:
    if channels == 1:
        stroke = np.array([rng.uniform(0.1, 1.0)])
        background = np.array([rng.uniform(-1.0, -0.7)])
    else:
        stroke = rng.uniform(-0.2, 1.0, size=3)
        background = np.full(3, rng.uniform(-1.0, -0.7))
    return Appearance(
        stroke=stroke,
        background=background,
        stripe_freq=float(rng.uniform(1.0, 3.0)),
        stripe_amp=float(rng.uniform(0.0, 0.35)),
        stripe_phase=float(rng.uniform(0, 2 * math.pi)),
        half_width=0.05 * S,
    )


def _motion(rng: np.random.Generator, T: int, J: int) -> Motion:
    bone_len = 0.55 / (J - 1) if J > 2 else 0.3
    root0 = rng.uniform(0.3, 0.7, size=2)
    root1 = root0 + rng.uniform(-0.08, 0.08, size=2)
    rel0 = np.concatenate([[rng.uniform(0, 2 * math.pi)], rng.uniform(-1.6, 1.6, size=J - 2)])
    rel1 = rel0 + rng.uniform(-1.0, 1.0, size=J - 1)
    ang0, ang1 = np.cumsum(rel0), np.cumsum(rel1)
    frames = np.linspace(0.0, 1.0, T + 1)[:, None]
    roots = (1 - frames) * root0 + frames * root1
    angles = (1 - frames) * ang0 + frames * ang1
    return Motion(roots, angles, bone_len)


def _fits(motion: Motion, T: int, margin: float) -> bool:
    for f in range(T + 1):
        j = motion.joints(f)
        if np.any(j < margin) or np.any(j > 1 - margin):
            return False
    return True


def _draw(joints: np.ndarray, app: Appearance, S: int) -> np.ndarray:
    """Render the chain; returns (C, S, S) in [-1, 1]."""
    yy, xx = np.mgrid[0:S, 0:S]
    px = (xx + 0.5)
    py = (yy + 0.5)
    cover = np.zeros((S, S))
    shade = np.zeros((S, S))
    pts = joints * S
    for k in range(len(pts) - 1):
        (ax, ay), (bx, by) = pts[k], pts[k + 1]
        dx, dy = bx - ax, by - ay
        L2 = dx * dx + dy * dy
        u = np.clip(((px - ax) * dx + (py - ay) * dy) / L2, 0.0, 1.0)
        dist = np.hypot(px - (ax + u * dx), py - (ay + u * dy))
        cov = np.clip(app.half_width + 0.5 - dist, 0.0, 1.0)
        tex = 1.0 + app.stripe_amp * math.copysign(1, math.cos(k * math.pi)) * np.sin(
            2 * math.pi * app.stripe_freq * u + app.stripe_phase)
        take = cov > cover
        shade = np.where(take, tex, shade)
        cover = np.maximum(cover, cov)
    C = len(app.stroke)
    img = np.empty((C, S, S))
    for c in range(C):
        stroke = np.clip(app.stroke[c] * shade, -1.0, 1.0)
        img[c] = app.background[c] * (1 - cover) + stroke * cover
    return img.astype(np.float32)


def _pose_and_look(seed: int, T: int, S: int, J: int, channels: int) -> tuple[Motion, Appearance]:
    if J < 2 or S < 16:
        raise ValueError(f"need J >= 2 and S >= 16, got J={J}, S={S}")
    rng = np.random.default_rng([seed, 0x5EED])
    app = _appearance(rng, S, channels)
    margin = (app.half_width + 1.0) / S
    for _ in range(1000):
        motion = _motion(rng, T, J)
        if not _fits(motion, T, margin):
            continue
        disp = np.linalg.norm(motion.joints(0) - motion.joints(T), axis=1).mean() * S
        if disp > MIN_DISPLACEMENT_PX:
            return motion, app
    raise RuntimeError(f"seed {seed}: no admissible pose pair")


def generate_sprite_sequence(
    seed: int, T: int = DEFAULT_T, S: int = DEFAULT_SIZE, J: int = DEFAULT_JOINTS, channels: int = 1
) -> list[tuple[np.ndarray, Skeleton]]:
    motion, app = _pose_and_look(seed, T, S, J, channels)
    parents = _chain_parents(J)
    out = []
    for f in range(T + 1):
        joints = motion.joints(f)
        out.append((_draw(joints, app, S), Skeleton(joints, parents)))
    return out


def bone_anchor(joints: np.ndarray, bone: int, u: float, v: float) -> np.ndarray:
    """Point at fraction ``u`` along ``bone`` offset by ``v`` (normalized units) to its left."""
    a, b = joints[bone], joints[bone + 1]
    d = b - a
    n = np.array([-d[1], d[0]]) / np.linalg.norm(d)
    return a + u * d + v * n


def sample_triplet(
    seed: int, c_frac: float = 0.5, T: int = DEFAULT_T, S: int = DEFAULT_SIZE, J: int = DEFAULT_JOINTS,
    P: int = DEFAULT_PIXEL_TRACKS, channels: int = 1,
) -> Triplet:
    if not 0.0 < c_frac < 1.0:
        raise ValueError(f"c_frac must be in (0, 1), got {c_frac}")
    motion, app = _pose_and_look(seed, T, S, J, channels)
    parents = _chain_parents(J)
    c = int(round(c_frac * T))
    c = min(max(c, 1), T - 1)
    times = (0, c, T)
    frames, skels = [], []
    for f in times:
        joints = motion.joints(f)
        frames.append(_draw(joints, app, S))
        skels.append(Skeleton(joints, parents))

    rng = np.random.default_rng([seed, 0x7AC])
    inner = max(app.half_width - 0.6, 0.0) / S
    pixel = []
    for _ in range(P):
        bone = int(rng.integers(0, J - 1))
        u = float(rng.uniform(0.15, 0.85))
        v = float(rng.uniform(-inner, inner))
        pts = {float(f): tuple(np.clip(bone_anchor(motion.joints(f), bone, u, v), 0, 1)) for f in times}
        pixel.append(PixelTrajectory(0, pts))
    tracks = build_mixed_trajectories(skels[0], skels[2], pixel, T)
    for tr, joint in zip(tracks.skeleton_tracks, skels[1].joints):
        tr.points[float(c)] = (float(joint[0]), float(joint[1]))
    return Triplet(tuple(frames), times, tuple(skels), tracks, seed)


# ---------------------------------------------------------------- export


def triplet_seed(root_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([root_seed, index]).generate_state(1)[0])


def export_triplet(out_dir: Path, name: str, tr: Triplet) -> None:
    for tag, frame in zip(("0", "c", "T"), tr.frames):
        write_image(out_dir / f"{name}_{tag}.pgm" if frame.shape[0] == 1 else out_dir / f"{name}_{tag}.ppm", frame)
    write_guidance(out_dir / f"{name}.txt", tr.skeletons[0], tr.skeletons[2], tr.tracks)


def write_index(out_dir: Path, rows: list[tuple[str, Triplet]]) -> None:
    lines = ["# id seed c T"]
    lines += [f"{name} {tr.seed} {tr.times[1]} {tr.times[2]}" for name, tr in rows]
    (out_dir / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(data_dir: str | Path) -> list[tuple[str, Triplet]]:
    """Read an exported dataset back; frames come from the 8-bit images."""
    data_dir = Path(data_dir)
    index = data_dir / "index.txt"
    if not index.is_file():
        raise FileNotFoundError(f"no index.txt in {data_dir}")
    out = []
    for line in index.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, seed, c, T = line.split()
        frames = []
        for tag in ("0", "c", "T"):
            path = data_dir / f"{name}_{tag}.pgm"
            if not path.exists():
                path = data_dir / f"{name}_{tag}.ppm"
            frames.append(read_image(path))
        s0, sT, tracks = read_guidance(data_dir / f"{name}.txt")
        sc = skeleton_at(tracks, int(c) / int(T))
        out.append((name, Triplet(tuple(frames), (0, int(c), int(T)), (s0, sc, sT), tracks, int(seed))))
    return out
