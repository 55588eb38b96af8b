"""Structural guidance: skeletons, pixel tracks, and integer-labeled rasters.

Coordinates are normalized to [0, 1]^2 with ``x`` along columns and ``y``
along rows. A point maps to pixel ``(floor(y*H), floor(x*W))`` clamped to
the image. Track labels are dense: joints take ``1..J`` (joint ``j`` gets
label ``j + 1``) and free pixel tracks take ``J+1..J+P``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, concat, embedding, mul, reshape, transpose


class StructureError(ValueError):
    """Skeleton topology or trajectory-set inconsistency."""


class EncodingError(ValueError):
    """Guidance label outside the embedding table."""


class GuidanceFormatError(ValueError):
    """Malformed skeleton/track text file."""


@dataclass
class Skeleton:
    joints: np.ndarray  # (J, 2) float, normalized (x, y)
    parent: list[int]

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 2)
        self.parent = [int(p) for p in self.parent]
        self.validate()

    @property
    def num_joints(self) -> int:
        return len(self.parent)

    def validate(self) -> None:
        J = len(self.parent)
        if self.joints.shape[0] != J:
            raise StructureError(f"{self.joints.shape[0]} joints but {J} parent entries")
        if J == 0:
            raise StructureError("skeleton has no joints")
        roots = [j for j, p in enumerate(self.parent) if p == j]
        if len(roots) != 1:
            raise StructureError(f"expected exactly one root, found {len(roots)}")
        for j, p in enumerate(self.parent):
            if not 0 <= p < J:
                raise StructureError(f"joint {j} has invalid parent {p}")
        for j in range(J):
            seen = set()
            k = j
            while self.parent[k] != k:
                if k in seen:
                    raise StructureError(f"cycle through joint {j}")
                seen.add(k)
                k = self.parent[k]
        if np.any(self.joints < 0.0) or np.any(self.joints > 1.0):
            raise StructureError("joint coordinates must lie in [0, 1]")

    def bones(self) -> list[tuple[int, int]]:
        """(child, parent) pairs, root excluded."""
        return [(j, p) for j, p in enumerate(self.parent) if p != j]


@dataclass
class PixelTrajectory:
    label: int
    points: dict[float, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        self.points = {float(t): (float(p[0]), float(p[1])) for t, p in self.points.items()}


@dataclass
class MixedTrajectorySet:
    skeleton_tracks: list[PixelTrajectory]
    pixel_tracks: list[PixelTrajectory]
    end_time: int
    parent: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.end_time <= 0:
            raise StructureError(f"end time must be positive, got {self.end_time}")
        labels = [tr.label for tr in self.tracks]
        if sorted(labels) != list(range(1, len(labels) + 1)):
            raise StructureError(f"labels must be exactly 1..{len(labels)}, got {sorted(labels)}")
        for tr in self.tracks:
            if 0.0 not in tr.points or float(self.end_time) not in tr.points:
                raise StructureError(f"track {tr.label} is missing an endpoint")
        self._by_label = {tr.label: tr for tr in self.tracks}

    @property
    def tracks(self) -> list[PixelTrajectory]:
        return list(self.skeleton_tracks) + list(self.pixel_tracks)

    @property
    def labels(self) -> set[int]:
        return {tr.label for tr in self.tracks}

    @property
    def num_joints(self) -> int:
        return len(self.skeleton_tracks)

    def track(self, label: int) -> PixelTrajectory:
        try:
            return self._by_label[label]
        except KeyError:
            raise KeyError(f"no track with label {label}") from None


@dataclass
class GuidanceMap:
    labels: np.ndarray  # (H, W) int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.labels.shape  # type: ignore[return-value]

    def to_pgm(self) -> bytes:
        H, W = self.labels.shape
        body = np.clip(self.labels, 0, 255).astype(np.uint8).tobytes()
        return f"P5\n{W} {H}\n255\n".encode("ascii") + body


# ---------------------------------------------------------------- trajectories


def build_mixed_trajectories(
    skel0: Skeleton, skelT: Skeleton, pixel_tracks: Sequence[PixelTrajectory], T: int
) -> MixedTrajectorySet:
    if skel0.num_joints != skelT.num_joints or skel0.parent != skelT.parent:
        raise StructureError("keyframe skeletons differ in topology")
    J = skel0.num_joints
    end = float(T)
    skel_tracks = [
        PixelTrajectory(j + 1, {0.0: tuple(skel0.joints[j]), end: tuple(skelT.joints[j])})
        for j in range(J)
    ]
    free = [PixelTrajectory(J + 1 + i, dict(tr.points)) for i, tr in enumerate(pixel_tracks)]
    return MixedTrajectorySet(skel_tracks, free, T, parent=list(skel0.parent))


def interpolate_track(tracks: MixedTrajectorySet, label: int, t: float) -> tuple[float, float]:
    """Position of a track at normalized time ``t``.

    Piecewise-linear through every stored keypoint, so a stored mid-time
    point is returned exactly at its own time.
    """
    tr = tracks.track(label)
    time = float(t) * tracks.end_time
    keys = sorted(tr.points)
    if time in tr.points:
        return tr.points[time]
    if time <= keys[0]:
        return tr.points[keys[0]]
    if time >= keys[-1]:
        return tr.points[keys[-1]]
    hi = next(i for i, k in enumerate(keys) if k > time)
    t0, t1 = keys[hi - 1], keys[hi]
    (x0, y0), (x1, y1) = tr.points[t0], tr.points[t1]
    a = (time - t0) / (t1 - t0)
    return (x0 + a * (x1 - x0), y0 + a * (y1 - y0))


def skeleton_at(tracks: MixedTrajectorySet, t: float) -> Skeleton:
    """Skeleton assembled from the joint tracks at normalized time ``t``."""
    if not tracks.parent:
        raise StructureError("trajectory set carries no joint tree")
    joints = [interpolate_track(tracks, j + 1, t) for j in range(tracks.num_joints)]
    joints = np.clip(np.array(joints), 0.0, 1.0)
    return Skeleton(joints, tracks.parent)


# ---------------------------------------------------------------- rasterization


def to_pixel(x: float, y: float, H: int, W: int) -> tuple[int, int]:
    """Normalized (x, y) -> (row, col)."""
    col = min(max(int(math.floor(x * W)), 0), W - 1)
    row = min(max(int(math.floor(y * H)), 0), H - 1)
    return row, col


def rasterize_trajectories(
    tracks: MixedTrajectorySet | None, t: float, resolution: tuple[int, int], radius: int = 1
) -> GuidanceMap:
    H, W = resolution
    out = np.zeros((H, W), dtype=np.int64)
    if tracks is None:
        return GuidanceMap(out)
    # paint high labels first so the lowest label ends up on top
    for tr in sorted(tracks.tracks, key=lambda tr: -tr.label):
        r, c = to_pixel(*interpolate_track(tracks, tr.label, t), H, W)
        out[max(r - radius, 0):r + radius + 1, max(c - radius, 0):c + radius + 1] = tr.label
    return GuidanceMap(out)


def bresenham(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    """Integer line from (r0, c0) to (r1, c1), both endpoints included."""
    pts = []
    dr, dc = abs(r1 - r0), -abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dr + dc
    r, c = r0, c0
    while True:
        pts.append((r, c))
        if r == r1 and c == c1:
            return pts
        e2 = 2 * err
        if e2 >= dc:
            err += dc
            r += sr
        if e2 <= dr:
            err += dr
            c += sc


def rasterize_skeleton(skel: Skeleton, resolution: tuple[int, int]) -> GuidanceMap:
    H, W = resolution
    out = np.zeros((H, W), dtype=np.int64)
    pix = [to_pixel(x, y, H, W) for x, y in skel.joints]
    for child, par in sorted(skel.bones(), key=lambda b: -b[0]):
        for r, c in bresenham(*pix[child], *pix[par]):
            out[r, c] = child + 1
    for j in range(skel.num_joints - 1, -1, -1):
        out[pix[j]] = j + 1
    return GuidanceMap(out)


def guidance_maps(
    tracks: MixedTrajectorySet, t: float, resolution: tuple[int, int], radius: int = 1
) -> tuple[GuidanceMap, GuidanceMap]:
    """(trajectory raster, skeleton raster) at normalized time ``t``."""
    return (
        rasterize_trajectories(tracks, t, resolution, radius),
        rasterize_skeleton(skeleton_at(tracks, t), resolution),
    )


def _labels(m) -> np.ndarray:
    arr = m.labels if isinstance(m, GuidanceMap) else np.asarray(m, dtype=np.int64)
    return arr[None] if arr.ndim == 2 else arr


def encode_control(traj_map, skel_map, embed_table: Tensor) -> Tensor:
    """Embed two label rasters and stack them as (B, 2E, H, W).

    Maps may be :class:`GuidanceMap`, (H, W) or (B, H, W) integer arrays.
    Label 0 always embeds to the zero vector.
    """
    a, b = _labels(traj_map), _labels(skel_map)
    if a.shape != b.shape:
        raise StructureError(f"guidance resolutions differ: {a.shape} vs {b.shape}")
    n = embed_table.shape[0]
    for arr in (a, b):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise EncodingError(f"label {int(arr.max())} outside embedding table of size {n}")
    parts = []
    for arr in (a, b):
        emb = embedding(embed_table, arr)  # B,H,W,E
        mask = Tensor((arr > 0)[..., None].astype(np.float64))
        parts.append(transpose(mul(emb, mask), (0, 3, 1, 2)))
    return concat(parts, axis=1)


# ---------------------------------------------------------------- text format


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def format_guidance(skel0: Skeleton, skelT: Skeleton, tracks: MixedTrajectorySet) -> str:
    T = tracks.end_time
    lines = [f"J {skel0.num_joints}"]
    for t, sk in ((0, skel0), (T, skelT)):
        lines.append(f"frame {t}")
        for j, (p, (x, y)) in enumerate(zip(sk.parent, sk.joints)):
            lines.append(f"joint {j} {p} {_fmt(x)} {_fmt(y)}")
    for tr in tracks.tracks:
        for t in sorted(tr.points):
            x, y = tr.points[t]
            tt = int(t) if float(t).is_integer() else t
            lines.append(f"track {tr.label} {tt} {_fmt(x)} {_fmt(y)}")
    return "\n".join(lines) + "\n"


def parse_guidance(text: str) -> tuple[Skeleton, Skeleton, MixedTrajectorySet]:
    J = None
    frames: list[tuple[int, dict[int, tuple[int, float, float]]]] = []
    track_pts: dict[int, dict[float, tuple[float, float]]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "J" and len(tok) == 2:
                J = int(tok[1])
            elif tok[0] == "frame" and len(tok) == 2:
                frames.append((int(tok[1]), {}))
            elif tok[0] == "joint" and len(tok) == 5:
                if not frames:
                    raise GuidanceFormatError(f"line {lineno}: joint before any frame block")
                frames[-1][1][int(tok[1])] = (int(tok[2]), float(tok[3]), float(tok[4]))
            elif tok[0] == "track" and len(tok) == 5:
                track_pts.setdefault(int(tok[1]), {})[float(tok[2])] = (float(tok[3]), float(tok[4]))
            else:
                raise GuidanceFormatError(f"line {lineno}: unrecognized {raw!r}")
        except ValueError as exc:
            if isinstance(exc, GuidanceFormatError):
                raise
            raise GuidanceFormatError(f"line {lineno}: {exc}") from None
    if J is None or len(frames) != 2:
        raise GuidanceFormatError("need a J line and exactly two frame blocks")
    (t0, f0), (T, fT) = frames
    if t0 != 0 or T <= 0:
        raise GuidanceFormatError(f"frame blocks must be 0 and T>0, got {t0}, {T}")

    def skel(block):
        if sorted(block) != list(range(J)):
            raise GuidanceFormatError(f"frame block must list joints 0..{J - 1}")
        return Skeleton([block[j][1:] for j in range(J)], [block[j][0] for j in range(J)])

    try:
        s0, sT = skel(f0), skel(fT)
        extra = sorted(k for k in track_pts if k > J)
        if extra != list(range(J + 1, J + 1 + len(extra))):
            raise GuidanceFormatError(f"pixel-track labels must be {J + 1}..{J + len(extra)}, got {extra}")
        if any(k < 1 for k in track_pts):
            raise GuidanceFormatError("track labels must be positive")
        pixel = [PixelTrajectory(k, track_pts[k]) for k in extra]
        tracks = build_mixed_trajectories(s0, sT, pixel, T)
        for tr in tracks.skeleton_tracks:
            for t, p in track_pts.get(tr.label, {}).items():
                if t not in (0.0, float(T)):
                    tr.points[t] = p
    except StructureError as exc:
        raise GuidanceFormatError(str(exc)) from None
    return s0, sT, tracks


def read_guidance(path: str | Path) -> tuple[Skeleton, Skeleton, MixedTrajectorySet]:
    return parse_guidance(Path(path).read_text(encoding="utf-8"))


def write_guidance(path: str | Path, skel0: Skeleton, skelT: Skeleton, tracks: MixedTrajectorySet) -> None:
    Path(path).write_text(format_guidance(skel0, skelT, tracks), encoding="utf-8")


def label_union(maps: Iterable[GuidanceMap]) -> set[int]:
    out: set[int] = set()
    for m in maps:
        out.update(int(v) for v in np.unique(m.labels) if v)
    return out
