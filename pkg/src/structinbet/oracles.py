"""Slow reference computations used to cross-check the fast paths.

Nothing here calls the tensor library; inputs and outputs are plain arrays.
"""

from __future__ import annotations

import math

import numpy as np

from .guidance import MixedTrajectorySet, interpolate_track, to_pixel


def eq1_attention(q, k0, v0, kT, vT, heads: int) -> np.ndarray:
    """Two-keyframe attention evaluated term by term with explicit loops.

    Operands are already augmented (B, tokens, D) arrays; no output projection.
    """
    q, k0, v0, kT, vT = (np.asarray(a, dtype=np.float64) for a in (q, k0, v0, kT, vT))
    B, N, D = q.shape
    M = k0.shape[1]
    d = D // heads
    out = np.zeros((B, N, D))

    def read(b, n, h, K, V):
        lo = h * d
        logits = []
        for m in range(M):
            s = 0.0
            for i in range(d):
                s += q[b, n, lo + i] * K[b, m, lo + i]
            logits.append(s / math.sqrt(d))
        top = max(logits)
        w = [math.exp(z - top) for z in logits]
        tot = sum(w)
        acc = [0.0] * d
        for m in range(M):
            for i in range(d):
                acc[i] += w[m] / tot * V[b, m, lo + i]
        return acc

    for b in range(B):
        for n in range(N):
            for h in range(heads):
                r0 = read(b, n, h, k0, v0)
                rT = read(b, n, h, kT, vT)
                for i in range(d):
                    out[b, n, h * d + i] = 0.5 * (r0[i] + rT[i])
    return out


def raster_trajectories(tracks: MixedTrajectorySet, t: float, H: int, W: int, radius: int) -> np.ndarray:
    """Per-pixel scan: smallest label whose stamp centre is within Chebyshev ``radius``."""
    centres = [(tr.label, to_pixel(*interpolate_track(tracks, tr.label, t), H, W)) for tr in tracks.tracks]
    out = np.zeros((H, W), dtype=np.int64)
    for r in range(H):
        for c in range(W):
            best = 0
            for label, (rr, cc) in centres:
                if max(abs(r - rr), abs(c - cc)) <= radius and (best == 0 or label < best):
                    best = label
            out[r, c] = best
    return out


def line_pixels(r0: int, c0: int, r1: int, c1: int) -> set[tuple[int, int]]:
    """Digital line by rounding the ideal segment at every step of the major axis.

    Matches Bresenham except at exact half-pixel ties.
    """
    n = max(abs(r1 - r0), abs(c1 - c0))
    if n == 0:
        return {(r0, c0)}
    return {
        (int(math.floor(r0 + (r1 - r0) * k / n + 0.5)), int(math.floor(c0 + (c1 - c0) * k / n + 0.5)))
        for k in range(n + 1)
    }


def advect_rigid(point, joints_from: np.ndarray, joints_to: np.ndarray) -> np.ndarray:
    """Carry ``point`` with the rigid motion of its nearest chain bone.

    Nearest bone by point-segment distance; the motion is a rotation about the
    bone's start joint by the change in bone angle, then the start joint's shift.
    """
    p = np.asarray(point, dtype=np.float64)
    best, best_d = 0, math.inf
    for k in range(len(joints_from) - 1):
        a, b = joints_from[k], joints_from[k + 1]
        d = b - a
        u = min(max(float(np.dot(p - a, d) / np.dot(d, d)), 0.0), 1.0)
        dist = float(np.linalg.norm(p - (a + u * d)))
        if dist < best_d:
            best, best_d = k, dist
    a0, b0 = joints_from[best], joints_from[best + 1]
    a1, b1 = joints_to[best], joints_to[best + 1]
    th = math.atan2(*(b1 - a1)[::-1]) - math.atan2(*(b0 - a0)[::-1])
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    return a1 + rot @ (p - a0)
