import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structinbet import guidance as G
from structinbet.oracles import line_pixels, raster_trajectories
from structinbet.tensor import Tensor


def chain(points):
    return G.Skeleton(points, [0] + list(range(len(points) - 1)))


def test_skeleton_rejects_cycles_and_bad_roots():
    with pytest.raises(G.StructureError):
        G.Skeleton([[0.1, 0.1], [0.2, 0.2]], [1, 0])
    with pytest.raises(G.StructureError):
        G.Skeleton([[0.1, 0.1], [0.2, 0.2]], [0, 1])
    with pytest.raises(G.StructureError):
        G.Skeleton([[0.1, 1.2]], [0])


def test_build_joints_only():
    s0 = chain([[0.1, 0.1], [0.2, 0.2], [0.3, 0.3]])
    sT = chain([[0.5, 0.1], [0.6, 0.2], [0.7, 0.3]])
    tr = G.build_mixed_trajectories(s0, sT, [], 8)
    assert tr.labels == {1, 2, 3}
    for j in range(3):
        pts = tr.track(j + 1).points
        assert pts[0.0] == tuple(s0.joints[j]) and pts[8.0] == tuple(sT.joints[j])


def test_build_relabels_pixel_tracks_in_order():
    s = chain([[0.1, 0.1], [0.2, 0.2]])
    pa = G.PixelTrajectory(17, {0: (0.4, 0.4), 4: (0.5, 0.5)})
    pb = G.PixelTrajectory(3, {0: (0.9, 0.9), 4: (0.8, 0.8)})
    tr = G.build_mixed_trajectories(s, s, [pa, pb], 4)
    assert tr.labels == {1, 2, 3, 4}
    assert tr.track(3).points[0.0] == (0.4, 0.4)
    assert tr.track(4).points[0.0] == (0.9, 0.9)


def test_build_topology_mismatch():
    with pytest.raises(G.StructureError):
        G.build_mixed_trajectories(chain([[0.1, 0.1]] * 3), chain([[0.1, 0.1]] * 4), [], 8)


def test_track_missing_endpoint_rejected():
    s = chain([[0.1, 0.1], [0.2, 0.2]])
    with pytest.raises(G.StructureError):
        G.build_mixed_trajectories(s, s, [G.PixelTrajectory(0, {0: (0.5, 0.5)})], 4)


def _single(points, T=8):
    s = G.Skeleton([[0.0, 0.0]], [0])
    tr = G.build_mixed_trajectories(s, s, [G.PixelTrajectory(0, points)], T)
    return tr, 2  # pixel track label


def test_interpolate_track_examples():
    tr, lab = _single({0: (0.0, 0.0), 8: (1.0, 1.0)})
    assert G.interpolate_track(tr, lab, 0.0) == (0.0, 0.0)
    assert G.interpolate_track(tr, lab, 1.0) == (1.0, 1.0)
    assert G.interpolate_track(tr, lab, 0.5) == pytest.approx((0.5, 0.5))
    tr, lab = _single({0: (0.0, 0.0), 4: (0.2, 0.9), 8: (1.0, 1.0)})
    assert G.interpolate_track(tr, lab, 0.5) == (0.2, 0.9)
    with pytest.raises(KeyError):
        G.interpolate_track(tr, 99, 0.5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=6, max_size=6), st.floats(0.05, 0.95),
       st.floats(0, 1), st.floats(0, 1), st.booleans())
def test_interpolate_continuity(coords, c, t1, t2, with_mid):
    T = 20
    ci = float(round(c * T))
    pts = {0: (coords[0], coords[1]), T: (coords[2], coords[3])}
    if with_mid and 0 < ci < T:
        pts[ci] = (coords[4], coords[5])
    tr, lab = _single(pts, T)
    keys = sorted(pts)
    speed = max(math.dist(pts[a], pts[b]) / ((b - a) / T) for a, b in zip(keys, keys[1:]))
    assert speed <= math.sqrt(2) * T  # bounded by the unit-square diameter over the shortest segment
    p1, p2 = G.interpolate_track(tr, lab, t1), G.interpolate_track(tr, lab, t2)
    assert math.dist(p1, p2) <= abs(t1 - t2) * speed + 1e-9
    if not with_mid:
        assert math.dist(p1, p2) <= abs(t1 - t2) * math.sqrt(2) + 1e-9


def test_rasterize_single_point():
    only = G.MixedTrajectorySet([G.PixelTrajectory(1, {0: (0.5, 0.5), 8: (0.5, 0.5)})], [], 8)
    m = G.rasterize_trajectories(only, 0.3, (8, 8), 0)
    assert np.count_nonzero(m.labels) == 1 and m.labels[4, 4] == 1
    np.testing.assert_array_equal(m.labels, raster_trajectories(only, 0.3, 8, 8, 0))


def test_rasterize_lowest_label_wins():
    tracks = [G.PixelTrajectory(i, {0: (0.5, 0.5), 4: (0.5, 0.5)}) for i in range(1, 6)]
    s = G.MixedTrajectorySet(tracks[:1], tracks[1:], 4)
    m = G.rasterize_trajectories(s, 0.5, (8, 8), 0)
    assert m.labels[4, 4] == 1
    # restrict to labels 2 and 5 at one pixel, others elsewhere
    pts = {1: (0.05, 0.05), 2: (0.5, 0.5), 3: (0.95, 0.05), 4: (0.05, 0.95), 5: (0.5, 0.5)}
    tr = [G.PixelTrajectory(k, {0: p, 4: p}) for k, p in pts.items()]
    m = G.rasterize_trajectories(G.MixedTrajectorySet(tr[:1], tr[1:], 4), 0.0, (8, 8), 0)
    assert m.labels[4, 4] == 2


def test_rasterize_empty():
    assert not G.rasterize_trajectories(None, 0.5, (8, 8), 1).labels.any()


def random_set(rng, n_tracks, T=6):
    tracks = []
    for k in range(1, n_tracks + 1):
        pts = {0: tuple(rng.uniform(-0.1, 1.1, 2)), T: tuple(rng.uniform(-0.1, 1.1, 2))}
        if rng.random() < 0.5:
            pts[3] = tuple(rng.uniform(0, 1, 2))
        tracks.append(G.PixelTrajectory(k, pts))
    return G.MixedTrajectorySet([], tracks, T)


def test_rasterize_matches_bruteforce_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        H = int(rng.integers(8, 17))
        tracks = random_set(rng, int(rng.integers(0, 7)))
        r = int(rng.integers(0, 3))
        t = float(rng.uniform(0, 1))
        got = G.rasterize_trajectories(tracks, t, (H, H), r).labels
        np.testing.assert_array_equal(got, raster_trajectories(tracks, t, H, H, r))
        assert set(np.unique(got)) - {0} <= tracks.labels


def test_pixel_mapping_clamps():
    assert G.to_pixel(1.0, 1.0, 8, 8) == (7, 7)
    assert G.to_pixel(-0.2, 0.0, 8, 8) == (0, 0)
    assert G.to_pixel(0.5, 0.25, 8, 8) == (2, 4)


def test_rasterize_skeleton_single_joint():
    m = G.rasterize_skeleton(G.Skeleton([[0.5, 0.5]], [0]), (8, 8))
    assert np.count_nonzero(m.labels) == 1 and m.labels[4, 4] == 1


def test_rasterize_skeleton_vertical_bone():
    m = G.rasterize_skeleton(G.Skeleton([[0.5, 0.25], [0.5, 0.75]], [0, 0]), (8, 8)).labels
    rows, cols = np.nonzero(m)
    assert set(cols) == {4}
    assert sorted(rows) == list(range(2, 7))
    assert m[2, 4] == 1 and all(m[r, 4] == 2 for r in range(3, 7))


def test_rasterize_skeleton_crossing_bones():
    # bones 1->2 (label 3) and 3->4 (label 5) form an X crossing at pixel (7, 7)
    pts = [[0.5, 0.05], [0.05, 0.05], [0.9, 0.9], [0.9, 0.05], [0.05, 0.9]]
    parents = [0, 0, 1, 0, 3]
    m = G.rasterize_skeleton(G.Skeleton(pts, parents), (16, 16)).labels
    line_a = line_pixels(0, 0, 14, 14)
    line_b = line_pixels(0, 14, 14, 0)
    assert line_a & line_b == {(7, 7)}
    assert m[7, 7] == 3
    # a joint landing on the crossing overrides both bones
    pts2 = pts + [[7.5 / 16, 7.5 / 16]]
    m2 = G.rasterize_skeleton(G.Skeleton(pts2, parents + [0]), (16, 16)).labels
    assert m2[7, 7] == 6


def test_bresenham_properties():
    rng = np.random.default_rng(4)
    for _ in range(200):
        r0, c0, r1, c1 = (int(v) for v in rng.integers(0, 20, 4))
        pts = G.bresenham(r0, c0, r1, c1)
        assert pts[0] == (r0, c0) and pts[-1] == (r1, c1)
        assert len(pts) == max(abs(r1 - r0), abs(c1 - c0)) + 1
        for (a, b), (c, d) in zip(pts, pts[1:]):
            assert max(abs(a - c), abs(b - d)) == 1
        # off the rounding oracle only at exact half-pixel ties
        assert len(set(pts) ^ line_pixels(r0, c0, r1, c1)) % 2 == 0
        n = max(abs(r1 - r0), abs(c1 - c0))
        if n:
            for (r, c) in pts:
                if abs(r1 - r0) >= abs(c1 - c0):
                    ideal = c0 + (c1 - c0) * (r - r0) / (r1 - r0)
                    assert abs(c - ideal) <= 0.5 + 1e-9
                else:
                    ideal = r0 + (r1 - r0) * (c - c0) / (c1 - c0)
                    assert abs(r - ideal) <= 0.5 + 1e-9


def test_encode_control_examples():
    table = Tensor(np.random.default_rng(0).normal(size=(16, 8)))
    z = np.zeros((32, 32), dtype=int)
    out = G.encode_control(z, z, table)
    assert out.shape == (1, 16, 32, 32) and not out.data.any()
    a = np.random.default_rng(1).integers(0, 16, (32, 32))
    b = np.random.default_rng(2).integers(0, 16, (32, 32))
    o1, o2 = G.encode_control(a, b, table), G.encode_control(a, b, table)
    assert np.array_equal(o1.data, o2.data)
    np.testing.assert_array_equal(o1.data[0, :8, 3, 5], table.data[a[3, 5]] * (a[3, 5] > 0))
    np.testing.assert_array_equal(o1.data[0, 8:, 3, 5], table.data[b[3, 5]] * (b[3, 5] > 0))


def test_encode_control_errors():
    table = Tensor(np.zeros((4, 2)))
    with pytest.raises(G.EncodingError):
        G.encode_control(np.full((8, 8), 4), np.zeros((8, 8), int), table)
    with pytest.raises(G.StructureError):
        G.encode_control(np.zeros((8, 8), int), np.zeros((9, 8), int), table)


def test_guidance_text_roundtrip():
    s0 = chain([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]])
    sT = chain([[0.2, 0.2], [0.4, 0.4], [0.6, 0.6]])
    px = [G.PixelTrajectory(0, {0: (0.25, 0.25), 4: (0.3, 0.3), 8: (0.35, 0.35)})]
    tr = G.build_mixed_trajectories(s0, sT, px, 8)
    tr.skeleton_tracks[1].points[4.0] = (0.9, 0.1)
    text = G.format_guidance(s0, sT, tr)
    a0, aT, back = G.parse_guidance(text)
    assert back.labels == tr.labels and back.end_time == 8
    np.testing.assert_allclose(a0.joints, s0.joints)
    assert back.track(2).points[4.0] == (0.9, 0.1)
    assert back.track(4).points[4.0] == (0.3, 0.3)
    assert G.format_guidance(a0, aT, back) == text


@pytest.mark.parametrize("text", [
    "J 1\nframe 0\njoint 0 0 0.5 0.5\n",
    "J 1\nframe 0\njoint 0 0 0.5 0.5\nframe 4\njoint 0 0 0.5 0.5\ntrack 3 0 0.1 0.1\ntrack 3 4 0.1 0.1\n",
    "J 1\nframe 0\njoint 0 0 0.5 0.5\nframe 4\njoint 0 0 0.5 oops\n",
    "bogus line\n",
])
def test_guidance_text_errors(text):
    with pytest.raises(G.GuidanceFormatError):
        G.parse_guidance(text)


def test_guidance_pgm_export():
    m = G.GuidanceMap(np.array([[0, 3], [300, 1]]))
    data = m.to_pgm()
    assert data.startswith(b"P5\n2 2\n255\n")
    assert list(data[-4:]) == [0, 3, 255, 1]
