"""Built-in numerical self-checks with a pass/fail table.

``fast`` covers primitive gradients, the bidirectional attention identities,
zero-init identity, the rasterization oracle and forward-diffusion algebra.
``full`` adds the Monte-Carlo variance check and end-to-end gradient checks.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as A
from . import tensor as T
from .config import UNetConfig
from .diffusion import Batch, diffusion_loss, make_schedule, predict_x0, q_sample
from .gradcheck import check_gradients
from .guidance import MixedTrajectorySet, PixelTrajectory, rasterize_trajectories
from .oracles import eq1_attention, raster_trajectories
from .tensor import Tensor
from .unet import GuidanceLabels, InbetweenModel, init_params


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def _weighted(out: Tensor, seed: int = 99) -> Tensor:
    r = np.random.default_rng(seed).normal(size=out.shape)
    return T.sum_all(T.mul(out, Tensor(r)))


PRIMITIVES: dict[str, tuple[list[tuple[int, ...]], Callable[..., Tensor]]] = {
    "add": ([(3, 4), (4,)], lambda a, b: T.add(a, b)),
    "sub": ([(3, 4), (3, 1)], lambda a, b: T.sub(a, b)),
    "mul": ([(2, 3), (2, 3)], lambda a, b: T.mul(a, b)),
    "scale": ([(5,)], lambda a: T.scale(a, -1.7)),
    "square": ([(5,)], lambda a: T.square(a)),
    "silu": ([(2, 5)], lambda a: T.silu(a)),
    "matmul": ([(2, 3, 4), (4, 2)], lambda a, b: T.matmul(a, b)),
    "linear": ([(3, 4), (4, 2), (2,)], lambda x, w, b: T.linear(x, w, b)),
    "softmax": ([(3, 5)], lambda a: T.softmax(a, axis=-1)),
    "conv2d": ([(2, 2, 5, 5), (3, 2, 3, 3), (3,)], lambda x, w, b: T.conv2d(x, w, b, padding=1)),
    "conv2d_1x1": ([(2, 3, 4, 4), (2, 3, 1, 1), (2,)], lambda x, w, b: T.conv2d(x, w, b)),
    "group_norm": ([(2, 4, 3, 3), (4,), (4,)], lambda x, g, b: T.group_norm(x, 2, g, b)),
    "avg_pool2d": ([(1, 2, 4, 4)], lambda x: T.avg_pool2d(x, 2)),
    "upsample": ([(1, 2, 2, 3)], lambda x: T.upsample_nearest2d(x, 2)),
    "concat": ([(1, 2, 3, 3), (1, 1, 3, 3)], lambda a, b: T.concat_channels(a, b)),
    "reshape": ([(2, 6)], lambda a: T.reshape(a, (3, 4))),
    "transpose": ([(2, 3, 4)], lambda a: T.transpose(a, (2, 0, 1))),
    "split": ([(2, 5)], lambda a: T.split(a, [2, 3], axis=1)[1]),
    "mean": ([(3, 3)], lambda a: T.mean_all(a)),
    "mse": ([(2, 3), (2, 3)], lambda a, b: T.mse_loss(a, b)),
    "attention": ([(1, 3, 4)] * 5, lambda *xs: A.bidirectional_reference_attention(*xs, 2)),
}


def check_primitives(points: int = 10) -> CheckResult:
    worst, bad = 0.0, []
    for name, (shapes, op) in PRIMITIVES.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        for _ in range(points):
            arrays = [rng.normal(size=s) for s in shapes]
            if name == "group_norm":
                arrays[1] = arrays[1] + 1.0
            res = check_gradients(lambda ts: _weighted(op(*ts)), arrays)
            worst = max(worst, res.max_abs_error)
            if not res.ok:
                bad.append(name)
                break
    detail = f"{len(PRIMITIVES)} ops x {points} points, max abs err {worst:.1e}"
    return CheckResult("primitive gradients", not bad, detail + (f"; failed: {', '.join(bad)}" if bad else ""))


GRADCHECK_CONFIG = UNetConfig(image_size=16, base_channels=8, channel_mults=(1,), attn_levels=(0,), heads=2,
                              temb_dim=8, norm_groups=2, embed_dim=2, num_labels=12, traj_channels=4)


def check_end_to_end_gradients(points: int = 10, coords: int = 1, cfg: UNetConfig = GRADCHECK_CONFIG) -> CheckResult:
    """Training loss of a one-level UNet against central differences.

    Each point draws fresh parameters (zero convolutions and the output
    layer randomized so every path carries gradient), a fresh batch and
    timestep, and differences ``coords`` random coordinates of every tensor.
    """
    S = cfg.image_size
    sched = make_schedule()
    worst, checked, failures = 0.0, 0, 0
    for point in range(points):
        rng = np.random.default_rng([0x6EAD, point])
        base = init_params(cfg, point)
        names = sorted(base)
        arrays = []
        for k in names:
            a = base[k].astype(np.float64)
            if k.startswith("ctrl.zero.") or k == "diff.out.conv.w":
                a = rng.normal(scale=0.3, size=a.shape)
            arrays.append(a)
        img = lambda: rng.uniform(-1, 1, size=(1, cfg.in_channels, S, S))  # noqa: E731
        lab = lambda: rng.integers(0, 9, size=(1, S, S))  # noqa: E731
        batch = Batch(img(), img(), img(), GuidanceLabels((lab(), lab(), lab()), (lab(), lab(), lab())))
        eps = rng.standard_normal((1, cfg.in_channels, S, S))
        t = rng.integers(0, sched.steps, size=1)

        def loss(leaves):
            return diffusion_loss(InbetweenModel(cfg, dict(zip(names, leaves))), batch, t, eps, sched)

        res = check_gradients(loss, arrays, max_coords=coords, rng=rng)
        worst = max(worst, res.max_abs_error)
        checked += res.checked
        failures += res.failures
    return CheckResult("end-to-end loss gradient", failures == 0,
                       f"{points} points, {checked} coords, {failures} failures, max abs err {worst:.1e}")


def check_eq1_reduction(cases: int = 100) -> CheckResult:
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(cases):
        B, N, M, H = (int(v) for v in rng.integers(1, 5, 4))
        D = H * int(rng.integers(1, 5))
        q = Tensor(rng.normal(size=(B, N, D)))
        k, v = Tensor(rng.normal(size=(B, M, D))), Tensor(rng.normal(size=(B, M, D)))
        bi = A.bidirectional_reference_attention(q, k, v, k, v, H).data
        single = A.single_reference_attention(q, k, v, H).data
        worst = max(worst, float(np.max(np.abs(bi - single))))
    return CheckResult("attention reduction (equal references)", worst < 1e-6, f"{cases} shapes, max diff {worst:.1e}")


def check_eq1_oracle(cases: int = 50) -> CheckResult:
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(cases):
        N = int(rng.integers(1, 5))
        H = int(rng.choice([1, 2]))
        D = H * int(rng.integers(1, 9 // H))
        ops = [rng.normal(size=(1, N, D)) for _ in range(5)]
        got = A.bidirectional_reference_attention(*(Tensor(o) for o in ops), H).data
        worst = max(worst, float(np.max(np.abs(got - eq1_attention(*ops, H)))))
    return CheckResult("attention vs brute-force oracle", worst < 1e-6, f"{cases} cases, max diff {worst:.1e}")


def check_tilde() -> CheckResult:
    rng = np.random.default_rng(3)
    ok = True
    # integer-valued inputs make the differences exact; normals check the sums
    for draw in (lambda s: rng.integers(-1000, 1000, s), lambda s: rng.normal(size=s)):
        inp = A.AttentionInputs(*(Tensor(draw((2, 6, 8))) for _ in range(8)), heads=2)
        qt, k0t, v0t, kTt, vTt = A.augment(inp)
        ok &= (np.array_equal(qt.data, inp.q.data + inp.emb_c.data)
               and np.array_equal(k0t.data, inp.k0.data + inp.emb_0.data)
               and np.array_equal(v0t.data, inp.v0.data + inp.emb_0.data)
               and np.array_equal(kTt.data, inp.kT.data + inp.emb_T.data)
               and np.array_equal(vTt.data, inp.vT.data + inp.emb_T.data))
        if inp.q.data.dtype.kind == "f" and np.all(inp.q.data == np.round(inp.q.data)):
            ok &= (np.array_equal(qt.data - inp.q.data, inp.emb_c.data)
                   and np.array_equal(k0t.data - inp.k0.data, inp.emb_0.data)
                   and np.array_equal(vTt.data - inp.vT.data, inp.emb_T.data))
    return CheckResult("tilde augmentation", bool(ok), "exact differences on integer-valued inputs")


ZERO_INIT_CONFIG = UNetConfig(image_size=8, base_channels=8, channel_mults=(1, 2), heads=2, temb_dim=8,
                              norm_groups=2, embed_dim=2, num_labels=12, traj_channels=4)


def check_zero_init(inputs: int = 10, cfg: UNetConfig = ZERO_INIT_CONFIG) -> CheckResult:
    rng = np.random.default_rng(4)
    model = InbetweenModel.create(cfg, 0)
    # the real output conv is zero at init; randomize it so outputs carry signal
    w = model.params["diff.out.conv.w"]
    w.data = rng.normal(size=w.shape).astype(w.data.dtype)
    S = cfg.image_size
    same = 0
    with T.no_grad():
        for _ in range(inputs):
            img = lambda: Tensor(rng.uniform(-1, 1, (1, cfg.in_channels, S, S)).astype(np.float32))  # noqa: E731
            lab = lambda: rng.integers(0, 9, (1, S, S))  # noqa: E731
            cond = model.condition(img(), img(), GuidanceLabels((lab(), lab(), lab()), (lab(), lab(), lab())))
            x, t = img(), int(rng.integers(0, 200))
            a = model.predict_eps(x, t, cond).data
            b = model.predict_eps(x, t, cond, use_control=False).data
            same += bool(np.array_equal(a, b))
    return CheckResult("zero-init identity", same == inputs, f"{same}/{inputs} bit-identical")


def _random_tracks(rng: np.random.Generator) -> MixedTrajectorySet:
    n = int(rng.integers(0, 7))
    tracks = [PixelTrajectory(i + 1, {0.0: tuple(rng.uniform(0, 1, 2)), 1.0: tuple(rng.uniform(0, 1, 2))})
              for i in range(n)]
    return MixedTrajectorySet([], tracks, 1.0, [])


def check_raster_oracle(cases: int = 50) -> CheckResult:
    rng = np.random.default_rng(5)
    equal = 0
    for _ in range(cases):
        H, W = (int(v) for v in rng.integers(2, 17, 2))
        r = int(rng.integers(0, 3))
        tracks = _random_tracks(rng)
        t = float(rng.uniform(0, 1))
        got = rasterize_trajectories(tracks, t, (H, W), r).labels
        equal += bool(np.array_equal(got, raster_trajectories(tracks, t, H, W, r)))
    return CheckResult("rasterization oracle", equal == cases, f"{equal}/{cases} exact")


def check_x0_recovery() -> CheckResult:
    rng = np.random.default_rng(6)
    sched = make_schedule()
    x0 = rng.uniform(-1, 1, size=(4, 1, 8, 8))
    worst = 0.0
    for t in range(sched.steps):
        eps = rng.standard_normal(x0.shape)
        worst = max(worst, float(np.max(np.abs(predict_x0(q_sample(x0, t, eps, sched), t, eps, sched) - x0))))
    return CheckResult("x0 recovery", worst < 1e-5, f"all {sched.steps} timesteps, max err {worst:.1e}")


def check_variance(draws: int = 10_000) -> CheckResult:
    rng = np.random.default_rng(7)
    sched = make_schedule()
    worst = 0.0
    for t in (0, 50, 100, 150, 199):
        x0 = rng.uniform(-1, 1, size=draws)
        xt = q_sample(x0, t, rng.standard_normal(draws), sched)
        want = sched.alpha_bars[t] * x0.var() + 1 - sched.alpha_bars[t]
        worst = max(worst, abs(xt.var() / want - 1))
    return CheckResult("q_sample variance (Monte-Carlo)", worst < 0.05, f"{draws} draws, max rel dev {worst:.3f}")


FAST = [check_primitives, check_eq1_reduction, check_eq1_oracle, check_tilde, check_zero_init,
        check_raster_oracle, check_x0_recovery]
FULL = FAST + [check_variance, check_end_to_end_gradients]


def run(level: str = "fast") -> list[CheckResult]:
    checks = FULL if level == "full" else FAST
    out = []
    for fn in checks:
        t0 = time.perf_counter()
        try:
            res = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed tool
            res = CheckResult(fn.__name__, False, f"raised {type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  time    detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.ok else 'FAIL':<6}  {r.seconds:5.1f}s  {r.detail}")
    return "\n".join(lines)
