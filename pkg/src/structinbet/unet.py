"""The three conditioning networks and the denoising UNet.

All networks share one topology (stem, encoder levels, middle, decoder
levels with skip concatenation) and are written as functions over a flat
``name -> Tensor`` parameter dict. Parameter prefixes:

* ``diff.``   denoising UNet (its attention blocks read reference K/V)
* ``ref.``    reference UNet, run on clean keyframes at timestep 0
* ``ctrl.``   control branch: encoder copy + zero convolutions
* ``traj.``   trajectory encoder producing the per-layer condition embeddings
* ``embtab.`` guidance-label embedding table
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as attn
from .config import UNetConfig
from .guidance import MixedTrajectorySet, encode_control, guidance_maps
from .tensor import (
    ShapeError,
    Tensor,
    add,
    avg_pool2d,
    concat,
    conv2d,
    get_default_dtype,
    group_norm,
    linear,
    map_from_tokens,
    matmul,
    reshape,
    silu,
    tokens_from_map,
    upsample_nearest2d,
)

Params = dict[str, Tensor]


class UsageError(ValueError):
    """Raised for calls that violate an operation's preconditions."""


@dataclass(frozen=True)
class AttnSite:
    index: int
    level: int
    stage: str  # "down", "mid" or "up"
    width: int
    resolution: int


def attention_sites(cfg: UNetConfig) -> list[AttnSite]:
    """Attention blocks in forward order."""
    sites: list[AttnSite] = []

    def add_site(level, stage):
        sites.append(AttnSite(len(sites), level, stage, cfg.channels[level], cfg.resolution(level)))

    for lvl in range(cfg.levels):
        for _ in range(cfg.blocks_per_level):
            if lvl in cfg.attn_levels:
                add_site(lvl, "down")
    if cfg.levels - 1 in cfg.attn_levels:
        add_site(cfg.levels - 1, "mid")
    for lvl in reversed(range(cfg.levels)):
        for _ in range(cfg.blocks_per_level):
            if lvl in cfg.attn_levels:
                add_site(lvl, "up")
    return sites


def _groups(cfg: UNetConfig, c: int) -> int:
    return math.gcd(cfg.norm_groups, c)


# ---------------------------------------------------------------- parameters


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, np.ndarray] = {}

    def _put(self, name, arr):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = arr.astype(np.float32)

    def conv(self, name, cin, cout, k, bias=True, zero=False):
        fan_in = cin * k * k
        w = np.zeros((cout, cin, k, k)) if zero else self.rng.standard_normal((cout, cin, k, k)) / math.sqrt(fan_in)
        self._put(name + ".w", w)
        if bias:
            self._put(name + ".b", np.zeros(cout))

    def linear(self, name, cin, cout, bias=True):
        self._put(name + ".w", self.rng.standard_normal((cin, cout)) / math.sqrt(cin))
        if bias:
            self._put(name + ".b", np.zeros(cout))

    def matrix(self, name, cin, cout):
        self._put(name, self.rng.standard_normal((cin, cout)) / math.sqrt(cin))

    def norm(self, name, c):
        self._put(name + ".g", np.ones(c))
        self._put(name + ".b", np.zeros(c))


def _res_params(b: _Builder, name, cin, cout, cfg):
    b.norm(name + ".norm1", cin)
    b.conv(name + ".conv1", cin, cout, 3)
    b.linear(name + ".temb", cfg.temb_dim, cout)
    b.norm(name + ".norm2", cout)
    b.conv(name + ".conv2", cout, cout, 3)
    if cin != cout:
        b.conv(name + ".skip", cin, cout, 1)


def _attn_params(b: _Builder, pre, site: AttnSite, keys):
    b.norm(f"{pre}attn.{site.index}.norm", site.width)
    for k in keys:
        b.matrix(f"{pre}attn.{site.index}.{k}", site.width, site.width)


def _backbone_params(b: _Builder, pre: str, cfg: UNetConfig, part: str) -> None:
    chs = cfg.channels
    sites = iter(attention_sites(cfg))
    keys = ("wq", "wo") if part == "diffusion" else ("wq", "wk", "wv", "wo")
    last = attention_sites(cfg)[-1].index

    b.conv(pre + "stem", cfg.in_channels, chs[0], 3)
    b.linear(pre + "temb.fc1", cfg.temb_dim, cfg.temb_dim)
    b.linear(pre + "temb.fc2", cfg.temb_dim, cfg.temb_dim)
    cin = chs[0]
    skip_chs = []
    for lvl in range(cfg.levels):
        for blk in range(cfg.blocks_per_level):
            _res_params(b, f"{pre}down.{lvl}.{blk}", cin, chs[lvl], cfg)
            cin = chs[lvl]
            if lvl in cfg.attn_levels:
                _attn_params(b, pre, next(sites), keys)
            skip_chs.append(cin)
    _res_params(b, pre + "mid.0", cin, cin, cfg)
    if cfg.levels - 1 in cfg.attn_levels:
        site = next(sites)
        _attn_params(b, pre, site, keys)
        if part == "reference" and site.index == last:
            return
    if part == "control":
        b.conv(pre + "hint", 2 * cfg.embed_dim, chs[0], 3)
        for i, c in enumerate(skip_chs):
            b.conv(f"{pre}zero.{i}", c, c, 1, zero=True)
        b.conv(pre + "zero.mid", cin, cin, 1, zero=True)
        return
    for lvl in reversed(range(cfg.levels)):
        for blk in range(cfg.blocks_per_level):
            _res_params(b, f"{pre}up.{lvl}.{blk}", cin + skip_chs.pop(), chs[lvl], cfg)
            cin = chs[lvl]
            if lvl in cfg.attn_levels:
                site = next(sites)
                _attn_params(b, pre, site, keys)
                if part == "reference" and site.index == last:
                    return
    b.norm(pre + "out.norm", cin)
    b.conv(pre + "out.conv", cin, cfg.in_channels, 3, zero=True)


def _traj_levels(cfg: UNetConfig) -> int:
    return max(s.level for s in attention_sites(cfg)) + 1


def _traj_params(b: _Builder, cfg: UNetConfig) -> None:
    tc = cfg.traj_channels
    for lvl in range(_traj_levels(cfg)):
        b.conv(f"traj.conv.{lvl}", 2 * cfg.embed_dim if lvl == 0 else tc, tc, 3, bias=False)
    for site in attention_sites(cfg):
        b.conv(f"traj.proj.{site.index}", tc, site.width, 1, bias=False)


def init_params(cfg: UNetConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh float32 parameters. The control branch starts as a copy of the
    denoiser's encoder (attention K/V weights are its own), zero convs are 0."""
    rng = np.random.default_rng(seed)
    b = _Builder(rng)
    _backbone_params(b, "diff.", cfg, "diffusion")
    _backbone_params(b, "ref.", cfg, "reference")
    _backbone_params(b, "ctrl.", cfg, "control")
    for name in list(b.params):
        if name.startswith("ctrl."):
            twin = "diff." + name[len("ctrl."):]
            if twin in b.params:
                b.params[name] = b.params[twin].copy()
    _traj_params(b, cfg)
    table = rng.standard_normal((cfg.num_labels, cfg.embed_dim))
    table[0] = 0.0
    b._put("embtab.table", table)
    return b.params


def param_count(cfg: UNetConfig) -> dict[str, int]:
    """Closed-form parameter totals per network prefix."""
    chs, T, L, nb = cfg.channels, cfg.temb_dim, cfg.levels, cfg.blocks_per_level
    sites = attention_sites(cfg)
    last = sites[-1]

    def conv(ci, co, k, bias=True):
        return co * ci * k * k + (co if bias else 0)

    def res(ci, co):
        return 2 * ci + conv(ci, co, 3) + T * co + co + 2 * co + conv(co, co, 3) + (conv(ci, co, 1) if ci != co else 0)

    def att(w, n):
        return 2 * w + n * w * w

    temb = 2 * (T * T + T)
    enc = 0
    cin = chs[0]
    skips = []
    for lvl in range(L):
        for _ in range(nb):
            enc += res(cin, chs[lvl])
            cin = chs[lvl]
            skips.append(cin)
    mid = res(cin, cin)
    dec_res = []
    c = cin
    sk = list(skips)
    for lvl in reversed(range(L)):
        for _ in range(nb):
            dec_res.append((lvl, res(c + sk.pop(), chs[lvl])))
            c = chs[lvl]
    stem = conv(cfg.in_channels, chs[0], 3)
    head = 2 * chs[0] + conv(chs[0], cfg.in_channels, 3)

    n_enc_sites = sum(1 for s in sites if s.stage != "up")
    diff = stem + temb + enc + mid + sum(r for _, r in dec_res) + head + sum(att(s.width, 2) for s in sites)

    ref = stem + temb + enc + mid + sum(att(s.width, 4) for s in sites)
    if last.stage == "up":
        # decoder blocks up to and including the one holding the last attention site
        ref += sum(r for lvl, r in dec_res if lvl >= last.level)
    ctrl = (stem + temb + enc + mid + sum(att(s.width, 4) for s in sites[:n_enc_sites])
            + conv(2 * cfg.embed_dim, chs[0], 3) + sum(conv(c_, c_, 1) for c_ in skips) + conv(cin, cin, 1))
    tc = cfg.traj_channels
    nlev = max(s.level for s in sites) + 1
    traj = conv(2 * cfg.embed_dim, tc, 3, False) + (nlev - 1) * conv(tc, tc, 3, False)
    traj += sum(conv(tc, s.width, 1, False) for s in sites)
    embtab = cfg.num_labels * cfg.embed_dim
    return {"diff": diff, "ref": ref, "ctrl": ctrl, "traj": traj, "embtab": embtab}


# ---------------------------------------------------------------- building blocks


def timestep_embedding(t, dim: int, num_steps: int | None = None) -> np.ndarray:
    """Sinusoidal features: first half sin, second half cos, log-spaced frequencies.

    ``t`` may be an int or a 1-d array; the result is (dim,) or (B, dim).
    """
    scalar = np.ndim(t) == 0
    ts = np.atleast_1d(np.asarray(t))
    if np.any(ts < 0) or (num_steps is not None and np.any(ts >= num_steps)):
        raise UsageError(f"timestep out of range [0, {num_steps})")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = ts.astype(np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(get_default_dtype())
    return emb[0] if scalar else emb


def _conv(p: Params, name: str, x: Tensor, padding: int = 1) -> Tensor:
    return conv2d(x, p[name + ".w"], p.get(name + ".b"), padding=padding)


def _norm(p: Params, name: str, x: Tensor, cfg: UNetConfig) -> Tensor:
    return group_norm(x, _groups(cfg, x.shape[1]), p[name + ".g"], p[name + ".b"])


def _temb(p: Params, pre: str, t, batch: int, cfg: UNetConfig) -> Tensor:
    ts = np.broadcast_to(np.atleast_1d(np.asarray(t)), (batch,))
    e = Tensor(timestep_embedding(ts, cfg.temb_dim))
    h = linear(e, p[pre + "temb.fc1.w"], p[pre + "temb.fc1.b"])
    h = linear(silu(h), p[pre + "temb.fc2.w"], p[pre + "temb.fc2.b"])
    return silu(h)  # pre-activated for the per-block projections


def _res(p: Params, name: str, h: Tensor, temb_act: Tensor, cfg: UNetConfig) -> Tensor:
    x = _conv(p, name + ".conv1", silu(_norm(p, name + ".norm1", h, cfg)))
    tb = linear(temb_act, p[name + ".temb.w"], p[name + ".temb.b"])
    x = add(x, reshape(tb, (tb.shape[0], tb.shape[1], 1, 1)))
    x = _conv(p, name + ".conv2", silu(_norm(p, name + ".norm2", x, cfg)))
    skip = _conv(p, name + ".skip", h, padding=0) if name + ".skip.w" in p else h
    return add(skip, x)


AttnFn = Callable[[AttnSite, Tensor], Tensor]


def _attn_block(p: Params, pre: str, site: AttnSite, h: Tensor, cfg: UNetConfig, fn: AttnFn) -> Tensor:
    B, C, H, W = h.shape
    tokens = tokens_from_map(_norm(p, f"{pre}attn.{site.index}.norm", h, cfg))
    return add(h, map_from_tokens(fn(site, tokens), H, W))


class _Stop(Exception):
    pass


def _backbone(
    p: Params, pre: str, cfg: UNetConfig, h: Tensor, temb_act: Tensor, fn: AttnFn,
    *, stage_limit: str = "full", residuals: list[Tensor] | None = None,
    stop_at: int | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Run encoder, middle and (unless ``stage_limit == "encoder"``) decoder.

    Returns the final feature map and the encoder features (skips + middle).
    ``residuals`` are added to skips and the middle output before decoding.
    """
    sites = iter(attention_sites(cfg))

    def maybe_attn(lvl, h):
        if lvl in cfg.attn_levels:
            site = next(sites)
            h = _attn_block(p, pre, site, h, cfg, fn)
            if stop_at is not None and site.index == stop_at:
                raise _Stop
        return h

    skips: list[Tensor] = []
    try:
        for lvl in range(cfg.levels):
            for blk in range(cfg.blocks_per_level):
                h = _res(p, f"{pre}down.{lvl}.{blk}", h, temb_act, cfg)
                h = maybe_attn(lvl, h)
                skips.append(h)
            if lvl < cfg.levels - 1:
                h = avg_pool2d(h, 2)
        h = _res(p, pre + "mid.0", h, temb_act, cfg)
        h = maybe_attn(cfg.levels - 1, h)
        feats = skips + [h]
        if stage_limit == "encoder":
            return h, feats
        if residuals is not None:
            if len(residuals) != len(feats):
                raise UsageError(f"expected {len(feats)} control residuals, got {len(residuals)}")
            skips = [add(s, r) for s, r in zip(skips, residuals[:-1])]
            h = add(h, residuals[-1])
        for lvl in reversed(range(cfg.levels)):
            for blk in range(cfg.blocks_per_level):
                h = _res(p, f"{pre}up.{lvl}.{blk}", concat([h, skips.pop()], axis=1), temb_act, cfg)
                h = maybe_attn(lvl, h)
            if lvl > 0:
                h = upsample_nearest2d(h, 2)
    except _Stop:
        return h, skips
    return h, feats


def _check_image(x: Tensor, cfg: UNetConfig, what: str) -> None:
    S = cfg.image_size
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, S, S):
        raise ShapeError(f"{what}: expected (B, {cfg.in_channels}, {S}, {S}), got {x.shape}")


# ---------------------------------------------------------------- networks


@dataclass
class ReferenceKV:
    """Per attention site: (K0, V0, KT, VT), each (B, N, D)."""

    layers: list[tuple[Tensor, Tensor, Tensor, Tensor]]


def _reference_pass(frame: Tensor, p: Params, cfg: UNetConfig) -> list[tuple[Tensor, Tensor]]:
    recorded: list[tuple[Tensor, Tensor]] = []

    def fn(site: AttnSite, tokens: Tensor) -> Tensor:
        pre = f"ref.attn.{site.index}."
        k, v = attn.extract_kv(tokens, p[pre + "wk"], p[pre + "wv"])
        recorded.append((k, v))
        q = matmul(tokens, p[pre + "wq"])
        return attn.single_reference_attention(q, k, v, cfg.heads, p[pre + "wo"])

    B = frame.shape[0]
    temb = _temb(p, "ref.", 0, B, cfg)
    h = _conv(p, "ref.stem", frame)
    _backbone(p, "ref.", cfg, h, temb, fn, stop_at=attention_sites(cfg)[-1].index)
    return recorded


def reference_forward(keyframe0: Tensor, keyframeT: Tensor, p: Params, cfg: UNetConfig) -> ReferenceKV:
    """Record K/V at every attention site for both clean keyframes (timestep 0).

    The two keyframes run as separate passes so identical inputs give
    bit-identical records.
    """
    _check_image(keyframe0, cfg, "keyframe0")
    _check_image(keyframeT, cfg, "keyframeT")
    if keyframe0.shape != keyframeT.shape:
        raise ShapeError("keyframes differ in shape")
    kv0 = _reference_pass(keyframe0, p, cfg)
    kvT = _reference_pass(keyframeT, p, cfg)
    return ReferenceKV([(k0, v0, kT, vT) for (k0, v0), (kT, vT) in zip(kv0, kvT)])


def trajectory_encoder(
    ctrl0: Tensor, ctrlc: Tensor, ctrlT: Tensor, p: Params, cfg: UNetConfig
) -> list[dict[str, Tensor]]:
    """Per attention site: {"emb_0", "emb_c", "emb_T"} token embeddings (B, N, D)."""
    S = cfg.image_size
    nlev = _traj_levels(cfg)
    sites = attention_sites(cfg)

    def pyramid(ctrl: Tensor) -> list[Tensor]:
        if ctrl.ndim != 4 or ctrl.shape[1:] != (2 * cfg.embed_dim, S, S):
            raise ShapeError(f"control tensor {ctrl.shape} does not match (B, {2 * cfg.embed_dim}, {S}, {S})")
        feats = []
        h = ctrl
        for lvl in range(nlev):
            if lvl:
                h = avg_pool2d(h, 2)
            h = silu(_conv(p, f"traj.conv.{lvl}", h))
            feats.append(h)
        return feats

    per_time = {}
    for key, ctrl in (("emb_0", ctrl0), ("emb_c", ctrlc), ("emb_T", ctrlT)):
        feats = pyramid(ctrl)
        per_time[key] = [
            tokens_from_map(_conv(p, f"traj.proj.{s.index}", feats[s.level], padding=0)) for s in sites
        ]
    return [{k: per_time[k][s.index] for k in per_time} for s in sites]


def control_branch(noisy: Tensor, t, control: Tensor, p: Params, cfg: UNetConfig) -> list[Tensor]:
    """Zero-convolved encoder features: one residual per skip, then the middle."""
    _check_image(noisy, cfg, "noisy")
    B = noisy.shape[0]
    if control.shape != (B, 2 * cfg.embed_dim, cfg.image_size, cfg.image_size):
        raise ShapeError(f"control tensor has shape {control.shape}")

    def fn(site: AttnSite, tokens: Tensor) -> Tensor:
        pre = f"ctrl.attn.{site.index}."
        return attn.self_attention(tokens, {k: p[pre + k] for k in ("wq", "wk", "wv", "wo")}, cfg.heads)

    temb = _temb(p, "ctrl.", t, B, cfg)
    h = add(_conv(p, "ctrl.stem", noisy), _conv(p, "ctrl.hint", control))
    _, feats = _backbone(p, "ctrl.", cfg, h, temb, fn, stage_limit="encoder")
    out = [_conv(p, f"ctrl.zero.{i}", f, padding=0) for i, f in enumerate(feats[:-1])]
    out.append(_conv(p, "ctrl.zero.mid", feats[-1], padding=0))
    return out


def diffusion_forward(
    noisy: Tensor, t, refkv: ReferenceKV, embs: list[dict[str, Tensor]],
    residuals: list[Tensor] | None, p: Params, cfg: UNetConfig,
    reference_mode: str = "bidirectional",
) -> Tensor:
    """Predict the noise in ``noisy``.

    Every attention block keeps its own queries but reads keys/values from
    ``refkv``; ``reference_mode="single"`` reads keyframe 0 only.
    """
    _check_image(noisy, cfg, "noisy")
    sites = attention_sites(cfg)
    if refkv is None or len(refkv.layers) != len(sites):
        raise UsageError(f"reference K/V needed for {len(sites)} attention layers")
    if embs is None or len(embs) != len(sites):
        raise UsageError(f"condition embeddings needed for {len(sites)} attention layers")
    if reference_mode not in ("bidirectional", "single"):
        raise UsageError(f"unknown reference mode {reference_mode!r}")
    B = noisy.shape[0]

    def fn(site: AttnSite, tokens: Tensor) -> Tensor:
        pre = f"diff.attn.{site.index}."
        k0, v0, kT, vT = refkv.layers[site.index]
        e = embs[site.index]
        inputs = attn.AttentionInputs(
            matmul(tokens, p[pre + "wq"]), k0, v0, kT, vT, e["emb_c"], e["emb_0"], e["emb_T"], cfg.heads
        )
        qt, k0t, v0t, kTt, vTt = attn.augment(inputs)
        if reference_mode == "single":
            return attn.single_reference_attention(qt, k0t, v0t, cfg.heads, p[pre + "wo"])
        return attn.bidirectional_reference_attention(qt, k0t, v0t, kTt, vTt, cfg.heads, p[pre + "wo"])

    temb = _temb(p, "diff.", t, B, cfg)
    h = _conv(p, "diff.stem", noisy)
    h, _ = _backbone(p, "diff.", cfg, h, temb, fn, residuals=residuals)
    return _conv(p, "diff.out.conv", silu(_norm(p, "diff.out.norm", h, cfg)))


# ---------------------------------------------------------------- model wrapper


@dataclass
class GuidanceLabels:
    """Integer rasters at times (0, c, T); each array is (B, H, W)."""

    traj: tuple[np.ndarray, np.ndarray, np.ndarray]
    skel: tuple[np.ndarray, np.ndarray, np.ndarray]

    @staticmethod
    def stack(items: list["GuidanceLabels"]) -> "GuidanceLabels":
        return GuidanceLabels(
            tuple(np.concatenate([g.traj[i] for g in items]) for i in range(3)),
            tuple(np.concatenate([g.skel[i] for g in items]) for i in range(3)),
        )


def guidance_labels(tracks: MixedTrajectorySet, t_frac: float, size: int, radius: int = 1) -> GuidanceLabels:
    traj, skel = [], []
    for t in (0.0, t_frac, 1.0):
        tm, sm = guidance_maps(tracks, t, (size, size), radius)
        traj.append(tm.labels[None])
        skel.append(sm.labels[None])
    return GuidanceLabels(tuple(traj), tuple(skel))


@dataclass
class Conditioning:
    refkv: ReferenceKV
    embs: list[dict[str, Tensor]]
    control: Tensor  # encoded guidance at time c


class InbetweenModel:
    """Parameters plus the forward wiring of all four networks."""

    def __init__(self, cfg: UNetConfig, params: dict[str, np.ndarray] | Params):
        self.cfg = cfg
        self.params: Params = {
            k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True) for k, v in params.items()
        }

    @classmethod
    def create(cls, cfg: UNetConfig, seed: int = 0) -> "InbetweenModel":
        return cls(cfg, init_params(cfg, seed))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {len(missing)} parameters, e.g. {sorted(missing)[0]}")
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != {t.shape}")
            t.data = np.ascontiguousarray(state[k], dtype=t.data.dtype)

    def encode(self, traj: np.ndarray, skel: np.ndarray) -> Tensor:
        return encode_control(traj, skel, self.params["embtab.table"])

    def condition(self, frame0: Tensor, frameT: Tensor, labels: GuidanceLabels) -> Conditioning:
        p, cfg = self.params, self.cfg
        ctrl = [self.encode(labels.traj[i], labels.skel[i]) for i in range(3)]
        refkv = reference_forward(frame0, frameT, p, cfg)
        embs = trajectory_encoder(ctrl[0], ctrl[1], ctrl[2], p, cfg)
        return Conditioning(refkv, embs, ctrl[1])

    def predict_eps(
        self, noisy: Tensor, t, cond: Conditioning, use_control: bool = True,
        reference_mode: str = "bidirectional",
    ) -> Tensor:
        p, cfg = self.params, self.cfg
        res = control_branch(noisy, t, cond.control, p, cfg) if use_control else None
        return diffusion_forward(noisy, t, cond.refkv, cond.embs, res, p, cfg, reference_mode)
