"""Multi-head attention, including the two-keyframe reference variant.

Reference attention reads keys/values recorded from the reference network at
both keyframes and averages the two per-head attention reads. Queries and
references are first offset by guidance embeddings (the "tilde" inputs).
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import ShapeError, Tensor, add, matmul, reshape, scale, softmax, transpose, inv_sqrt


@dataclass
class AttentionInputs:
    q: Tensor  # (B, N, D)
    k0: Tensor  # (B, M, D)
    v0: Tensor
    kT: Tensor
    vT: Tensor
    emb_c: Tensor  # (B, N, D)
    emb_0: Tensor  # (B, M, D)
    emb_T: Tensor
    heads: int

    def __post_init__(self):
        B, N, D = self.q.shape
        if D % self.heads:
            raise ShapeError(f"width {D} not divisible by {self.heads} heads")
        M = self.k0.shape[1]
        for name in ("k0", "v0", "kT", "vT", "emb_0", "emb_T"):
            if getattr(self, name).shape != (B, M, D):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(B, M, D)}")
        if self.emb_c.shape != (B, N, D):
            raise ShapeError(f"emb_c has shape {self.emb_c.shape}, expected {(B, N, D)}")

    @property
    def head_dim(self) -> int:
        return self.q.shape[2] // self.heads


def augment(inp: AttentionInputs) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    """Add the condition embeddings at full width, before heads are split."""
    return (
        add(inp.q, inp.emb_c),
        add(inp.k0, inp.emb_0),
        add(inp.v0, inp.emb_0),
        add(inp.kT, inp.emb_T),
        add(inp.vT, inp.emb_T),
    )


def split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, D = x.shape
    if D % heads:
        raise ShapeError(f"width {D} not divisible by {heads} heads")
    return transpose(reshape(x, (B, N, heads, D // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, H, N, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (B, N, H * d))


def _attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v on (B, H, tokens, d) tensors."""
    d = q.shape[-1]
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), inv_sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


def _check_pair(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("attention operands must be (B, tokens, D)")
    if k.shape != v.shape or k.shape[0] != q.shape[0] or k.shape[2] != q.shape[2]:
        raise ShapeError(f"incompatible attention operands {q.shape}, {k.shape}, {v.shape}")


def bidirectional_reference_attention(
    q: Tensor, k0: Tensor, v0: Tensor, kT: Tensor, vT: Tensor, heads: int, wo: Tensor | None = None
) -> Tensor:
    """Mean of the attention reads against both keyframes, per head.

    Inputs are the already-augmented operands. ``wo`` is the output
    projection; when omitted the merged heads are returned unprojected.
    """
    _check_pair(q, k0, v0)
    _check_pair(q, kT, vT)
    qh = split_heads(q, heads)
    read0 = _attend(qh, split_heads(k0, heads), split_heads(v0, heads))
    readT = _attend(qh, split_heads(kT, heads), split_heads(vT, heads))
    out = merge_heads(scale(add(read0, readT), 0.5))
    return out if wo is None else matmul(out, wo)


def single_reference_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, wo: Tensor | None = None) -> Tensor:
    _check_pair(q, k, v)
    out = merge_heads(_attend(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)))
    return out if wo is None else matmul(out, wo)


def extract_kv(x: Tensor, wk: Tensor, wv: Tensor) -> tuple[Tensor, Tensor]:
    """Bias-free key/value projections of reference tokens."""
    if x.ndim != 3 or x.shape[2] != wk.shape[0] or x.shape[2] != wv.shape[0]:
        raise ShapeError(f"tokens {x.shape} do not match projections {wk.shape}, {wv.shape}")
    return matmul(x, wk), matmul(x, wv)


def self_attention(x: Tensor, params: dict[str, Tensor], heads: int) -> Tensor:
    """Standard multi-head self-attention; ``params`` holds wq, wk, wv, wo."""
    if x.ndim != 3:
        raise ShapeError(f"self_attention expects (B, N, D), got {x.shape}")
    D = x.shape[2]
    for key in ("wq", "wk", "wv", "wo"):
        if params[key].shape != (D, D):
            raise ShapeError(f"{key} has shape {params[key].shape}, expected {(D, D)}")
    if D % heads:
        raise ShapeError(f"width {D} not divisible by {heads} heads")
    q = matmul(x, params["wq"])
    k, v = extract_kv(x, params["wk"], params["wv"])
    return single_reference_attention(q, k, v, heads, params["wo"])
