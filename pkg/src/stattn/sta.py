"""Super-token attention: cluster tokens into grid regions, attend over the
region descriptors, and broadcast the result back to tokens.

Pipeline (all differentiable through the tensor graph):

  1. sampling (sts): region descriptors S start as cell averages of the token
     map; each token computes softmax association weights against only the
     9 super tokens surrounding its cell, and S is re-estimated as the
     association-weighted token average (column-normalized).
  2. mhsa_super: standard multi-head self-attention over the m = p*q super
     tokens (scale 1/sqrt(C/heads)).
  3. token_upsample: tokens recover a full-resolution map as association-
     weighted mixtures of the attended super tokens.

Grid semantics: StaConfig.grid_h/grid_w is the CELL size (tokens per super
token); a map of H x W tokens yields a p x q super-token grid with p = H/grid_h,
q = W/grid_w. The degenerate 1x1 grid skips stages 1 and 3 entirely and is
plain global attention over all tokens.

Out-of-cell-range slots ("phantom" neighbors of border cells) follow
cfg.phantom_mode:
  - "literal": phantom slots enter the softmax with logit 0 (the dot product
    against a zero vector) and keep their share of the mass; their
    contributions then vanish because the scatter/gather steps read zeros.
  - "masked": phantom slots get -inf logits, so their weight is exactly 0 and
    each row's mass stays on real neighbors.

sta_dense_oracle is an independent dense implementation (explicit per-cell
loops, dense [N, m] association matrix, no fold/unfold) used to verify the
sparse path; it also exposes the dense effective token-to-token attention
map used by the visualization command.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from stattn.errors import ConfigError, ShapeError
from stattn.tensor import (
    Tensor,
    adaptive_avg_pool,
    as_tensor,
    fold3x3,
    matmul,
    merge_cells,
    mul,
    reshape,
    softmax_lastdim,
    split_cells,
    transpose,
    unfold3x3,
)

MASK_FILL = -1e30


@dataclass(frozen=True)
class StaConfig:
    """Geometry and behavior of one super-token attention instance."""

    grid_h: int
    grid_w: int
    heads: int = 1
    n_iter: int = 1
    phantom_mode: str = "literal"
    eps: float = 1e-12

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError(f"grid must be >= 1x1, got {self.grid_h}x{self.grid_w}")
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if self.n_iter < 0:
            raise ConfigError(f"n_iter must be >= 0, got {self.n_iter}")
        if self.phantom_mode not in ("literal", "masked"):
            raise ConfigError(f"phantom_mode must be literal|masked, got {self.phantom_mode!r}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")


@dataclass
class StaWeights:
    """Projection weights shared by the sparse and dense attention paths."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    @classmethod
    def init(cls, c: int, rng: np.random.Generator, std: float = 0.02, dtype=np.float32):
        def draw():
            return Tensor(
                _trunc_normal(rng, (c, c), std).astype(dtype), requires_grad=True
            )

        return cls(draw(), draw(), draw(), draw())

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v, self.w_o]


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std (truncated normal)."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out


@dataclass
class SuperTokens:
    """Region descriptors on a p x q grid: data is [b, C, p, q]."""

    data: Tensor

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    @property
    def count(self) -> int:
        p, q = self.grid
        return p * q


@dataclass
class AssociationMap:
    """Sparse token-to-region weights.

    weights: [b, p*q, cell_h*cell_w, 9] softmax rows; slot k = (dy+1)*3 + (dx+1)
    addresses the super token at (cell_y + dy, cell_x + dx). col_sum (set by
    update_super_tokens) is the folded per-super-token column sum [b, 1, p, q]
    used for the column normalization.
    """

    weights: Tensor
    grid_p: int
    grid_q: int
    cell_h: int
    cell_w: int
    mode: str
    col_sum: Optional[Tensor] = field(default=None)


def grid_geometry(x_shape: tuple[int, ...], cfg: StaConfig) -> tuple[int, int]:
    """(p, q): super-token grid implied by the token map shape and cell size."""
    if len(x_shape) != 4:
        raise ShapeError(f"expected [b,C,H,W], got {x_shape}")
    _, _, h, w = x_shape
    if h % cfg.grid_h or w % cfg.grid_w:
        raise ShapeError(
            f"token map {h}x{w} not divisible by cell {cfg.grid_h}x{cfg.grid_w}"
        )
    return h // cfg.grid_h, w // cfg.grid_w


def slot_neighbors(p: int, q: int) -> np.ndarray:
    """[p*q, 9] super-token index addressed by each slot, -1 when out of range."""
    ys, xs = np.divmod(np.arange(p * q), q)
    out = np.full((p * q, 9), -1, dtype=np.int64)
    for k in range(9):
        dy, dx = k // 3 - 1, k % 3 - 1
        ny, nx = ys + dy, xs + dx
        ok = (ny >= 0) & (ny < p) & (nx >= 0) & (nx < q)
        out[ok, k] = (ny * q + nx)[ok]
    return out


def slot_validity(p: int, q: int) -> np.ndarray:
    """[p*q, 9] bool: which window slots address a real super token."""
    return slot_neighbors(p, q) >= 0


def init_super_tokens(x, cfg: StaConfig) -> SuperTokens:
    """Cell-average initialization: S0[g] = mean of the tokens in cell g."""
    x = as_tensor(x)
    p, q = grid_geometry(x.shape, cfg)
    return SuperTokens(adaptive_avg_pool(x, (p, q)))


def split_tokens(x, cfg: StaConfig) -> Tensor:
    """Token map [b,C,H,W] -> per-cell tokens [b, p*q, cell_h*cell_w, C]."""
    return split_cells(as_tensor(x), cfg.grid_h, cfg.grid_w)


def _stoken_windows(s: Tensor, p: int, q: int) -> Tensor:
    """3x3 neighborhoods of every grid cell: [b,C,p,q] -> [b, p*q, C, 9].

    Out-of-range slots read as zero vectors (the zero padding of unfold3x3),
    which is what gives literal phantom slots their 0 logits.
    """
    b, c = s.shape[0], s.shape[1]
    u = unfold3x3(s)  # [b, C*9, p*q]
    return transpose(reshape(u, (b, c, 9, p * q)), (0, 3, 1, 2))


def _mask_tensor(p: int, q: int, dtype) -> Tensor:
    add = np.where(slot_validity(p, q), 0.0, MASK_FILL).astype(dtype)
    return Tensor(add.reshape(1, p * q, 1, 9))


def compute_association(x, s, cfg: StaConfig) -> AssociationMap:
    """Softmax association of every token with its 9 surrounding super tokens.

    Logits are scaled dot products <token, super token> / sqrt(C) (full channel
    width, not per head). Every row of the result sums to 1; in masked mode the
    out-of-range slots are exactly 0.
    """
    x = as_tensor(x)
    s_t = s.data if isinstance(s, SuperTokens) else as_tensor(s)
    p, q = grid_geometry(x.shape, cfg)
    if s_t.shape[2] != p or s_t.shape[3] != q:
        raise ShapeError(f"super-token grid {s_t.shape} does not match {p}x{q}")
    c = x.shape[1]
    tokens = split_tokens(x, cfg)  # [b, pq, hw, C]
    windows = _stoken_windows(s_t, p, q)  # [b, pq, C, 9]
    logits = mul(matmul(tokens, windows), 1.0 / np.sqrt(c))
    if cfg.phantom_mode == "masked":
        logits = logits + _mask_tensor(p, q, logits.dtype)
    weights = softmax_lastdim(logits)
    return AssociationMap(weights, p, q, cfg.grid_h, cfg.grid_w, cfg.phantom_mode)


def update_super_tokens(x, assoc: AssociationMap, cfg: StaConfig) -> SuperTokens:
    """Column-normalized re-estimation S[j] = sum_i Q[i,j] X[i] / (col_sum[j] + eps).

    Both the weighted token sums and the column sums are scattered back onto
    the grid through fold3x3; contributions aimed at phantom slots land in the
    cropped zero padding and vanish. Sets assoc.col_sum as a side effect.
    """
    x = as_tensor(x)
    p, q = assoc.grid_p, assoc.grid_q
    b, c = x.shape[0], x.shape[1]
    tokens = split_tokens(x, cfg)  # [b, pq, hw, C]
    w = assoc.weights
    col = transpose(w.sum(axis=2), (0, 2, 1))  # [b, 9, pq]
    col = fold3x3(col, p, q)  # [b, 1, p, q]
    num = matmul(transpose(tokens, (0, 1, 3, 2)), w)  # [b, pq, C, 9]
    num = reshape(transpose(num, (0, 2, 3, 1)), (b, c * 9, p * q))
    num = fold3x3(num, p, q)  # [b, C, p, q]
    assoc.col_sum = col
    return SuperTokens(num / (col + cfg.eps))


def sts(x, cfg: StaConfig) -> tuple[SuperTokens, AssociationMap]:
    """Sampling stage: n_iter rounds of (associate, re-estimate).

    The returned association is the one computed on the final round, i.e.
    against S(n_iter - 1). n_iter = 0 associates once against the initial cell
    averages and leaves S exactly equal to them.
    """
    x = as_tensor(x)
    s = init_super_tokens(x, cfg)
    if cfg.n_iter == 0:
        return s, compute_association(x, s, cfg)
    assoc = None
    for _ in range(cfg.n_iter):
        assoc = compute_association(x, s, cfg)
        s = update_super_tokens(x, assoc, cfg)
    return s, assoc


def _mhsa_flat(tokens: Tensor, w: StaWeights, heads: int, rel_bias=None) -> Tensor:
    """Multi-head self-attention over [b, m, C] token lists."""
    b, m, c = tokens.shape
    if c % heads:
        raise ConfigError(f"channels {c} not divisible by heads {heads}")
    dh = c // heads

    def split_heads(t):
        return transpose(reshape(t, (b, m, heads, dh)), (0, 2, 1, 3))

    q = split_heads(matmul(tokens, w.w_q))
    k = split_heads(matmul(tokens, w.w_k))
    v = split_heads(matmul(tokens, w.w_v))
    logits = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if rel_bias is not None:
        logits = logits + rel_bias
    a = softmax_lastdim(logits)  # [b, heads, m, m]
    out = reshape(transpose(matmul(a, v), (0, 2, 1, 3)), (b, m, c))
    return matmul(out, w.w_o)


def attention_probs(tokens: Tensor, w: StaWeights, heads: int, rel_bias=None) -> Tensor:
    """The softmax attention map [b, heads, m, m] of _mhsa_flat (for tests/viz)."""
    b, m, c = tokens.shape
    dh = c // heads

    def split_heads(t):
        return transpose(reshape(t, (b, m, heads, dh)), (0, 2, 1, 3))

    q = split_heads(matmul(tokens, w.w_q))
    k = split_heads(matmul(tokens, w.w_k))
    logits = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if rel_bias is not None:
        logits = logits + rel_bias
    return softmax_lastdim(logits)


def mhsa_super(s, w: StaWeights, heads: int, rel_bias=None) -> Tensor:
    """Attention over the super tokens: [b,C,p,q] -> [b,C,p,q]."""
    s_t = s.data if isinstance(s, SuperTokens) else as_tensor(s)
    b, c, p, q = s_t.shape
    flat = transpose(reshape(s_t, (b, c, p * q)), (0, 2, 1))
    out = _mhsa_flat(flat, w, heads, rel_bias=rel_bias)
    return reshape(transpose(out, (0, 2, 1)), (b, c, p, q))


def token_upsample(assoc: AssociationMap, attn_s) -> Tensor:
    """Tokens as association-weighted mixtures of attended super tokens.

    Each token reads the 9 surrounding (attended) super tokens of its cell and
    mixes them with its association row; phantom slots contribute zero, so in
    literal mode border rows lose the phantom share of their mass.
    """
    s_t = attn_s.data if isinstance(attn_s, SuperTokens) else as_tensor(attn_s)
    p, q = assoc.grid_p, assoc.grid_q
    if s_t.shape[2] != p or s_t.shape[3] != q:
        raise ShapeError(f"attended grid {s_t.shape} does not match {p}x{q}")
    windows = _stoken_windows(s_t, p, q)  # [b, pq, C, 9]
    mixed = matmul(windows, transpose(assoc.weights, (0, 1, 3, 2)))  # [b, pq, C, hw]
    cells = transpose(mixed, (0, 1, 3, 2))  # [b, pq, hw, C]
    return merge_cells(cells, p, q, assoc.cell_h, assoc.cell_w)


def sta_forward(x, cfg: StaConfig, w: StaWeights, rel_bias=None) -> Tensor:
    """Full pipeline: sample regions, attend over them, upsample back.

    A 1x1 grid skips sampling and upsampling: the op is then plain multi-head
    self-attention over all H*W tokens.
    """
    x = as_tensor(x)
    b, c, h, wd = x.shape
    if (cfg.grid_h, cfg.grid_w) == (1, 1):
        flat = transpose(reshape(x, (b, c, h * wd)), (0, 2, 1))
        out = _mhsa_flat(flat, w, cfg.heads, rel_bias=rel_bias)
        return reshape(transpose(out, (0, 2, 1)), (b, c, h, wd))
    s, assoc = sts(x, cfg)
    attn = mhsa_super(s, w, cfg.heads, rel_bias=rel_bias)
    return token_upsample(assoc, attn)


# -- independent dense reference ----------------------------------------------


def _np_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_mhsa(s: np.ndarray, w: StaWeights, heads: int, rel_bias=None):
    """Dense numpy MHSA over [b, m, C]; returns (output, per-head attention)."""
    b, m, c = s.shape
    dh = c // heads
    wq, wk, wv, wo = (t.data.astype(s.dtype) for t in w.tensors())
    q, k, v = s @ wq, s @ wk, s @ wv
    outs = []
    attns = []
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        logits = q[..., sl] @ k[..., sl].swapaxes(-1, -2) / np.sqrt(dh)
        if rel_bias is not None:
            logits = logits + np.asarray(rel_bias.data if isinstance(rel_bias, Tensor) else rel_bias)[hd]
        a = _np_softmax(logits)
        attns.append(a)
        outs.append(a @ v[..., sl])
    out = np.concatenate(outs, axis=-1) @ wo
    return out, np.stack(attns, axis=1)


def _dense_association(
    tokens_sp: np.ndarray, s_flat: np.ndarray, cfg: StaConfig, p: int, q: int
) -> np.ndarray:
    """Dense [b, N, m] association built cell by cell (no fold/unfold)."""
    b, n, c = tokens_sp.shape
    m = p * q
    h, wd = cfg.grid_h, cfg.grid_w
    neighbors = slot_neighbors(p, q)
    cell_tokens = _cell_token_ids(p, q, h, wd)
    scale = 1.0 / np.sqrt(c)
    qd = np.zeros((b, n, m), dtype=tokens_sp.dtype)
    for g in range(m):
        ids = cell_tokens[g]
        logits = np.zeros((b, len(ids), 9), dtype=tokens_sp.dtype)
        for k in range(9):
            j = neighbors[g, k]
            if j >= 0:
                logits[:, :, k] = (tokens_sp[:, ids, :] @ s_flat[:, j, :, None])[:, :, 0] * scale
            elif cfg.phantom_mode == "masked":
                logits[:, :, k] = -np.inf
            # literal: phantom logit stays 0 (dot with the zero vector)
        weights = _np_softmax(logits)
        for k in range(9):
            j = neighbors[g, k]
            if j >= 0:
                qd[:, ids, j] += weights[:, :, k]
    return qd


def _cell_token_ids(p: int, q: int, cell_h: int, cell_w: int) -> list[np.ndarray]:
    """Spatial (row-major) token ids belonging to each grid cell."""
    h, w = p * cell_h, q * cell_w
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    flat = rows * w + cols
    out = []
    for g in range(p * q):
        y, x = divmod(g, q)
        block = flat[y * cell_h : (y + 1) * cell_h, x * cell_w : (x + 1) * cell_w]
        out.append(block.reshape(-1))
    return out


def sta_dense_oracle(
    x, cfg: StaConfig, w: StaWeights, rel_bias=None
) -> tuple[np.ndarray, np.ndarray]:
    """Dense reference for sta_forward.

    Materializes the [N, m] association matrix, runs the identical iteration
    count with the dense column-normalized update, attends densely, and
    returns (output [b,C,H,W], dense effective attention [b, N, N]) where the
    attention map is head-averaged: A_tilde = Q . mean_h A_h(S) . Qhat^T.
    For the degenerate 1x1 grid Q is the identity and S is the token list.
    """
    x = as_tensor(x)
    xd = np.asarray(x.data)
    b, c, h, wd = xd.shape
    n = h * wd
    tokens_sp = xd.transpose(0, 2, 3, 1).reshape(b, n, c)
    if (cfg.grid_h, cfg.grid_w) == (1, 1):
        out_flat, attn = _np_mhsa(tokens_sp, w, cfg.heads, rel_bias=rel_bias)
        a_tilde = attn.mean(axis=1)
        out = out_flat.reshape(b, h, wd, c).transpose(0, 3, 1, 2)
        return out, a_tilde
    p, q = grid_geometry(xd.shape, cfg)
    m = p * q
    # initial S: cell averages, flattened row-major over the grid
    s_flat = (
        xd.reshape(b, c, p, cfg.grid_h, q, cfg.grid_w)
        .mean(axis=(3, 5))
        .reshape(b, c, m)
        .transpose(0, 2, 1)
    )
    if cfg.n_iter == 0:
        qd = _dense_association(tokens_sp, s_flat, cfg, p, q)
        col = qd.sum(axis=1)
    else:
        for _ in range(cfg.n_iter):
            qd = _dense_association(tokens_sp, s_flat, cfg, p, q)
            col = qd.sum(axis=1)  # [b, m]
            s_flat = (qd.swapaxes(-1, -2) @ tokens_sp) / (col + cfg.eps)[:, :, None]
    attn_out, attn = _np_mhsa(s_flat, w, cfg.heads, rel_bias=rel_bias)
    out_tokens = qd @ attn_out  # [b, N, C]
    out = out_tokens.reshape(b, h, wd, c).transpose(0, 3, 1, 2)
    qhat = qd / (col + cfg.eps)[:, None, :]
    a_tilde = qd @ attn.mean(axis=1) @ qhat.swapaxes(-1, -2)
    return out, a_tilde


def gsa_forward(x, w: StaWeights, heads: int = 1) -> Tensor:
    """Plain global MHSA over all tokens, written as an independent dense pass.

    This is the quadratic baseline the sparse pipeline is measured against;
    it is numpy-only (no gradients) and deliberately shares no code with
    _mhsa_flat so that the two can verify one another.
    """
    x = as_tensor(x)
    xd = np.asarray(x.data)
    b, c, h, wd = xd.shape
    out_flat, _ = _np_mhsa(xd.transpose(0, 2, 3, 1).reshape(b, h * wd, c), w, heads)
    return Tensor(out_flat.reshape(b, h, wd, c).transpose(0, 3, 1, 2))
