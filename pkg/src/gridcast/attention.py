"""Multi-head spatial and temporal attention over feature grids.

A feature grid (F, H, W) is flattened to HW tokens of width F. Each head h
projects tokens with its own query/key/value matrices; pairwise logits get a
learned relative-position term, are scaled by 1/sqrt(d_k_head), softmaxed row
by row, and applied to the values. Head outputs are concatenated and mixed by
a square output matrix W_o (pure channel mixing, no spatial coupling), then
reshaped back to a grid.

The temporal variant shares one set of query projections for the current
frame and attends to each history frame separately with the same key/value
projections; per-frame outputs are combined by learned scalar weights indexed
by recency (index 0 = most recent frame).

Masking a head zeroes that head's output slot before W_o, so the full output
decomposes as the sum of per-head contributions through W_o row blocks.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

import gridcast.tensor as gt
from gridcast.tensor import ShapeError, Tensor

__all__ = [
    "HeadMask", "AttentionParams", "TemporalAttentionParams",
    "attention_width", "rel_index_matrices",
    "single_head_attention", "relative_logits",
    "multi_head_attention", "multi_head_temporal_attention",
    "saaconv", "taaconv",
    "init_attention_params", "init_temporal_attention_params",
    "attention_maps", "bench_temporal_attention",
]


@dataclass(frozen=True)
class HeadMask:
    """Boolean keep-flags, one per head."""

    keep: tuple[bool, ...]

    def __post_init__(self):
        if len(self.keep) == 0:
            raise ShapeError("HeadMask needs at least one head")

    @classmethod
    def full(cls, n_heads: int) -> "HeadMask":
        return cls(tuple(True for _ in range(n_heads)))

    @classmethod
    def drop(cls, n_heads: int, *dropped: int) -> "HeadMask":
        return cls(tuple(h not in dropped for h in range(n_heads)))

    @property
    def all_kept(self) -> bool:
        return all(self.keep)

    @property
    def n_heads(self) -> int:
        return len(self.keep)


@dataclass
class AttentionParams:
    """Per-head projections plus output mixing and positional embeddings.

    wq/wk: (F_in, d_k_head) per head; wv: (F_in, d_v_head) per head;
    wo: (n_heads * d_v_head,) square. rel_h is (2H - 1, d_k_head) and rel_w
    (2W - 1, d_k_head) when positional terms are enabled, else None.
    """

    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor
    rel_h: Tensor | None = None
    rel_w: Tensor | None = None

    def __post_init__(self):
        n = len(self.wq)
        if not (len(self.wk) == len(self.wv) == n and n >= 1):
            raise ShapeError("wq/wk/wv must list one matrix per head")
        for h in range(n):
            if self.wq[h].shape != self.wq[0].shape \
                    or self.wk[h].shape != self.wq[0].shape \
                    or self.wv[h].shape != self.wv[0].shape:
                raise ShapeError("per-head projection shapes differ")
        dv = n * self.wv[0].shape[1]
        if self.wo.shape != (dv, dv):
            raise ShapeError(
                f"wo must be ({dv}, {dv}) for {n} heads of width "
                f"{self.wv[0].shape[1]}, got {self.wo.shape}")
        if (self.rel_h is None) != (self.rel_w is None):
            raise ShapeError("rel_h and rel_w must be set together")
        if self.rel_h is not None:
            dk = self.wq[0].shape[1]
            if self.rel_h.shape[1] != dk or self.rel_w.shape[1] != dk:
                raise ShapeError("positional embedding width must equal d_k_head")

    @property
    def n_heads(self) -> int:
        return len(self.wq)

    @property
    def d_k_head(self) -> int:
        return self.wq[0].shape[1]

    @property
    def d_v_head(self) -> int:
        return self.wv[0].shape[1]

    @property
    def d_v_total(self) -> int:
        return self.n_heads * self.d_v_head

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for h in range(self.n_heads):
            out[f"{prefix}{h}.wq"] = self.wq[h]
            out[f"{prefix}{h}.wk"] = self.wk[h]
            out[f"{prefix}{h}.wv"] = self.wv[h]
        out[f"{prefix}wo"] = self.wo
        if self.rel_h is not None:
            out[f"{prefix}rel_h"] = self.rel_h
            out[f"{prefix}rel_w"] = self.rel_w
        return out


@dataclass
class TemporalAttentionParams:
    """Shared per-frame attention plus recency weights w (length = horizon)."""

    base: AttentionParams
    w_tau: Tensor

    def __post_init__(self):
        if self.w_tau.ndim != 1 or self.w_tau.shape[0] < 1:
            raise ShapeError("w_tau must be a non-empty vector")

    @property
    def horizon(self) -> int:
        return self.w_tau.shape[0]

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = self.base.named(prefix)
        out[f"{prefix}w_tau"] = self.w_tau
        return out


def attention_width(d_out: int, n_heads: int, fraction: float = 0.25) -> int:
    """Channel budget for the attention branch of a gate of width d_out.

    Nominally fraction * d_out, rounded up to the nearest multiple of
    n_heads so heads stay equal width. Exact when fraction * d_out already
    divides evenly.
    """
    per_head = max(1, math.ceil(d_out * fraction / n_heads))
    return per_head * n_heads


@lru_cache(maxsize=64)
def rel_index_matrices(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """(HW, HW) lookup tables of row/column offset bins between cell pairs.

    Entry (i, j) is the offset of cell j relative to cell i, shifted to be
    non-negative: row table in [0, 2h - 2], column table in [0, 2w - 2].
    """
    rows = np.repeat(np.arange(h), w)
    cols = np.tile(np.arange(w), h)
    drow = rows[None, :] - rows[:, None] + (h - 1)
    dcol = cols[None, :] - cols[:, None] + (w - 1)
    drow.setflags(write=False)
    dcol.setflags(write=False)
    return drow, dcol


def _flatten_grid(x: Tensor) -> Tensor:
    """(F, H, W) -> (HW, F) token matrix."""
    f = x.shape[0]
    return gt.permute(gt.reshape(x, (f, x.shape[1] * x.shape[2])), (1, 0))


def _project(tokens: Tensor, mats: list[Tensor]) -> Tensor:
    """Apply one projection per head and stack: (HW, F) -> (Nh, HW, d)."""
    return gt.stack([gt.matmul(tokens, m) for m in mats])


def _rel_term(q: Tensor, rel_h: Tensor, rel_w: Tensor) -> Tensor:
    """Pairwise positional logits for queries q (..., HW, d_k_head)."""
    h = (rel_h.shape[0] + 1) // 2
    w = (rel_w.shape[0] + 1) // 2
    hw = q.shape[-2]
    if h * w != hw:
        raise ShapeError(
            f"positional tables imply {h}x{w} grid but queries have {hw} tokens")
    drow, dcol = rel_index_matrices(h, w)
    by_row = gt.gather_last(gt.matmul(q, gt.permute(rel_h, (1, 0))), drow)
    by_col = gt.gather_last(gt.matmul(q, gt.permute(rel_w, (1, 0))), dcol)
    return gt.add(by_row, by_col)


def relative_logits(q: Tensor, rel_h: Tensor, rel_w: Tensor) -> Tensor:
    """Public single-head positional term: (HW, d_k) queries -> (HW, HW)."""
    return _rel_term(q, rel_h, rel_w)


def single_head_attention(q: Tensor, k: Tensor, v: Tensor,
                          s_rel: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention for one head of 2-d token matrices."""
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    logits = gt.matmul(q, gt.permute(k, (1, 0)))
    if s_rel is not None:
        logits = gt.add(logits, s_rel)
    logits = gt.scale(logits, 1.0 / math.sqrt(q.shape[1]))
    return gt.matmul(gt.softmax(logits, axis=-1), v)


def _mask_tensor(mask: HeadMask, n_heads: int, dtype) -> Tensor:
    if mask.n_heads != n_heads:
        raise ShapeError(
            f"mask covers {mask.n_heads} heads, attention has {n_heads}")
    arr = np.asarray(mask.keep, dtype=dtype).reshape(n_heads, 1, 1)
    return Tensor(arr)


def _attend(qs: Tensor, x_kv: Tensor, params: AttentionParams,
            grid_hw: tuple[int, int], mask: HeadMask | None) -> Tensor:
    """Core multi-head pass given pre-projected queries qs (Nh, HW, d_k)."""
    h, w = grid_hw
    tokens = _flatten_grid(x_kv)
    ks = _project(tokens, params.wk)
    vs = _project(tokens, params.wv)
    logits = gt.matmul(qs, gt.permute(ks, (0, 2, 1)))
    if params.rel_h is not None:
        logits = gt.add(logits, _rel_term(qs, params.rel_h, params.rel_w))
    logits = gt.scale(logits, 1.0 / math.sqrt(params.d_k_head))
    weights = gt.softmax(logits, axis=-1)
    heads = gt.matmul(weights, vs)  # (Nh, HW, d_v_head)
    if mask is not None and not mask.all_kept:
        heads = gt.mul(heads, _mask_tensor(mask, params.n_heads, heads.dtype))
    merged = gt.reshape(gt.permute(heads, (1, 0, 2)),
                        (h * w, params.d_v_total))
    fused = gt.matmul(merged, params.wo)
    return gt.reshape(gt.permute(fused, (1, 0)), (params.d_v_total, h, w))


def _check_grid(x: Tensor, params: AttentionParams, name: str) -> tuple[int, int]:
    if x.ndim != 3:
        raise ShapeError(f"{name} must be (F, H, W), got {x.shape}")
    if x.shape[0] != params.wq[0].shape[0]:
        raise ShapeError(
            f"{name} has {x.shape[0]} channels, projections expect "
            f"{params.wq[0].shape[0]}")
    return x.shape[1], x.shape[2]


def multi_head_attention(x_q: Tensor, x_kv: Tensor, params: AttentionParams,
                         mask: HeadMask | None = None) -> Tensor:
    """Multi-head attention between grids: (F, H, W) -> (d_v_total, H, W)."""
    hw = _check_grid(x_q, params, "query grid")
    if x_kv.shape != x_q.shape:
        raise ShapeError(
            f"query and key/value grids differ: {x_q.shape} vs {x_kv.shape}")
    qs = _project(_flatten_grid(x_q), params.wq)
    return _attend(qs, x_kv, params, hw, mask)


def multi_head_temporal_attention(x_t: Tensor, history: list[Tensor],
                                  params: TemporalAttentionParams,
                                  mask: HeadMask | None = None) -> Tensor:
    """Attend from the current frame into each history frame and blend.

    ``history[0]`` is the most recent frame; at most ``params.horizon``
    frames are accepted and fewer are fine (terms for missing frames are
    simply absent, with no weight renormalization). Queries are projected
    once and shared across frames.
    """
    if not history:
        raise ShapeError("temporal attention needs at least one history frame")
    if len(history) > params.horizon:
        raise ShapeError(
            f"history length {len(history)} exceeds horizon {params.horizon}")
    hw = _check_grid(x_t, params.base, "query grid")
    for i, frame in enumerate(history):
        if frame.shape != x_t.shape:
            raise ShapeError(
                f"history[{i}] shape {frame.shape} != query shape {x_t.shape}")
    qs = _project(_flatten_grid(x_t), params.base.wq)
    out: Tensor | None = None
    for i, frame in enumerate(history):
        term = gt.mul(_attend(qs, frame, params.base, hw, mask),
                      gt.narrow(params.w_tau, 0, i, 1))
        out = term if out is None else gt.add(out, term)
    return out


def saaconv(x: Tensor, conv_w: Tensor, conv_b: Tensor | None,
            params: AttentionParams, mask: HeadMask | None = None) -> Tensor:
    """Channel-concatenate a convolution of x with self-attention over x."""
    return gt.concat(
        [gt.conv2d(x, conv_w, conv_b), multi_head_attention(x, x, params, mask)],
        axis=0)


def taaconv(x_t: Tensor, history: list[Tensor], conv_w: Tensor,
            conv_b: Tensor | None, params: TemporalAttentionParams,
            mask: HeadMask | None = None) -> Tensor:
    """Channel-concatenate a convolution of x_t with temporal attention into
    the history frames."""
    return gt.concat(
        [gt.conv2d(x_t, conv_w, conv_b),
         multi_head_temporal_attention(x_t, history, params, mask)],
        axis=0)


# ---------------------------------------------------------------------------
# Initialization

def init_attention_params(rng: np.random.Generator, f_in: int,
                          d_k_total: int, d_v_total: int, n_heads: int,
                          grid_hw: tuple[int, int] | None = None,
                          dtype=np.float64) -> AttentionParams:
    """Random projections: N(0, fan_in^-1/2) weights, N(0, d_k^-1/2)
    positional tables, identity-free square W_o."""
    if d_k_total % n_heads or d_v_total % n_heads:
        raise ShapeError(
            f"d_k_total={d_k_total}, d_v_total={d_v_total} must divide "
            f"n_heads={n_heads}")
    dk, dv = d_k_total // n_heads, d_v_total // n_heads
    sd_in = f_in ** -0.5

    def mat(rows, cols, sd):
        return Tensor(rng.normal(0.0, sd, size=(rows, cols)).astype(dtype),
                      requires_grad=True)

    wq = [mat(f_in, dk, sd_in) for _ in range(n_heads)]
    wk = [mat(f_in, dk, sd_in) for _ in range(n_heads)]
    wv = [mat(f_in, dv, sd_in) for _ in range(n_heads)]
    wo = mat(d_v_total, d_v_total, d_v_total ** -0.5)
    rel_h = rel_w = None
    if grid_hw is not None:
        h, w = grid_hw
        sd_rel = dk ** -0.5
        rel_h = mat(2 * h - 1, dk, sd_rel)
        rel_w = mat(2 * w - 1, dk, sd_rel)
    return AttentionParams(wq, wk, wv, wo, rel_h, rel_w)


def init_temporal_attention_params(rng: np.random.Generator, f_in: int,
                                   d_k_total: int, d_v_total: int,
                                   n_heads: int, horizon: int,
                                   grid_hw: tuple[int, int] | None = None,
                                   dtype=np.float64) -> TemporalAttentionParams:
    base = init_attention_params(rng, f_in, d_k_total, d_v_total, n_heads,
                                 grid_hw, dtype)
    w_tau = Tensor(np.full(horizon, 1.0 / horizon, dtype=dtype),
                   requires_grad=True)
    return TemporalAttentionParams(base, w_tau)


# ---------------------------------------------------------------------------
# Diagnostics

def attention_maps(x_q: Tensor, x_kv: Tensor,
                   params: AttentionParams) -> np.ndarray:
    """Row-stochastic attention weights per head, (Nh, HW, HW) numpy."""
    _check_grid(x_q, params, "query grid")
    with gt.no_grad():
        qs = _project(_flatten_grid(x_q), params.wq)
        tokens = _flatten_grid(x_kv)
        ks = _project(tokens, params.wk)
        logits = gt.matmul(qs, gt.permute(ks, (0, 2, 1)))
        if params.rel_h is not None:
            logits = gt.add(logits, _rel_term(qs, params.rel_h, params.rel_w))
        logits = gt.scale(logits, 1.0 / math.sqrt(params.d_k_head))
        return gt.softmax(logits, axis=-1).data


def bench_temporal_attention(grid: int = 16, f_in: int = 32, d_att: int = 8,
                             n_heads: int = 4,
                             horizons: tuple[int, ...] = (1, 2, 4, 6),
                             runs: int = 20, seed: int = 0,
                             dtype=np.float64) -> dict[int, float]:
    """Median wall time (seconds) of a taaconv forward+backward per horizon.

    History is always full (length = horizon), so cost should scale about
    linearly in the horizon: the conv branch and query projections are
    horizon-independent while per-frame attention repeats.
    """
    rng = np.random.default_rng(seed)
    setups = {}
    for ha in horizons:
        params = init_temporal_attention_params(
            rng, f_in, d_att, d_att, n_heads, ha, (grid, grid), dtype)
        conv_w = Tensor(rng.normal(0, 0.1, size=(f_in - d_att, f_in, 3, 3))
                        .astype(dtype), requires_grad=True)
        x = Tensor(rng.normal(size=(f_in, grid, grid)).astype(dtype),
                   requires_grad=True)
        history = [Tensor(rng.normal(size=(f_in, grid, grid)).astype(dtype),
                          requires_grad=True) for _ in range(ha)]
        setups[ha] = (params, conv_w, x, history)

    def one_pass(ha: int) -> float:
        params, conv_w, x, history = setups[ha]
        t0 = time.perf_counter()
        with gt.Tape() as tape:
            out = taaconv(x, history, conv_w, None, params)
            loss = gt.sum_(out)
        tape.backward(loss)
        return time.perf_counter() - t0

    # Interleave horizons run by run instead of timing each in a solid
    # block: interpreter warm-up and host scheduling hiccups then spread
    # evenly across horizons instead of biasing whichever ran first, which
    # is what the wall-time *ratios* between horizons need. A few untimed
    # cycles first flush allocator and cache cold starts.
    for _ in range(8):
        for ha in horizons:
            one_pass(ha)
    times: dict[int, list[float]] = {ha: [] for ha in horizons}
    for _ in range(runs):
        for ha in horizons:
            times[ha].append(one_pass(ha))
    return {ha: float(np.median(times[ha])) for ha in horizons}
