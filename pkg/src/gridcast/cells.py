"""Recurrent cells over feature grids.

All cells keep the classic peephole ConvLSTM gate layout

    i = sigmoid(Wx_i * X + <state term>_i + Wc_i o C + b_i)
    f = sigmoid(Wx_f * X + <state term>_f + Wc_f o C + b_f)
    C' = f o C + i o tanh(Wx_c * X + <state term>_c + b_c)
    o = sigmoid(Wx_o * X + <state term>_o + Wc_o o C' + b_o)
    H' = o o tanh(C')

and differ in what the input and state terms are:

* ConvLSTMCell: both are plain convolutions.
* TAAConvLSTMCell: the state term is a per-gate convolution of H channel-
  concatenated with temporal attention from H into recent hidden states.
  Attention is computed once per step and shared by all four gates.
* SAAConvLSTMCell: the input term is a per-gate convolution of X channel-
  concatenated with self-attention over X (again shared across gates); the
  state term stays a plain convolution.

Gate biases and peephole weights come in two granularities: "spatial"
(d, H, W), a full map per channel, or "channel" (d, 1, 1) broadcast over the
grid. CausalLSTMCell and GHUCell implement the cascaded-memory baseline cell
and its highway unit; they use neither peepholes nor gate maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

import gridcast.tensor as gt
from gridcast.attention import (AttentionParams, HeadMask,
                                TemporalAttentionParams, attention_width,
                                init_attention_params,
                                init_temporal_attention_params,
                                multi_head_attention,
                                multi_head_temporal_attention)
from gridcast.tensor import ShapeError, Tensor

__all__ = [
    "CellState", "GATES", "ConvLSTMCell", "TAAConvLSTMCell",
    "SAAConvLSTMCell", "CausalLSTMCell", "GHUCell",
]

GATES = ("i", "f", "c", "o")


@dataclass
class CellState:
    """Hidden/cell grids plus, for temporal attention, past hidden states
    (most recent first, newest excluded)."""

    h: Tensor
    c: Tensor
    history: list[Tensor] = field(default_factory=list)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def _conv_init(rng, c_out, c_in, k, dtype) -> Tensor:
    sd = (c_in * k * k) ** -0.5
    return Tensor(rng.normal(0.0, sd, size=(c_out, c_in, k, k)).astype(dtype),
                  requires_grad=True)


def _gate_map(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _gate_shape(mode: str, d: int, grid_hw: tuple[int, int]) -> tuple[int, ...]:
    if mode == "spatial":
        return (d, grid_hw[0], grid_hw[1])
    if mode == "channel":
        return (d, 1, 1)
    raise ValueError(f"unknown gate_param_mode {mode!r}")


class _GatedCellBase:
    """Shared gate arithmetic; subclasses provide input/state terms."""

    def _finish_gates(self, pre_i, pre_f, pre_c, pre_o_partial, state):
        """Run the gate nonlinearity cascade given pre-activations.

        ``pre_o_partial`` lacks the output peephole, which reads the new
        cell state.
        """
        i = gt.sigmoid(gt.add(gt.add(pre_i, gt.mul(self.peep["i"], state.c)),
                              self.bias["i"]))
        f = gt.sigmoid(gt.add(gt.add(pre_f, gt.mul(self.peep["f"], state.c)),
                              self.bias["f"]))
        c_new = gt.add(gt.mul(f, state.c),
                       gt.mul(i, gt.tanh(gt.add(pre_c, self.bias["c"]))))
        o = gt.sigmoid(gt.add(gt.add(pre_o_partial,
                                     gt.mul(self.peep["o"], c_new)),
                              self.bias["o"]))
        h_new = gt.mul(o, gt.tanh(c_new))
        return h_new, c_new

    def init_state(self) -> CellState:
        shape = (self.hidden, self.grid_hw[0], self.grid_hw[1])
        return CellState(_zeros(shape, self.dtype), _zeros(shape, self.dtype))


class ConvLSTMCell(_GatedCellBase):
    """Peephole ConvLSTM; input and state terms are same-padded convolutions."""

    def __init__(self, in_channels: int, hidden: int, kernel: int,
                 grid_hw: tuple[int, int], rng: np.random.Generator,
                 dtype=np.float64, gate_param_mode: str = "spatial"):
        self.in_channels = in_channels
        self.hidden = hidden
        self.kernel = kernel
        self.grid_hw = grid_hw
        self.dtype = np.dtype(dtype)
        gs = _gate_shape(gate_param_mode, hidden, grid_hw)
        self.w_x = {g: _conv_init(rng, hidden, in_channels, kernel, self.dtype)
                    for g in GATES}
        self.w_h = {g: _conv_init(rng, hidden, hidden, kernel, self.dtype)
                    for g in GATES}
        self.peep = {g: _gate_map(gs, self.dtype) for g in ("i", "f", "o")}
        self.bias = {g: _gate_map(gs, self.dtype) for g in GATES}

    def step(self, x: Tensor, state: CellState,
             head_mask: HeadMask | None = None) -> CellState:
        pre = {g: gt.add(gt.conv2d(x, self.w_x[g]),
                         gt.conv2d(state.h, self.w_h[g]))
               for g in GATES}
        h, c = self._finish_gates(pre["i"], pre["f"], pre["c"], pre["o"], state)
        return CellState(h, c)

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for g in GATES:
            out[f"{prefix}{g}.x"] = self.w_x[g]
            out[f"{prefix}{g}.h"] = self.w_h[g]
            if g in self.peep:
                out[f"{prefix}{g}.peep"] = self.peep[g]
            out[f"{prefix}{g}.bias"] = self.bias[g]
        return out


class _AttentionHistoryMixin:
    """History buffer policy for cells with temporal attention."""

    def _push_history(self, state: CellState, h_prev: Tensor) -> list[Tensor]:
        entry = h_prev.detach() if self.detach_history else h_prev
        return [entry] + state.history[:self.buffer_len - 1]

    def _selected(self, history: list[Tensor]) -> list[Tensor]:
        if self.history_mode == "recent" or len(history) <= self.horizon:
            return history
        idx = np.unique(np.linspace(0, len(history) - 1,
                                    self.horizon).round().astype(int))
        return [history[i] for i in idx]


class TAAConvLSTMCell(_GatedCellBase, _AttentionHistoryMixin):
    """ConvLSTM whose state-to-state terms attend into past hidden states.

    Each gate's state term is concat(conv(H, w_conv_gate), A) where A is
    temporal attention from H into the history buffer, computed once per
    step. With an empty history A is a zero block, so the first step behaves
    like a ConvLSTM whose state weights have a zero block.
    """

    def __init__(self, in_channels: int, hidden: int, kernel: int,
                 grid_hw: tuple[int, int], rng: np.random.Generator,
                 n_heads: int = 4, horizon: int = 4,
                 att_fraction: float = 0.25, positional: bool = True,
                 history_mode: str = "recent", history_span: int = 10,
                 detach_history: bool = False, dtype=np.float64,
                 gate_param_mode: str = "spatial"):
        if history_mode not in ("recent", "uniform"):
            raise ValueError(f"unknown history_mode {history_mode!r}")
        self.in_channels = in_channels
        self.hidden = hidden
        self.kernel = kernel
        self.grid_hw = grid_hw
        self.dtype = np.dtype(dtype)
        self.n_heads = n_heads
        self.horizon = horizon
        self.history_mode = history_mode
        self.buffer_len = horizon if history_mode == "recent" else history_span
        self.detach_history = detach_history
        self.d_att = attention_width(hidden, n_heads, att_fraction)
        self.d_conv = hidden - self.d_att
        if self.d_conv <= 0:
            raise ShapeError(
                f"attention width {self.d_att} leaves no conv channels of "
                f"{hidden}")
        gs = _gate_shape(gate_param_mode, hidden, grid_hw)
        self.w_x = {g: _conv_init(rng, hidden, in_channels, kernel, self.dtype)
                    for g in GATES}
        self.w_conv = {g: _conv_init(rng, self.d_conv, hidden, kernel,
                                     self.dtype) for g in GATES}
        self.att = init_temporal_attention_params(
            rng, hidden, self.d_att, self.d_att, n_heads, horizon,
            grid_hw if positional else None, self.dtype)
        self.peep = {g: _gate_map(gs, self.dtype) for g in ("i", "f", "o")}
        self.bias = {g: _gate_map(gs, self.dtype) for g in GATES}

    def step(self, x: Tensor, state: CellState,
             head_mask: HeadMask | None = None) -> CellState:
        hist = self._selected(state.history)
        if hist:
            att = multi_head_temporal_attention(state.h, hist, self.att,
                                                head_mask)
        else:
            att = _zeros((self.d_att,) + self.grid_hw, self.dtype)
        pre = {}
        for g in GATES:
            state_term = gt.concat(
                [gt.conv2d(state.h, self.w_conv[g]), att], axis=0)
            pre[g] = gt.add(gt.conv2d(x, self.w_x[g]), state_term)
        h, c = self._finish_gates(pre["i"], pre["f"], pre["c"], pre["o"], state)
        return CellState(h, c, self._push_history(state, state.h))

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for g in GATES:
            out[f"{prefix}{g}.x"] = self.w_x[g]
            out[f"{prefix}{g}.conv"] = self.w_conv[g]
            if g in self.peep:
                out[f"{prefix}{g}.peep"] = self.peep[g]
            out[f"{prefix}{g}.bias"] = self.bias[g]
        return out


class SAAConvLSTMCell(_GatedCellBase):
    """ConvLSTM whose input-to-state terms self-attend over the input.

    Each gate's input term is concat(conv(X, w_conv_gate), A) with A
    self-attention over X, shared across gates; state terms stay plain
    convolutions.
    """

    def __init__(self, in_channels: int, hidden: int, kernel: int,
                 grid_hw: tuple[int, int], rng: np.random.Generator,
                 n_heads: int = 4, att_fraction: float = 0.25,
                 positional: bool = True, dtype=np.float64,
                 gate_param_mode: str = "spatial"):
        self.in_channels = in_channels
        self.hidden = hidden
        self.kernel = kernel
        self.grid_hw = grid_hw
        self.dtype = np.dtype(dtype)
        self.n_heads = n_heads
        self.d_att = attention_width(hidden, n_heads, att_fraction)
        self.d_conv = hidden - self.d_att
        if self.d_conv <= 0:
            raise ShapeError(
                f"attention width {self.d_att} leaves no conv channels of "
                f"{hidden}")
        gs = _gate_shape(gate_param_mode, hidden, grid_hw)
        self.w_conv = {g: _conv_init(rng, self.d_conv, in_channels, kernel,
                                     self.dtype) for g in GATES}
        self.w_h = {g: _conv_init(rng, hidden, hidden, kernel, self.dtype)
                    for g in GATES}
        self.att = init_attention_params(
            rng, in_channels, self.d_att, self.d_att, n_heads,
            grid_hw if positional else None, self.dtype)
        self.peep = {g: _gate_map(gs, self.dtype) for g in ("i", "f", "o")}
        self.bias = {g: _gate_map(gs, self.dtype) for g in GATES}

    def step(self, x: Tensor, state: CellState,
             head_mask: HeadMask | None = None) -> CellState:
        att = multi_head_attention(x, x, self.att, head_mask)
        pre = {}
        for g in GATES:
            input_term = gt.concat([gt.conv2d(x, self.w_conv[g]), att], axis=0)
            pre[g] = gt.add(input_term, gt.conv2d(state.h, self.w_h[g]))
        h, c = self._finish_gates(pre["i"], pre["f"], pre["c"], pre["o"], state)
        return CellState(h, c)

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for g in GATES:
            out[f"{prefix}{g}.conv"] = self.w_conv[g]
            out[f"{prefix}{g}.h"] = self.w_h[g]
            if g in self.peep:
                out[f"{prefix}{g}.peep"] = self.peep[g]
            out[f"{prefix}{g}.bias"] = self.bias[g]
        return out


class CausalLSTMCell:
    """Cascaded temporal/spatial memory cell.

    One step, with [..] denoting channel concatenation:

        g, i, f    = tanh/sig/sig(W1 * [X, H, C])
        C'         = f o C + i o g
        g', i', f' = tanh/sig/sig(W2 * [X, C', M])
        M'         = f' o tanh(W3 * M) + i' o g'
        o          = tanh(W4 * [X, C', M'])
        H'         = o o tanh(W5 * [C', M'])      (W5 is 1x1)

    M is the spatial memory handed up the stack within a time step.
    """

    def __init__(self, in_channels: int, hidden: int, kernel: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.in_channels = in_channels
        self.hidden = hidden
        self.kernel = kernel
        self.dtype = np.dtype(dtype)
        d = hidden
        self.w1 = _conv_init(rng, 3 * d, in_channels + 2 * d, kernel, self.dtype)
        self.b1 = Tensor(np.zeros(3 * d, dtype=self.dtype), requires_grad=True)
        self.w2 = _conv_init(rng, 3 * d, in_channels + 2 * d, kernel, self.dtype)
        self.b2 = Tensor(np.zeros(3 * d, dtype=self.dtype), requires_grad=True)
        self.w3 = _conv_init(rng, d, d, kernel, self.dtype)
        self.b3 = Tensor(np.zeros(d, dtype=self.dtype), requires_grad=True)
        self.w4 = _conv_init(rng, d, in_channels + 2 * d, kernel, self.dtype)
        self.b4 = Tensor(np.zeros(d, dtype=self.dtype), requires_grad=True)
        self.w5 = _conv_init(rng, d, 2 * d, 1, self.dtype)
        self.b5 = Tensor(np.zeros(d, dtype=self.dtype), requires_grad=True)

    def _split3(self, z: Tensor):
        d = self.hidden
        return (gt.tanh(gt.narrow(z, 0, 0, d)),
                gt.sigmoid(gt.narrow(z, 0, d, d)),
                gt.sigmoid(gt.narrow(z, 0, 2 * d, d)))

    def step(self, x: Tensor, h: Tensor, c: Tensor, m: Tensor):
        z1 = gt.conv2d(gt.concat([x, h, c], axis=0), self.w1, self.b1)
        g, i, f = self._split3(z1)
        c_new = gt.add(gt.mul(f, c), gt.mul(i, g))
        z2 = gt.conv2d(gt.concat([x, c_new, m], axis=0), self.w2, self.b2)
        g2, i2, f2 = self._split3(z2)
        m_new = gt.add(gt.mul(f2, gt.tanh(gt.conv2d(m, self.w3, self.b3))),
                       gt.mul(i2, g2))
        o = gt.tanh(gt.conv2d(gt.concat([x, c_new, m_new], axis=0),
                              self.w4, self.b4))
        h_new = gt.mul(o, gt.tanh(gt.conv2d(gt.concat([c_new, m_new], axis=0),
                                            self.w5, self.b5)))
        return h_new, c_new, m_new

    def zero_state(self, grid_hw: tuple[int, int]):
        shape = (self.hidden,) + grid_hw
        return (_zeros(shape, self.dtype), _zeros(shape, self.dtype))

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}w1": self.w1, f"{prefix}b1": self.b1,
                f"{prefix}w2": self.w2, f"{prefix}b2": self.b2,
                f"{prefix}w3": self.w3, f"{prefix}b3": self.b3,
                f"{prefix}w4": self.w4, f"{prefix}b4": self.b4,
                f"{prefix}w5": self.w5, f"{prefix}b5": self.b5}


class GHUCell:
    """Gradient highway unit: Z' = S o P + (1 - S) o Z."""

    def __init__(self, in_channels: int, hidden: int, kernel: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.in_channels = in_channels
        self.hidden = hidden
        self.kernel = kernel
        self.dtype = np.dtype(dtype)
        self.w_px = _conv_init(rng, hidden, in_channels, kernel, self.dtype)
        self.b_p = Tensor(np.zeros(hidden, dtype=self.dtype), requires_grad=True)
        self.w_pz = _conv_init(rng, hidden, hidden, kernel, self.dtype)
        self.w_sx = _conv_init(rng, hidden, in_channels, kernel, self.dtype)
        self.b_s = Tensor(np.zeros(hidden, dtype=self.dtype), requires_grad=True)
        self.w_sz = _conv_init(rng, hidden, hidden, kernel, self.dtype)

    def step(self, x: Tensor, z: Tensor) -> Tensor:
        p = gt.tanh(gt.add(gt.conv2d(x, self.w_px, self.b_p),
                           gt.conv2d(z, self.w_pz)))
        s = gt.sigmoid(gt.add(gt.conv2d(x, self.w_sx, self.b_s),
                              gt.conv2d(z, self.w_sz)))
        return gt.add(gt.mul(s, p), gt.mul(gt.sub_from_scalar(1.0, s), z))

    def zero_state(self, grid_hw: tuple[int, int]) -> Tensor:
        return _zeros((self.hidden,) + grid_hw, self.dtype)

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}px": self.w_px, f"{prefix}bp": self.b_p,
                f"{prefix}pz": self.w_pz, f"{prefix}sx": self.w_sx,
                f"{prefix}bs": self.b_s, f"{prefix}sz": self.w_sz}
