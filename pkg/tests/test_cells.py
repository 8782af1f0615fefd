"""Recurrent cells: worked examples, transcription oracles, reduction."""

import numpy as np
import pytest
from scipy.signal import correlate2d
from scipy.special import expit

import gridcast.attention as ga
import gridcast.tensor as gt
from gridcast.cells import (GATES, CausalLSTMCell, CellState, ConvLSTMCell,
                            GHUCell, SAAConvLSTMCell, TAAConvLSTMCell)
from gridcast.tensor import Tensor


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def conv_np(x, w, b=None):
    """Independent same-padding cross-correlation route."""
    out = np.zeros((w.shape[0],) + x.shape[1:])
    for o in range(w.shape[0]):
        for c in range(x.shape[0]):
            out[o] += correlate2d(x[c], w[o, c], mode="same")
        if b is not None:
            out[o] += b[o]
    return out


def randomize_gate_maps(cell, rng, scale=0.5):
    for g in cell.peep:
        cell.peep[g].data[:] = rng.normal(0, scale, size=cell.peep[g].shape)
    for g in cell.bias:
        cell.bias[g].data[:] = rng.normal(0, scale, size=cell.bias[g].shape)


def gate_cascade_np(pre, peep, bias, c_prev):
    """Shared oracle for the peephole gate arithmetic."""
    i = expit(pre["i"] + peep["i"] * c_prev + bias["i"])
    f = expit(pre["f"] + peep["f"] * c_prev + bias["f"])
    c = f * c_prev + i * np.tanh(pre["c"] + bias["c"])
    o = expit(pre["o"] + peep["o"] * c + bias["o"])
    return o * np.tanh(c), c


class TestConvLSTM:
    def test_zero_weights_halve_cell_state(self):
        """All-zero parameters: every gate is 0.5, candidate is 0, so
        C' = 0.5 C and H' = 0.5 tanh(0.5 C)."""
        rng = np.random.default_rng(0)
        cell = ConvLSTMCell(2, 4, 3, (4, 4), rng)
        for g in GATES:
            cell.w_x[g].data[:] = 0.0
            cell.w_h[g].data[:] = 0.0
        c_prev = rng.normal(size=(4, 4, 4))
        state = CellState(t64(np.zeros((4, 4, 4))), t64(c_prev))
        out = cell.step(t64(rng.normal(size=(2, 4, 4))), state)
        np.testing.assert_allclose(out.c.data, 0.5 * c_prev, atol=1e-12)
        np.testing.assert_allclose(out.h.data, 0.5 * np.tanh(0.5 * c_prev),
                                   atol=1e-12)

    def test_forget_bias_saturation_preserves_cell(self):
        rng = np.random.default_rng(1)
        cell = ConvLSTMCell(2, 3, 3, (4, 4), rng)
        for g in GATES:
            cell.w_x[g].data[:] = 0.0
            cell.w_h[g].data[:] = 0.0
        cell.bias["f"].data[:] = 30.0  # forget gate pinned at 1
        c_prev = rng.normal(size=(3, 4, 4))
        state = CellState(t64(np.zeros((3, 4, 4))), t64(c_prev))
        out = cell.step(t64(np.zeros((2, 4, 4))), state)
        np.testing.assert_allclose(out.c.data, c_prev, atol=1e-9)

    @pytest.mark.parametrize("mode", ["spatial", "channel"])
    def test_matches_transcription_oracle(self, mode):
        rng = np.random.default_rng(2)
        cell = ConvLSTMCell(3, 5, 3, (6, 6), rng, gate_param_mode=mode)
        randomize_gate_maps(cell, rng)
        x = t64(rng.normal(size=(3, 6, 6)))
        h = rng.normal(size=(5, 6, 6))
        c = rng.normal(size=(5, 6, 6))
        out = cell.step(x, CellState(t64(h), t64(c)))
        pre = {g: conv_np(x.data, cell.w_x[g].data)
               + conv_np(h, cell.w_h[g].data) for g in GATES}
        peep = {g: cell.peep[g].data for g in ("i", "f", "o")}
        bias = {g: cell.bias[g].data for g in GATES}
        want_h, want_c = gate_cascade_np(pre, peep, bias, c)
        np.testing.assert_allclose(out.c.data, want_c, atol=1e-10)
        np.testing.assert_allclose(out.h.data, want_h, atol=1e-10)

    def test_hidden_state_bounded(self):
        rng = np.random.default_rng(3)
        cell = ConvLSTMCell(2, 4, 3, (4, 4), rng)
        state = cell.init_state()
        for _ in range(5):
            state = cell.step(t64(rng.normal(size=(2, 4, 4)) * 10), state)
        assert np.abs(state.h.data).max() < 1.0

    def test_gate_param_shapes(self):
        rng = np.random.default_rng(4)
        spatial = ConvLSTMCell(2, 4, 3, (8, 6), rng, gate_param_mode="spatial")
        channel = ConvLSTMCell(2, 4, 3, (8, 6), rng, gate_param_mode="channel")
        assert spatial.bias["i"].shape == (4, 8, 6)
        assert spatial.peep["o"].shape == (4, 8, 6)
        assert channel.bias["i"].shape == (4, 1, 1)
        assert channel.peep["o"].shape == (4, 1, 1)

    def test_gradcheck_two_steps(self):
        rng = np.random.default_rng(5)
        cell = ConvLSTMCell(2, 3, 3, (3, 3), rng)
        randomize_gate_maps(cell, rng)
        xs = [t64(rng.normal(size=(2, 3, 3))) for _ in range(2)]

        def f():
            state = cell.init_state()
            for x in xs:
                state = cell.step(x, state)
            return gt.sum_(gt.mul(state.h, state.h))

        wrt = [xs[0], cell.w_x["i"], cell.w_h["c"], cell.peep["f"],
               cell.bias["o"]]
        err = gt.gradcheck(f, wrt)
        assert err < 1e-5, f"gradcheck error {err:.3e}"


class TestTAAConvLSTM:
    def make(self, seed=10, hidden=8, n_heads=2, horizon=2, grid=(4, 4)):
        rng = np.random.default_rng(seed)
        cell = TAAConvLSTMCell(2, hidden, 3, grid, rng, n_heads=n_heads,
                               horizon=horizon)
        randomize_gate_maps(cell, rng)
        return rng, cell

    def test_channel_split(self):
        _, cell = self.make()
        assert cell.d_att == 2 and cell.d_conv == 6
        assert cell.w_conv["i"].shape == (6, 8, 3, 3)

    def test_rounded_split_for_three_heads(self):
        rng = np.random.default_rng(11)
        cell = TAAConvLSTMCell(2, 32, 3, (4, 4), rng, n_heads=3, horizon=4)
        assert cell.d_att == 9 and cell.d_conv == 23

    def test_history_grows_to_horizon(self):
        rng, cell = self.make(horizon=2)
        state = cell.init_state()
        lengths = []
        for _ in range(4):
            state = cell.step(t64(rng.normal(size=(2, 4, 4))), state)
            lengths.append(len(state.history))
        assert lengths == [1, 2, 2, 2]

    def test_history_is_most_recent_first(self):
        rng, cell = self.make(horizon=3)
        state = cell.init_state()
        seen = []
        for _ in range(3):
            seen.append(state.h)
            state = cell.step(t64(rng.normal(size=(2, 4, 4))), state)
        # history after 3 steps: [h2, h1, h0] where seen = [h0, h1, h2]
        for got, want in zip(state.history, reversed(seen)):
            np.testing.assert_array_equal(got.data, want.data)

    def test_matches_splice_oracle(self):
        """Gate arithmetic with the public temporal-attention op spliced in."""
        rng, cell = self.make()
        state = cell.init_state()
        xs = [t64(rng.normal(size=(2, 4, 4))) for _ in range(3)]
        for x in xs[:2]:
            state = cell.step(x, state)
        h, c = state.h.data, state.c.data
        att = ga.multi_head_temporal_attention(
            Tensor(h), state.history, cell.att).data
        pre = {}
        for g in GATES:
            term = np.concatenate([conv_np(h, cell.w_conv[g].data), att])
            pre[g] = conv_np(xs[2].data, cell.w_x[g].data) + term
        peep = {g: cell.peep[g].data for g in ("i", "f", "o")}
        bias = {g: cell.bias[g].data for g in GATES}
        want_h, want_c = gate_cascade_np(pre, peep, bias, c)
        out = cell.step(xs[2], state)
        np.testing.assert_allclose(out.c.data, want_c, atol=1e-10)
        np.testing.assert_allclose(out.h.data, want_h, atol=1e-10)

    def test_reduction_to_block_convlstm(self):
        """Zeroed attention must reproduce a ConvLSTM whose state weights
        have the block form [w_conv; 0]."""
        rng, cell = self.make(seed=12)
        cell.att.w_tau.data[:] = 0.0
        ref = ConvLSTMCell(2, 8, 3, (4, 4), np.random.default_rng(0))
        for g in GATES:
            ref.w_x[g].data[:] = cell.w_x[g].data
            ref.w_h[g].data[:] = 0.0
            ref.w_h[g].data[:6] = cell.w_conv[g].data
            ref.bias[g].data[:] = cell.bias[g].data
        for g in ("i", "f", "o"):
            ref.peep[g].data[:] = cell.peep[g].data
        s_taa, s_ref = cell.init_state(), ref.init_state()
        for t in range(3):
            x = t64(rng.normal(size=(2, 4, 4)))
            s_taa = cell.step(x, s_taa)
            s_ref = ref.step(x, s_ref)
            np.testing.assert_allclose(s_taa.h.data, s_ref.h.data, atol=1e-12)
            np.testing.assert_allclose(s_taa.c.data, s_ref.c.data, atol=1e-12)

    def test_detach_history_blocks_gradients(self):
        rng = np.random.default_rng(13)
        cell = TAAConvLSTMCell(2, 8, 3, (4, 4), rng, n_heads=2, horizon=2,
                               detach_history=True)
        x0 = t64(rng.normal(size=(2, 4, 4)))
        x1 = t64(rng.normal(size=(2, 4, 4)))
        with gt.Tape() as tape:
            state = cell.step(x0, cell.init_state())
            state = cell.step(x1, state)
            loss = gt.sum_(state.h)
        tape.backward(loss)
        assert x0.grad is not None  # flows through h, just not the buffer

    def test_uniform_history_selection(self):
        rng = np.random.default_rng(14)
        cell = TAAConvLSTMCell(2, 8, 3, (4, 4), rng, n_heads=2, horizon=2,
                               history_mode="uniform", history_span=6)
        state = cell.init_state()
        for _ in range(6):
            state = cell.step(t64(rng.normal(size=(2, 4, 4))), state)
        assert len(state.history) == 6
        picked = cell._selected(state.history)
        assert len(picked) == 2
        assert picked[0] is state.history[0]
        assert picked[-1] is state.history[-1]

    def test_gradcheck_two_steps(self):
        rng = np.random.default_rng(15)
        cell = TAAConvLSTMCell(2, 4, 3, (3, 3), rng, n_heads=2, horizon=2)
        randomize_gate_maps(cell, rng)
        xs = [t64(rng.normal(size=(2, 3, 3))) for _ in range(2)]

        def f():
            state = cell.init_state()
            for x in xs:
                state = cell.step(x, state)
            return gt.sum_(gt.mul(state.h, state.h))

        wrt = [xs[0], cell.w_conv["i"], cell.att.w_tau, cell.att.base.wo,
               cell.peep["o"]]
        err = gt.gradcheck(f, wrt)
        assert err < 1e-5, f"gradcheck error {err:.3e}"


class TestSAAConvLSTM:
    def make(self, seed=20):
        rng = np.random.default_rng(seed)
        cell = SAAConvLSTMCell(4, 8, 3, (4, 4), rng, n_heads=2)
        randomize_gate_maps(cell, rng)
        return rng, cell

    def test_matches_splice_oracle(self):
        rng, cell = self.make()
        x = t64(rng.normal(size=(4, 4, 4)))
        h = rng.normal(size=(8, 4, 4))
        c = rng.normal(size=(8, 4, 4))
        att = ga.multi_head_attention(x, x, cell.att).data
        pre = {}
        for g in GATES:
            term = np.concatenate([conv_np(x.data, cell.w_conv[g].data), att])
            pre[g] = term + conv_np(h, cell.w_h[g].data)
        peep = {g: cell.peep[g].data for g in ("i", "f", "o")}
        bias = {g: cell.bias[g].data for g in GATES}
        want_h, want_c = gate_cascade_np(pre, peep, bias, c)
        out = cell.step(x, CellState(t64(h), t64(c)))
        np.testing.assert_allclose(out.c.data, want_c, atol=1e-10)
        np.testing.assert_allclose(out.h.data, want_h, atol=1e-10)

    def test_reduction_to_block_convlstm(self):
        """Zeroed attention == ConvLSTM with input weights [w_conv; 0]."""
        rng, cell = self.make(seed=21)
        cell.att.wo.data[:] = 0.0
        ref = ConvLSTMCell(4, 8, 3, (4, 4), np.random.default_rng(0))
        for g in GATES:
            ref.w_x[g].data[:] = 0.0
            ref.w_x[g].data[:cell.d_conv] = cell.w_conv[g].data
            ref.w_h[g].data[:] = cell.w_h[g].data
            ref.bias[g].data[:] = cell.bias[g].data
        for g in ("i", "f", "o"):
            ref.peep[g].data[:] = cell.peep[g].data
        s_saa, s_ref = cell.init_state(), ref.init_state()
        for _ in range(3):
            x = t64(rng.normal(size=(4, 4, 4)))
            s_saa = cell.step(x, s_saa)
            s_ref = ref.step(x, s_ref)
            np.testing.assert_allclose(s_saa.h.data, s_ref.h.data, atol=1e-12)
            np.testing.assert_allclose(s_saa.c.data, s_ref.c.data, atol=1e-12)

    def test_gradcheck_one_step(self):
        rng = np.random.default_rng(22)
        cell = SAAConvLSTMCell(2, 4, 3, (3, 3), rng, n_heads=2)
        randomize_gate_maps(cell, rng)
        x = t64(rng.normal(size=(2, 3, 3)))

        def f():
            state = cell.step(x, cell.init_state())
            return gt.sum_(gt.mul(state.h, state.h))

        wrt = [x, cell.w_conv["c"], cell.att.wo, cell.bias["i"]]
        err = gt.gradcheck(f, wrt)
        assert err < 1e-5, f"gradcheck error {err:.3e}"


class TestCausalLSTM:
    def test_zero_weights_halve_cell_state(self):
        """Zero weights: g = 0, i = f = 0.5, so C' = 0.5 C; the second
        cascade similarly gives M' = 0 and H' = 0."""
        rng = np.random.default_rng(30)
        cell = CausalLSTMCell(2, 4, 3, rng)
        for w in (cell.w1, cell.w2, cell.w3, cell.w4, cell.w5):
            w.data[:] = 0.0
        c_prev = rng.normal(size=(4, 5, 5))
        h, c, m = cell.step(t64(rng.normal(size=(2, 5, 5))),
                            t64(np.zeros((4, 5, 5))), t64(c_prev),
                            t64(rng.normal(size=(4, 5, 5))))
        np.testing.assert_allclose(c.data, 0.5 * c_prev, atol=1e-12)
        np.testing.assert_allclose(m.data, 0.0, atol=1e-12)
        np.testing.assert_allclose(h.data, 0.0, atol=1e-12)

    def test_matches_transcription_oracle(self):
        rng = np.random.default_rng(31)
        cell = CausalLSTMCell(2, 3, 3, rng)
        for b in (cell.b1, cell.b2, cell.b3, cell.b4, cell.b5):
            b.data[:] = rng.normal(0, 0.3, size=b.shape)
        x = rng.normal(size=(2, 4, 4))
        h = rng.normal(size=(3, 4, 4))
        c = rng.normal(size=(3, 4, 4))
        m = rng.normal(size=(3, 4, 4))
        got_h, got_c, got_m = cell.step(t64(x), t64(h), t64(c), t64(m))

        d = 3
        z1 = conv_np(np.concatenate([x, h, c]), cell.w1.data, cell.b1.data)
        g, i, f = np.tanh(z1[:d]), expit(z1[d:2 * d]), expit(z1[2 * d:])
        c2 = f * c + i * g
        z2 = conv_np(np.concatenate([x, c2, m]), cell.w2.data, cell.b2.data)
        g2, i2, f2 = np.tanh(z2[:d]), expit(z2[d:2 * d]), expit(z2[2 * d:])
        m2 = f2 * np.tanh(conv_np(m, cell.w3.data, cell.b3.data)) + i2 * g2
        o = np.tanh(conv_np(np.concatenate([x, c2, m2]), cell.w4.data,
                            cell.b4.data))
        h2 = o * np.tanh(conv_np(np.concatenate([c2, m2]), cell.w5.data,
                                 cell.b5.data))
        np.testing.assert_allclose(got_c.data, c2, atol=1e-10)
        np.testing.assert_allclose(got_m.data, m2, atol=1e-10)
        np.testing.assert_allclose(got_h.data, h2, atol=1e-10)

    def test_hidden_bounded_by_one(self):
        rng = np.random.default_rng(32)
        cell = CausalLSTMCell(2, 4, 3, rng)
        h, c = cell.zero_state((4, 4))
        m = cell.zero_state((4, 4))[0]
        for _ in range(4):
            h, c, m = cell.step(t64(rng.normal(size=(2, 4, 4)) * 5), h, c, m)
        assert np.abs(h.data).max() <= 1.0

    def test_gradcheck_one_step(self):
        rng = np.random.default_rng(33)
        cell = CausalLSTMCell(2, 2, 3, rng)
        x = t64(rng.normal(size=(2, 3, 3)))
        h0 = t64(rng.normal(size=(2, 3, 3)))
        c0 = t64(rng.normal(size=(2, 3, 3)))
        m0 = t64(rng.normal(size=(2, 3, 3)))

        def f():
            h, c, m = cell.step(x, h0, c0, m0)
            return gt.sum_(gt.add(gt.mul(h, h), gt.mul(m, c)))

        err = gt.gradcheck(f, [x, h0, m0, cell.w3, cell.w5, cell.b2])
        assert err < 1e-5, f"gradcheck error {err:.3e}"


class TestGHU:
    def test_zero_weights_halve_state(self):
        """Zero weights: P = 0, S = 0.5, so Z' = 0.5 Z."""
        rng = np.random.default_rng(40)
        ghu = GHUCell(3, 3, 3, rng)
        for w in (ghu.w_px, ghu.w_pz, ghu.w_sx, ghu.w_sz):
            w.data[:] = 0.0
        z = rng.normal(size=(3, 4, 4))
        out = ghu.step(t64(rng.normal(size=(3, 4, 4))), t64(z))
        np.testing.assert_allclose(out.data, 0.5 * z, atol=1e-12)

    def test_matches_transcription_oracle(self):
        rng = np.random.default_rng(41)
        ghu = GHUCell(3, 3, 3, rng)
        ghu.b_p.data[:] = rng.normal(size=3)
        ghu.b_s.data[:] = rng.normal(size=3)
        x = rng.normal(size=(3, 4, 4))
        z = rng.normal(size=(3, 4, 4))
        got = ghu.step(t64(x), t64(z)).data
        p = np.tanh(conv_np(x, ghu.w_px.data, ghu.b_p.data)
                    + conv_np(z, ghu.w_pz.data))
        s = expit(conv_np(x, ghu.w_sx.data, ghu.b_s.data)
                  + conv_np(z, ghu.w_sz.data))
        np.testing.assert_allclose(got, s * p + (1 - s) * z, atol=1e-10)

    def test_gradcheck(self):
        rng = np.random.default_rng(42)
        ghu = GHUCell(2, 2, 3, rng)
        x = t64(rng.normal(size=(2, 3, 3)))
        z = t64(rng.normal(size=(2, 3, 3)))
        err = gt.gradcheck(
            lambda: gt.sum_(gt.mul(ghu.step(x, z), z)),
            [x, z, ghu.w_px, ghu.w_sz, ghu.b_s])
        assert err < 1e-5, f"gradcheck error {err:.3e}"
