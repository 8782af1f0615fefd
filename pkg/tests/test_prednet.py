"""Stack models: wiring, rollout semantics, checkpoints."""

import numpy as np
import pytest

import gridcast.tensor as gt
from gridcast.prednet import (PredNet, PredRNNConfig, PredRNNPP, StackConfig,
                              _depth_to_space, _space_to_depth, build_variant,
                              count_params, desk_stack_config,
                              full_stack_config, load_checkpoint,
                              save_checkpoint)
from gridcast.tensor import GridcastError, ShapeError, Tensor


def tiny_config(kinds=("convlstm", "convlstm"), **kw):
    return StackConfig(channels=(2, 4), cell_kinds=kinds, grid_hw=(8, 8),
                       n_heads=2, horizon=2, **kw)


def rand_frames(rng, n, c=2, hw=(8, 8)):
    return rng.uniform(0.0, 0.5, size=(n, c) + hw)


class TestConfig:
    def test_kernel_broadcast(self):
        cfg = StackConfig(channels=(2, 4), cell_kinds=("convlstm",) * 2,
                          grid_hw=(8, 8), kernel=3)
        assert cfg.kernel == (3, 3)

    def test_validation_catches_bad_grid(self):
        cfg = StackConfig(channels=(2, 4, 8), cell_kinds=("convlstm",) * 3,
                          grid_hw=(10, 12))
        with pytest.raises(ShapeError, match="divisible"):
            cfg.validate()

    def test_validation_catches_wrong_kind_count(self):
        cfg = StackConfig(channels=(2, 4), cell_kinds=("convlstm",),
                          grid_hw=(8, 8))
        with pytest.raises(ShapeError):
            cfg.validate()

    def test_manifest_roundtrip(self):
        cfg = desk_stack_config("taa")
        back = StackConfig.from_manifest(cfg.as_manifest())
        assert back == cfg

    def test_layer_grids_halve(self):
        cfg = full_stack_config("convlstm")
        assert [cfg.layer_grid(l) for l in range(4)] == \
            [(128, 128), (64, 64), (32, 32), (16, 16)]


class TestWiring:
    def test_channel_bookkeeping_full_scale(self):
        """Bottom errors are 4-channel; the next lateral conv consumes them."""
        cfg = full_stack_config("convlstm", dtype="float32",
                                gate_param_mode="channel")
        model = PredNet(cfg, seed=0)
        assert model.cells[0].in_channels == 2 * 2 + 48
        assert model.cells[3].in_channels == 2 * 192
        assert model.a_w[1].shape == (48, 4, 3, 3)
        assert model.ahat_w[0].shape == (2, 2, 3, 3)
        states = model.init_states()
        assert states[0].e.shape == (4, 128, 128)
        assert states[3].e.shape == (384, 16, 16)

    def test_variant_cell_kinds(self):
        taa = desk_stack_config("taa")
        saa = desk_stack_config("saa")
        assert taa.cell_kinds == ("convlstm", "convlstm", "taaconvlstm")
        assert saa.cell_kinds == ("convlstm", "saaconvlstm", "saaconvlstm")

    def test_three_head_ablation_config_builds(self):
        cfg = desk_stack_config("taa", n_heads=3)
        model = PredNet(cfg, seed=0)
        top = model.cells[-1]
        assert top.d_att == 9 and top.d_att % 3 == 0

    def test_variant_swap_localizes_param_keys(self):
        base = set(PredNet(tiny_config(), seed=0).named())
        taa = set(PredNet(tiny_config(("convlstm", "taaconvlstm")),
                          seed=0).named())
        only_base = {k for k in base - taa}
        only_taa = {k for k in taa - base}
        assert all(k.startswith("cell.1.") for k in only_base)
        assert all(k.startswith(("cell.1.", "att.1.")) for k in only_taa)

    def test_unknown_variant_rejected(self):
        with pytest.raises(GridcastError):
            desk_stack_config("resnet")


class TestStepSemantics:
    def test_zero_weights_echo_input_in_errors(self):
        """All-zero weights predict zero masses, so E = [A, 0]."""
        model = PredNet(tiny_config(), seed=0)
        for t in model.named().values():
            t.data[:] = 0.0
        frame = np.random.default_rng(0).uniform(0, 1, size=(2, 8, 8))
        pred, states = model.step(Tensor(frame), model.init_states())
        np.testing.assert_array_equal(pred.data, np.zeros((2, 8, 8)))
        np.testing.assert_allclose(states[0].e.data[:2], frame, atol=1e-12)
        np.testing.assert_array_equal(states[0].e.data[2:],
                                      np.zeros((2, 8, 8)))

    def test_error_populations_nonnegative(self):
        rng = np.random.default_rng(1)
        model = PredNet(tiny_config(), seed=1)
        states = model.init_states()
        for t in range(3):
            _, states = model.step(Tensor(rand_frames(rng, 1)[0]), states)
        for st in states:
            assert st.e.data.min() >= 0.0

    def test_prediction_in_unit_range_with_bounded_masses(self):
        rng = np.random.default_rng(2)
        model = PredNet(tiny_config(), seed=2)
        preds = model.predict(rand_frames(rng, 3), 4)
        assert preds.shape == (4, 2, 8, 8)
        assert preds.min() >= 0.0 and preds.max() <= 1.0
        np.testing.assert_array_compare(
            lambda a, b: a <= b, preds.sum(axis=1), 1.0 + 1e-9)

    def test_mass_renorm_rescales_overfull_cells(self):
        model = PredNet(tiny_config(), seed=3)
        x = Tensor(np.full((2, 8, 8), 0.7))
        out = model._renorm_masses(x)
        np.testing.assert_allclose(out.data.sum(axis=0), 1.0, atol=1e-12)
        x2 = Tensor(np.full((2, 8, 8), 0.3))
        np.testing.assert_array_equal(model._renorm_masses(x2).data, x2.data)


class TestRollout:
    def test_prediction_count_and_shape(self):
        rng = np.random.default_rng(3)
        model = PredNet(tiny_config(), seed=4)
        preds = model.rollout(rand_frames(rng, 5), 10)
        assert len(preds) == 10
        assert all(p.shape == (2, 8, 8) for p in preds)

    def test_deterministic_across_fresh_builds(self):
        rng = np.random.default_rng(4)
        frames = rand_frames(rng, 4)
        a = PredNet(tiny_config(), seed=5).predict(frames, 6)
        b = PredNet(tiny_config(), seed=5).predict(frames, 6)
        np.testing.assert_array_equal(a, b)

    def test_closed_loop_errors_stay_active(self):
        """Feeding predictions back keeps the bottom error population
        nonzero (prediction vs its own next-step forecast differ)."""
        rng = np.random.default_rng(5)
        model = PredNet(tiny_config(), seed=6)
        frames = rand_frames(rng, 3)
        states = model.init_states()
        pred = None
        for t in range(3):
            pred, states = model.step(Tensor(frames[t].astype(np.float64)),
                                      states)
        _, states = model.step(pred, states)
        assert states[0].e.data.max() > 0.0

    def test_taa_history_discipline_during_rollout(self):
        rng = np.random.default_rng(6)
        model = PredNet(tiny_config(("convlstm", "taaconvlstm")), seed=7)
        frames = rand_frames(rng, 5)
        states = model.init_states()
        for t in range(5):
            _, states = model.step(Tensor(frames[t].astype(np.float64)),
                                   states)
        assert len(states[1].cell.history) == 2  # capped at horizon

    def test_bad_frame_shape_rejected(self):
        model = PredNet(tiny_config(), seed=8)
        with pytest.raises(ShapeError, match="frames"):
            model.rollout(np.zeros((5, 3, 8, 8)), 2)


class TestPredRNNPP:
    def make(self, **kw):
        kw.setdefault("grid_hw", (16, 16))
        kw.setdefault("num_layers", 2)
        kw.setdefault("hidden", 8)
        kw.setdefault("patch", 4)
        return PredRNNPP(PredRNNConfig(**kw), seed=0)

    def test_patch_arithmetic(self):
        model = self.make()
        assert model.inner_grid == (4, 4)
        assert model.cells[0].in_channels == 2 * 16
        assert model.head_w.shape == (32, 8, 1, 1)

    def test_space_depth_roundtrip(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 8, 8)))
        back = _depth_to_space(_space_to_depth(x, 4), 4)
        np.testing.assert_array_equal(back.data, x.data)

    def test_space_to_depth_layout(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        y = _space_to_depth(Tensor(x), 2).data
        assert y.shape == (4, 2, 2)
        # channel (pi, pj) holds x[i*2+pi, j*2+pj]
        np.testing.assert_array_equal(y[0], [[0, 2], [8, 10]])
        np.testing.assert_array_equal(y[3], [[5, 7], [13, 15]])

    def test_zero_weights_predict_zero(self):
        model = self.make()
        for t in model.named().values():
            t.data[:] = 0.0
        rng = np.random.default_rng(8)
        preds = model.predict(rng.uniform(size=(3, 2, 16, 16)), 2)
        np.testing.assert_array_equal(preds, np.zeros((2, 2, 16, 16)))

    def test_rollout_count(self):
        rng = np.random.default_rng(9)
        preds = self.make().predict(rng.uniform(size=(4, 2, 16, 16)), 5)
        assert preds.shape == (5, 2, 16, 16)

    def test_table_configuration(self):
        cfg = PredRNNConfig(grid_hw=(32, 32))
        model = PredRNNPP(cfg, seed=0)
        assert len(model.cells) == 4
        assert model.cells[1].hidden == 64
        assert model.cells[1].kernel == 5
        assert model.inner_grid == (8, 8)

    def test_memory_threads_through_steps(self):
        """Top cell's M from step t feeds the bottom cell at t+1."""
        rng = np.random.default_rng(10)
        model = self.make()
        state = model.init_state()
        frame = Tensor(rng.uniform(size=(2, 16, 16)))
        _, s1 = model.step(frame, state)
        assert np.abs(s1.m.data).max() > 0
        _, s2 = model.step(frame, s1)
        assert not np.array_equal(s1.m.data, s2.m.data)

    def test_bad_patch_config_rejected(self):
        with pytest.raises(ShapeError):
            PredRNNConfig(grid_hw=(10, 10), patch=4).validate()


class TestBuildVariant:
    def test_desk_variants_build(self):
        for name in ("convlstm", "taa", "saa"):
            model = build_variant(name, scale="desk", dtype="float32")
            assert isinstance(model, PredNet)
        assert isinstance(build_variant("predrnnpp", scale="desk",
                                        dtype="float32"), PredRNNPP)

    def test_count_params_positive_and_ordered(self):
        sizes = {}
        for name in ("convlstm", "taa"):
            sizes[name] = count_params(
                build_variant(name, scale="desk", dtype="float32"))
        assert sizes["taa"] > 0 and sizes["convlstm"] > 0


class TestCheckpoint:
    def test_roundtrip_bitwise_predictions(self, tmp_path):
        rng = np.random.default_rng(11)
        model = PredNet(tiny_config(("convlstm", "taaconvlstm")), seed=12)
        frames = rand_frames(rng, 4)
        want = model.predict(frames, 3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, extra={"note": "test"})
        back, manifest = load_checkpoint(path)
        assert manifest["extra"]["note"] == "test"
        np.testing.assert_array_equal(back.predict(frames, 3), want)

    def test_roundtrip_predrnn(self, tmp_path):
        rng = np.random.default_rng(12)
        model = PredRNNPP(PredRNNConfig(grid_hw=(8, 8), num_layers=2,
                                        hidden=4, patch=2), seed=1)
        frames = rng.uniform(size=(3, 2, 8, 8))
        want = model.predict(frames, 2)
        path = tmp_path / "p.ckpt"
        save_checkpoint(path, model)
        back, _ = load_checkpoint(path)
        np.testing.assert_array_equal(back.predict(frames, 2), want)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"JUNK" + b"\x00" * 32)
        with pytest.raises(GridcastError, match="not a checkpoint"):
            load_checkpoint(p)

    def test_attention_keys_present_for_taa(self, tmp_path):
        model = PredNet(tiny_config(("convlstm", "taaconvlstm")), seed=13)
        names = set(model.named())
        assert "att.1.w_tau" in names
        assert "att.1.0.wq" in names
        assert "att.1.wo" in names
        assert "cell.1.i.conv" in names
        assert "cell.0.i.h" in names
