"""Residual U-Net assembly: wiring, determinism, checkpoints.

Parameter-count expectations below are hand sums over the architecture
(kernel extents times widths, plus biases and the residual scales), not
values read back from the library.
"""

import json

import numpy as np
import pytest

from shapeprior.backbone import (
    ModelConfig,
    StageSnapshot,
    build_model,
    export_stage_priors,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from shapeprior.losses import total_loss
from shapeprior.tensor import Tensor

SMALL = dict(patch_extents=(8, 8, 8))  # keeps forward passes cheap


def small_config(**kw):
    base = dict(SMALL)
    base.update(kw)
    return ModelConfig(**base)


class TestModelConfig:
    def test_defaults_round_trip_through_dict(self):
        cfg = ModelConfig()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_stage_factors_are_fixed(self):
        with pytest.raises(ValueError):
            ModelConfig(stage_factors=(2, 4))

    def test_extents_must_be_one_or_multiples_of_eight(self):
        ModelConfig(patch_extents=(1, 64, 64))   # fine
        ModelConfig(patch_extents=(8, 16, 16))   # fine
        with pytest.raises(ValueError):
            ModelConfig(patch_extents=(12, 64, 64))
        with pytest.raises(ValueError):
            ModelConfig(patch_extents=(8, 64))

    def test_class_count_floor(self):
        with pytest.raises(ValueError):
            ModelConfig(n_classes=1)

    def test_attention_scale_vocabulary(self):
        ModelConfig(attention_scale="sqrt_dk")
        with pytest.raises(ValueError):
            ModelConfig(attention_scale="none")


class TestParameterBudget:
    def test_default_model_matches_hand_sum(self):
        # stem 80; enc0 blocks 2*1169; down/blocks per depth:
        # 3472+2*13857, 13856+2*55361, 55360+2*73857; decoder
        # 2080+55361, 528+13857, 136+1169; head 36  -> 434423
        # prior 64; stages (c=16,32,64): 316+c^2+5c -> 652+1500+4732
        base = build_model(ModelConfig(spm_enabled=False))
        full = build_model(ModelConfig(spm_enabled=True))
        assert base.num_parameters == 434423
        assert full.num_parameters == 441371
        assert full.spm_parameter_total() == 6948

    def test_toggle_difference_equals_closed_form(self):
        base = build_model(small_config(spm_enabled=False))
        full = build_model(small_config(spm_enabled=True))
        assert (full.num_parameters - base.num_parameters
                == full.spm_parameter_total())

    def test_full_resolution_stage_mixes_in_plane_only(self):
        m = build_model(ModelConfig())
        assert m.params["enc0.conv.w"].data.shape == (8, 1, 1, 3, 3)
        assert m.params["enc0.block0.conv1.w"].data.shape == (8, 8, 1, 3, 3)
        assert m.params["dec1.block.conv1.w"].data.shape == (8, 8, 1, 3, 3)
        # depth mixing starts at the first stride-2 stage
        assert m.params["enc1.down.w"].data.shape == (16, 8, 3, 3, 3)

    def test_unit_axes_collapse_kernels(self):
        m = build_model(small_config())
        # (8,8,8) shrinks to (1,1,1) at the deepest stage
        assert m.stage_extents[-1] == (1, 1, 1)
        assert m.params["enc3.block0.conv1.w"].data.shape == (64, 64, 1, 1, 1)


class TestDeterminism:
    def test_same_config_same_weights(self):
        a = build_model(small_config(seed=3))
        b = build_model(small_config(seed=3))
        for name, t in a.params.items():
            assert np.array_equal(t.data, b.params[name].data), name

    def test_seed_changes_weights(self):
        a = build_model(small_config(seed=3))
        b = build_model(small_config(seed=4))
        assert not np.array_equal(a.params["enc0.conv.w"].data,
                                  b.params["enc0.conv.w"].data)

    def test_backbone_weights_independent_of_spm_toggle(self):
        # separate seed streams per subsystem: turning the prior stages on
        # must not shift encoder/decoder/head initialisation
        off = build_model(small_config(spm_enabled=False, seed=7))
        on = build_model(small_config(spm_enabled=True, seed=7))
        for name, t in off.params.items():
            assert np.array_equal(t.data, on.params[name].data), name

    def test_forward_is_reproducible(self):
        vol = np.random.default_rng(0).normal(size=(8, 8, 8)).astype(np.float32)
        a = forward(build_model(small_config(seed=1)), vol)
        b = forward(build_model(small_config(seed=1)), vol)
        assert np.array_equal(a.data, b.data)


class TestForward:
    def test_logit_shape_and_promotion(self):
        m = build_model(small_config())
        vol = np.zeros((8, 8, 8), dtype=np.float32)
        out = forward(m, vol)  # (D,H,W) is promoted to one channel
        assert out.shape == (4, 8, 8, 8)

    def test_extent_mismatch_rejected(self):
        m = build_model(small_config())
        with pytest.raises(ValueError):
            forward(m, np.zeros((8, 16, 16), dtype=np.float32))

    def test_channel_mismatch_rejected(self):
        m = build_model(small_config())
        with pytest.raises(ValueError):
            forward(m, Tensor(np.zeros((2, 8, 8, 8), dtype=np.float32)))

    def test_flat_volume_config_runs(self):
        cfg = ModelConfig(patch_extents=(1, 64, 64))
        m = build_model(cfg)
        out = forward(m, np.zeros((1, 64, 64), dtype=np.float32))
        assert out.shape == (4, 1, 64, 64)

    def test_fresh_prior_stages_do_not_change_logits(self):
        # the cross value paths start zeroed, so an untrained model with
        # prior stages produces the very same logits as one without
        vol = np.random.default_rng(1).normal(size=(8, 8, 8)).astype(np.float32)
        on = forward(build_model(small_config(spm_enabled=True, seed=5)), vol)
        off = forward(build_model(small_config(spm_enabled=False, seed=5)), vol)
        assert np.array_equal(on.data, off.data)

    def test_opened_prior_stages_do_change_logits(self):
        vol = np.random.default_rng(2).normal(size=(8, 8, 8)).astype(np.float32)
        m_on = build_model(small_config(spm_enabled=True, seed=5))
        for k in (8, 4, 2):
            w = m_on.spm_weights[k].wv_c
            w.data[...] = np.random.default_rng(k).normal(
                0.0, 0.1, size=w.data.shape).astype(np.float32)
        on = forward(m_on, vol)
        off = forward(build_model(small_config(spm_enabled=False, seed=5)), vol)
        assert not np.array_equal(on.data, off.data)


class TestStageTrace:
    def test_collect_records_three_stages_deepest_first(self):
        m = build_model(small_config())
        vol = np.random.default_rng(3).normal(size=(8, 8, 8)).astype(np.float32)
        forward(m, vol, collect=True)
        trace = m.last_trace
        assert [s.stage for s in trace] == [1, 2, 3]
        assert [s.factor for s in trace] == [8, 4, 2]
        for snap, c in zip(trace, (64, 32, 16)):
            assert snap.f_o.shape[0] == c
            assert snap.f_e.shape == snap.f_o.shape
            assert snap.s_g.shape == (4, 1, 1, 1)
            assert snap.s_l.shape == (4, 1, 1, 1)
            assert snap.s_e.shape == (4, 1, 1, 1)
            assert snap.affinity_self.shape == (4, 4)
            assert snap.affinity_cross.shape == (c, 4)
            assert np.allclose(snap.affinity_self.sum(axis=1), 1.0,
                               atol=1e-5)
            assert np.allclose(snap.affinity_cross.sum(axis=1), 1.0,
                               atol=1e-5)

    def test_trace_cleared_without_collect(self):
        m = build_model(small_config())
        vol = np.zeros((8, 8, 8), dtype=np.float32)
        forward(m, vol, collect=True)
        assert m.last_trace is not None
        forward(m, vol)
        assert m.last_trace is None

    def test_disabled_prior_trace_keeps_features_only(self):
        m = build_model(small_config(spm_enabled=False))
        vol = np.zeros((8, 8, 8), dtype=np.float32)
        forward(m, vol, collect=True)
        for snap in m.last_trace:
            assert isinstance(snap, StageSnapshot)
            assert np.array_equal(snap.f_o, snap.f_e)
            assert snap.s_g is None and snap.s_e is None

    def test_export_helper_requires_a_trace(self):
        m = build_model(small_config())
        with pytest.raises(RuntimeError):
            export_stage_priors(m)
        snaps = export_stage_priors(m, np.zeros((8, 8, 8), dtype=np.float32))
        assert len(snaps) == 3


class TestGradients:
    def test_one_descent_step_reduces_the_loss(self):
        rng = np.random.default_rng(4)
        vol = rng.normal(size=(8, 8, 8)).astype(np.float32)
        target = rng.integers(0, 4, size=(8, 8, 8))
        drops = 0
        for seed in range(3):
            m = build_model(small_config(seed=seed))
            loss = total_loss(forward(m, vol), target)
            loss.backward()
            for t in m.params.values():
                if t.grad is not None:
                    t.data = t.data - 0.05 * t.grad
            after = total_loss(forward(m, vol), target)
            drops += after.item() < loss.item()
        assert drops == 3

    def test_every_connected_parameter_receives_gradient(self):
        m = build_model(small_config(seed=6))
        vol = np.random.default_rng(5).normal(size=(8, 8, 8)).astype(np.float32)
        target = np.random.default_rng(6).integers(0, 4, size=(8, 8, 8))
        total_loss(forward(m, vol), target).backward()
        # the deepest stage's local-prior head feeds only the handed-on
        # prior, which nothing consumes after the last stage
        dangling = {"spm_k2.out_w", "spm_k2.out_b"}
        for name, t in m.params.items():
            if name in dangling:
                assert t.grad is None, name
            else:
                assert t.grad is not None, name

    def test_prior_field_learns(self):
        m = build_model(small_config(seed=7))
        for k in (8, 4, 2):  # open the value paths so the prior matters
            m.spm_weights[k].wv_c.data[...] = 0.05
        vol = np.random.default_rng(7).normal(size=(8, 8, 8)).astype(np.float32)
        target = np.random.default_rng(8).integers(0, 4, size=(8, 8, 8))
        total_loss(forward(m, vol), target).backward()
        g = m.params["prior"].grad
        assert g is not None and np.abs(g).max() > 0


class TestCheckpoints:
    def _boxed(self, tmp_path, **kw):
        m = build_model(small_config(**kw))
        path = tmp_path / "m.spmc"
        save_checkpoint(m, path, extra={"epoch": 5, "kind": "best"})
        return m, path

    def test_round_trip_is_bitwise(self, tmp_path):
        m, path = self._boxed(tmp_path)
        back = load_checkpoint(path)
        assert back.config == m.config
        assert back.checkpoint_extra == {"epoch": 5, "kind": "best"}
        assert set(back.params) == set(m.params)
        for name, t in m.params.items():
            assert np.array_equal(t.data, back.params[name].data), name

    def test_loaded_model_predicts_identically(self, tmp_path):
        m, path = self._boxed(tmp_path)
        vol = np.random.default_rng(9).normal(size=(8, 8, 8)).astype(np.float32)
        assert np.array_equal(forward(m, vol).data,
                              forward(load_checkpoint(path), vol).data)

    def test_magic_is_checked(self, tmp_path):
        _, path = self._boxed(tmp_path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_version_is_checked(self, tmp_path):
        _, path = self._boxed(tmp_path)
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)

    def test_truncated_weights_rejected(self, tmp_path):
        _, path = self._boxed(tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_tensor_name_mismatch_rejected(self, tmp_path):
        # rewrite the embedded config to disagree with the stored tensors
        _, path = self._boxed(tmp_path, spm_enabled=True)
        raw = path.read_bytes()
        blob_len = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
        manifest = json.loads(raw[12:12 + blob_len].decode())
        manifest["config"]["spm_enabled"] = False
        blob = json.dumps(manifest, sort_keys=True,
                          separators=(",", ":")).encode()
        path.write_bytes(raw[:8] + np.uint32(len(blob)).tobytes() + blob
                         + raw[12 + blob_len:])
        with pytest.raises(ValueError, match="disagree"):
            load_checkpoint(path)
