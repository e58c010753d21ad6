import json

import numpy as np
import pytest

from src import tensor as T
from src.config import NetworkConfig
from src.errors import CheckpointError, ShapeError
from src.layers import conv3d, softmax
from src.network import (
    ChmflNetwork,
    ModelParams,
    hierarchical_fusion,
    init_params,
    load_checkpoint,
    parameter_table,
    save_checkpoint,
    trace_shapes,
)
from src.optim import classification_loss, loss_terms, segmentation_loss
from src.tensor import Tape, Tensor, backward, gradient_check
from tests.conftest import write_raw_checkpoint

# output sizes of the full-size network
DEFAULT_SHAPES = {
    "pet.input": (1, 16, 112, 112, 144),
    "pet.down2": (1, 32, 56, 56, 72),
    "pet.down3": (1, 64, 28, 28, 36),
    "pet.down4": (1, 128, 14, 14, 18),
    "pet.down5": (1, 256, 7, 7, 9),
    "ct.down5": (1, 256, 7, 7, 9),
    "fused.level1": (1, 32, 112, 112, 144),
    "fused.level5": (1, 512, 7, 7, 9),
    "fused.vector": (1, 992),
    "up4": (1, 128, 14, 14, 18),
    "up3": (1, 64, 28, 28, 36),
    "up2": (1, 32, 56, 56, 72),
    "up1": (1, 16, 112, 112, 144),
    "res1": (1, 16, 112, 112, 144),
    "out.transition": (1, 2, 112, 112, 144),
    "out.logits": (1, 2, 112, 112, 144),
    "head.fc1": (1, 512),
    "head.fc2": (1, 128),
    "head.logits": (1, 2),
}


def volume_input(rng, cfg, dtype=np.float32):
    return Tensor(rng.standard_normal((1, 1) + cfg.input_extents).astype(dtype))


class TestShapeAudit:
    def test_default_config(self):
        shapes = dict(trace_shapes(NetworkConfig()))
        for name, shape in DEFAULT_SHAPES.items():
            assert shapes[name] == shape, name

    def test_fused_channel_counts(self):
        shapes = dict(trace_shapes(NetworkConfig()))
        assert [shapes[f"fused.level{l}"][1] for l in range(1, 6)] == [32, 64, 128, 256, 512]
        assert NetworkConfig().fused_width == 992

    def test_desk_forward_matches_trace(self, rng, desk_network_cfg):
        net = ChmflNetwork(desk_network_cfg, rng=rng)
        pet, ct = volume_input(rng, desk_network_cfg), volume_input(rng, desk_network_cfg)
        maps = net.encoder_forward("pet", pet)
        assert [m.shape for m in maps] == [
            (1, 4, 32, 32, 32), (1, 8, 16, 16, 16), (1, 16, 8, 8, 8), (1, 32, 4, 4, 4), (1, 64, 2, 2, 2)
        ]
        out = net.forward(pet, ct)
        traced = dict(trace_shapes(desk_network_cfg))
        for level, fused in enumerate(out.level_maps, start=1):
            assert fused.shape == traced[f"fused.level{level}"]
        assert out.fused_vector.shape == traced["fused.vector"]
        assert out.seg_logits.shape == traced["out.logits"]
        assert out.dm_logits.shape == traced["head.logits"]

    def test_indivisible_extents_rejected(self):
        with pytest.raises(ValueError):
            NetworkConfig(input_extents=(30, 32, 32), levels=5)

    def test_wrong_input_shape(self, rng, tiny_network_cfg):
        net = ChmflNetwork(tiny_network_cfg, rng=rng)
        wrong = Tensor(np.zeros((1, 1, 8, 8, 4), dtype=np.float32))
        with pytest.raises(ShapeError):
            net.forward(wrong, wrong)


class TestInit:
    def test_biases_and_batch_norm(self, rng, tiny_network_cfg):
        params = init_params(tiny_network_cfg, rng)
        for name, tensor in params.items():
            if name.endswith((".bias", ".beta", ".running_mean")):
                assert not tensor.data.any(), name
            if name.endswith((".gamma", ".running_var")):
                assert (tensor.data == 1).all(), name

    def test_he_variance(self, rng):
        params = init_params(NetworkConfig(), rng)
        weight = params["pet.down5.conv.weight"]
        assert weight.shape == (256, 128, 2, 2, 2)
        assert weight.data.var() == pytest.approx(2.0 / (128 * 8), rel=0.1)

    def test_deterministic(self, tiny_network_cfg):
        a = init_params(tiny_network_cfg, np.random.default_rng(5))
        b = init_params(tiny_network_cfg, np.random.default_rng(5))
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_branches_are_independent(self, rng, tiny_network_cfg):
        params = init_params(tiny_network_cfg, rng)
        assert params["pet.input.conv.weight"].shape == params["ct.input.conv.weight"].shape
        assert not np.array_equal(params["pet.input.conv.weight"].data, params["ct.input.conv.weight"].data)


class TestFusion:
    def test_pet_zero_maps(self, rng):
        pet = [Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 4, 2, 2, 2)))]
        ct = [Tensor(rng.random((1, 2, 4, 4, 4)) + 1), Tensor(rng.random((1, 4, 2, 2, 2)) + 1)]
        vector, fused = hierarchical_fusion(pet, ct)
        assert vector.shape == (1, 12)
        assert [f.shape[1] for f in fused] == [4, 8]
        np.testing.assert_array_equal(vector.data[0, 0:2], 0.0)
        np.testing.assert_array_equal(vector.data[0, 2:4], ct[0].data.reshape(2, -1).max(axis=1))
        np.testing.assert_array_equal(vector.data[0, 4:8], 0.0)

    def test_level_selection(self, rng):
        maps = [Tensor(rng.random((1, 2, 4, 4, 4))), Tensor(rng.random((1, 4, 2, 2, 2)))]
        vector, _ = hierarchical_fusion(maps, maps, levels=[2])
        assert vector.shape == (1, 8)

    def test_mismatched_levels(self, rng):
        with pytest.raises(ShapeError):
            hierarchical_fusion([Tensor(np.ones((1, 2, 2, 2, 2)))], [Tensor(np.ones((1, 2, 4, 4, 4)))])


class TestForward:
    def test_zero_input_gives_bias_map(self, rng, tiny_network_cfg):
        params = init_params(tiny_network_cfg, rng)
        params["pet.input.conv.bias"] = Tensor(np.array([0.5, -1.0], dtype=np.float32))
        y = conv3d(Tensor(np.zeros((1, 1, 8, 8, 8), dtype=np.float32)), params.conv("pet.input.conv", padding=2))
        np.testing.assert_array_equal(y.data[0, 0], 0.5)
        np.testing.assert_array_equal(y.data[0, 1], -1.0)

    def test_probabilities_sum_to_one(self, rng, tiny_network_cfg):
        net = ChmflNetwork(tiny_network_cfg, rng=rng)
        out = net.forward(volume_input(rng, tiny_network_cfg), volume_input(rng, tiny_network_cfg))
        assert out.dm_logits.shape == (1, 2)
        assert out.seg_logits.shape == (1, 2, 8, 8, 8)
        np.testing.assert_allclose(softmax(out.dm_logits, axis=1).data.sum(), 1.0, rtol=1e-6)
        np.testing.assert_allclose(softmax(out.seg_logits, axis=1).data.sum(axis=1), 1.0, rtol=1e-6)

    def test_inference_is_pure(self, rng, tiny_network_cfg):
        net = ChmflNetwork(tiny_network_cfg, rng=rng)
        pet, ct = volume_input(rng, tiny_network_cfg), volume_input(rng, tiny_network_cfg)
        a, b = net.forward(pet, ct), net.forward(pet, ct)
        np.testing.assert_array_equal(a.dm_logits.data, b.dm_logits.data)
        np.testing.assert_array_equal(a.seg_logits.data, b.seg_logits.data)

    def test_swapping_modalities_changes_output(self, rng, tiny_network_cfg):
        net = ChmflNetwork(tiny_network_cfg, rng=rng)
        pet, ct = volume_input(rng, tiny_network_cfg), volume_input(rng, tiny_network_cfg)
        assert not np.array_equal(net.forward(pet, ct).dm_logits.data, net.forward(ct, pet).dm_logits.data)

    def test_training_dropout_reproducible(self, rng):
        cfg = NetworkConfig(input_extents=(8, 8, 8), base_channels=2, levels=3, fc_hidden=(8, 4), dropout_p=0.5)
        net = ChmflNetwork(cfg, rng=rng)
        vector = Tensor(rng.standard_normal((1, cfg.fused_width)).astype(np.float32))
        a = net.classify(vector, training=True, rng=np.random.default_rng(9))
        b = net.classify(vector, training=True, rng=np.random.default_rng(9))
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(net.classify(vector).data, net.classify(vector).data)

    def test_segmentation_gradient_reaches_encoder(self, rng, tiny_network_cfg):
        net = ChmflNetwork(tiny_network_cfg, rng=rng)
        net.params = net.params.tracked()
        target = np.zeros((8, 8, 8), dtype=np.int64)
        target[2:6, 2:6, 2:6] = 1
        with Tape() as tape:
            out = net.forward(volume_input(rng, tiny_network_cfg), volume_input(rng, tiny_network_cfg), training=True)
            backward(segmentation_loss(out.seg_logits, target), tape)
        grads = net.params.gradients()
        assert np.abs(grads["pet.input.conv.weight"]).sum() > 0
        assert np.abs(grads["ct.input.conv.weight"]).sum() > 0
        # the head is not on the segmentation path
        assert not grads["head.fc1.weight"].any()

    def test_classification_gradient_reaches_encoder(self, rng, tiny_network_cfg):
        net = ChmflNetwork(tiny_network_cfg, rng=rng)
        net.params = net.params.tracked()
        with Tape() as tape:
            out = net.forward(volume_input(rng, tiny_network_cfg), volume_input(rng, tiny_network_cfg), training=True)
            backward(classification_loss(out.dm_logits, 1), tape)
        grads = net.params.gradients()
        for branch in ("pet", "ct"):
            for level in ("input", "down2", "down3"):
                assert np.abs(grads[f"{branch}.{level}.conv.weight"]).sum() > 0, f"{branch}.{level}"
        # the decoder is not on the classification path
        assert not grads["out.logits.conv.weight"].any()

    def test_full_model_gradient_check(self, rng, tiny_network_cfg):
        base = init_params(tiny_network_cfg, rng, dtype=np.float64)
        names = base.trainable_names()
        pet = volume_input(rng, tiny_network_cfg, np.float64)
        ct = volume_input(rng, tiny_network_cfg, np.float64)
        target = np.zeros((8, 8, 8), dtype=np.int64)
        target[3:6, 2:6, 3:7] = 1

        def f(*tensors):
            params = base.copy()
            for name, tensor in zip(names, tensors):
                params[name] = tensor
            out = ChmflNetwork(tiny_network_cfg, params).forward(pet, ct, training=True)
            return loss_terms(out.dm_logits, 1, out.seg_logits, target, 0.5).total

        errors = gradient_check(f, [base[n].data for n in names], eps=1e-5, max_entries=2, rng=rng)
        worst = max(range(len(names)), key=errors.__getitem__)
        assert errors[worst] < 1e-3, names[worst]


class TestVariants:
    def test_cfl_head_sees_deepest_level(self, rng):
        cfg = NetworkConfig(input_extents=(8, 8, 8), base_channels=2, levels=3, fc_hidden=(8, 4), variant="cfl")
        assert cfg.fused_width == 2 * 8
        out = ChmflNetwork(cfg, rng=rng).forward(volume_input(rng, cfg), volume_input(rng, cfg))
        assert out.fused_vector.shape == (1, 16)
        assert out.seg_logits is not None

    def test_mask_hmfl(self, rng):
        cfg = NetworkConfig(input_extents=(8, 8, 8), base_channels=2, levels=3, fc_hidden=(8, 4), variant="mask_hmfl")
        table = parameter_table(cfg)
        assert table["pet.input.conv.weight"].shape == (2, 2, 5, 5, 5)
        assert not any(name.startswith(("up", "res", "out.")) for name in table)
        net = ChmflNetwork(cfg, rng=rng)
        pet, ct = volume_input(rng, cfg), volume_input(rng, cfg)
        with pytest.raises(ShapeError):
            net.forward(pet, ct)
        mask = Tensor(np.zeros((1, 1, 8, 8, 8), dtype=np.float32))
        out = net.forward(pet, ct, mask=mask)
        assert out.seg_logits is None
        assert out.dm_logits.shape == (1, 2)

    def test_single_modality(self, rng):
        cfg = NetworkConfig(input_extents=(8, 8, 8), base_channels=2, levels=3, fc_hidden=(8, 4), modalities=("pet",))
        assert not any(name.startswith("ct.") for name in parameter_table(cfg))
        assert cfg.fused_width == 2 + 4 + 8
        out = ChmflNetwork(cfg, rng=rng).forward(volume_input(rng, cfg), None)
        assert out.seg_logits.shape == (1, 2, 8, 8, 8)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng, tiny_network_cfg):
        params = init_params(tiny_network_cfg, rng)
        path = str(tmp_path / "model.chck")
        save_checkpoint(params, tiny_network_cfg, path)
        loaded, cfg = load_checkpoint(path)
        assert cfg == tiny_network_cfg
        assert list(loaded) == list(params)
        for name in params:
            np.testing.assert_array_equal(loaded[name].data, params[name].data)

    def test_missing_parameter_is_named(self, tmp_path, rng, tiny_network_cfg):
        params = init_params(tiny_network_cfg, rng)
        del params["up1.bn.gamma"]
        with pytest.raises(ShapeError, match="up1.bn.gamma"):
            save_checkpoint(params, tiny_network_cfg, str(tmp_path / "model.chck"))
        assert not (tmp_path / "model.chck").exists()

    def test_config_mismatch(self, tmp_path, rng, desk_network_cfg):
        path = str(tmp_path / "desk.chck")
        save_checkpoint(init_params(desk_network_cfg, rng), desk_network_cfg, path)
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(path, expected=NetworkConfig())

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.chck"
        path.write_bytes(b"JUNKJUNK")
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_truncated(self, tmp_path, rng, tiny_network_cfg):
        path = tmp_path / "model.chck"
        save_checkpoint(init_params(tiny_network_cfg, rng), tiny_network_cfg, str(path))
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_unexpected_parameter(self, rng, tiny_network_cfg):
        params = init_params(tiny_network_cfg, rng)
        params["extra.weight"] = Tensor(np.zeros(1))
        with pytest.raises(ShapeError, match="unexpected"):
            params.audit(tiny_network_cfg)

    def test_missing_lookup(self):
        with pytest.raises(ShapeError, match="pet.input.conv.weight"):
            ModelParams()["pet.input.conv.weight"]

    def test_mapping_protocol(self, rng, tiny_network_cfg):
        params = init_params(tiny_network_cfg, rng)
        assert "pet.input.conv.weight" in params
        assert "nope.weight" not in params
        assert params.get("nope.weight") is None
        with pytest.raises(KeyError):
            params.pop("nope.weight")

    def test_invalid_config_block(self, tmp_path, rng, tiny_network_cfg):
        fields = json.loads(tiny_network_cfg.model_dump_json())
        fields["bogus"] = 1
        params = init_params(tiny_network_cfg, rng)
        tensors = [(n.encode("utf-8"), t) for n, t in params.items()]
        path = write_raw_checkpoint(tmp_path / "model.chck", json.dumps(fields).encode("utf-8"), tensors)
        with pytest.raises(CheckpointError, match="config"):
            load_checkpoint(path)

    def test_non_utf8_name(self, tmp_path, tiny_network_cfg):
        cfg_bytes = tiny_network_cfg.model_dump_json().encode("utf-8")
        path = write_raw_checkpoint(tmp_path / "model.chck", cfg_bytes, [(b"\xff\xfe", Tensor(np.zeros(2)))])
        with pytest.raises(CheckpointError, match="UTF-8"):
            load_checkpoint(path)

    def test_missing_parameter_in_file(self, tmp_path, rng, tiny_network_cfg):
        params = init_params(tiny_network_cfg, rng)
        tensors = [(n.encode("utf-8"), t) for n, t in params.items() if n != "head.fc1.bias"]
        path = write_raw_checkpoint(tmp_path / "model.chck", tiny_network_cfg.model_dump_json().encode("utf-8"), tensors)
        with pytest.raises(CheckpointError, match="head.fc1.bias"):
            load_checkpoint(path)
