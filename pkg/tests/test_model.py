"""Fusion blocks and the assembled network."""

import numpy as np
import pytest

from aesnet.blocks import NumericsError, ShapeError, finite_diff_check, sigmoid
from aesnet.model import (
    AapBlock,
    AestheticNet,
    AttributeGate,
    BilinearHead,
    ChannelAttention,
    CheckpointError,
    ModelConfig,
    export_attention_weights,
    load_checkpoint,
    save_checkpoint,
)


def zero_params(block):
    for _, arr, _ in block.named_parameters():
        arr[...] = 0.0


def assert_gradients_match(block, inputs, eps=1e-5, atol=1e-7, rtol=1e-4):
    """Entrywise |analytic - numeric| <= atol + rtol*|numeric| probe.

    The absolute floor absorbs the central-difference quantization noise
    (~ulp(loss)/2eps) on near-zero-gradient entries, which the pure
    relative form cannot; real gradient bugs surface as O(1) relative
    errors and still fail the rtol term.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    block.clear_cache()
    block.zero_grads()
    outs = block.forward(inputs)
    in_grads = block.backward([np.ones_like(o) for o in outs])

    def probe():
        total = sum(float(np.sum(o)) for o in block.forward(inputs))
        block.clear_cache()
        return total

    def sweep(label, arr, grad):
        for k in range(arr.size):
            orig = arr.flat[k]
            arr.flat[k] = orig + eps
            up = probe()
            arr.flat[k] = orig - eps
            down = probe()
            arr.flat[k] = orig
            numeric = (up - down) / (2 * eps)
            analytic = float(grad.flat[k])
            assert abs(analytic - numeric) <= atol + rtol * abs(numeric), \
                f"{label}[{k}]: analytic={analytic!r} numeric={numeric!r}"

    for i, (x, g) in enumerate(zip(inputs, in_grads)):
        sweep(f"input{i}", x, g)
    for name, arr, grad in block.named_parameters():
        sweep(name, arr, grad)
    block.zero_grads()


def mini_config(**overrides):
    params = dict(attributes=("composition", "color"), channels=4, input_size=8,
                  stem_channels=(2, 3), init_seed=0)
    params.update(overrides)
    return ModelConfig(**params)


class TestAapBlock:
    def test_zero_params_zero_map_with_documented_shape(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 4, 4))
        for variant, channels in (("full", 12), ("no_cnn", 6), ("no_pool", 6)):
            block = AapBlock(8, 6, variant, np.random.default_rng(1))
            zero_params(block)
            out = block(x)
            assert out.shape == (channels, 4, 4)
            np.testing.assert_array_equal(out, np.zeros_like(out))
            assert block.out_channels == channels

    def test_no_cnn_ignores_conv_branch_params(self):
        rng = np.random.default_rng(2)
        block = AapBlock(8, 6, "no_cnn", rng)
        x = rng.normal(size=(8, 4, 4))
        base = block(x)
        block.clear_cache()
        block.conv3.params.entries["W"] += 10.0
        block.conv1.params.entries["b"] -= 3.0
        np.testing.assert_array_equal(base, block(x))

    def test_no_pool_ignores_pool_branch_params(self):
        rng = np.random.default_rng(3)
        block = AapBlock(8, 6, "no_pool", rng)
        x = rng.normal(size=(8, 4, 4))
        base = block(x)
        block.clear_cache()
        block.pool_proj.params.entries["W"] += 5.0
        np.testing.assert_array_equal(base, block(x))

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="variant"):
            AapBlock(8, 6, "bogus", np.random.default_rng(0))

    @pytest.mark.parametrize("variant", ["full", "no_cnn", "no_pool"])
    def test_gradients(self, variant):
        rng = np.random.default_rng(4)
        block = AapBlock(8, 6, variant, rng)
        assert finite_diff_check(block, [rng.normal(size=(8, 4, 4))], eps=1e-5) <= 1e-5


class TestChannelAttention:
    def test_zero_mlp_halves_input(self):
        rng = np.random.default_rng(5)
        block = ChannelAttention(6, 4, rng)
        zero_params(block)
        c = rng.normal(size=(6, 3, 3))
        h = block(c)
        np.testing.assert_allclose(h, 0.5 * c, atol=1e-12)
        np.testing.assert_allclose(block.last_weights, np.full(6, 0.5), atol=1e-12)

    def test_constant_channels_make_pools_agree(self):
        rng = np.random.default_rng(6)
        block = ChannelAttention(5, 4, rng)
        v = rng.normal(size=5)
        c = np.repeat(v[:, None, None], 9, axis=2).reshape(5, 3, 3)
        block(c)
        expected = sigmoid(2.0 * block.mlp(v))
        block.mlp.clear_cache()
        np.testing.assert_allclose(block.last_weights, expected, atol=1e-12)

    def test_weights_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(7)
        block = ChannelAttention(8, 4, rng)
        for _ in range(10):
            c = rng.normal(size=(8, 3, 3)) * 3
            h = block(c)
            block.clear_cache()
            w = block.last_weights
            assert np.all(w > 0.0) and np.all(w < 1.0)
            assert np.all(np.abs(h) <= np.abs(c) + 1e-15)

    def test_gradient(self):
        rng = np.random.default_rng(8)
        block = ChannelAttention(10, 4, rng)
        assert finite_diff_check(block, [rng.normal(size=(10, 3, 3))]) <= 1e-5


class TestAttributeGate:
    def test_zero_params_give_half_o(self):
        rng = np.random.default_rng(9)
        gate = AttributeGate(3, 6, 4, rng)
        zero_params(gate)
        o = rng.normal(size=6)
        np.testing.assert_allclose(gate(rng.normal(size=3), o), 0.5 * o, atol=1e-12)

    def test_zero_o_absorbs(self):
        rng = np.random.default_rng(10)
        gate = AttributeGate(3, 6, 4, rng)
        np.testing.assert_array_equal(gate(rng.normal(size=3), np.zeros(6)), np.zeros(6))

    def test_hand_example(self):
        gate = AttributeGate(1, 2, 4, np.random.default_rng(11))
        zero_params(gate)  # MLP output [0, 0] -> sigmoid 0.5
        np.testing.assert_allclose(
            gate(np.array([1.0]), np.array([2.0, 4.0])), [1.0, 2.0], atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(12)
        gate = AttributeGate(4, 10, 4, rng)
        inputs = [rng.normal(size=4), rng.normal(size=10)]
        assert finite_diff_check(gate, inputs) <= 1e-5


class TestBilinearHead:
    def test_zero_w3_reduces_to_affine(self):
        rng = np.random.default_rng(13)
        head = BilinearHead(4, 3, 2, rng)
        head.params.set("W3", np.zeros((2, 4, 3)))
        y1, y2 = rng.normal(size=4), rng.normal(size=3)
        expected = (head.params.entries["W1"] @ y1 + head.params.entries["W2"] @ y2
                    + head.params.entries["b"])
        np.testing.assert_allclose(head(y1, y2), expected, atol=1e-12)

    def test_zero_inputs_return_bias(self):
        rng = np.random.default_rng(14)
        head = BilinearHead(4, 3, 2, rng)
        np.testing.assert_allclose(
            head(np.zeros(4), np.zeros(3)), head.params.entries["b"], atol=1e-15)

    def test_hand_example(self):
        head = BilinearHead(2, 1, 1, np.random.default_rng(15))
        head.params.set("W1", [[1.0, 1.0]])
        head.params.set("W2", [[2.0]])
        head.params.set("W3", [[[1.0], [0.0]]])
        head.params.set("b", [0.5])
        out = head(np.array([1.0, 2.0]), np.array([3.0]))
        assert out[0] == pytest.approx(12.5, abs=1e-12)

    def test_shape_mismatch(self):
        head = BilinearHead(4, 3, 1, np.random.default_rng(16))
        with pytest.raises(ShapeError, match="bilinear_fuse"):
            head(np.zeros(5), np.zeros(3))

    def test_gradient(self):
        rng = np.random.default_rng(17)
        head = BilinearHead(5, 3, 2, rng)
        assert finite_diff_check(head, [rng.normal(size=5), rng.normal(size=3)]) <= 1e-5


class TestAestheticNet:
    def test_zero_params_give_midrange_score(self):
        net = AestheticNet(mini_config())
        zero_params(net)
        pred, weights = net.predict(np.random.default_rng(18).normal(size=(3, 8, 8)))
        assert pred.score == pytest.approx(5.5, abs=1e-12)
        assert weights is not None

    def test_distribution_mode_normalized(self):
        net = AestheticNet(mini_config(mode="distribution"))
        rng = np.random.default_rng(19)
        for _ in range(5):
            pred, _ = net.predict(rng.normal(size=(3, 8, 8)))
            assert pred.distribution.sum() == pytest.approx(1.0, abs=1e-9)
            assert pred.score == pytest.approx(
                float(pred.distribution @ np.arange(1, 11)), abs=1e-12)

    def test_score_always_in_range(self):
        net = AestheticNet(mini_config(init_seed=3))
        rng = np.random.default_rng(20)
        for _ in range(10):
            pred, _ = net.predict(rng.normal(size=(3, 8, 8)) * 5)
            assert 1.0 <= pred.score <= 10.0

    def test_wrong_input_shape(self):
        net = AestheticNet(mini_config())
        with pytest.raises(ShapeError, match="model input"):
            net.forward([np.zeros((3, 4, 4))])

    def test_nonfinite_input_fails_fast(self):
        net = AestheticNet(mini_config())
        img = np.zeros((3, 8, 8))
        img[0, 0, 0] = np.nan
        with pytest.raises(NumericsError, match="model input"):
            net.forward([img])

    def test_interaction_off_plain_head(self):
        net = AestheticNet(mini_config(interaction=False))
        pred, weights = net.predict(np.random.default_rng(21).normal(size=(3, 8, 8)))
        assert weights is None
        assert 1.0 <= pred.score <= 10.0

    def test_interaction_requires_attributes(self):
        with pytest.raises(ValueError, match="interaction"):
            mini_config(attributes=())

    def test_backbone_only_configuration(self):
        net = AestheticNet(mini_config(attributes=(), interaction=False))
        pred, _ = net.predict(np.random.default_rng(22).normal(size=(3, 8, 8)))
        assert 1.0 <= pred.score <= 10.0

    def test_gate_includes_generic_switch(self):
        with_gen = AestheticNet(mini_config())
        without = AestheticNet(mini_config(gate_includes_generic=False))
        assert with_gen.o_dim == 3 * 4
        assert without.o_dim == 2 * 4

    def test_predict_leaves_no_cached_state(self):
        net = AestheticNet(mini_config())
        net.predict(np.random.default_rng(23).normal(size=(3, 8, 8)))
        for name, block in [("net", net)] + list(net.sub_blocks()):
            assert block._stack == [], name

    def test_end_to_end_gradient_miniature(self):
        rng = np.random.default_rng(24)
        net = AestheticNet(mini_config(init_seed=24))
        assert_gradients_match(net, [rng.normal(size=(3, 8, 8))])

    def test_distribution_gradient_through_emd(self):
        from aesnet.checks import _ScoredModel
        for seed in range(5):
            rng = np.random.default_rng(seed)
            assert_gradients_match(_ScoredModel(seed), [rng.normal(size=(3, 8, 8))])


def _block_perm(order_a, order_b, width):
    """Flat index map: position in B's concatenation -> position in A's."""
    idx = np.empty(len(order_b) * width, dtype=int)
    for j, name in enumerate(order_b):
        i = order_a.index(name)
        idx[j * width:(j + 1) * width] = np.arange(i * width, (i + 1) * width)
    return idx


class TestOrderConsistency:
    def test_attribute_permutation_preserves_prediction(self):
        attrs_a = ("composition", "color", "exposure", "theme")
        attrs_b = ("theme", "color", "composition", "exposure")
        cfg_a = ModelConfig(attributes=attrs_a, channels=4, input_size=8,
                            stem_channels=(2, 3), init_seed=1)
        cfg_b = ModelConfig(attributes=attrs_b, channels=4, input_size=8,
                            stem_channels=(2, 3), init_seed=2)
        net_a, net_b = AestheticNet(cfg_a), AestheticNet(cfg_b)

        width = cfg_a.channels
        ch_perm = _block_perm(net_a.names, net_b.names, width)
        o_perm = _block_perm(net_a.o_names, net_b.o_names, width)
        o_dim = net_a.o_dim
        y1_perm = np.empty(len(attrs_a) * o_dim, dtype=int)
        for j, name in enumerate(attrs_b):
            i = attrs_a.index(name)
            y1_perm[j * o_dim:(j + 1) * o_dim] = i * o_dim + o_perm

        params_a = {name: arr for name, arr, _ in net_a.named_parameters()}
        for name, arr, _ in net_b.named_parameters():
            if name.startswith("attention.mlp.fc1.W"):
                arr[...] = params_a[name][:, ch_perm]
            elif name.startswith("attention.mlp.fc2.W"):
                arr[...] = params_a[name][ch_perm, :]
            elif name.startswith("attention.mlp.fc2.b"):
                arr[...] = params_a[name][ch_perm]
            elif name.startswith("gate.") and ".fc2.W" in name:
                arr[...] = params_a[name][o_perm, :]
            elif name.startswith("gate.") and ".fc2.b" in name:
                arr[...] = params_a[name][o_perm]
            elif name == "head.W1":
                arr[...] = params_a[name][:, y1_perm]
            elif name == "head.W3":
                arr[...] = params_a[name][:, y1_perm, :]
            else:
                arr[...] = params_a[name]

        rng = np.random.default_rng(25)
        for _ in range(5):
            img = rng.normal(size=(3, 8, 8))
            pred_a, weights_a = net_a.predict(img)
            pred_b, weights_b = net_b.predict(img)
            assert pred_b.score == pytest.approx(pred_a.score, abs=1e-10)
            np.testing.assert_allclose(weights_b, weights_a[ch_perm], atol=1e-10)


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        net = AestheticNet(mini_config(init_seed=30))
        path = tmp_path / "ckpt.json"
        save_checkpoint(net, path)
        twin = AestheticNet(mini_config(init_seed=31))
        load_checkpoint(twin, path)
        for (name_a, arr_a, _), (name_b, arr_b, _) in zip(
                net.named_parameters(), twin.named_parameters()):
            assert name_a == name_b
            assert np.array_equal(arr_a, arr_b), name_a

    def test_dimension_mismatch_reports_parameter(self, tmp_path):
        net = AestheticNet(mini_config())
        path = tmp_path / "ckpt.json"
        save_checkpoint(net, path)
        bigger = AestheticNet(mini_config(channels=8))
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(bigger, path)

    def test_missing_parameter_reported(self, tmp_path):
        net = AestheticNet(mini_config())
        path = tmp_path / "ckpt.json"
        save_checkpoint(net, path)
        other = AestheticNet(mini_config(attributes=("composition", "color", "theme")))
        with pytest.raises(CheckpointError, match="does not match"):
            load_checkpoint(other, path)


class TestAttentionExport:
    def test_csv_layout(self, tmp_path):
        path = tmp_path / "attention.csv"
        rows = [("a", np.array([0.25, 0.5])), ("b", np.array([0.75, 1.0]))]
        export_attention_weights(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "id,w0,w1"
        assert lines[1].split(",")[0] == "a"
        assert float(lines[2].split(",")[2]) == 1.0
