"""Tests for MNIST ingestion, MLP training, quantization and hw inference."""

import dataclasses
import gzip
import struct

import numpy as np
import pytest

from fefetsim import nnq
from fefetsim.nnq import (
    Dataset,
    IdxDimensionError,
    IdxMagicError,
    IdxTruncatedError,
    MlpModel,
    QuantConfig,
    dequantize,
    quantize,
)


def idx_bytes(magic, dims, payload):
    head = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    return head + payload


def synthetic_dataset(n=64, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.random((n, 784)).astype(np.float32)
    labels = rng.integers(0, 10, n)
    return Dataset(images, labels)


def tiny_model(seed=0, hidden=6):
    rng = np.random.default_rng(seed)
    return MlpModel(rng.normal(0, 0.3, (784, hidden)), rng.normal(0, 0.1, hidden),
                    rng.normal(0, 0.6, (hidden, 10)), rng.normal(0, 0.1, 10))


class TestLoadIdx:
    def test_parses_labels(self, tmp_path):
        p = tmp_path / "labels"
        p.write_bytes(idx_bytes(0x801, [4], bytes([3, 1, 4, 1])))
        arr = nnq.load_idx(p)
        assert arr.tolist() == [3, 1, 4, 1]

    def test_parses_gzipped_images(self, tmp_path):
        raw = idx_bytes(0x803, [2, 2, 2], bytes(range(8)))
        p = tmp_path / "images.gz"
        p.write_bytes(gzip.compress(raw))
        arr = nnq.load_idx(p)
        assert arr.shape == (2, 2, 2)
        assert arr[1, 1, 1] == 7

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(idx_bytes(0x805, [1], b"\x00"))
        with pytest.raises(IdxMagicError):
            nnq.load_idx(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "short"
        p.write_bytes(struct.pack(">I", 0x803) + b"\x00\x00")
        with pytest.raises(IdxTruncatedError):
            nnq.load_idx(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "trunc"
        p.write_bytes(idx_bytes(0x801, [10], b"\x00" * 3))
        with pytest.raises(IdxTruncatedError):
            nnq.load_idx(p)

    def test_error_classes_are_distinct_value_errors(self):
        for exc in (IdxMagicError, IdxTruncatedError, IdxDimensionError):
            assert issubclass(exc, ValueError)
        assert not issubclass(IdxMagicError, IdxTruncatedError)

    def test_pixel_255_scales_to_one(self):
        train, _ = nnq.load_mnist()
        assert train.images.max() == pytest.approx(1.0)

    def test_vendored_mnist_shapes(self):
        train, test = nnq.load_mnist()
        assert train.images.shape == (60000, 784)
        assert test.images.shape == (10000, 784)


class TestDatasetSplits:
    def test_rejects_count_mismatch(self):
        with pytest.raises(IdxDimensionError):
            Dataset(np.zeros((3, 784), np.float32), np.zeros(2, np.int64))

    def test_rejects_out_of_range_intensity(self):
        with pytest.raises(ValueError):
            Dataset(np.full((1, 784), 2.0, np.float32), np.zeros(1, np.int64))

    def test_desk_splits_sizes_and_determinism(self):
        train, test = nnq.load_mnist()
        tr1, val1, te1 = nnq.desk_splits(train, test)
        tr2, val2, te2 = nnq.desk_splits(train, test)
        assert (tr1.n, val1.n, te1.n) == (10000, 2000, 2000)
        assert np.array_equal(tr1.labels, tr2.labels)
        assert np.array_equal(val1.images, val2.images)

    def test_desk_splits_rejects_oversubscription(self):
        ds = synthetic_dataset(10)
        with pytest.raises(ValueError):
            nnq.desk_splits(ds, ds, n_train=8, n_val=8, n_test=2)


class TestTrain:
    def test_same_seed_identical_weights(self):
        ds = synthetic_dataset(48)
        m1 = nnq.train(ds, hidden=5, epochs=2, seed=3)
        m2 = nnq.train(ds, hidden=5, epochs=2, seed=3)
        assert np.array_equal(m1.w1, m2.w1)
        assert np.array_equal(m1.w2, m2.w2)

    def test_large_l2_shrinks_weights(self):
        ds = synthetic_dataset(48)
        norms = [np.linalg.norm(nnq.train(ds, hidden=5, epochs=3,
                                          l2=l2, seed=0).w1)
                 for l2 in (1e-4, 1e-1)]
        assert norms[1] < norms[0]

    def test_rejects_bad_hidden(self):
        with pytest.raises(ValueError):
            nnq.train(synthetic_dataset(8), hidden=0)


class TestEvaluateFloat:
    def test_crafted_all_correct(self):
        # Identity-ish model: class score = mean of a dedicated pixel block.
        model = MlpModel(np.eye(784, 3), np.zeros(3), np.eye(3, 10) * 10.0,
                         np.zeros(10))
        images = np.eye(3, 784, dtype=np.float32)
        data = Dataset(images, np.arange(3))
        assert nnq.evaluate_float(model, data) == 1.0

    def test_random_weights_near_chance(self):
        data = synthetic_dataset(2000, seed=5)
        acc = nnq.evaluate_float(tiny_model(seed=7), data)
        assert abs(acc - 0.1) < 0.05

    def test_order_permutation_invariant(self):
        data = synthetic_dataset(100)
        model = tiny_model()
        perm = np.random.default_rng(0).permutation(100)
        assert nnq.evaluate_float(model, data) == \
            nnq.evaluate_float(model, data.subset(perm))


class TestQuantize:
    def test_top_bin(self):
        cfg = QuantConfig(bits=2, window=1.0)
        assert quantize(np.array([0.99]), cfg)[0] == 3

    def test_zero_maps_to_zero(self):
        for bits in (1, 2, 4):
            cfg = QuantConfig(bits=bits, window=0.7)
            assert quantize(np.array([0.0]), cfg)[0] == 0

    def test_one_bit_thresholds(self):
        cfg = QuantConfig(bits=1, window=1.0)
        w = np.array([-0.9, -0.5, -0.49, 0.0, 0.49, 0.5, 0.9])
        assert quantize(w, cfg).tolist() == [-1, -1, 0, 0, 0, 1, 1]

    def test_clipping(self):
        cfg = QuantConfig(bits=2, window=0.5)
        assert quantize(np.array([4.0, -4.0]), cfg).tolist() == [3, -3]

    def test_round_half_away_from_zero(self):
        cfg = QuantConfig(bits=2, window=3.0)  # step = 1
        assert quantize(np.array([0.5, -0.5, 1.5]), cfg).tolist() == [1, -1, 2]

    def test_dequantize_error_bound(self):
        cfg = QuantConfig(bits=2, window=0.8)
        w = np.linspace(-0.8, 0.8, 401)  # inside the window: no clipping
        err = np.abs(dequantize(quantize(w, cfg), cfg) - w)
        assert err.max() <= cfg.step / 2 + 1e-12

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            QuantConfig(bits=0, window=1.0)
        with pytest.raises(ValueError):
            QuantConfig(bits=2, window=0.0)


class TestLayerConfigs:
    def test_windows_scale_each_layer(self):
        m = tiny_model()
        cfg1, cfg2 = nnq.layer_configs(m, 2, 0.5)
        assert cfg1.window == pytest.approx(0.5 * np.abs(m.w1).max())
        assert cfg2.window == pytest.approx(0.5 * np.abs(m.w2).max())

    def test_rejects_bad_fraction(self):
        with pytest.raises(ValueError):
            nnq.layer_configs(tiny_model(), 2, 0.0)
        with pytest.raises(ValueError):
            nnq.layer_configs(tiny_model(), 2, 1.5)

    def test_mixed_bit_widths_rejected(self):
        m = tiny_model()
        with pytest.raises(ValueError):
            nnq.make_hw_network(m, (QuantConfig(1, 0.5), QuantConfig(2, 0.5)))


class TestOptimizeWindow:
    def test_constant_net_ties_to_smallest_window(self):
        m = MlpModel(np.full((784, 4), 0.2), np.zeros(4),
                     np.full((4, 10), 0.2), np.zeros(10))
        cfg1, cfg2 = nnq.optimize_window(m, 2, synthetic_dataset(20))
        assert cfg1.window == pytest.approx(0.1 * 0.2)
        assert cfg2.window == pytest.approx(0.1 * 0.2)

    def test_argmax_dominates_naive_window(self):
        m = tiny_model(seed=2)
        val = synthetic_dataset(200, seed=9)
        cfgs = nnq.optimize_window(m, 2, val)
        naive = nnq.layer_configs(m, 2, 1.0)
        assert nnq.evaluate_quantized(m, cfgs, val) >= \
            nnq.evaluate_quantized(m, naive, val)

    def test_rejects_empty_validation(self):
        empty = Dataset(np.zeros((0, 784), np.float32), np.zeros(0, np.int64))
        with pytest.raises(ValueError):
            nnq.optimize_window(tiny_model(), 2, empty)


class TestHwForward:
    def test_ideal_unbinarized_reduces_to_software(self):
        m = tiny_model(seed=4)
        data = synthetic_dataset(50, seed=4)
        cfgs = nnq.layer_configs(m, 2, 0.7)
        net = nnq.make_hw_network(m, cfgs)
        hw = nnq.ideal_hw_model(2)
        scores_hw = nnq.hw_forward(net, hw, data.images, binarize=False)
        q = MlpModel(dequantize(net.codes1, cfgs[0]), m.b1,
                     dequantize(net.codes2, cfgs[1]), m.b2)
        scores_sw = nnq.forward_float(q, data.images.astype(np.float64))
        assert np.allclose(scores_hw, scores_sw, atol=1e-12)

    def test_all_zero_input_hidden_is_bias_only(self):
        m = tiny_model(seed=1)
        net = nnq.make_hw_network(m, nnq.layer_configs(m, 2, 0.7))
        hw = nnq.ideal_hw_model(2)
        images = np.zeros((1, 784))
        scores = nnq.hw_forward(net, hw, images, binarize=False)
        # With zero input the hidden pre-activation equals the bias vector.
        q2 = dequantize(net.codes2, net.cfg2)
        expected = nnq._sigmoid(m.b1[None, :]) @ q2 + m.b2
        assert np.allclose(scores, expected, atol=1e-12)

    def test_hand_computed_differential_mac(self):
        # Single layer (output = identity of interest): one input, two
        # outputs, codes +3 and -2, input voltage v_read.
        hw = nnq.ideal_hw_model(2)
        codes = np.array([[3, -2]])
        i_ua = nnq._layer_current(codes, hw, np.array([[nnq.READ_V]]))
        expected = np.array([3.0, -2.0]) * hw.g0 * nnq.READ_V
        assert np.allclose(i_ua, expected, atol=1e-12)

    def test_out_of_range_code_rejected(self):
        hw = nnq.ideal_hw_model(2)
        with pytest.raises(ValueError):
            nnq._layer_current(np.array([[5]]), hw, np.array([[0.1]]))

    def test_binarized_hidden_is_two_level(self):
        m = tiny_model(seed=3)
        net = nnq.make_hw_network(m, nnq.layer_configs(m, 2, 0.7))
        hw = nnq.ideal_hw_model(2)
        data = synthetic_dataset(20, seed=3)
        a = nnq.evaluate_hw(net, hw, data, binarize=True)
        assert 0.0 <= a <= 1.0

    def test_device_tables_monotone_in_code(self):
        hw = nnq.build_hw_model(2)
        g_on, g_off = hw.branch_g(np.array([0.1, 0.3]))
        assert np.all(g_on > g_off)
        assert np.all(g_on[1] > g_on[0])  # MSB branch conducts more


class TestNoise:
    def test_poisson_multiplier_statistics(self):
        hw = nnq.ideal_hw_model(2, n_dopants=100.0)
        rng = np.random.default_rng(0)
        m = nnq.branch_multipliers(hw, rng, 100000)
        assert m.mean() == pytest.approx(1.0, abs=0.005)
        assert m.std() == pytest.approx(0.10, rel=0.05)

    def test_noiseless_trials_all_equal(self):
        m = tiny_model(seed=6)
        net = nnq.make_hw_network(m, nnq.layer_configs(m, 2, 0.7))
        hw = nnq.ideal_hw_model(2)  # no noise parameters -> sigma 0
        data = synthetic_dataset(40, seed=6)
        accs = nnq.noise_mc(net, hw, data, trials=4)
        base = nnq.evaluate_hw(net, hw, data)
        assert np.all(accs == base)

    def test_seeded_trials_reproducible(self):
        m = tiny_model(seed=6)
        net = nnq.make_hw_network(m, nnq.layer_configs(m, 2, 0.7))
        hw = nnq.ideal_hw_model(2, sigma_rel=0.3)
        data = synthetic_dataset(40, seed=6)
        a = nnq.noise_mc(net, hw, data, trials=3, seed=11)
        b = nnq.noise_mc(net, hw, data, trials=3, seed=11)
        assert np.array_equal(a, b)

    def test_per_weight_mode_ties_branches(self):
        m = tiny_model(seed=6)
        net = nnq.make_hw_network(m, nnq.layer_configs(m, 2, 0.7))
        hw = nnq.ideal_hw_model(2, sigma_rel=0.2)
        rng = np.random.default_rng(0)
        (m1p, m1n), _ = nnq._draw_multipliers(net, hw, rng, per_weight=True)
        assert np.array_equal(m1p, m1n)
        assert np.array_equal(m1p[0], m1p[1])  # same factor on every bit

    def test_rejects_zero_trials(self):
        m = tiny_model()
        net = nnq.make_hw_network(m, nnq.layer_configs(m, 2, 0.7))
        with pytest.raises(ValueError):
            nnq.noise_mc(net, nnq.ideal_hw_model(2), synthetic_dataset(8), 0)


class TestHwAwareRegularization:
    def test_degenerate_grid_reduces_to_single_run(self):
        ds = synthetic_dataset(48, seed=8)
        val = synthetic_dataset(32, seed=9)
        hw = nnq.ideal_hw_model(2)
        kw = {"epochs": 2, "seed": 0}
        res = nnq.hw_aware_regularization(ds, val, [1e-4], [0.5], 2, hw,
                                          hidden=5, train_kwargs=kw)
        model = nnq.train(ds, 5, l2=1e-4, **kw)
        net = nnq.make_hw_network(model, nnq.layer_configs(model, 2, 0.5))
        assert res.cost == pytest.approx(1.0 - nnq.evaluate_hw(net, hw, val))
        assert res.l2 == 1e-4 and res.fraction == 0.5

    def test_cost_equals_grid_minimum(self):
        ds = synthetic_dataset(48, seed=8)
        val = synthetic_dataset(32, seed=9)
        hw = nnq.ideal_hw_model(2)
        res = nnq.hw_aware_regularization(
            ds, val, [1e-5, 1e-3], [0.3, 1.0], 2, hw, hidden=5,
            train_kwargs={"epochs": 2, "seed": 0})
        assert res.cost == res.cost_grid.min()
        assert res.cost_grid.shape == (2, 2)

    def test_rejects_empty_ranges(self):
        ds = synthetic_dataset(16)
        with pytest.raises(ValueError):
            nnq.hw_aware_regularization(ds, ds, [], [0.5], 2,
                                        nnq.ideal_hw_model(2), hidden=4)


class TestWeightContainer:
    def test_round_trip(self, tmp_path):
        m = tiny_model(seed=12)
        p = tmp_path / "w.bin"
        nnq.save_weights(p, m)
        back = nnq.load_weights(p)
        for a, b in ((m.w1, back.w1), (m.b1, back.b1),
                     (m.w2, back.w2), (m.b2, back.b2)):
            assert np.array_equal(a, b)

    def test_rejects_bad_magic(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            nnq.load_weights(p)

    def test_rejects_bad_version(self, tmp_path):
        m = tiny_model()
        p = tmp_path / "w.bin"
        nnq.save_weights(p, m)
        raw = bytearray(p.read_bytes())
        raw[4:8] = struct.pack(">I", 99)
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            nnq.load_weights(p)

    def test_rejects_truncated_payload(self, tmp_path):
        m = tiny_model()
        p = tmp_path / "w.bin"
        nnq.save_weights(p, m)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ValueError, match="size"):
            nnq.load_weights(p)
