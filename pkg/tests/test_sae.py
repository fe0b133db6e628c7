import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivx.errors import ConfigError, DataError, FormatError, NumericError
from ivx.sae import (
    IDENTITY,
    SIGMOID,
    Layer,
    LayerSpec,
    SaeModel,
    Standardizer,
    TrainConfig,
    build_model,
    encode,
    encode_raw,
    finetune,
    flatten_gradient,
    forward,
    gradient,
    load_sae,
    parse_layer_sizes,
    pretrain_layerwise,
    reconstruction_loss,
    sae_from_bytes,
    sae_to_bytes,
    save_sae,
    train_sae,
)


def _model(dims, seed=0, activation=SIGMOID, tied=False, scale=1.0):
    """Symmetric model from encoder dims, e.g. [10, 8] builds 10-8-10."""
    model = build_model(parse_layer_sizes(dims[0], dims[1:], activation), seed=seed, tied=tied)
    rng = np.random.default_rng(seed + 100)
    # non-zero biases so their gradients are exercised too
    params = model.get_params()
    return model.with_params(scale * params + 0.1 * rng.standard_normal(params.size))


def _projection_net(n, k):
    """Identity-activation n-k-n net that keeps the first k coordinates."""
    eye = np.eye(n)
    enc = [Layer(eye[:k].copy(), np.zeros(k), IDENTITY)]
    dec = [Layer(eye[:k].T.copy(), np.zeros(n), IDENTITY)]
    return SaeModel(enc, dec)


def _loop_forward(model, x):
    h = list(x)
    outs = []
    for w, b, act in model.layers():
        nxt = []
        for i in range(w.shape[0]):
            a = b[i] + sum(w[i, j] * h[j] for j in range(len(h)))
            nxt.append(1.0 / (1.0 + math.exp(-a)) if act == SIGMOID else a)
        h = nxt
        outs.append(h)
    return np.array(outs[len(model.encoder) - 1]), np.array(h)


def _numeric_gradient(model, batch, h=1e-5):
    params = model.get_params()
    out = np.empty_like(params)
    for i in range(params.size):
        up, down = params.copy(), params.copy()
        up[i] += h
        down[i] -= h
        out[i] = (reconstruction_loss(model.with_params(up), batch)
                  - reconstruction_loss(model.with_params(down), batch)) / (2 * h)
    return out


def _assert_gradient_matches(model, batch):
    analytic = flatten_gradient(model, gradient(model, batch))
    numeric = _numeric_gradient(model, batch)
    small = np.maximum(np.abs(analytic), np.abs(numeric)) < 1e-8
    np.testing.assert_allclose(analytic[small], numeric[small], atol=1e-8)
    rel = np.abs(analytic - numeric)[~small] / np.maximum(np.abs(analytic), np.abs(numeric))[~small]
    assert rel.max() < 1e-4


class TestConstruction:
    def test_layer_spec_dims(self):
        with pytest.raises(ConfigError):
            LayerSpec(0, 3)
        with pytest.raises(ConfigError):
            LayerSpec(3, 2, "tanh")

    def test_train_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=-1.0)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)

    def test_non_compressive_layer_rejected(self):
        with pytest.raises(ConfigError):
            build_model([LayerSpec(10, 10)])
        with pytest.raises(ConfigError):
            build_model(parse_layer_sizes(10, [6, 8]))

    def test_code_not_smaller_than_input(self):
        enc = [Layer(np.zeros((4, 4)), np.zeros(4))]
        dec = [Layer(np.zeros((4, 4)), np.zeros(4), IDENTITY)]
        with pytest.raises(ConfigError):
            SaeModel(enc, dec)

    def test_decoder_must_mirror(self):
        enc = [Layer(np.zeros((3, 5)), np.zeros(3))]
        dec = [Layer(np.zeros((4, 3)), np.zeros(4), IDENTITY)]
        with pytest.raises(ConfigError):
            SaeModel(enc, dec)

    def test_weights_must_be_finite(self):
        enc = [Layer(np.full((2, 4), np.nan), np.zeros(2))]
        dec = [Layer(np.zeros((4, 2)), np.zeros(4), IDENTITY)]
        with pytest.raises(NumericError):
            SaeModel(enc, dec)

    def test_glorot_range(self):
        model = build_model([LayerSpec(30, 10)], seed=3)
        limit = math.sqrt(6.0 / 40)
        assert np.abs(model.encoder[0].weight).max() <= limit
        np.testing.assert_array_equal(model.encoder[0].bias, 0.0)

    @pytest.mark.parametrize("sizes, arch", [
        ([200], [400, 200, 400]),
        ([200, 40], [400, 200, 40, 200, 400]),
        ([200, 50], [400, 200, 50, 200, 400]),
    ])
    def test_reference_architectures(self, sizes, arch):
        x = np.random.default_rng(0).standard_normal((20, 400))
        cfg = TrainConfig(epochs=0, pretrain_epochs=1, batch_size=10)
        model = pretrain_layerwise(parse_layer_sizes(400, sizes), x, cfg)
        assert model.architecture == arch
        assert model.layers()[-1][2] == IDENTITY
        assert all(act == SIGMOID for _, _, act in model.layers()[:-1])


class TestForward:
    def test_zero_weights_give_half(self):
        model = build_model(parse_layer_sizes(6, [4, 2]), output_activation=SIGMOID)
        model = model.with_params(np.zeros_like(model.get_params()))
        z, recon = forward(model, np.random.default_rng(0).normal(size=6))
        np.testing.assert_array_equal(z, 0.5)
        np.testing.assert_array_equal(recon, 0.5)
        np.testing.assert_array_equal(encode(model, np.ones(6)), 0.5)

    def test_projection_net_reproduces_subspace_input(self):
        # the undercomplete rule forbids square identity layers, so the
        # identity composition is checked on inputs inside the code subspace
        model = _projection_net(5, 3)
        x = np.array([1.5, -2.0, 0.25, 0.0, 0.0])
        z, recon = forward(model, x)
        np.testing.assert_array_equal(z, x[:3])
        np.testing.assert_array_equal(recon, x)

    def test_matches_loop_oracle(self):
        model = _model([7, 5, 3], seed=4)
        for x in np.random.default_rng(1).normal(size=(5, 7)):
            z, recon = forward(model, x)
            z_ref, recon_ref = _loop_forward(model, x)
            np.testing.assert_allclose(z, z_ref, atol=1e-12)
            np.testing.assert_allclose(recon, recon_ref, atol=1e-12)

    def test_batch_matches_rows(self):
        model = _model([6, 4], seed=2)
        x = np.random.default_rng(3).normal(size=(8, 6))
        z, recon = forward(model, x)
        for i in range(8):
            zi, ri = forward(model, x[i])
            np.testing.assert_allclose(z[i], zi, atol=1e-14)
            np.testing.assert_allclose(recon[i], ri, atol=1e-14)

    def test_encode_is_forward_code(self):
        model = _model([9, 6, 2], seed=5)
        x = np.random.default_rng(0).normal(size=9)
        np.testing.assert_array_equal(encode(model, x), forward(model, x)[0])

    def test_code_length(self):
        model = build_model(parse_layer_sizes(400, [200, 40]))
        assert encode(model, np.zeros(400)).shape == (40,)

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            forward(_model([5, 3]), np.zeros(4))


class TestLoss:
    def test_perfect_reconstruction(self):
        x = np.c_[np.random.default_rng(0).normal(size=(10, 3)), np.zeros((10, 2))]
        assert reconstruction_loss(_projection_net(5, 3), x) == 0.0

    def test_unit_error(self):
        enc = [Layer(np.zeros((1, 2)), np.zeros(1), IDENTITY)]
        dec = [Layer(np.zeros((2, 1)), np.zeros(2), IDENTITY)]
        assert reconstruction_loss(SaeModel(enc, dec), [[1.0, 0.0]]) == 1.0

    def test_matches_elementwise_oracle(self):
        model = _model([6, 3], seed=1)
        x = np.random.default_rng(2).normal(size=(12, 6))
        recon = forward(model, x)[1]
        expected = sum(sum((x[i, j] - recon[i, j]) ** 2 for j in range(6)) for i in range(12)) / 12
        assert reconstruction_loss(model, x) == pytest.approx(expected, abs=1e-12)


class TestGradient:
    @pytest.mark.parametrize("dims", [[10, 8], [20, 10, 4]])
    def test_matches_finite_differences(self, dims):
        model = _model(dims, seed=len(dims))
        batch = np.random.default_rng(7).normal(size=(6, dims[0]))
        _assert_gradient_matches(model, batch)

    @pytest.mark.parametrize("dims", [[10, 8], [20, 10, 4]])
    def test_tied_matches_finite_differences(self, dims):
        model = _model(dims, seed=3, tied=True)
        batch = np.random.default_rng(8).normal(size=(5, dims[0]))
        grads = gradient(model, batch)
        assert all(dw is None for dw, _ in grads[len(model.encoder):])
        _assert_gradient_matches(model, batch)

    def test_identity_activation_matches_finite_differences(self):
        model = _model([8, 5, 3], seed=9, activation=IDENTITY, scale=0.5)
        _assert_gradient_matches(model, np.random.default_rng(1).normal(size=(4, 8)))

    def test_zero_at_perfect_reconstruction(self):
        model = _projection_net(6, 4)
        x = np.c_[np.random.default_rng(0).normal(size=(7, 4)), np.zeros((7, 2))]
        assert np.linalg.norm(flatten_gradient(model, gradient(model, x))) < 1e-10

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 8))
    def test_duplicated_batch_same_gradient(self, seed, n):
        model = _model([6, 4, 2], seed=seed % 50)
        x = np.random.default_rng(seed).normal(size=(n, 6))
        a = flatten_gradient(model, gradient(model, x))
        b = flatten_gradient(model, gradient(model, np.vstack([x, x])))
        np.testing.assert_allclose(a, b, atol=1e-13)

    def test_layout_matches_params(self):
        for tied in (False, True):
            model = _model([8, 4], tied=tied)
            assert flatten_gradient(model, gradient(model, np.ones((2, 8)))).size == model.get_params().size

    def test_param_round_trip(self):
        model = _model([8, 5, 2], seed=1)
        params = model.get_params()
        np.testing.assert_array_equal(model.with_params(params).get_params(), params)
        with pytest.raises(DataError):
            model.with_params(params[:-1])


def _rank3_data(seed=0, n=200):
    rng = np.random.default_rng(seed)
    basis = np.linalg.qr(rng.normal(size=(10, 3)))[0]
    x = rng.normal(0, [3.0, 2.0, 1.5], (n, 3)) @ basis.T + 0.1 * rng.normal(size=(n, 10))
    return x - x.mean(axis=0)


class TestFinetune:
    def test_zero_learning_rate_is_noop(self):
        model = _model([6, 3])
        x = np.random.default_rng(0).normal(size=(20, 6))
        trained, trace = finetune(model, x, TrainConfig(learning_rate=0.0, epochs=5))
        np.testing.assert_array_equal(trained.get_params(), model.get_params())
        np.testing.assert_array_equal(trace, trace[0])
        assert trace.size == 6

    def test_linear_matches_pca(self):
        x = _rank3_data()
        eig = np.linalg.eigvalsh(np.cov(x.T, bias=True))
        optimum = eig[:-3].sum()
        model = build_model(parse_layer_sizes(10, [3], IDENTITY), seed=0)
        trained, _ = finetune(model, x, TrainConfig(learning_rate=0.01, epochs=2000, batch_size=32))
        loss = reconstruction_loss(trained, x)
        assert loss >= optimum - 1e-9
        assert (loss - optimum) / optimum < 0.05

    def test_deterministic(self):
        x = np.random.default_rng(1).normal(size=(40, 8))
        cfg = TrainConfig(epochs=5, pretrain_epochs=3, batch_size=8, seed=4)
        a, ta = train_sae(x, [5, 2], cfg)
        b, tb = train_sae(x, [5, 2], cfg)
        assert sae_to_bytes(a) == sae_to_bytes(b)
        np.testing.assert_array_equal(ta, tb)

    def test_divergence_aborts(self):
        x = np.random.default_rng(0).normal(0, 10, (30, 6))
        model = build_model(parse_layer_sizes(6, [3], IDENTITY))
        with pytest.raises(NumericError, match="diverged"):
            finetune(model, x, TrainConfig(learning_rate=10.0, epochs=20))

    def test_small_step_trace_nonincreasing_on_smoke_ivectors(self, smoke_ivectors):
        x = Standardizer.fit(smoke_ivectors).apply(smoke_ivectors)
        model = build_model(parse_layer_sizes(x.shape[1], [12, 6]), seed=0)
        _, trace = finetune(model, x, TrainConfig(learning_rate=1e-3, epochs=100))
        assert np.all(np.diff(trace) <= 1e-6)
        assert trace[-1] < trace[0]

    def test_training_reduces_loss(self):
        x = _rank3_data(seed=2)
        model, trace = train_sae(x, [6, 3], TrainConfig(epochs=50, pretrain_epochs=20))
        assert trace[-1] < trace[0]


class TestStandardizedPipeline:
    def test_encode_raw_applies_standardizer(self):
        x = np.random.default_rng(0).normal(5.0, 3.0, (30, 6))
        model, _ = train_sae(x, [3], TrainConfig(epochs=2, pretrain_epochs=2))
        std = model.standardizer
        np.testing.assert_allclose(std.apply(x).mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_array_equal(encode_raw(model, x), encode(model, std.apply(x)))

    def test_constant_column_kept_finite(self):
        x = np.c_[np.ones(10), np.arange(10.0)]
        assert np.all(np.isfinite(Standardizer.fit(x).apply(x)))


class TestPersistence:
    @pytest.mark.parametrize("tied", [False, True])
    def test_round_trip(self, tmp_path, tied):
        x = np.random.default_rng(0).normal(size=(20, 8))
        model, _ = train_sae(x, [5, 3], TrainConfig(epochs=2, pretrain_epochs=2), tied=tied)
        save_sae(tmp_path / "m.ivxa", model)
        back = load_sae(tmp_path / "m.ivxa")
        assert back.tied == tied and back.architecture == model.architecture
        np.testing.assert_array_equal(back.get_params(), model.get_params())
        np.testing.assert_array_equal(back.standardizer.mean, model.standardizer.mean)
        np.testing.assert_array_equal(encode_raw(back, x), encode_raw(model, x))
        assert sae_to_bytes(back) == sae_to_bytes(model)

    def test_layout_header(self):
        data = sae_to_bytes(_model([4, 2]))
        assert data[:4] == b"IVXA"
        assert np.frombuffer(data[4:16], "<u4").tolist() == [1, 2, 0]

    def test_truncated(self):
        with pytest.raises(FormatError):
            sae_from_bytes(sae_to_bytes(_model([4, 2]))[:-5])

    def test_unknown_activation_tag(self):
        data = bytearray(sae_to_bytes(_model([4, 2])))
        data[24:28] = np.array([7], "<u4").tobytes()
        with pytest.raises(FormatError, match="activation"):
            sae_from_bytes(bytes(data))
