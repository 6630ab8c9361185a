import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meterlink.data import Dataset, MeterRecord, fit_scaling
from meterlink.embedders import (
    KINDS,
    LAYER_RANGES,
    EmbedderConfig,
    EmbeddingModel,
    _cnn_lengths,
    _forward_rnn,
    attention,
    cnn_day_features,
    embed_array,
    embed_cnn_lstm,
    embed_mlp,
    embed_rnn,
    embed_tcn,
    embed_transformer,
    encoder_layer,
    forward,
    from_daily_sequence,
    gru_cell,
    init_params,
    lstm_cell,
    param_count,
    tcn_day_outputs,
    to_daily_sequence,
)
from meterlink.numkit import Tensor, grad_check
from meterlink.trainer import batch_triplet_loss, mine_negatives

ALL = [(k, L) for k in KINDS for L in LAYER_RANGES[k]]


def grids(n=3, F=1, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 168, F))


def sig(z):
    return 1 / (1 + math.exp(-z))


class TestDailySequence:
    def test_single_utility_rows(self):
        g = np.arange(168.0)[:, None]
        x = to_daily_sequence(g)
        assert x.shape == (7, 24)
        for d in range(7):
            np.testing.assert_array_equal(x[d], np.arange(24 * d, 24 * d + 24))

    def test_two_utilities_blocks(self):
        g = np.stack([np.arange(168.0), 1000 + np.arange(168.0)], axis=1)
        x = to_daily_sequence(g)
        assert x.shape == (7, 48)
        np.testing.assert_array_equal(x[2, :24], np.arange(48, 72))
        np.testing.assert_array_equal(x[2, 24:], 1000 + np.arange(48, 72))

    def test_record_input(self):
        rec = MeterRecord("p", 0, grids(1)[0])
        np.testing.assert_array_equal(to_daily_sequence(rec), to_daily_sequence(rec.values))

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            to_daily_sequence(np.zeros((48, 1)))
        with pytest.raises(ValueError):
            to_daily_sequence(MeterRecord("p", 0, np.zeros((168, 1)), delta_t=1800))

    @given(F=st.integers(1, 3), B=st.integers(1, 4), seed=st.integers(0, 1000))
    def test_bijective(self, F, B, seed):
        g = np.random.default_rng(seed).standard_normal((B, 168, F))
        x = to_daily_sequence(g)
        assert sorted(x.reshape(-1)) == sorted(g.reshape(-1))
        np.testing.assert_array_equal(from_daily_sequence(x, F), g)


class TestContracts:
    @pytest.mark.parametrize("kind,L", ALL)
    @pytest.mark.parametrize("F", [1, 2])
    def test_shape_and_norm(self, kind, L, F):
        params = init_params(EmbedderConfig(kind, L=L, F=F), seed=1)
        e = embed_array(params, grids(4, F))
        assert e.shape == (4, 32)
        norms = np.linalg.norm(e, axis=1)
        if kind == "transformer":
            assert not params.config.normalize
            assert np.all(np.abs(norms - 1) > 1e-6)
        else:
            np.testing.assert_allclose(norms, 1, atol=1e-9)

    @pytest.mark.parametrize("kind,L", ALL)
    def test_deterministic(self, kind, L):
        params = init_params(EmbedderConfig(kind, L=L), seed=2)
        g = grids(3)
        assert embed_array(params, g).tobytes() == embed_array(params, g).tobytes()

    @pytest.mark.parametrize("kind,L", ALL)
    def test_batch_independent_in_eval(self, kind, L):
        params = init_params(EmbedderConfig(kind, L=L), seed=3)
        g = grids(5)
        np.testing.assert_allclose(embed_array(params, g)[2], embed_array(params, g[2:3])[0], atol=1e-12)

    def test_invalid_layers(self):
        with pytest.raises(ValueError):
            EmbedderConfig("gru", L=5)
        with pytest.raises(ValueError):
            EmbedderConfig("mlp", n_out=16)
        with pytest.raises(ValueError):
            EmbedderConfig("resnet")

    def test_rejects_unscaled_or_nan(self):
        params = init_params(EmbedderConfig("mlp"))
        with pytest.raises(ValueError):
            embed_mlp(np.full((168, 1), 2.0), params)
        bad = np.full((168, 1), 0.5)
        bad[3] = np.nan
        with pytest.raises(ValueError):
            embed_mlp(bad, params)

    def test_wrong_kind_rejected(self):
        with pytest.raises(ValueError):
            embed_tcn(grids(1)[0], init_params(EmbedderConfig("mlp")))

    def test_entry_points(self):
        g = grids(1)[0]
        assert embed_rnn(g, init_params(EmbedderConfig("gru")), "gru").shape == (32,)
        assert embed_rnn(g, init_params(EmbedderConfig("lstm"))).shape == (32,)
        assert embed_cnn_lstm(g, init_params(EmbedderConfig("cnn_lstm"))).shape == (32,)
        assert embed_transformer(g, init_params(EmbedderConfig("transformer"))).shape == (32,)

    def test_forward_rejects_bad_width(self):
        params = init_params(EmbedderConfig("gru", F=2))
        with pytest.raises(ValueError):
            forward(params, np.zeros((1, 7, 24)))


class TestMLP:
    def test_zero_parameters_surface_normalization_error(self):
        params = init_params(EmbedderConfig("mlp"))
        for v in params.arrays.values():
            v[...] = 0.0
        with pytest.raises(ValueError):
            embed_mlp(grids(1)[0], params)

    def test_hand_forward(self):
        # hidden width 2 and nonzero weights only on the first four input features
        params = init_params(EmbedderConfig("mlp", mlp_hidden=(2,)))
        W0 = np.zeros((168, 2))
        W0[:4] = [[1.0, 0.0], [0.0, 1.0], [1.0, -1.0], [0.5, 0.5]]
        b0 = np.array([0.0, -0.3])
        W1 = np.zeros((2, 32))
        W1[0, 0], W1[1, 1], W1[0, 2] = 2.0, 1.0, -1.0
        b1 = np.zeros(32)
        b1[3] = 0.5
        params.arrays.update({"mlp.0.W": W0, "mlp.0.b": b0, "mlp.1.W": W1, "mlp.1.b": b1})
        g = np.zeros((168, 1))
        g[:4, 0] = [0.2, 0.4, 0.6, 0.8]
        # hidden: relu([0.2 + 0.6 + 0.4, 0.4 - 0.6 + 0.4 - 0.3]) = [1.2, 0.0]
        pre = np.zeros(32)
        pre[0], pre[1], pre[2], pre[3] = 2.4, 0.0, -1.2, 0.5
        np.testing.assert_allclose(embed_mlp(g, params), pre / np.linalg.norm(pre), rtol=1e-12)

    def test_param_count_closed_form(self):
        expected = (168 * 128 + 128) + (128 * 64 + 64) + (64 * 32 + 32)
        assert param_count(init_params(EmbedderConfig("mlp"))) == expected

    def test_temporal_order(self):
        # the MLP sees the week in slot order with utilities interleaved per slot
        params = init_params(EmbedderConfig("mlp", F=2, mlp_hidden=(2,)))
        W0 = np.zeros((336, 2))
        W0[1, 0] = 1.0  # slot 0 gas
        params.arrays["mlp.0.W"] = W0
        params.arrays["mlp.0.b"] = np.zeros(2)
        params.arrays["mlp.1.W"] = np.eye(2, 32)
        params.arrays["mlp.1.b"] = np.zeros(32)
        g = np.zeros((168, 2))
        g[0, 1] = 0.7
        e = embed_mlp(g, params)
        assert e[0] == pytest.approx(1.0)


class TestRecurrent:
    def test_lstm_cell_hand(self):
        H = 2
        W_ih = np.arange(1, 4 * H + 1, dtype=float).reshape(1, 4 * H) * 0.1
        W_hh = np.full((H, 4 * H), 0.05)
        b_ih = np.linspace(-0.2, 0.2, 4 * H)
        b_hh = np.zeros(4 * H)
        x, h, c = np.array([[0.5]]), np.array([[0.1, -0.2]]), np.array([[0.3, 0.4]])
        hn, cn = lstm_cell(Tensor(x), Tensor(h), Tensor(c), W_ih, W_hh, b_ih, b_hh)
        for j in range(H):
            z = [x[0, 0] * W_ih[0, g * H + j] + b_ih[g * H + j] + sum(h[0, m] * W_hh[m, g * H + j] for m in range(H))
                 for g in range(4)]
            i, f, gg, o = sig(z[0]), sig(z[1]), math.tanh(z[2]), sig(z[3])
            c_exp = f * c[0, j] + i * gg
            assert cn.data[0, j] == pytest.approx(c_exp, rel=1e-12)
            assert hn.data[0, j] == pytest.approx(o * math.tanh(c_exp), rel=1e-12)

    def test_gru_cell_hand(self):
        H = 2
        rng = np.random.default_rng(0)
        W_ih, W_hh = rng.standard_normal((1, 3 * H)), rng.standard_normal((H, 3 * H))
        b_ih, b_hh = rng.standard_normal(3 * H), rng.standard_normal(3 * H)
        x, h = np.array([[0.7]]), np.array([[0.2, -0.5]])
        hn = gru_cell(Tensor(x), Tensor(h), W_ih, W_hh, b_ih, b_hh).data
        for j in range(H):
            a = [x[0, 0] * W_ih[0, g * H + j] + b_ih[g * H + j] for g in range(3)]
            b = [sum(h[0, m] * W_hh[m, g * H + j] for m in range(H)) + b_hh[g * H + j] for g in range(3)]
            r, z = sig(a[0] + b[0]), sig(a[1] + b[1])
            n = math.tanh(a[2] + r * b[2])
            assert hn[0, j] == pytest.approx((1 - z) * n + z * h[0, j], rel=1e-12)

    @pytest.mark.parametrize("kind", ["lstm", "gru"])
    def test_single_day_sum_is_last_output(self, kind):
        params = init_params(EmbedderConfig(kind, L=2), seed=4)
        P = params.tensors()
        x = to_daily_sequence(grids(2))[:, :1]
        y = _forward_rnn(params.config, P, x, False).data
        h = Tensor(x[:, 0])
        for layer in range(2):
            p = [P[f"{kind}.{layer}.{k}"] for k in ("W_ih", "W_hh", "b_ih", "b_hh")]
            zero = Tensor(np.zeros((2, 32)))
            h = lstm_cell(h, zero, zero, *p)[0] if kind == "lstm" else gru_cell(h, zero, *p)
        np.testing.assert_allclose(y, h.data, rtol=1e-12)

    @pytest.mark.parametrize("kind", ["lstm", "gru", "cnn_lstm", "tcn", "transformer"])
    def test_day_order_matters(self, kind):
        params = init_params(EmbedderConfig(kind), seed=5)
        g = grids(1)
        x = to_daily_sequence(g)
        perm = x[:, [1, 0, 2, 3, 4, 5, 6]]
        a = forward(params, x).data
        b = forward(params, perm).data
        assert np.abs(a - b).max() > 1e-6


class TestCNNLSTM:
    def test_length_chain(self):
        assert _cnn_lengths(24) == [24, 22, 11, 8, 4]

    @pytest.mark.parametrize("F", [1, 2])
    def test_day_features_128(self, F):
        params = init_params(EmbedderConfig("cnn_lstm", F=F))
        maps = np.random.default_rng(0).uniform(0, 1, (5, F, 24))
        assert cnn_day_features(params.tensors(), params.bn, 0, maps, train=False).shape == (5, 128)

    def test_param_count_near_23k(self):
        assert abs(param_count(init_params(EmbedderConfig("cnn_lstm", L=1))) - 23000) <= 0.25 * 23000

    def test_train_mode_updates_running_stats(self):
        params = init_params(EmbedderConfig("cnn_lstm"))
        before = params.bn["cnn.0.bn0"].running_mean.copy()
        forward(params, to_daily_sequence(grids(3)), train=True)
        assert not np.array_equal(before, params.bn["cnn.0.bn0"].running_mean)


class TestTCN:
    @pytest.mark.parametrize("F, C", [(1, 24), (2, 48)])
    def test_channels(self, F, C):
        params = init_params(EmbedderConfig("tcn", F=F))
        assert params.arrays["tcn.conv0.v"].shape == (32, C, 7)

    @pytest.mark.parametrize("d", range(6))
    def test_causal(self, d):
        params = init_params(EmbedderConfig("tcn"), seed=7)
        x = to_daily_sequence(grids(2))
        y = tcn_day_outputs(params.config, params.tensors(), x).data
        x2 = x.copy()
        x2[:, d + 1:] = np.random.default_rng(d).uniform(0, 1, x2[:, d + 1:].shape)
        y2 = tcn_day_outputs(params.config, params.tensors(), x2).data
        np.testing.assert_array_equal(y[:, :, :d + 1], y2[:, :, :d + 1])
        assert np.abs(y[:, :, d + 1:] - y2[:, :, d + 1:]).max() > 0

    def test_embedding_is_sum_of_day_outputs(self):
        params = init_params(EmbedderConfig("tcn"), seed=8)
        x = to_daily_sequence(grids(2))
        s = tcn_day_outputs(params.config, params.tensors(), x).data.sum(axis=2)
        np.testing.assert_allclose(forward(params, x).data, s / np.linalg.norm(s, axis=1, keepdims=True), rtol=1e-12)


class TestTransformer:
    def test_attention_rows_sum_to_one(self):
        params = init_params(EmbedderConfig("transformer"), seed=1)
        h = np.random.default_rng(0).standard_normal((3, 7, 64))
        _, a = attention(Tensor(h), params.tensors(), "tr.0", return_weights=True)
        assert a.shape == (3, 4, 7, 7)
        np.testing.assert_allclose(a.data.sum(axis=-1), 1, atol=1e-12)

    def test_zero_attention_has_no_cross_day_mixing(self):
        params = init_params(EmbedderConfig("transformer", L=2), seed=2)
        for layer in range(2):
            for m in ("q", "k", "v", "o"):
                params.arrays[f"tr.{layer}.{m}.W"][...] = 0.0
                params.arrays[f"tr.{layer}.{m}.b"][...] = 0.0
        P = params.tensors()
        x = to_daily_sequence(grids(1))

        def encodings(x):
            h = (Tensor(x) @ P["tr.in.W"] + P["tr.in.b"] + P["tr.pos"]) @ P["tr.proj.W"] + P["tr.proj.b"]
            for layer in range(2):
                h = encoder_layer(h, P, f"tr.{layer}")
            return h.data

        h = encodings(x)
        x2 = x.copy()
        x2[0, 3] += 0.3
        h2 = encodings(x2)
        changed = np.abs(h - h2).max(axis=2)[0]
        assert changed[3] > 0 and np.all(changed[[0, 1, 2, 4, 5, 6]] == 0)
        # the output is then a linear map of the summed per-day encodings
        out = h.sum(axis=1) @ params.arrays["tr.out.W"] + params.arrays["tr.out.b"]
        np.testing.assert_allclose(forward(params, x).data, out, rtol=1e-12)

    def test_without_positional_encoding(self):
        params = init_params(EmbedderConfig("transformer", positional_encoding=False))
        assert "tr.pos" not in params.arrays
        assert embed_array(params, grids(2)).shape == (2, 32)

    @pytest.mark.parametrize("L", [2, 3])
    def test_param_count_near_100k(self, L):
        assert abs(param_count(init_params(EmbedderConfig("transformer", L=L))) - 100_000) <= 25_000

    def test_width_transition(self):
        params = init_params(EmbedderConfig("transformer", L=3))
        assert params.arrays["tr.in.W"].shape == (24, 128)
        assert params.arrays["tr.proj.W"].shape == (128, 64)
        for layer in range(3):
            assert params.arrays[f"tr.{layer}.q.W"].shape == (64, 64)
            assert params.arrays[f"tr.{layer}.ff1.W"].shape == (64, 128)


class TestParamCounts:
    def test_gru_near_12k(self):
        assert abs(param_count(init_params(EmbedderConfig("gru", L=2))) - 12000) <= 3000

    def test_transformer_exceeds_cnn_lstm_fourfold(self):
        tr = param_count(init_params(EmbedderConfig("transformer", L=3)))
        cnn = param_count(init_params(EmbedderConfig("cnn_lstm", L=1)))
        assert tr > 4 * cnn


class TestTripletGradients:
    @pytest.mark.parametrize("kind,L", ALL)
    def test_matches_finite_differences(self, kind, L):
        extra = {"mlp_hidden": (8,)} if kind == "mlp" else {}
        params = init_params(EmbedderConfig(kind, L=L, **extra), seed=11)
        rng = np.random.default_rng(0)
        B = 3
        x = to_daily_sequence(rng.uniform(0, 1, (3 * B, 168, 1)))
        users = np.tile(np.arange(B), 3)
        E0 = forward(params, x, train=True).data
        neg = mine_negatives(E0[:B], E0, np.arange(B), users)
        names = sorted(params.arrays)
        tensors = [Tensor(params.arrays[k]) for k in names]

        def f(*ts):
            P = dict(zip(names, ts))
            E = forward(params, x, train=True, P=P)
            return batch_triplet_loss(E[0:B], [E[B:2 * B], E[2 * B:]], E[neg], margin=10.0)

        rep = grad_check(f, tensors, eps=1e-5, tol=1e-3, n_coords=4, rng=np.random.default_rng(1))
        assert rep.passed, rep


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["cnn_lstm", "transformer"])
    def test_round_trip(self, kind, tmp_path):
        rng = np.random.default_rng(0)
        train = Dataset(("a", "b"), rng.gamma(2, 0.5, (2, 168, 2)))
        params = init_params(EmbedderConfig(kind, F=2), seed=3)
        forward(params, to_daily_sequence(train.values / 10), train=True)
        model = EmbeddingModel(params, fit_scaling(train))
        cid = model.save(tmp_path / "m.npz")
        back = EmbeddingModel.load(tmp_path / "m.npz")
        assert back.checkpoint_id == cid == model.checkpoint_id
        assert back.config == model.config
        assert back.embed(train).tobytes() == model.embed(train).tobytes()
