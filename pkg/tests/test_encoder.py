import numpy as np
import pytest

from emr_transfer import autodiff as ad
from emr_transfer.autodiff import Tensor
from emr_transfer.encoder import (GRU_KEYS, GruChannelParams, McGruEncoder, MLPHead, PredictionHeads,
                                  build_embedding_matrix, encode_channel, gru_step, predict, project_health)
from emr_transfer.errors import DataError, ShapeError

from oracles import central_diff, gru_reference, rel_err


def test_zero_params_zero_state_stays_zero():
    h = gru_step(GruChannelParams.zeros(3), np.zeros(3), 7.5)
    np.testing.assert_array_equal(h.data, np.zeros(3))


def test_zero_params_halve_previous_state():
    v = np.array([1.0, -2.0, 4.0])
    h = gru_step(GruChannelParams.zeros(3), v, -3.0)
    np.testing.assert_array_equal(h.data, 0.5 * v)


def test_gru_step_unroll_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    chan = GruChannelParams.random(3, rng, scale=0.8)
    seq = [0.3, -1.2, 0.7]
    arrays = [getattr(chan, k) for k in GRU_KEYS]
    weights = rng.normal(size=3)

    def run(p):
        h = Tensor(np.zeros(3))
        for x in seq:
            h = gru_step(p, h, x)
        return ad.tsum(h * Tensor(weights))

    tensors = chan.as_tensors()
    ad.backward(run(tensors))

    def f():
        with ad.no_grad():
            return float(run(GruChannelParams(*arrays)).data)

    num = central_diff(f, arrays)
    for k, n in zip(GRU_KEYS, num):
        assert rel_err(getattr(tensors, k).grad, n) < 1e-4


def test_encode_channel_single_step_zero_params():
    np.testing.assert_array_equal(encode_channel(GruChannelParams.zeros(2), [5.0]).data, [0.0, 0.0])


def test_encode_channel_equals_step_iteration_and_scalar_reference():
    rng = np.random.default_rng(2)
    chan = GruChannelParams.random(4, rng)
    seq = [0.9] * 5
    h = Tensor(np.zeros(4))
    for x in seq:
        h = gru_step(chan, h, x)
    out = encode_channel(chan, seq).data
    np.testing.assert_array_equal(out, h.data)
    np.testing.assert_allclose(out, gru_reference(chan.to_dict(), seq), rtol=1e-12, atol=1e-15)


def test_encode_channel_empty_sequence():
    with pytest.raises(DataError):
        encode_channel(GruChannelParams.zeros(2), [])


def test_identical_channels_give_identical_embeddings():
    rng = np.random.default_rng(4)
    chan = GruChannelParams.random(3, rng)
    enc = McGruEncoder.zeros(["a", "b"], 3, 2)
    enc.set_channel("a", chan)
    enc.set_channel("b", chan)
    F = build_embedding_matrix(enc, {"a": [1.0, 2.0], "b": [1.0, 2.0]})
    np.testing.assert_array_equal(F[0], F[1])


def test_channel_params_shape_checked():
    with pytest.raises(ShapeError):
        GruChannelParams(*([np.zeros(2)] * 3 + [np.zeros((2, 3))] * 3 + [np.zeros(2)] * 3))


def test_channel_params_dict_round_trip_bit_exact():
    chan = GruChannelParams.random(3, np.random.default_rng(9))
    back = GruChannelParams.from_dict(chan.to_dict())
    for k in GRU_KEYS:
        assert getattr(back, k).tobytes() == getattr(chan, k).tobytes()


def test_encoder_rejects_duplicate_features():
    with pytest.raises(DataError):
        McGruEncoder.init(["a", "a"], 2, 2)


def test_encoder_init_scale_and_zero_biases():
    enc = McGruEncoder.init(["a", "b", "c"], 4, 5, np.random.default_rng(0))
    assert enc.n_channels == 3
    for k in GRU_KEYS:
        d = enc.params[k].data
        if k.startswith("b_"):
            assert not d.any()
        else:
            assert np.abs(d).max() <= 0.5
    assert enc.params["proj_w"].shape == (12, 5)


def test_embedding_matrix_single_feature_reduces_to_encode_channel():
    enc = McGruEncoder.init(["a"], 3, 2, np.random.default_rng(1))
    F = build_embedding_matrix(enc, {"a": [0.1, 0.5, -0.2]})
    np.testing.assert_array_equal(F[0], encode_channel(enc.channel(0), [0.1, 0.5, -0.2]).data)


def test_embedding_matrix_lookup_by_name():
    enc = McGruEncoder.init(["a", "b", "c"], 2, 2, np.random.default_rng(1))
    rec = {"a": [1.0, 2.0], "b": [0.0], "c": [-1.0, 0.5, 3.0]}
    shuffled = {k: rec[k] for k in ("c", "a", "b")}
    np.testing.assert_array_equal(build_embedding_matrix(enc, rec), build_embedding_matrix(enc, shuffled))


def test_embedding_matrix_zero_encoder():
    enc = McGruEncoder.zeros(["a", "b", "c"], 2, 4)
    F = build_embedding_matrix(enc, {"a": [1.0], "b": [2.0, 3.0], "c": [4.0]})
    np.testing.assert_array_equal(F, np.zeros((3, 2)))


def test_embedding_matrix_missing_feature():
    enc = McGruEncoder.zeros(["a", "b"], 2, 4)
    with pytest.raises(DataError):
        build_embedding_matrix(enc, {"a": [1.0]})


def test_embedding_rows_are_channel_independent():
    enc = McGruEncoder.init(["a", "b", "c"], 3, 2, np.random.default_rng(5))
    base = build_embedding_matrix(enc, {"a": [1.0, 2.0], "b": [0.5, 0.5], "c": [3.0]})
    other = build_embedding_matrix(enc, {"a": [1.0, 2.0], "b": [0.0, 0.0], "c": [3.0]})
    assert base[0].tobytes() == other[0].tobytes()
    assert base[2].tobytes() == other[2].tobytes()
    assert not np.array_equal(base[1], other[1])


def test_batched_embed_matches_per_record_embedding():
    enc = McGruEncoder.init(["a", "b"], 3, 4, np.random.default_rng(6))
    recs = [{"a": [0.1, 0.2, 0.3], "b": [1.0, 0.0, -1.0]}, {"a": [0.5], "b": [2.0]}]
    x = np.zeros((2, 2, 3))
    mask = np.array([[1, 1, 1], [1, 0, 0]], dtype=float)
    for j, r in enumerate(recs):
        for i, f in enumerate(["a", "b"]):
            x[i, j, : len(r[f])] = r[f]
    emb = enc.embed(x, mask).data
    for j, r in enumerate(recs):
        np.testing.assert_allclose(emb[j], build_embedding_matrix(enc, r), rtol=1e-12, atol=1e-15)


def test_project_health_bias_only():
    enc = McGruEncoder.zeros(["a", "b"], 2, 3)
    enc.params["proj_b"].data[:] = [1.0, -2.0, 0.5]
    s = project_health(enc, np.ones((2, 2)))
    np.testing.assert_array_equal(s.data, [1.0, -2.0, 0.5])


def test_project_health_identity_scalar():
    enc = McGruEncoder.zeros(["a"], 1, 1)
    enc.params["proj_w"].data[:] = 1.0
    assert project_health(enc, [[0.37]]).data[0] == 0.37


def test_project_health_matches_triple_loop():
    rng = np.random.default_rng(8)
    enc = McGruEncoder.init(["a", "b", "c"], 2, 4, rng)
    enc.params["proj_b"].data[:] = rng.normal(size=4)
    F = rng.normal(size=(3, 2))
    W, b = enc.params["proj_w"].data, enc.params["proj_b"].data
    ref = [b[k] + sum(F[i, j] * W[i * 2 + j, k] for i in range(3) for j in range(2)) for k in range(4)]
    np.testing.assert_allclose(project_health(enc, F).data, ref, rtol=1e-13)


def test_project_health_shape_error():
    with pytest.raises(ShapeError):
        project_health(McGruEncoder.zeros(["a"], 2, 2), np.zeros((2, 2)))


def test_zero_heads_predict_half_and_zero():
    p, los = predict(PredictionHeads.zeros(4), np.ones(4))
    assert p == 0.5 and los == 0.0


def test_outcome_bias_is_monotone():
    heads = PredictionHeads.init(4, np.random.default_rng(0))
    s = np.array([0.2, -0.1, 0.4, 1.0])
    ps = []
    for b in (-1.0, 0.0, 1.0):
        heads.outcome.params["b2"].data[:] = b
        ps.append(predict(heads, s)[0])
    assert ps[0] < ps[1] < ps[2]


def test_head_output_ranges():
    heads = PredictionHeads.init(6, np.random.default_rng(3))
    s = Tensor(np.random.default_rng(4).normal(scale=5, size=(10, 6)))
    p, los = heads.forward(s)
    assert ((p.data > 0) & (p.data < 1)).all() and np.isfinite(los.data).all()


def test_head_shapes():
    h = MLPHead.init(8, np.random.default_rng(0))
    assert h.params["w1"].shape == (8, 4) and h.params["w2"].shape == (4, 1)
