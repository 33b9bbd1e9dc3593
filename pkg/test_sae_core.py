"""
Tests for the sparse autoencoder: activations, forward pass, gradients,
training and the checkpoint format
"""
import numpy as np
import pytest

from latent_lens.embedding_store import EmbeddingCorpus, subset
from latent_lens.exceptions import FormatError, MissingArtifactError, ShapeError, TrainingError, UsageError
from latent_lens.sae_core import (
    TRAINABLE,
    LatentVector,
    ReluActivation,
    SaeConfig,
    SaeModel,
    TopKActivation,
    activate,
    dead_latents,
    decode,
    encode,
    encode_batch,
    init_model,
    load_model,
    loss,
    loss_and_grads,
    model_from_bytes,
    model_to_bytes,
    mse,
    save_model,
    train,
    trainable_params,
)


def _random_model(m=6, l=9, activation=None, seed=0):
    rng = np.random.default_rng(seed)
    config = SaeConfig(input_dim=m, latent_dim=l, activation=activation or TopKActivation(k=3), seed=seed)
    model = init_model(config, input_mean=rng.standard_normal(m) * 0.1)
    params = model.params()
    params["enc_bias"] = rng.standard_normal(l) * 0.1
    params["dec_bias"] = rng.standard_normal(m) * 0.1
    return model, params


# ---------------------------------------------------------------------------
# Activations and forward pass
# ---------------------------------------------------------------------------

def test_topk_keeps_largest():
    v, mask = activate(np.array([3.0, 1.0, 2.0]), TopKActivation(k=2))
    assert v.tolist() == [3.0, 0.0, 2.0]
    assert mask.tolist() == [True, False, True]


def test_topk_selects_by_raw_value():
    v, _ = activate(np.array([-0.5, -2.0, -1.0]), TopKActivation(k=1))
    assert v.tolist() == [-0.5, 0.0, 0.0]


def test_relu_clamps_negatives():
    v, _ = activate(np.array([-1.0, 2.0]), ReluActivation())
    assert v.tolist() == [0.0, 2.0]


def test_topk_with_k_equal_l_is_identity():
    pre = np.array([[0.3, -1.2, 4.0, 0.1]])
    v, _ = activate(pre, TopKActivation(k=4))
    assert np.array_equal(v, pre)


def test_topk_ties_go_to_lowest_index():
    v, _ = activate(np.array([[1.0, 1.0, 1.0, 0.5]]), TopKActivation(k=2))
    assert v.tolist() == [[1.0, 1.0, 0.0, 0.0]]


def test_encode_identity_pipeline(model_factory):
    model = model_factory(np.eye(3), np.eye(3), activation=TopKActivation(k=2))
    assert encode(model, np.array([3.0, 1.0, 2.0])).values.tolist() == [3.0, 0.0, 2.0]


def test_encode_subtracts_input_mean(model_factory):
    model = model_factory(np.eye(2), np.eye(2), input_mean=np.array([1.0, 1.0]))
    out = encode(model, np.array([3.0, 0.0])).values
    assert out.tolist() == [2.0, 0.0]


def test_topk_sparsity_on_random_inputs():
    model = init_model(SaeConfig(input_dim=8, latent_dim=32, activation=TopKActivation(k=5), seed=3))
    x = np.random.default_rng(1).standard_normal((10_000, 8))
    nonzero = (encode_batch(model, x) != 0).sum(axis=1)
    assert nonzero.max() <= 5
    assert np.all(nonzero == 5)


def test_shape_errors(model_factory):
    model = model_factory(np.eye(3), np.eye(3))
    with pytest.raises(ShapeError):
        encode(model, np.zeros(4))
    with pytest.raises(ShapeError):
        decode(model, np.zeros(2))
    with pytest.raises(ShapeError):
        encode(model, np.zeros((2, 3)))


def test_decode_zero_and_unit_vectors():
    rng = np.random.default_rng(4)
    model = init_model(SaeConfig(input_dim=4, latent_dim=6, activation=TopKActivation(k=2)))
    assert np.allclose(decode(model, np.zeros(6)), 0.0)

    params = model.params()
    params["dec_bias"] = rng.standard_normal(4)
    params["input_mean"] = rng.standard_normal(4)
    shifted = SaeModel(config=model.config, **params)
    p = shifted.params()
    for j in range(6):
        unit = np.zeros(6)
        unit[j] = 1.0
        expected = p["dec_weight"][:, j] + p["dec_bias"] + p["input_mean"]
        assert np.allclose(decode(shifted, LatentVector(values=unit)), expected, atol=1e-12)


def test_decode_matches_dense_oracle():
    rng = np.random.default_rng(5)
    for seed in range(100):
        model, params = _random_model(5, 7, seed=seed)
        model = SaeModel(config=model.config, **params)
        p = model.params()
        v = rng.standard_normal(7) * (rng.random(7) < 0.5)
        expected = np.zeros(5)
        for i in range(5):
            acc = 0.0
            for j in range(7):
                acc += p["dec_weight"][i, j] * v[j]
            expected[i] = acc + p["dec_bias"][i] + p["input_mean"][i]
        assert np.max(np.abs(decode(model, v) - expected)) < 1e-6


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

def test_perfect_reconstruction_has_zero_mse(model_factory):
    model = model_factory(np.eye(3), np.eye(3), activation=TopKActivation(k=3))
    batch = np.random.default_rng(0).standard_normal((4, 3))
    total, _ = loss(model, batch)
    assert total == pytest.approx(0.0, abs=1e-20)


def test_empty_batch_is_usage_error(model_factory):
    model = model_factory(np.eye(3), np.eye(3))
    with pytest.raises(UsageError):
        loss(model, np.zeros((0, 3)))


def test_relu_without_penalty_equals_mse():
    model = init_model(SaeConfig(input_dim=6, latent_dim=9, activation=ReluActivation(l1_lambda=0.0), seed=1))
    batch = np.random.default_rng(2).standard_normal((8, 6))
    total, grads, mse_term = loss_and_grads(model.params(), batch, model.config.activation)
    assert total == mse_term
    assert total == pytest.approx(mse(model, batch), rel=1e-12)


def _support(params, batch, activation):
    pre = (batch - params["input_mean"]) @ params["enc_weight"].T + params["enc_bias"]
    return activate(pre, activation)[1]


@pytest.mark.parametrize("seed", range(100))
@pytest.mark.parametrize("activation", [TopKActivation(k=3), ReluActivation(l1_lambda=0.01)], ids=["topk", "relu"])
def test_gradients_match_central_differences(activation, seed):
    rng = np.random.default_rng(1000 + seed)
    m, l, h = 6, 9, 1e-4
    _, params = _random_model(m, l, activation=activation, seed=seed)
    batch = rng.standard_normal((5, m))
    _, grads, _ = loss_and_grads(params, batch, activation)
    base_support = _support(params, batch, activation)

    checked = 0
    for name in TRAINABLE:
        analytic = grads[name]
        scale = np.max(np.abs(analytic)) + 1e-12
        for idx in np.ndindex(params[name].shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            if not (np.array_equal(_support(plus, batch, activation), base_support)
                    and np.array_equal(_support(minus, batch, activation), base_support)):
                continue
            numeric = (loss_and_grads(plus, batch, activation)[0]
                       - loss_and_grads(minus, batch, activation)[0]) / (2 * h)
            assert abs(numeric - analytic[idx]) / scale < 1e-4, (name, idx)
            checked += 1
    assert checked > 60


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _partitions(small_synth, small_split):
    return subset(small_synth.corpus, small_split.train_indices), subset(small_synth.corpus, small_split.test_indices)


def test_training_is_deterministic(quick_config, small_synth, small_split):
    train_c, val_c = _partitions(small_synth, small_split)
    config = quick_config.model_copy(update={"epochs": 2})
    first, stats_a = train(config, train_c, val_c)
    second, stats_b = train(config, train_c, val_c)
    assert first == second
    assert model_to_bytes(first) == model_to_bytes(second)
    assert stats_a == stats_b


def test_training_improves_and_keeps_unit_decoder(quick_config, small_synth, small_split):
    train_c, val_c = _partitions(small_synth, small_split)
    model, stats = train(quick_config.model_copy(update={"epochs": 20}), train_c, val_c)
    assert stats.epochs_completed == 20
    assert len(stats.val_mse) == len(stats.train_mse) == len(stats.dead_latents) == 20
    assert stats.final_val_mse < stats.initial_val_mse
    assert all(v >= 0 for v in stats.val_mse)
    assert 0 <= stats.final_dead_latents <= model.config.latent_dim
    norms = np.linalg.norm(model.dec_weight.astype(np.float64), axis=0)
    assert np.all(np.abs(norms - 1.0) < 1e-6)
    assert all(l0 <= 4 for l0 in stats.mean_l0)


def test_centering_off_keeps_zero_mean(quick_config, small_synth, small_split):
    train_c, val_c = _partitions(small_synth, small_split)
    model, _ = train(quick_config.model_copy(update={"epochs": 1, "center_inputs": False}), train_c, val_c)
    assert not model.input_mean.any()


def test_topk_encoder_bias_stays_zero(quick_config, small_synth, small_split):
    train_c, val_c = _partitions(small_synth, small_split)
    model, _ = train(quick_config.model_copy(update={"epochs": 3}), train_c, val_c)
    assert not model.enc_bias.any()
    # the training mean sits exactly on the firing threshold of every latent
    assert not encode(model, model.input_mean).values.any()

    relu_config = quick_config.model_copy(update={"epochs": 3, "activation": ReluActivation(l1_lambda=1e-3)})
    relu_model, _ = train(relu_config, train_c, val_c)
    assert relu_model.enc_bias.any()


def test_trainable_params_by_activation():
    assert "enc_bias" not in trainable_params(TopKActivation(k=2))
    assert trainable_params(ReluActivation()) == TRAINABLE


def test_train_rejects_bad_corpora(quick_config, small_synth, small_split):
    train_c, val_c = _partitions(small_synth, small_split)
    with pytest.raises(ShapeError):
        train(quick_config.model_copy(update={"input_dim": 5}), train_c, val_c)
    with pytest.raises(UsageError):
        train(quick_config, train_c, EmbeddingCorpus(data=np.zeros((0, quick_config.input_dim))))


def test_divergence_raises_training_error(quick_config, small_synth, small_split):
    train_c, val_c = _partitions(small_synth, small_split)
    config = quick_config.model_copy(update={"learning_rate": 1e200, "batch_size": 16})
    with np.errstate(all="ignore"):
        with pytest.raises(TrainingError) as info:
            train(config, train_c, val_c)
    assert info.value.epoch == 0


def test_config_rejects_k_above_latent_dim():
    with pytest.raises(ValueError):
        SaeConfig(input_dim=4, latent_dim=3, activation=TopKActivation(k=4))


# ---------------------------------------------------------------------------
# Dead latents
# ---------------------------------------------------------------------------

def test_infinite_threshold_marks_everything():
    model = init_model(SaeConfig(input_dim=4, latent_dim=6, activation=TopKActivation(k=2)))
    corpus = EmbeddingCorpus(data=np.random.default_rng(0).standard_normal((10, 4)))
    assert dead_latents(model, corpus, threshold=np.inf) == set(range(6))


def test_zeroed_latent_is_dead(model_factory):
    enc = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    model = model_factory(enc, enc.T, activation=TopKActivation(k=1))
    corpus = EmbeddingCorpus(data=np.random.default_rng(1).uniform(1.0, 2.0, size=(50, 2)))
    assert 2 in dead_latents(model, corpus, threshold=0.0)


@pytest.mark.parametrize("threshold", [0.0, 0.5])
def test_dead_latents_match_brute_force(threshold, quick_config, small_synth, small_split):
    train_c, val_c = _partitions(small_synth, small_split)
    model, _ = train(quick_config.model_copy(update={"epochs": 1}), train_c, val_c)
    latents = [encode(model, row).values for row in val_c.data]
    expected = set()
    for j in range(model.config.latent_dim):
        if not any(abs(v[j]) > threshold for v in latents):
            expected.add(j)
    assert dead_latents(model, val_c, threshold) == expected


def test_dead_latents_match_brute_force_on_random_models():
    rng = np.random.default_rng(8)
    for seed in range(100):
        activation = TopKActivation(k=int(rng.integers(1, 4))) if seed % 2 else ReluActivation()
        model, params = _random_model(4, 6, activation=activation, seed=seed)
        model = SaeModel(config=model.config, **params)
        corpus = EmbeddingCorpus(data=rng.standard_normal((int(rng.integers(1, 30)), 4)))
        threshold = float(rng.choice([0.0, 0.1, 0.5]))
        latents = [encode(model, row).values for row in corpus.data]
        expected = {j for j in range(6) if not any(abs(v[j]) > threshold for v in latents)}
        assert dead_latents(model, corpus, threshold) == expected, seed


def test_dead_latents_dim_mismatch():
    model = init_model(SaeConfig(input_dim=4, latent_dim=6, activation=TopKActivation(k=2)))
    with pytest.raises(ShapeError):
        dead_latents(model, EmbeddingCorpus(data=np.zeros((2, 3))))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, quick_config, small_synth, small_split):
    train_c, val_c = _partitions(small_synth, small_split)
    model, _ = train(quick_config.model_copy(update={"epochs": 1}), train_c, val_c)
    path = save_model(model, tmp_path / "model.saec")
    back = load_model(path)
    assert back == model
    assert model_to_bytes(back) == path.read_bytes()


def test_checkpoint_roundtrip_random_models():
    rng = np.random.default_rng(21)
    for seed in range(1000):
        m, l = int(rng.integers(1, 9)), int(rng.integers(1, 13))
        if seed % 2:
            activation = TopKActivation(k=int(rng.integers(1, l + 1)))
        else:
            activation = ReluActivation(l1_lambda=float(rng.random()))
        config = SaeConfig(input_dim=m, latent_dim=l, activation=activation, seed=seed)
        params = {
            "enc_weight": rng.standard_normal((l, m)),
            "enc_bias": rng.standard_normal(l),
            "dec_weight": rng.standard_normal((m, l)),
            "dec_bias": rng.standard_normal(m),
            "input_mean": rng.standard_normal(m),
        }
        model = SaeModel(config=config, **params)
        raw = model_to_bytes(model)
        back = model_from_bytes(raw)
        assert back == model, seed
        assert model_to_bytes(back) == raw


def test_checkpoint_keeps_config():
    config = SaeConfig(input_dim=8, latent_dim=200, activation=TopKActivation(k=20), seed=99)
    back = model_from_bytes(model_to_bytes(init_model(config)))
    assert back.config == config
    assert back.config.activation.k == 20


def test_checkpoint_relu_config():
    config = SaeConfig(input_dim=3, latent_dim=5, activation=ReluActivation(l1_lambda=0.02))
    assert model_from_bytes(model_to_bytes(init_model(config))).config == config


@pytest.mark.parametrize("cut", [3, 11, 40, -1])
def test_truncated_checkpoint(cut):
    raw = model_to_bytes(init_model(SaeConfig(input_dim=4, latent_dim=6, activation=TopKActivation(k=2))))
    with pytest.raises(FormatError):
        model_from_bytes(raw[:cut])


def test_checkpoint_header_corruption():
    raw = bytearray(model_to_bytes(init_model(SaeConfig(input_dim=4, latent_dim=6, activation=TopKActivation(k=2)))))
    bad_magic = bytes(b"XAEC" + raw[4:])
    bad_version = bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    for blob in (bad_magic, bad_version, bytes(raw) + b"\x00"):
        with pytest.raises(FormatError):
            model_from_bytes(blob)


def test_load_missing_checkpoint(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_model(tmp_path / "nope.saec")
