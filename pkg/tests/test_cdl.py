import numpy as np
import pytest

from histoage.autodiff.gradcheck import numerical_gradient, relative_error
from histoage.autodiff.optim import SGD
from histoage.autodiff.tensor import Tensor, backward, stop_gradient
from histoage.cdl.networks import CDLModel, EncoderConfig, PredictorConfig
from histoage.cdl.training import (
    CollapseMonitor,
    cdl_loss,
    cdl_step,
    cosine_loss,
    cosine_similarity,
    extract_features,
    load_model,
    read_embeddings,
    save_model,
    train_cdl,
    write_embeddings,
)
from histoage.imaging.augment import AugmentPolicy
from histoage.imaging.tiler import box_resample
from histoage.synth.cohort import GeneratorSpec
from histoage.synth.slides import gen_slide
from histoage.utils.errors import DataError, DegenerateEmbeddingError


def _tiny_model(dtype=np.float64, seed=3):
    return CDLModel(EncoderConfig(blocks=(1,), widths=(2,), dim=4, input_size=6), scale_tag="S1", seed=seed,
                    predictor_config=PredictorConfig(dim=4), dtype=dtype)


def _positive_weights(model):
    # strictly positive pre-activations keep every ReLU on its linear side
    for name, p in model.encoder.parameters().items():
        p.data = np.abs(p.data) + 0.1 if name.endswith(".w") else np.full_like(p.data, 0.1)


def test_tiny_model_stays_small():
    assert _tiny_model().num_parameters() <= 200


def test_loss_gradient_matches_finite_differences_with_frozen_target(rng):
    model = _tiny_model()
    _positive_weights(model)
    v1 = rng.uniform(0.0, 1.0, size=(2, 6, 6, 3))
    v2 = rng.uniform(0.0, 1.0, size=(2, 6, 6, 3))
    _, z2 = cdl_loss(model, v1, v2)
    target = Tensor(z2.copy())

    def loss():
        p1 = model.predictor(model.encoder(Tensor(v1)), training=True)
        return cosine_loss(p1, target)

    params = model.parameters()
    analytic = backward(loss(), params)
    numeric = numerical_gradient(lambda: loss().item(), params)
    for name in params:
        assert relative_error(analytic[name], numeric[name]).max() < 1e-4, name


def test_second_branch_contributes_no_gradient(rng):
    model = _tiny_model()
    _positive_weights(model)
    v1 = rng.uniform(0.0, 1.0, size=(2, 6, 6, 3))
    v2 = rng.uniform(0.0, 1.0, size=(2, 6, 6, 3))
    loss, z2 = cdl_loss(model, v1, v2)
    through_branch = backward(loss, model.parameters())

    p1 = model.predictor(model.encoder(Tensor(v1)), training=True)
    constant = backward(cosine_loss(p1, Tensor(z2)), model.parameters())
    for name in through_branch:
        np.testing.assert_allclose(through_branch[name], constant[name], rtol=1e-12, atol=1e-14)


def test_identical_views_give_minus_one(rng):
    p = Tensor(rng.normal(size=(5, 8)))
    assert cosine_loss(p, stop_gradient(p)).item() == pytest.approx(-1.0, abs=1e-6)


def test_loss_is_bounded(rng):
    model = _tiny_model(dtype=np.float32)
    _positive_weights(model)
    for _ in range(5):
        v1 = rng.uniform(0.0, 1.0, size=(3, 6, 6, 3))
        v2 = rng.uniform(0.0, 1.0, size=(3, 6, 6, 3))
        loss, _ = cdl_loss(model, v1, v2)
        assert -1.0 - 1e-6 <= loss.item() <= 1.0 + 1e-6


def test_collapse_monitor_needs_patience():
    monitor = CollapseMonitor(dim=4, patience=3)
    constant = np.ones((10, 4))
    monitor.update(constant)
    monitor.update(constant)
    assert not monitor.fired
    monitor.update(constant)
    assert monitor.fired


def test_collapse_monitor_resets_on_spread(rng):
    monitor = CollapseMonitor(dim=4, patience=2)
    monitor.update(np.ones((10, 4)))
    monitor.update(rng.normal(size=(10, 4)))
    monitor.update(np.ones((10, 4)))
    assert not monitor.fired


def _training_setup(seed=11):
    images = np.random.default_rng(seed).integers(0, 256, size=(6, 20, 20, 3), dtype=np.uint8)
    ids = [f"s_S1_000_{i:03d}" for i in range(6)]
    model = CDLModel(EncoderConfig(blocks=(1, 1), widths=(2, 4), dim=8, input_size=16), scale_tag="S1", seed=5)
    return model, images, ids


def test_training_is_deterministic():
    policy = AugmentPolicy(crop_size=16)
    first, images, ids = _training_setup()
    second, _, _ = _training_setup()
    r1 = train_cdl(first, images, ids, epochs=2, batch_size=4, policy=policy, seed=9)
    r2 = train_cdl(second, images, ids, epochs=2, batch_size=4, policy=policy, seed=9)
    assert r1.losses == r2.losses
    assert len(r1.losses) == 2
    for name, p in first.parameters().items():
        assert np.array_equal(p.data, second.parameters()[name].data)


def test_training_needs_patches():
    model, _, _ = _training_setup()
    with pytest.raises(DataError):
        train_cdl(model, np.zeros((0, 20, 20, 3), np.uint8), [], epochs=1)


def test_checkpoint_reproduces_embeddings(tmp_path):
    model, images, ids = _training_setup()
    train_cdl(model, images, ids, epochs=1, batch_size=4, policy=AugmentPolicy(crop_size=16), seed=1)
    path = save_model(tmp_path / "S1.cdl", model)
    restored = load_model(path, "S1")
    np.testing.assert_array_equal(extract_features(model, images, crop_size=16),
                                  extract_features(restored, images, crop_size=16))
    with pytest.raises(DataError):
        load_model(path, "S2")


def test_extract_features_keeps_order():
    model, images, _ = _training_setup()
    whole = extract_features(model, images, batch_size=64, crop_size=16)
    batched = extract_features(model, images, batch_size=2, crop_size=16)
    assert whole.shape == (6, 8)
    np.testing.assert_allclose(whole, batched, rtol=1e-5, atol=1e-6)


def test_embeddings_binary_twin(tmp_path, rng):
    features = rng.normal(size=(3, 4)).astype(np.float32)
    paths = write_embeddings(tmp_path / "S1.csv", features, ["a", "b", "c"], ["x", "x", "y"], "S1")
    assert [p.name for p in paths] == ["S1.csv", "S1.emb"]
    loaded, index, scale = read_embeddings(paths[0])
    assert scale == "S1"
    assert index["patch_id"].tolist() == ["a", "b", "c"]
    assert np.array_equal(loaded, features)


def test_single_step_updates_parameters():
    model, images, _ = _training_setup()
    views = images[:4, :16, :16].astype(np.float64) / 255.0
    before = {name: p.data.copy() for name, p in model.parameters().items()}
    loss, z2 = cdl_step(model, SGD(model.parameters(), lr=0.05), views, views[:, ::-1])
    assert -1.0 - 1e-6 <= loss <= 1.0 + 1e-6
    assert z2.shape == (4, 8)
    assert any(not np.array_equal(before[n], p.data) for n, p in model.parameters().items())
    with pytest.raises(DataError):
        cdl_step(model, SGD(model.parameters()), views[:0], views[:0])


def test_encoder_output_is_non_negative(rng):
    model = _tiny_model()
    x = Tensor(rng.uniform(0.0, 1.0, size=(4, 6, 6, 3)))
    assert (model.encoder(x).data >= 0.0).all()


def test_dead_head_is_a_degenerate_embedding(rng):
    model = _tiny_model()
    model.encoder.parameters()["encoder.fc1.b"].data[:] = -1e3
    v = rng.uniform(0.0, 1.0, size=(2, 6, 6, 3))
    with pytest.raises(DegenerateEmbeddingError):
        cdl_loss(model, v, v)


def test_constant_patches_trip_the_collapse_monitor(caplog):
    model = CDLModel(EncoderConfig(blocks=(1, 1), widths=(2, 4), dim=8, input_size=16), scale_tag="S1", seed=5)
    _positive_weights(model)
    images = np.full((6, 16, 16, 3), 0.5, dtype=np.float32)
    ids = [f"s_S1_000_{i:03d}" for i in range(6)]
    policy = AugmentPolicy(crop_size=16, brightness=1e-4,
                           disabled=["crop", "flip", "rotation", "contrast", "saturation", "hue"])
    with caplog.at_level("WARNING", logger="histoage.cdl.training"):
        result = train_cdl(model, images, ids, epochs=3, batch_size=3, lr=0.01, policy=policy, seed=2,
                           collapse_patience=2)
    assert result.collapsed
    assert len(result.losses) == 3
    assert any("collapse" in w for w in result.warnings)
    assert "COLLAPSE DETECTED" in caplog.text


# ---------------------- Synthetic textures ----------------------

VIVID = GeneratorSpec(epidermis_base_px=150.0, epidermis_slope=0.009, nevus_rate_per_year=0.1, nevus_max_probability=1.0)
YOUNG, OLD = 10.0, 90.0


@pytest.fixture(scope="module")
def age_textures():
    """32x32 renderings of young and old synthetic slides, with their ages."""
    images, ages, ids = [], [], []
    for i in range(16):
        age = YOUNG if i % 2 == 0 else OLD
        slide, _ = gen_slide(f"T{i:03d}", age, seed=4, spec=VIVID, size=512)
        images.append((box_resample(slide.pixels, 32) / 255.0).astype(np.float32))
        ages.append(age)
        ids.append(f"T{i:03d}-1_S1_000_000")
    return np.stack(images), np.asarray(ages), ids


def _texture_model():
    return CDLModel(EncoderConfig(blocks=(1, 1), widths=(4, 8), dim=8, input_size=24), scale_tag="S1", seed=6)


@pytest.mark.slow
def test_loss_falls_over_ten_epochs(age_textures):
    images, _, ids = age_textures
    result = train_cdl(_texture_model(), images, ids, epochs=10, batch_size=8, policy=AugmentPolicy(crop_size=24), seed=3)
    assert result.aborted_epochs == []
    assert len(result.losses) == 10
    assert result.losses[-1] < result.losses[0]


@pytest.mark.slow
def test_trained_features_separate_ages(age_textures):
    images, ages, ids = age_textures
    model = _texture_model()
    train_cdl(model, images, ids, epochs=3, batch_size=8, policy=AugmentPolicy(crop_size=24), seed=3)
    features = extract_features(model, images, crop_size=24)
    same, different = [], []
    for i in range(len(ages)):
        for j in range(i + 1, len(ages)):
            (same if ages[i] == ages[j] else different).append(cosine_similarity(features[i], features[j]))
    assert np.mean(different) < np.mean(same)
