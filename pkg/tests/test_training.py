import csv
import json
import math

import numpy as np
import pytest

from rotinv.geometry import PointCloud
from rotinv.network import ModelConfig, init_model
from rotinv.training import (
    AdamState,
    Dataset,
    Sample,
    SyntheticShapeSpec,
    TrainConfig,
    TrainingError,
    adam_step,
    augment_downsample,
    confusion_metrics,
    cross_entropy_loss,
    evaluate,
    predict,
    generate_synthetic_dataset,
    load_manifest,
    metrics_from_predictions,
    subseed,
    synthetic_cloud,
    train,
    write_dataset,
    write_metrics,
)

TINY = ModelConfig(
    s2_bandwidth_in=2,
    s2_bandwidth_out=2,
    so3_bandwidth_in=2,
    so3_bandwidth_out=1,
    channels=(1, 2, 2),
    hull_points=2,
    attention_points=16,
    invariant_attention=True,
)


def small_task(n_per_class=10, points=96, seed=0):
    spec = SyntheticShapeSpec(points=points)
    return generate_synthetic_dataset(spec, n_per_class, seed).samples


# -- loss ----------------------------------------------------------------------------


def test_cross_entropy_examples():
    assert cross_entropy_loss([0.0, 0.0], 1) == pytest.approx(math.log(2), rel=1e-15)
    assert cross_entropy_loss([10.0, -10.0], 0) == pytest.approx(2.0611536e-9, rel=1e-6)
    assert cross_entropy_loss([1000.0, -1000.0], 1) == pytest.approx(2000.0)


def test_cross_entropy_nonnegative_and_errors():
    rng = np.random.default_rng(0)
    assert all(cross_entropy_loss(rng.normal(size=2) * 30, int(rng.integers(2))) >= 0 for _ in range(200))
    with pytest.raises(ValueError):
        cross_entropy_loss([np.nan, 0.0], 0)


# -- Adam ------------------------------------------------------------------------------


def test_adam_first_step_closed_form():
    cfg = TrainConfig()
    p, state = adam_step({"w": np.zeros(3)}, {"w": np.ones(3)}, AdamState(), cfg)
    np.testing.assert_allclose(p["w"], -0.005 / (1 + 1e-8), rtol=1e-15)
    assert state.step == 1


def test_adam_zero_gradient_fixed_point_and_decay():
    cfg = TrainConfig()
    p, s = adam_step({"w": np.array([1.5])}, {"w": np.zeros(1)}, AdamState(), cfg)
    assert p["w"][0] == 1.5
    s = AdamState(3, {"w": np.array([0.2])}, {"w": np.array([0.04])})
    _, s2 = adam_step({"w": np.array([1.5])}, {"w": np.zeros(1)}, s, cfg)
    assert s2.m["w"][0] == pytest.approx(0.18) and s2.v["w"][0] == pytest.approx(0.04 * 0.999)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(1)
    cfg = TrainConfig(learning_rate=0.01)
    theta, m, v = rng.normal(size=4), np.zeros(4), np.zeros(4)
    params, state = {"w": theta.copy()}, AdamState()
    for t in range(1, 6):
        g = rng.normal(size=4)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        params, state = adam_step(params, {"w": g}, state, cfg)
    np.testing.assert_allclose(params["w"], theta, rtol=1e-14)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState(), TrainConfig())
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"v": np.zeros(3)}, AdamState(), TrainConfig())


# -- augmentation ---------------------------------------------------------------------------


def test_augment_928_to_512():
    cloud = PointCloud(np.random.default_rng(0).normal(size=(928, 3)))
    sub = augment_downsample(cloud, 512, 3)
    assert sub.n == 512
    rows = {tuple(p) for p in cloud.points}
    assert all(tuple(p) in rows for p in sub.points)
    assert len({tuple(p) for p in sub.points}) == 512


def test_augment_full_selection_and_seeds():
    cloud = PointCloud(np.random.default_rng(1).normal(size=(50, 3)))
    full = augment_downsample(cloud, 50, 0)
    assert sorted(map(tuple, full.points)) == sorted(map(tuple, cloud.points))
    big = PointCloud(np.random.default_rng(2).normal(size=(928, 3)))
    differ = sum(
        not np.array_equal(augment_downsample(big, 512, 2 * i).points, augment_downsample(big, 512, 2 * i + 1).points)
        for i in range(100)
    )
    assert differ == 100
    assert np.array_equal(augment_downsample(big, 512, 9).points, augment_downsample(big, 512, 9).points)
    with pytest.raises(ValueError):
        augment_downsample(cloud, 51, 0)


def test_subseed_is_named_and_stable():
    assert subseed(0, "shuffle", 1) == subseed(0, "shuffle", 1)
    assert len({subseed(0, "shuffle", 1), subseed(0, "augment", 1), subseed(1, "shuffle", 1), subseed(0, "shuffle", 2)}) == 4


# -- synthetic data ----------------------------------------------------------------------------


def test_generate_counts_and_determinism():
    spec = SyntheticShapeSpec()
    ds = generate_synthetic_dataset(spec, 10, 7)
    assert len(ds.samples) == 20 and all(s.cloud.n == 928 for s in ds.samples)
    assert sorted(s.label for s in ds.samples) == [0] * 10 + [1] * 10
    again = generate_synthetic_dataset(spec, 10, 7)
    assert all(np.array_equal(a.cloud.points, b.cloud.points) for a, b in zip(ds.samples, again.samples))
    other = generate_synthetic_dataset(spec, 10, 8)
    assert not np.array_equal(ds.samples[0].cloud.points, other.samples[0].cloud.points)


def test_thickness_ratio():
    rng = np.random.default_rng(0)
    spec = SyntheticShapeSpec()
    m0 = np.mean([np.mean(np.abs(synthetic_cloud(spec, 0, rng)[1])) for _ in range(20)])
    m1 = np.mean([np.mean(np.abs(synthetic_cloud(spec, 1, rng)[1])) for _ in range(20)])
    assert m0 / m1 == pytest.approx(3.0, rel=0.03)
    # Gaussian: E|n| = sigma * sqrt(2 / pi), sigma = thickness / 2
    assert m0 == pytest.approx(0.15 * math.sqrt(2 / math.pi), rel=0.03)


def test_localized_thinning_only_on_sub_arc():
    spec = SyntheticShapeSpec(localized=True, noise=0.0)
    cloud, offset = synthetic_cloud(spec, 1, np.random.default_rng(3))
    t = np.arctan2(cloud.points[:, 1], cloud.points[:, 0])
    thin = t > spec.arc_span / 2 - spec.local_fraction * spec.arc_span
    assert np.std(offset[thin]) == pytest.approx(0.05, rel=0.15)
    assert np.std(offset[~thin]) == pytest.approx(0.15, rel=0.15)


def test_rotation_pairs_with_unrotated_stream():
    a = generate_synthetic_dataset(SyntheticShapeSpec(), 2, 5).samples
    b = generate_synthetic_dataset(SyntheticShapeSpec(rotate=True), 2, 5).samples
    for x, y in zip(a, b):
        gx = np.linalg.norm(x.cloud.points - x.cloud.points.mean(0), axis=1)
        gy = np.linalg.norm(y.cloud.points - y.cloud.points.mean(0), axis=1)
        np.testing.assert_allclose(gx, gy, atol=1e-12)
        assert not np.allclose(x.cloud.points, y.cloud.points)


@pytest.mark.parametrize(
    "kw", [dict(points=63), dict(thickness=(0.1, 0.1)), dict(thickness=(0.0, 0.1)), dict(arc_span=0.0), dict(local_fraction=0.0)]
)
def test_degenerate_spec(kw):
    with pytest.raises(ValueError):
        generate_synthetic_dataset(SyntheticShapeSpec(**kw), 1, 0)


def test_manifest_roundtrip(tmp_path):
    ds = generate_synthetic_dataset(SyntheticShapeSpec(points=80), 2, 0)
    ds.samples[0].split = "test"
    path = write_dataset(ds, tmp_path)
    entries = json.loads(path.read_text())
    assert set(entries[0]) == {"path", "label", "split"}
    back = load_manifest(path)
    assert [s.label for s in back.samples] == [s.label for s in ds.samples]
    assert [s.split for s in back.samples] == [s.split for s in ds.samples]
    assert all(np.array_equal(a.cloud.points, b.cloud.points) for a, b in zip(ds.samples, back.samples))


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "none.json")
    (tmp_path / "m.json").write_text(json.dumps([{"path": "x.xyz", "label": 0, "color": "red"}]))
    with pytest.raises(ValueError):
        load_manifest(tmp_path / "m.json")


def test_dataset_requires_both_labels():
    c = PointCloud(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        Dataset([Sample(c, 0), Sample(c, 0)]).validate()


# -- metrics ---------------------------------------------------------------------------------------


def test_metrics_examples():
    m = confusion_metrics(tp=29, fn=4, tn=34, fp=2)
    assert m["sensitivity"] == pytest.approx(0.8788, abs=1e-4)
    assert m["specificity"] == pytest.approx(0.9444, abs=1e-4)
    perfect = metrics_from_predictions([0, 1, 1, 0], [0, 1, 1, 0])
    assert perfect["accuracy"] == perfect["sensitivity"] == perfect["specificity"] == 1.0
    allpos = metrics_from_predictions([0, 1, 0, 1], [1, 1, 1, 1])
    assert allpos["sensitivity"] == 1.0 and allpos["specificity"] == 0.0


def test_write_metrics(tmp_path):
    hist = [{"epoch": 0, "loss": 0.5, "accuracy": 1.0, "sensitivity": 1.0, "specificity": 1.0, "test_accuracy": 0.5}]
    write_metrics(hist, tmp_path)
    assert json.loads((tmp_path / "metrics.json").read_text()) == hist
    rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
    assert list(rows[0])[:5] == ["epoch", "loss", "accuracy", "sensitivity", "specificity"]


# -- loops -------------------------------------------------------------------------------------------


def test_train_reduces_loss():
    samples = small_task()
    _, hist = train(samples, TINY, TrainConfig(epochs=12, augment_points=80, eval_points=80, seed=1))
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_zero_learning_rate_keeps_parameters():
    samples = small_task(4)
    model = init_model(TINY, 3)
    trained, _ = train(samples, TINY, TrainConfig(learning_rate=0.0, epochs=2, augment_points=80, seed=3), model=model)
    assert all(np.array_equal(trained.params[k], model.params[k]) for k in model.params)


def test_training_is_reproducible():
    samples = small_task(3)
    tc = TrainConfig(epochs=2, augment_points=80, eval_points=80, seed=5)
    m1, h1 = train(samples, TINY, tc, eval_samples=samples[:2])
    m2, h2 = train(samples, TINY, tc, eval_samples=samples[:2])
    assert h1 == h2
    assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)
    assert all(np.array_equal(m1.running[k], m2.running[k]) for k in m1.running)


def test_last_partial_batch_is_kept(monkeypatch):
    import rotinv.training as tr

    sizes = []
    real = tr.forward_batch

    def spy(model, clouds, *a, **kw):
        sizes.append(len(clouds))
        return real(model, clouds, *a, **kw)

    monkeypatch.setattr(tr, "forward_batch", spy)
    train(small_task(3), TINY, TrainConfig(epochs=1, augment_points=80, recalibrate_bn=False))
    assert sizes == [4, 2]


def test_train_config_validation():
    samples = small_task(2)
    with pytest.raises(ValueError):
        train(samples, TINY, TrainConfig(batch_size=5, augment_points=80))
    with pytest.raises(ValueError):
        train(samples, TINY, TrainConfig(augment_points=97))
    with pytest.raises(ValueError):
        train([], TINY, TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 0.1})


def test_nonfinite_training_aborts():
    samples = small_task(2)
    model = init_model(TINY)
    model.params["fc.weight"][:] = 1e308
    model.params["fc.bias"][:] = 1e308
    with pytest.raises(TrainingError):
        train(samples, TINY, TrainConfig(epochs=1, augment_points=80), model=model)


def test_evaluate_contract():
    samples = small_task(2)
    m = init_model(TINY)
    res = evaluate(m, samples, 0, points=80)
    c = res["confusion"]
    assert c["tp"] + c["fn"] + c["tn"] + c["fp"] == 4
    with pytest.raises(ValueError):
        evaluate(m, [], 0)


def test_multi_view_prediction():
    samples = small_task(2)
    m = init_model(TINY, 3)
    one, f1 = predict(m, samples, 7, points=80)
    same, _ = predict(m, samples, 7, points=80, views=1)
    np.testing.assert_array_equal(one, same)
    avg, favg = predict(m, samples, 7, points=80, views=3)
    assert avg.shape == one.shape and favg.shape == f1.shape
    assert not np.allclose(avg, one)
    # full clouds in eval mode are deterministic, so every view agrees
    full, _ = predict(m, samples, 7, points=None)
    np.testing.assert_allclose(predict(m, samples, 7, points=None, views=4)[0], full, rtol=1e-12)
    with pytest.raises(ValueError):
        predict(m, samples, 7, views=0)
    with pytest.raises(ValueError):
        TrainConfig(eval_views=0).validate()
