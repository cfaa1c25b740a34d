"""Loss, Adam, augmentation, synthetic data, and the train/evaluate loops."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import PointCloud, load_point_cloud, random_rotation, save_point_cloud
from .network import Model, ModelConfig, backward, forward_batch, init_model, torch_cross_entropy

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def subseed(seed: int, *keys) -> int:
    """Deterministic child seed for a named purpose, e.g. subseed(s, "shuffle", epoch)."""
    parts = [int(seed)]
    for k in keys:
        parts.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return int(np.random.SeedSequence(parts).generate_state(1, np.uint64)[0])


# -- loss and optimizer ---------------------------------------------------------------


def cross_entropy_loss(logits, label: int) -> float:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    zmax = z.max()
    return float(zmax + np.log(np.sum(np.exp(z - zmax))) - z[label])


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    seed: int = 0
    augment_points: int = 512
    # clouds are subsampled to this size (fixed per-sample seed) before evaluation
    eval_points: int | None = 512
    # logits are averaged over this many independent evaluation subsamples
    eval_views: int = 8
    # replace the running batchnorm averages by exact statistics of the
    # training set, processed as at evaluation, once training ends
    recalibrate_bn: bool = True

    def validate(self, n_train: int | None = None, min_cloud: int | None = None):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be nonnegative")
        if self.batch_size < 1 or (n_train is not None and self.batch_size > n_train):
            raise ValueError(f"batch size {self.batch_size} invalid for {n_train} training samples")
        if self.augment_points < 1 or (min_cloud is not None and self.augment_points > min_cloud):
            raise ValueError(f"augment_points {self.augment_points} exceeds the smallest cloud ({min_cloud})")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.eval_views < 1:
            raise ValueError("eval_views must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update; returns (new params, new state)."""
    if set(params) != set(grads):
        raise ValueError("parameter and gradient names differ")
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m = b1 * state.m.get(k, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(k, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[k] = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


def augment_downsample(cloud: PointCloud, target: int, seed) -> PointCloud:
    """Uniformly random subset of ``target`` points, without replacement."""
    if not 1 <= target <= cloud.n:
        raise ValueError(f"cannot draw {target} of {cloud.n} points")
    idx = np.random.default_rng(seed).choice(cloud.n, size=target, replace=False)
    return cloud.subset(idx)


# -- data -----------------------------------------------------------------------------


@dataclass
class Sample:
    cloud: PointCloud
    label: int
    split: str = "train"
    name: str = ""


@dataclass
class Dataset:
    samples: list

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]

    def validate(self):
        train = self.split("train")
        if train and {s.label for s in train} != {0, 1}:
            raise ValueError("train split must contain both labels")
        for s in self.samples:
            if s.label not in (0, 1):
                raise ValueError(f"label {s.label} not in {{0, 1}}")


@dataclass
class SyntheticShapeSpec:
    """Bent slabs: a sheet wrapped on a circular arc, with Gaussian thickness.

    Points sit at angle t along the arc, height s across the sheet, and radial
    offset n ~ N(0, (thickness * arc_radius / 2)^2) along the sheet normal.
    With ``localized`` set, class 1 is thinned only on the sub-arc covering the
    last ``local_fraction`` of the span; elsewhere it has class 0's thickness.
    """

    points: int = 928
    arc_radius: float = 1.0
    arc_span: float = 2.0
    sheet_width: float = 0.2
    thickness: tuple = (0.30, 0.10)
    localized: bool = False
    local_fraction: float = 0.5
    noise: float = 0.005
    # per-sample relative jitter of radius, span and width
    shape_jitter: float = 0.0
    rotate: bool = False

    def validate(self):
        if self.points < 64:
            raise ValueError("need at least 64 points per cloud")
        t0, t1 = self.thickness
        if t0 <= 0 or t1 <= 0 or t0 == t1:
            raise ValueError("thicknesses must be positive and distinct")
        if self.arc_radius <= 0 or not 0 < self.arc_span <= 2 * math.pi or self.sheet_width < 0:
            raise ValueError("degenerate arc geometry")
        if not 0 < self.local_fraction <= 1:
            raise ValueError("local_fraction must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticShapeSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = dict(d)
        if "thickness" in d:
            d["thickness"] = tuple(d["thickness"])
        return cls(**d)


def synthetic_cloud(spec: SyntheticShapeSpec, label: int, rng: np.random.Generator):
    """One cloud plus the per-point offset along the sheet normal."""
    jit = lambda: 1.0 + spec.shape_jitter * rng.uniform(-1, 1)  # noqa: E731
    radius, span, width = spec.arc_radius * jit(), spec.arc_span * jit(), spec.sheet_width * jit()
    n = spec.points
    t = rng.uniform(-span / 2, span / 2, n)
    s = rng.uniform(-width / 2, width / 2, n)
    thick = np.full(n, spec.thickness[0])
    if label == 1:
        if spec.localized:
            thick[t > span / 2 - spec.local_fraction * span] = spec.thickness[1]
        else:
            thick[:] = spec.thickness[1]
    offset = rng.normal(0.0, 1.0, n) * thick * spec.arc_radius / 2
    rad = radius + offset
    pts = np.stack([rad * np.cos(t), rad * np.sin(t), s], axis=1)
    pts += spec.noise * rng.standard_normal(pts.shape)
    rot_seed = int(rng.integers(2**63))  # drawn either way so rotate on/off pairs the clouds
    if spec.rotate:
        pts = pts @ random_rotation(rot_seed).T
    return PointCloud(pts), offset


def generate_synthetic_dataset(spec: SyntheticShapeSpec, count_per_class: int, seed: int, split: str = "train") -> Dataset:
    spec.validate()
    if count_per_class < 1:
        raise ValueError("count_per_class must be positive")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count_per_class):
        for label in (0, 1):
            cloud, _ = synthetic_cloud(spec, label, rng)
            samples.append(Sample(cloud, label, split, f"{split}_{len(samples):04d}"))
    return Dataset(samples)


def synthetic_splits(
    spec: SyntheticShapeSpec, train_per_class: int, test_per_class: int, seed: int, test_rotate: bool = True
) -> Dataset:
    """Train and test splits from independent named sub-seeds; test clouds optionally rotated."""
    train_ds = generate_synthetic_dataset(spec, train_per_class, subseed(seed, "dataset", "train"), "train")
    test_spec = replace(spec, rotate=spec.rotate or test_rotate)
    test_ds = generate_synthetic_dataset(test_spec, test_per_class, subseed(seed, "dataset", "test"), "test")
    return Dataset(train_ds.samples + test_ds.samples)


def write_dataset(dataset: Dataset, directory) -> Path:
    """Write clouds as text files plus ``manifest.json`` (list of {path, label, split})."""
    directory = Path(directory)
    (directory / "clouds").mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, s in enumerate(dataset.samples):
        rel = Path("clouds") / f"{s.name or f'sample_{i:04d}'}.xyz"
        save_point_cloud(s.cloud, directory / rel, header=f"label {s.label} split {s.split}")
        manifest.append({"path": str(rel), "label": int(s.label), "split": s.split})
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_manifest(path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such manifest: {path}")
    entries = json.loads(path.read_text())
    samples = []
    for e in entries:
        unknown = set(e) - {"path", "label", "split"}
        if unknown:
            raise ValueError(f"unknown manifest keys {sorted(unknown)}")
        p = Path(e["path"])
        p = p if p.is_absolute() else path.parent / p
        samples.append(Sample(load_point_cloud(p), int(e["label"]), e.get("split", "train"), p.stem))
    ds = Dataset(samples)
    ds.validate()
    return ds


# -- metrics ----------------------------------------------------------------------------


def confusion_metrics(tp: int, fn: int, tn: int, fp: int) -> dict:
    total = tp + fn + tn + fp
    return {
        "accuracy": (tp + tn) / total if total else float("nan"),
        "sensitivity": tp / (tp + fn) if tp + fn else float("nan"),
        "specificity": tn / (tn + fp) if tn + fp else float("nan"),
        "confusion": {"tp": tp, "fn": fn, "tn": tn, "fp": fp},
    }


def metrics_from_predictions(labels, predictions) -> dict:
    y, p = np.asarray(labels), np.asarray(predictions)
    return confusion_metrics(
        int(np.sum((y == 1) & (p == 1))),
        int(np.sum((y == 1) & (p == 0))),
        int(np.sum((y == 0) & (p == 0))),
        int(np.sum((y == 0) & (p == 1))),
    )


# -- loops --------------------------------------------------------------------------------


def _eval_clouds(samples, points, seed):
    out = []
    for i, s in enumerate(samples):
        if points is None or points >= s.cloud.n:
            out.append(s.cloud)
        else:
            out.append(augment_downsample(s.cloud, points, subseed(seed, "eval-subsample", i)))
    return out


def _predict_view(model, samples, seed, points, batch):
    clouds = _eval_clouds(samples, points, seed)
    logits, feats = [], []
    for start in range(0, len(clouds), batch):
        chunk = clouds[start : start + batch]
        seeds = [subseed(seed, "eval-attention", start + i) for i in range(len(chunk))]
        res = forward_batch(model, chunk, seeds, "eval")
        logits.append(res.logits)
        feats.append(res.features)
    return np.concatenate(logits), np.concatenate(feats)


def predict(model: Model, samples, seed: int = 0, points: int | None = 512, batch: int = 32, views: int = 1):
    """Eval-mode logits and features for a list of samples.

    With ``views > 1`` both are averaged over independent subsamples of each
    cloud; view 0 is the single-view result for the same seed.
    """
    if views < 1:
        raise ValueError("views must be at least 1")
    logits, feats = _predict_view(model, samples, seed, points, batch)
    for v in range(1, views):
        lv, fv = _predict_view(model, samples, subseed(seed, "view", v), points, batch)
        logits, feats = logits + lv, feats + fv
    return logits / views, feats / views


def recalibrate_batchnorm(model: Model, samples, seed: int = 0, points: int | None = 512) -> Model:
    """Copy of ``model`` whose running stats are the pooled statistics of ``samples``.

    Samples go through eval-time preprocessing (fixed subsample, top-k attention),
    so the stored statistics match what evaluation feeds the network.
    """
    out = model.copy()
    clouds = _eval_clouds(samples, points, seed)
    seeds = [subseed(seed, "eval-attention", i) for i in range(len(clouds))]
    forward_batch(out, clouds, seeds, "train", attention_mode="eval", bn_momentum=0.0)
    return out


def evaluate(model: Model, samples, seed: int = 0, points: int | None = 512, views: int = 1) -> dict:
    """Accuracy, sensitivity (class 1 positive), specificity and confusion counts."""
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    logits, _ = predict(model, samples, seed, points, views=views)
    return metrics_from_predictions([s.label for s in samples], logits.argmax(axis=1))


def train(samples, model_config: ModelConfig, train_config: TrainConfig, model: Model | None = None, eval_samples=None):
    """Minibatch Adam on mean cross-entropy. Returns (model, per-epoch metric rows)."""
    if not samples:
        raise ValueError("empty training split")
    tc = train_config
    tc.validate(len(samples), min(s.cloud.n for s in samples))
    model = init_model(model_config, subseed(tc.seed, "init")) if model is None else model.copy()
    state = AdamState()
    history = []
    n = len(samples)
    for epoch in range(tc.epochs):
        order = np.random.default_rng(subseed(tc.seed, "shuffle", epoch)).permutation(n)
        loss_sum, labels, preds = 0.0, [], []
        for start in range(0, n, tc.batch_size):
            batch = order[start : start + tc.batch_size]
            clouds = [
                augment_downsample(samples[i].cloud, tc.augment_points, subseed(tc.seed, "augment", epoch, int(i)))
                for i in batch
            ]
            seeds = [subseed(tc.seed, "attention", epoch, int(i)) for i in batch]
            y = [samples[i].label for i in batch]
            res = forward_batch(model, clouds, seeds, "train", record=True)
            if not np.all(np.isfinite(res.logits)):
                raise TrainingError(f"non-finite logits at epoch {epoch}, samples {batch.tolist()}")
            losses = [cross_entropy_loss(z, lab) for z, lab in zip(res.logits, y)]
            grads = backward(res, lambda z: torch_cross_entropy(z, y))
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"non-finite gradient at epoch {epoch}")
            new_params, state = adam_step(model.params, grads, state, tc)
            model.params = new_params
            loss_sum += float(np.sum(losses))
            labels += y
            preds += res.logits.argmax(axis=1).tolist()
        row = {"epoch": epoch, "loss": loss_sum / n, **_flat(metrics_from_predictions(labels, preds))}
        if eval_samples:
            probe = recalibrate_batchnorm(model, samples, subseed(tc.seed, "calibrate"), tc.eval_points) if tc.recalibrate_bn else model
            ev = evaluate(probe, eval_samples, subseed(tc.seed, "eval"), tc.eval_points, tc.eval_views)
            row.update({f"test_{k}": v for k, v in _flat(ev).items()})
        history.append(row)
        logger.info("epoch %d loss %.4f acc %.3f", epoch, row["loss"], row["accuracy"])
    if tc.recalibrate_bn:
        model = recalibrate_batchnorm(model, samples, subseed(tc.seed, "calibrate"), tc.eval_points)
    return model, history


def run_synthetic_experiment(
    model_config: ModelConfig,
    train_config: TrainConfig,
    spec: SyntheticShapeSpec | None = None,
    train_per_class: int = 15,
    test_per_class: int = 10,
    test_rotate: bool = True,
) -> dict:
    """Generate, train and evaluate with everything seeded from ``train_config.seed``."""
    start = time.perf_counter()
    seed = train_config.seed
    ds = synthetic_splits(spec or SyntheticShapeSpec(), train_per_class, test_per_class, seed, test_rotate)
    model, history = train(ds.split("train"), model_config, train_config)
    test = ds.split("test")
    metrics = evaluate(model, test, subseed(seed, "eval"), train_config.eval_points, train_config.eval_views)
    return {
        "model": model,
        "history": history,
        "test": metrics,
        "test_samples": test,
        "seconds": time.perf_counter() - start,
    }


def _flat(metrics: dict) -> dict:
    return {k: v for k, v in metrics.items() if k != "confusion"}


METRIC_COLUMNS = ["epoch", "loss", "accuracy", "sensitivity", "specificity"]


def write_metrics(history: list, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "metrics.json").write_text(json.dumps(history, indent=1))
    cols = METRIC_COLUMNS + sorted({k for row in history for k in row} - set(METRIC_COLUMNS))
    with (directory / "metrics.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in history:
            w.writerow(row)


def config_dict(model_config: ModelConfig, train_config: TrainConfig) -> dict:
    return {"model": model_config.to_dict(), "train": asdict(train_config)}
