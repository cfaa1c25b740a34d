"""Command-line entry point: ``rotinv <subcommand> [flags]``.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import spherical as sp
from .geometry import PointCloud, PointCloudError, convex_hull_vertices, random_rotation, rotate_cloud
from .network import (
    ModelConfig,
    build_sphere_responses,
    format_parameter_table,
    forward,
    grid_rotations,
    hull_downsample,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    Dataset,
    SyntheticShapeSpec,
    TrainConfig,
    evaluate,
    generate_synthetic_dataset,
    load_manifest,
    predict,
    subseed,
    synthetic_splits,
    train,
    write_dataset,
    write_metrics,
)

EQUIVARIANCE_TOL = 1e-9
INVARIANCE_TOL = 1e-10


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a run needs; ``seed`` feeds all named sub-seeds."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticShapeSpec = field(default_factory=SyntheticShapeSpec)
    train_per_class: int = 15
    test_per_class: int = 10
    test_rotate: bool = True
    manifest: str | None = None
    output_dir: str = "runs/default"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "model" in d:
                d["model"] = ModelConfig.from_dict(d["model"])
            if "train" in d:
                d["train"] = TrainConfig.from_dict(d["train"])
            if "data" in d:
                d["data"] = SyntheticShapeSpec.from_dict(d["data"])
            cfg = cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        cfg.train.seed = cfg.seed
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["data"]["thickness"] = list(self.data.thickness)
        return d


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(doc)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """Flags win over the config file."""
    d = cfg.to_dict()
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        d["output_dir"] = args.out
    if getattr(args, "manifest", None) is not None:
        d["manifest"] = args.manifest
    if getattr(args, "epochs", None) is not None:
        d["train"]["epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        d["train"]["learning_rate"] = args.lr
    if getattr(args, "invariant_attention", False):
        d["model"]["invariant_attention"] = True
    if getattr(args, "attention", None) is not None:
        d["model"]["attention"] = args.attention
    if getattr(args, "localized", False):
        d["data"]["localized"] = True
    return RunConfig.from_dict(d)


def write_resolved_config(cfg: RunConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))


# -- verification suites ---------------------------------------------------------------


def _random_s2(rng, b, channels):
    spec = (rng.standard_normal((channels, b, 2 * b - 1)) + 1j * rng.standard_normal((channels, b, 2 * b - 1))) / b
    return sp.sht_inverse(spec * _s2_mask(b))


def _s2_mask(b):
    return np.abs(np.arange(-(b - 1), b))[None, :] <= np.arange(b)[:, None]


def _random_so3(rng, b, channels):
    shape = (channels, b, 2 * b - 1, 2 * b - 1)
    spec = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / b
    m = np.abs(np.arange(-(b - 1), b))
    mask = (m[None, :, None] <= np.arange(b)[:, None, None]) & (m[None, None, :] <= np.arange(b)[:, None, None])
    return sp.so3_inverse(spec * mask)


def equivariance_report(bandwidth: int = 2, trials: int = 20, seed: int = 0, random_rotations: int = 0) -> dict:
    """Conv-then-rotate vs rotate-then-conv for both layer types, plus the integrated layer."""
    b = bandwidth
    rng = np.random.default_rng(seed)
    rots = list(sp.grid_rotations(b)) + [random_rotation(subseed(seed, "rotation", i)) for i in range(random_rotations)]
    err_s2 = err_so3 = err_inv = 0.0
    for _ in range(trials):
        f = _random_s2(rng, b, 2)
        w = rng.standard_normal((2, 3, 2 * b, 2 * b))
        h = _random_so3(rng, b, 2)
        v = rng.standard_normal((2, 3, 2 * b, 2 * b, 2 * b))
        conv_f = sp.s2_convolve(f, w)
        conv_h = sp.so3_convolve(h, v)
        inv_f, inv_h = sp.so3_integrate(conv_f), sp.so3_integrate(conv_h)
        for R in rots:
            a = sp.s2_convolve(sp.rotate_s2(f, R), w)
            err_s2 = max(err_s2, float(np.max(np.abs(a - sp.left_translate_so3(conv_f, R)))))
            c = sp.so3_convolve(sp.left_translate_so3(h, R), v)
            err_so3 = max(err_so3, float(np.max(np.abs(c - sp.left_translate_so3(conv_h, R)))))
            err_inv = max(err_inv, float(np.max(np.abs(sp.so3_integrate(a) - inv_f))), float(np.max(np.abs(sp.so3_integrate(c) - inv_h))))
    return {
        "bandwidth": b,
        "trials": trials,
        "rotations": len(rots),
        "s2_conv_max_error": err_s2,
        "so3_conv_max_error": err_so3,
        "invariant_max_error": err_inv,
        "passed": bool(max(err_s2, err_so3) <= EQUIVARIANCE_TOL and err_inv <= INVARIANCE_TOL),
    }


def invariance_report(model, clouds, haar_rotations: int = 100, seed: int = 0) -> dict:
    """Eval-mode label and feature stability under grid and random rotations."""
    grid = grid_rotations(model.config)
    grid_mismatch, grid_dev, agree, total, max_rel = 0, 0.0, 0, 0, 0.0
    for ci, cloud in enumerate(clouds):
        logits0, f0, _ = forward(model, cloud, 0, "eval")
        label0 = int(np.argmax(logits0))
        scale = max(float(np.max(np.abs(f0))), 1e-12)
        for R in grid:
            logits, f, _ = forward(model, rotate_cloud(cloud, R), 0, "eval")
            grid_mismatch += int(np.argmax(logits)) != label0
            grid_dev = max(grid_dev, float(np.max(np.abs(f - f0))) / scale)
        for k in range(haar_rotations):
            R = random_rotation(subseed(seed, "haar", ci, k))
            logits, f, _ = forward(model, rotate_cloud(cloud, R), 0, "eval")
            agree += int(np.argmax(logits)) == label0
            total += 1
            max_rel = max(max_rel, float(np.max(np.abs(f - f0))) / scale)
    agreement = agree / total if total else 1.0
    return {
        "samples": len(clouds),
        "grid_rotations": len(grid),
        "grid_label_mismatches": grid_mismatch,
        "grid_max_relative_feature_deviation": grid_dev,
        "haar_rotations_per_sample": haar_rotations,
        "haar_label_agreement": agreement,
        "haar_max_relative_feature_deviation": max_rel,
        "passed": bool(grid_mismatch == 0 and agreement >= 0.99),
    }


def _ellipsoid_surface(rng, n):
    v = rng.standard_normal((n, 3))
    axes = rng.uniform(0.5, 1.5, 3)
    return v / np.linalg.norm(v, axis=1, keepdims=True) * axes


def hull_report(clouds: int = 100, points: int = 32, k: int = 8, bandwidth: int = 4, rho: float = 0.25, seed: int = 0) -> dict:
    """Hull membership of hull_downsample selections against the brute-force oracle."""
    rng = np.random.default_rng(seed)
    convex_ok = convex_total = argmax_ok = general_ok = general_total = 0
    for _ in range(clouds):
        Y = _ellipsoid_surface(rng, points)
        r = rho * float(np.max(np.linalg.norm(Y - Y.mean(0), axis=1)))
        idx, _ = hull_downsample(build_sphere_responses(Y, r, bandwidth), k)
        hull = convex_hull_vertices(PointCloud(Y), candidates=idx)
        convex_ok += sum(int(i) in hull for i in idx)
        convex_total += len(idx)
    for _ in range(clouds):
        Y = rng.standard_normal((points, 3))
        r = rho * float(np.max(np.linalg.norm(Y - Y.mean(0), axis=1)))
        idx, _ = hull_downsample(build_sphere_responses(Y, r, bandwidth), k)
        hull = convex_hull_vertices(PointCloud(Y), candidates=idx)
        argmax_ok += int(idx[0]) in hull
        general_ok += sum(int(i) in hull for i in idx)
        general_total += len(idx)
    return {
        "clouds": clouds,
        "points": points,
        "k": k,
        "convex_position_fraction": convex_ok / convex_total,
        "general_argmax_fraction": argmax_ok / clouds,
        "general_selected_fraction": general_ok / general_total,
        "passed": bool(convex_ok == convex_total and argmax_ok == clouds),
    }


# -- commands ---------------------------------------------------------------------------------


def _datasets(cfg: RunConfig) -> Dataset:
    if cfg.manifest:
        return load_manifest(cfg.manifest)
    return synthetic_splits(cfg.data, cfg.train_per_class, cfg.test_per_class, cfg.seed, cfg.test_rotate)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1))


def cmd_generate(args, cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    ds = _datasets(RunConfig(**{**cfg.__dict__, "manifest": None}))
    path = write_dataset(ds, out)
    write_resolved_config(cfg, out)
    _emit({"manifest": str(path), "samples": len(ds.samples)})
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    ds = _datasets(cfg)
    ds.validate()
    test = ds.split("test")
    model, history = train(ds.split("train"), cfg.model, cfg.train, eval_samples=test or None)
    write_resolved_config(cfg, out)
    save_checkpoint(model, out / "checkpoint.json")
    write_metrics(history, out)
    summary = {"checkpoint": str(out / "checkpoint.json"), "final": history[-1] if history else None}
    if test:
        summary["test"] = evaluate(model, test, subseed(cfg.seed, "eval"), cfg.train.eval_points, cfg.train.eval_views)
    _emit(summary)
    return 0


def _load_model(args):
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    return load_checkpoint(args.checkpoint)


def cmd_eval(args, cfg: RunConfig) -> int:
    model = _load_model(args)
    samples = _datasets(cfg).split(args.split)
    _emit(evaluate(model, samples, subseed(cfg.seed, "eval"), cfg.train.eval_points, cfg.train.eval_views))
    return 0


def cmd_extract(args, cfg: RunConfig) -> int:
    model = _load_model(args)
    samples = _datasets(cfg).samples
    logits, feats = predict(model, samples, subseed(cfg.seed, "eval"), cfg.train.eval_points, views=cfg.train.eval_views)
    out = Path(args.features or Path(cfg.output_dir) / "features.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "split", "label", "prediction"] + [f"s{i}" for i in range(feats.shape[1])])
        for s, z, f in zip(samples, logits, feats):
            w.writerow([s.name, s.split, s.label, int(np.argmax(z))] + [repr(float(x)) for x in f])
    _emit({"features": str(out), "samples": len(samples)})
    return 0


def cmd_verify_equivariance(args, cfg: RunConfig) -> int:
    rep = equivariance_report(args.bandwidth, args.trials, cfg.seed, args.random_rotations)
    _emit(rep)
    print("PASS" if rep["passed"] else "FAIL", file=sys.stderr)
    return 0 if rep["passed"] else 1


def cmd_verify_invariance(args, cfg: RunConfig) -> int:
    if args.checkpoint:
        model = _load_model(args)
    else:
        model = init_model(ModelConfig(**{**cfg.model.to_dict(), "invariant_attention": True}), subseed(cfg.seed, "init"))
    spec = SyntheticShapeSpec(**{**asdict(cfg.data), "points": max(cfg.data.points, model.config.attention_points + 1)})
    clouds = [s.cloud for s in generate_synthetic_dataset(spec, args.samples, subseed(cfg.seed, "verify")).samples]
    rep = invariance_report(model, clouds, args.haar, cfg.seed)
    rep["invariant_attention"] = model.config.invariant_attention
    _emit(rep)
    print("PASS" if rep["passed"] else "FAIL", file=sys.stderr)
    return 0 if rep["passed"] else 1


def cmd_hull_check(args, cfg: RunConfig) -> int:
    rep = hull_report(args.clouds, args.points, cfg.model.hull_points, cfg.model.s2_bandwidth_in, cfg.model.radius_fraction, cfg.seed)
    _emit(rep)
    print("PASS" if rep["passed"] else "FAIL", file=sys.stderr)
    return 0 if rep["passed"] else 1


def cmd_param_count(args, cfg: RunConfig) -> int:
    print(format_parameter_table(cfg.model))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "extract": cmd_extract,
    "verify-equivariance": cmd_verify_equivariance,
    "verify-invariance": cmd_verify_invariance,
    "hull-check": cmd_hull_check,
    "param-count": cmd_param_count,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rotinv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp_, out=True):
        sp_.add_argument("--config", help="run config JSON (unknown keys rejected)")
        sp_.add_argument("--seed", type=int, help="master seed (overrides config)")
        if out:
            sp_.add_argument("--out", help="output directory (overrides config)")
        return sp_

    g = common(sub.add_parser("generate", help="write a synthetic dataset and manifest"))
    g.add_argument("--localized", action="store_true", help="thin only a sub-arc")

    t = common(sub.add_parser("train", help="train and write checkpoint + metrics"))
    t.add_argument("--manifest")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--invariant-attention", action="store_true")
    t.add_argument("--attention", choices=["learned", "uniform"])
    t.add_argument("--localized", action="store_true")

    e = common(sub.add_parser("eval", help="print metrics JSON for one split"), out=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest")
    e.add_argument("--split", default="test")

    x = common(sub.add_parser("extract", help="write per-sample s_X features as CSV"))
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--manifest")
    x.add_argument("--features", help="CSV path (default <out>/features.csv)")

    v = common(sub.add_parser("verify-equivariance", help="convolution equivariance suite"), out=False)
    v.add_argument("--bandwidth", type=int, default=2)
    v.add_argument("--trials", type=int, default=20)
    v.add_argument("--random-rotations", type=int, default=0)

    i = common(sub.add_parser("verify-invariance", help="end-to-end invariance suite"), out=False)
    i.add_argument("--checkpoint")
    i.add_argument("--samples", type=int, default=2, help="clouds per class")
    i.add_argument("--haar", type=int, default=100, help="random rotations per cloud")

    h = common(sub.add_parser("hull-check", help="hull membership of selections"), out=False)
    h.add_argument("--clouds", type=int, default=100)
    h.add_argument("--points", type=int, default=32)

    common(sub.add_parser("param-count", help="itemized parameter table"), out=False)
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2
    try:
        cfg = apply_overrides(load_run_config(args.config), args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, PointCloudError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
