"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run directly (``python3 tests/test_acceptance.py``) or through pytest; lines
are printed with output capture disabled so they appear in ``pytest -v``.
"""

import json
import time

import numpy as np
import pytest

from rotinv import spherical as sp
from rotinv.cli import equivariance_report, hull_report, invariance_report
from rotinv.geometry import random_rotation
from rotinv.network import (
    REFERENCE_PARAMETER_COUNT,
    ModelConfig,
    backward,
    format_parameter_table,
    forward_batch,
    init_model,
    parameter_count,
    save_checkpoint,
    sphere_response_vectors,
    torch_cross_entropy,
)
from rotinv.training import SyntheticShapeSpec, TrainConfig, _eval_clouds, run_synthetic_experiment, subseed

from oracles import direct_s2_conv, direct_so3_conv, mask_s2, mask_so3, random_complex, sh_eval, so3_eval

SEEDS = (0, 1, 2)


@pytest.fixture
def emit(capsys):
    def _emit(criterion, passed, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")

    return _emit


def real_s2_spectrum(rng, b):
    """Spectrum of a real bandlimited function: s_l,-m = (-1)^m conj(s_lm)."""
    s = random_complex(rng, (b, 2 * b - 1)) * mask_s2(b)
    m = np.arange(-(b - 1), b)
    return (s + ((-1.0) ** m) * s[:, ::-1].conj()) / 2


def real_so3_spectrum(rng, b):
    s = random_complex(rng, (b, 2 * b - 1, 2 * b - 1)) * mask_so3(b)
    m = np.arange(-(b - 1), b)
    sign = (-1.0) ** (m[:, None] - m[None, :])
    return (s + sign * s[:, ::-1, ::-1].conj()) / 2


# -- 1 ----------------------------------------------------------------------------------


def test_c01_transform_round_trips(emit):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    err = 0.0
    for b in (1, 2, 4, 8):
        for _ in range(5):
            spec = random_complex(rng, (b, 2 * b - 1)) * mask_s2(b)
            f = sh_eval(spec, sp.build_s2_grid(b).directions())
            err = max(err, np.abs(sp.sht_forward(f) - spec).max(), np.abs(sp.sht_inverse(spec, real=False) - f).max())
            sspec = random_complex(rng, (b, 2 * b - 1, 2 * b - 1)) * mask_so3(b)
            g = sp.so3_inverse(sspec, real=False)
            err = max(err, np.abs(sp.so3_forward(g) - sspec).max())
            fr = sp.so3_inverse(real_so3_spectrum(rng, b))
            err = max(err, np.abs(sp.so3_inverse(sp.so3_forward(fr)) - fr).max())
    quad = 0.0
    for b in (1, 2, 4, 8):
        quad = max(quad, abs(sp.s2_integrate(np.ones((2 * b, 2 * b))) - 4 * np.pi), abs(sp.so3_integrate(np.ones((2 * b,) * 3)) - 1))
    secs = time.perf_counter() - start
    ok = err <= 1e-10 and quad <= 1e-10 and secs < 10
    emit(1, ok, f"round-trip max error {err:.2e}, quadrature error {quad:.2e}, {secs:.2f} s")
    assert ok


# -- 2 ----------------------------------------------------------------------------------


def test_c02_convolution_oracle(emit):
    rng = np.random.default_rng(2)
    err = 0.0
    cases = [(2, 2), (3, 3), (4, 4), (4, 2), (3, 2)]
    for i in range(20):
        b, b_out = cases[i % len(cases)]
        # signals bandlimited to b_out, so the truncated degrees are empty
        f_spec, w_spec = real_s2_spectrum(rng, b_out), real_s2_spectrum(rng, b)
        grid = sp.build_s2_grid(b).directions()
        f, w = sh_eval(f_spec, grid).real, sh_eval(w_spec, grid).real
        got = sp.s2_convolve(f[None], w[None, None], b_out)[0]
        err = max(err, np.abs(got - direct_s2_conv(f, w_spec, b_out)).max())

        bs, bs_out = [(2, 2), (2, 1), (3, 2), (3, 3)][i % 4]
        g_spec, v_spec = real_so3_spectrum(rng, bs_out), real_so3_spectrum(rng, bs)
        rots = sp.build_so3_grid(bs).matrices().reshape(-1, 3, 3)
        g = so3_eval(np.pad(g_spec, [(0, bs - bs_out), (bs - bs_out,) * 2, (bs - bs_out,) * 2]), rots).real
        v = so3_eval(v_spec, rots).real
        g, v = g.reshape((2 * bs,) * 3), v.reshape((2 * bs,) * 3)
        got = sp.so3_convolve(g[None], v[None, None], bs_out)[0]
        err = max(err, np.abs(got - direct_so3_conv(g, v_spec, bs_out)).max())
    ok = err <= 1e-9
    emit(2, ok, f"20 S2 + 20 SO(3) pairs vs direct quadrature, max error {err:.2e}")
    assert ok


# -- 3 ----------------------------------------------------------------------------------


def test_c03_equivariance_suite(emit):
    rep = equivariance_report(bandwidth=2, trials=20, seed=3)
    emit(
        3,
        rep["passed"],
        f"{rep['rotations']} grid rotations x {rep['trials']} inputs: S2 conv {rep['s2_conv_max_error']:.2e}, "
        f"SO(3) conv {rep['so3_conv_max_error']:.2e}, invariant layer {rep['invariant_max_error']:.2e}",
    )
    assert rep["passed"]


# -- 4 ----------------------------------------------------------------------------------


def test_c04_response_rotation(emit):
    rng = np.random.default_rng(4)
    err = 0.0
    for c in range(100):
        Y = rng.normal(size=(24, 3)) * rng.uniform(0.5, 2, 3)
        r = 0.25 * np.max(np.linalg.norm(Y - Y.mean(0), axis=1))
        u = rng.normal(size=(8, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        S, _ = sphere_response_vectors(Y, r)
        for k in range(20):
            R = random_rotation(subseed(4, c, k))
            YR = Y @ R.T
            SR, _ = sphere_response_vectors(YR, r)
            # direct summation on both sides, plus the package's linear form
            for i in (0, 7, 23):
                d, dR = Y - Y[i], YR - YR[i]
                lhs = np.where(np.linalg.norm(dR, axis=1) > r, 1.0, 0.0) @ (dR @ (u @ R.T).T)
                rhs = np.where(np.linalg.norm(d, axis=1) > r, 1.0, 0.0) @ (d @ u.T)
                err = max(err, np.abs(lhs - rhs).max(), np.abs(SR[i] @ (u @ R.T).T - S[i] @ u.T).max())
    ok = err <= 1e-10
    emit(4, ok, f"100 clouds x 20 rotations, max |f^RY(Ru) - f^Y(u)| = {err:.2e}")
    assert ok


# -- 5 ----------------------------------------------------------------------------------


def test_c05_hull_membership(emit):
    rep = hull_report(clouds=100, points=32, k=8, bandwidth=4, rho=0.25, seed=5)
    emit(
        5,
        rep["passed"],
        f"convex-position selections on hull {rep['convex_position_fraction']:.1%}, general argmax on hull "
        f"{rep['general_argmax_fraction']:.1%}, general selected-point hull fraction {rep['general_selected_fraction']:.1%}",
    )
    assert rep["passed"]


# -- 6 ----------------------------------------------------------------------------------


def _loss(model, clouds, seeds, labels):
    z = forward_batch(model, clouds, seeds, "train", update_running=False).logits
    zmax = z.max(axis=1, keepdims=True)
    return float(np.mean(zmax[:, 0] + np.log(np.exp(z - zmax).sum(1)) - z[np.arange(len(labels)), labels]))


def test_c06_gradients(emit):
    from rotinv.geometry import PointCloud

    # the sphere signal is pure degree 1, so the S2 output must keep bandwidth 2
    cfg = ModelConfig(
        s2_bandwidth_in=2,
        s2_bandwidth_out=2,
        so3_bandwidth_in=2,
        so3_bandwidth_out=1,
        channels=(1, 2, 2),
        hull_points=2,
        attention_points=8,
    )
    m = init_model(cfg, 6)
    rng = np.random.default_rng(6)
    # a fresh init has zero-mean batchnorm output, which makes the head gradient vanish
    for k in m.params:
        if k.startswith("bn"):
            m.params[k] = m.params[k] + 0.3 * rng.normal(size=m.params[k].shape)
    clouds = [PointCloud(rng.normal(size=(24, 3)) * [1, 0.6, 0.3]) for _ in range(3)]
    seeds, labels = [1, 2, 3], [0, 1, 1]
    grads = backward(forward_batch(m, clouds, seeds, "train", record=True, update_running=False), lambda z: torch_cross_entropy(z, labels))
    h, worst, name_worst, nonzero = 1e-4, 0.0, "", True
    for name, p in m.params.items():
        fd = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            mp, mm = m.copy(), m.copy()
            mp.params[name][i] += h
            mm.params[name][i] -= h
            fd[i] = (_loss(mp, clouds, seeds, labels) - _loss(mm, clouds, seeds, labels)) / (2 * h)
        denom = np.linalg.norm(fd) + np.linalg.norm(grads[name])
        rel = np.linalg.norm(fd - grads[name]) / denom if denom else 0.0
        nonzero = nonzero and np.linalg.norm(fd) > 1e-6
        if rel >= worst:
            worst, name_worst = rel, name
    ok = worst <= 1e-4 and nonzero
    emit(6, ok, f"{len(m.params)} parameter tensors, all with nonzero gradient: {nonzero}, worst relative error {worst:.2e} ({name_worst})")
    assert ok


# -- 7, 8 -----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def classification_runs():
    cfg = ModelConfig(invariant_attention=True)
    return [run_synthetic_experiment(cfg, TrainConfig(seed=s), SyntheticShapeSpec()) for s in SEEDS]


def test_c07_end_to_end_invariance(emit, classification_runs):
    run = classification_runs[0]
    clouds = _eval_clouds(run["test_samples"], TrainConfig().eval_points, subseed(0, "eval"))
    rep = invariance_report(run["model"], clouds, haar_rotations=100, seed=7)
    ok = rep["grid_label_mismatches"] == 0 and rep["haar_label_agreement"] >= 0.99
    target = "met" if rep["haar_max_relative_feature_deviation"] <= 0.05 else "not met"
    emit(
        7,
        ok,
        f"grid label mismatches {rep['grid_label_mismatches']} (max feature dev {rep['grid_max_relative_feature_deviation']:.1e}), "
        f"Haar label agreement {rep['haar_label_agreement']:.2%}, max relative s_X deviation "
        f"{rep['haar_max_relative_feature_deviation']:.2%} (5% target {target})",
    )
    assert ok


def test_c08_synthetic_classification(emit, classification_runs):
    accs = [r["test"]["accuracy"] for r in classification_runs]
    secs = sum(r["seconds"] for r in classification_runs)
    ok = np.mean(accs) >= 0.90 and secs <= 15 * 60
    emit(8, ok, f"rotated-test accuracy per seed {[round(a, 3) for a in accs]}, mean {np.mean(accs):.3f}, {secs:.0f} s total")
    assert ok


# -- 9 ----------------------------------------------------------------------------------------


def test_c09_attention_ablation(emit):
    spec = SyntheticShapeSpec(localized=True)
    acc = {}
    for mode in ("learned", "uniform"):
        cfg = ModelConfig(attention=mode)
        acc[mode] = [
            run_synthetic_experiment(cfg, TrainConfig(seed=s), spec, test_rotate=False)["test"]["accuracy"] for s in SEEDS
        ]
    gap = np.mean(acc["learned"]) - np.mean(acc["uniform"])
    ok = gap >= 0.10
    emit(
        9,
        ok,
        f"localized thinning: attention {np.mean(acc['learned']):.3f} {acc['learned']}, uniform "
        f"{np.mean(acc['uniform']):.3f} {acc['uniform']}, gap {100 * gap:+.1f} pp (need >= +10)",
    )
    assert ok


# -- 10 ----------------------------------------------------------------------------------------


def test_c10_parameter_accounting(emit):
    total, rows = parameter_count(ModelConfig())
    table = format_parameter_table(ModelConfig())
    ok = 1.5e3 <= total <= 3.5e3 and str(REFERENCE_PARAMETER_COUNT) in table and len(rows) == 10
    emit(10, ok, f"total {total}, reference {REFERENCE_PARAMETER_COUNT}, gap {total - REFERENCE_PARAMETER_COUNT:+d}")
    assert ok


# -- 11 ----------------------------------------------------------------------------------------


def test_c11_reproducibility(emit, tmp_path):
    cfg = ModelConfig(invariant_attention=True)
    texts, traces = [], []
    for k in range(2):
        run = run_synthetic_experiment(cfg, TrainConfig(seed=11, epochs=5), SyntheticShapeSpec(), 6, 3)
        save_checkpoint(run["model"], tmp_path / f"ck{k}.json")
        texts.append((tmp_path / f"ck{k}.json").read_bytes())
        traces.append(json.dumps(run["history"]))
    ok = texts[0] == texts[1] and traces[0] == traces[1]
    emit(11, ok, f"checkpoints identical: {texts[0] == texts[1]}, metric traces identical: {traces[0] == traces[1]}")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
