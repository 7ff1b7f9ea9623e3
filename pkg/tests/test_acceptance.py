"""Acceptance criteria, one test per criterion, each printing a verdict line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines.
The heavyweight criteria share one desk-scale pipeline run (see the desk_run
fixture in conftest).
"""

from __future__ import annotations

import functools
import sys
import time

import numpy as np
import pytest

from conftest import max_grad_rel_error
from satp import autodiff as ad
from satp.evaluation import (
    aucoc,
    aucoc_optimal,
    aucoc_random,
    count_parameters,
    cutoff_curve,
    default_grid,
    sas,
    time_per_frame,
)
from satp.optim import ParameterSet
from satp.rng import Rng

GRID = default_grid()


def criterion(number: int, title: str):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"criterion {number:2d} [{title}]: FAIL", file=sys.stderr)
                raise
            print(f"criterion {number:2d} [{title}]: PASS", file=sys.stderr)
            return result
        return wrapper
    return decorate


# ---------------------------------------------------------------------------
# 1. autodiff correctness
# ---------------------------------------------------------------------------


@criterion(1, "autodiff gradients match finite differences")
def test_c1_gradcheck_every_op() -> None:
    started = time.perf_counter()
    rng = Rng(2024)
    tol = 1e-5
    instances = 20

    def shapes2():
        return (rng.randint(3) + 2, rng.randint(4) + 2)

    def check(name, builder):
        for _ in range(instances):
            fn, arrays = builder()
            err = max_grad_rel_error(fn, arrays)
            assert err < tol, f"{name}: relative error {err:.2e}"

    def probe(shape):
        return ad.constant(rng.normal(size=shape))

    def reduce_with_probe(t, p):
        return ad.reduce_sum(ad.mul(t, p))

    def b_matmul():
        n, k = shapes2()
        m = rng.randint(3) + 2
        a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
        p = probe((n, m))
        return lambda x, y: reduce_with_probe(ad.matmul(x, y), p), [a, b]

    def b_add_bias():
        n, m = shapes2()
        a, b = rng.normal(size=(n, m)), rng.normal(size=(m,))
        p = probe((n, m))
        return lambda x, y: reduce_with_probe(ad.add(x, y), p), [a, b]

    def b_mul():
        shape = (rng.randint(3) + 2, rng.randint(4) + 2)
        a, b = rng.normal(size=shape), rng.normal(size=shape)
        p = probe(shape)
        return lambda x, y: reduce_with_probe(ad.mul(x, y), p), [a, b]

    def b_sub_neg():
        shape = shapes2()
        a, b = rng.normal(size=shape), rng.normal(size=shape)
        p = probe(shape)
        return lambda x, y: reduce_with_probe(ad.sub(ad.neg(x), y), p), [a, b]

    def b_unary(op, positive=False, away_from_zero=False):
        def build():
            shape = shapes2()
            a = rng.normal(size=shape)
            if positive:
                a = np.abs(a) + 0.5
            if away_from_zero:
                a = a + 0.2 * np.sign(a) + (a == 0) * 0.3
            p = probe(shape)
            return lambda x: reduce_with_probe(op(x), p), [a]
        return build

    def b_softmax():
        shape = shapes2()
        a = rng.normal(size=shape)
        p = probe(shape)
        return lambda x: reduce_with_probe(ad.softmax(x, 1), p), [a]

    def b_conv():
        c_in, c_out, t, n = rng.randint(3) + 2, rng.randint(3) + 2, 6, rng.randint(4) + 2
        k = (rng.randint(2)) * 2 + 3  # 3 or 5
        x, w, b = rng.normal(size=(c_in, t, n)), rng.normal(size=(c_out, c_in, k)), rng.normal(size=(c_out,))
        p = probe((c_out, t, n))
        return lambda xx, ww, bb: reduce_with_probe(ad.conv1d_time(xx, ww, bb), p), [x, w, b]

    def b_batchnorm_train():
        c, t, n = rng.randint(3) + 2, 6, rng.randint(4) + 2
        x = rng.normal(size=(c, t, n))
        gamma = np.abs(rng.normal(size=(c,))) + 0.5
        beta = rng.normal(size=(c,))
        mask = (rng.uniform(size=(t, n)) > 0.25).astype(float)
        p = probe((c, t, n))

        def fn(xx, gg, bb):
            return reduce_with_probe(
                ad.batch_norm(xx, gg, bb, np.zeros(c), np.ones(c), training=True, mask=mask), p)
        return fn, [x, gamma, beta]

    def b_batchnorm_eval():
        c, t, n = rng.randint(3) + 2, 6, rng.randint(4) + 2
        x = rng.normal(size=(c, t, n))
        gamma = np.abs(rng.normal(size=(c,))) + 0.5
        beta = rng.normal(size=(c,))
        rm = rng.normal(size=(c,))
        rv = np.abs(rng.normal(size=(c,))) + 0.5
        p = probe((c, t, n))

        def fn(xx, gg, bb):
            return reduce_with_probe(
                ad.batch_norm(xx, gg, bb, rm, rv, training=False), p)
        return fn, [x, gamma, beta]

    def b_reductions():
        shape = (rng.randint(3) + 2, rng.randint(4) + 2, 3)
        a = rng.normal(size=shape)
        p = probe(shape[1:])
        return (lambda x: ad.add(reduce_with_probe(ad.reduce_mean(x, 0), p),
                                 ad.reduce_sum(x)), [a])

    def b_l2norm():
        shape = (rng.randint(3) + 2, rng.randint(4) + 2, 2)
        a = rng.normal(size=shape) + np.array([1.5, -1.5])  # away from the kink
        p = probe(shape[:2])
        return lambda x: reduce_with_probe(ad.l2_norm(x), p), [a]

    def b_cumsum():
        shape = (3, rng.randint(5) + 2, 2)
        a = rng.normal(size=shape)
        p = probe(shape)
        return lambda x: reduce_with_probe(ad.cumsum(x, 1), p), [a]

    def b_concat_stack_index():
        n, m = shapes2()
        a, b = rng.normal(size=(n, m)), rng.normal(size=(n, m))
        p = probe((n, 2 * m))
        p2 = probe((2, n, m))

        def fn(x, y):
            both = reduce_with_probe(ad.concat([x, y], 1), p)
            st = ad.stack([x, y], 0)
            return ad.add(both, ad.add(reduce_with_probe(st, p2),
                                       ad.reduce_sum(ad.index_axis(st, 0, 0))))
        return fn, [a, b]

    def b_reshape_permute():
        a = rng.normal(size=(2, 3, 4))
        p = probe((4, 6))

        def fn(x):
            return reduce_with_probe(ad.reshape(ad.permute(x, (2, 0, 1)), (4, 6)), p)
        return fn, [a]

    def b_transpose():
        n, m = shapes2()
        a = rng.normal(size=(n, m))
        p = probe((m, n))
        return lambda x: reduce_with_probe(ad.transpose(x), p), [a]

    def b_gru():
        batch, d, h = rng.randint(3) + 1, rng.randint(3) + 2, rng.randint(3) + 2
        arrs = [rng.normal(size=(batch, d)), rng.normal(size=(batch, h)),
                rng.normal(size=(3 * h, d)), rng.normal(size=(3 * h, h)),
                rng.normal(size=(3 * h,)), rng.normal(size=(3 * h,))]
        p = probe((batch, h))
        return lambda *t: reduce_with_probe(ad.gru_step(*t), p), arrs

    def b_lstm():
        batch, d, h = rng.randint(3) + 1, rng.randint(3) + 2, rng.randint(3) + 2
        arrs = [rng.normal(size=(batch, d)), rng.normal(size=(batch, h)),
                rng.normal(size=(batch, h)), rng.normal(size=(4 * h, d)),
                rng.normal(size=(4 * h, h)), rng.normal(size=(4 * h,)), rng.normal(size=(4 * h,))]
        p1, p2 = probe((batch, h)), probe((batch, h))

        def fn(*t):
            hh, cc = ad.lstm_step(*t)
            return ad.add(reduce_with_probe(hh, p1), reduce_with_probe(cc, p2))
        return fn, arrs

    def b_dropout():
        shape = shapes2()
        a = rng.normal(size=shape)
        seed = rng.next_u64()
        p = probe(shape)
        return lambda x: reduce_with_probe(ad.dropout(x, 0.4, Rng(seed)), p), [a]

    checks = [
        ("matmul", b_matmul),
        ("add+bias", b_add_bias),
        ("mul", b_mul),
        ("sub/neg", b_sub_neg),
        ("sigmoid", b_unary(ad.sigmoid)),
        ("tanh", b_unary(ad.tanh)),
        ("relu", b_unary(ad.relu, away_from_zero=True)),
        ("absolute", b_unary(ad.absolute, away_from_zero=True)),
        ("exp", b_unary(ad.exp)),
        ("log", b_unary(ad.log, positive=True)),
        ("softmax", b_softmax),
        ("conv1d_time", b_conv),
        ("batch_norm train", b_batchnorm_train),
        ("batch_norm eval", b_batchnorm_eval),
        ("sum/mean", b_reductions),
        ("l2_norm", b_l2norm),
        ("cumsum", b_cumsum),
        ("concat/stack/index", b_concat_stack_index),
        ("reshape/permute", b_reshape_permute),
        ("transpose", b_transpose),
        ("gru_step", b_gru),
        ("lstm_step", b_lstm),
        ("dropout", b_dropout),
    ]
    for name, builder in checks:
        check(name, builder)
    elapsed = time.perf_counter() - started
    assert elapsed < 60.0, f"gradient checks took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2-4. metric oracles
# ---------------------------------------------------------------------------


@criterion(2, "SAS oracle: perfect, anti-correlated, random band")
def test_c2_sas_oracles() -> None:
    rng = Rng(7)
    errors = np.abs(rng.normal(size=(500,))) ** 2 + 0.01
    assert sas(errors, errors.copy(), GRID) == pytest.approx(1.0, abs=1e-12)
    assert sas(errors, -errors, GRID) < 0.0
    values = []
    perm_rng = np.random.default_rng(11)
    for _ in range(1000):
        values.append(sas(errors, perm_rng.permutation(errors), GRID))
    mean_sas = float(np.mean(values))
    assert -0.05 <= mean_sas <= 0.05, f"random-permutation mean SAS {mean_sas:.4f}"


@criterion(3, "AUCOC oracle: hand example and Monte-Carlo random curve")
def test_c3_aucoc_oracles() -> None:
    grid4 = np.array([0.0, 0.25, 0.5, 0.75])
    errors = [4.0, 1.0, 3.0, 2.0]
    diags = [10.0, 0.0, 5.0, 1.0]
    curve = cutoff_curve(errors, diags, grid4)
    assert np.abs(curve.remaining_mean - np.array([2.5, 2.0, 1.5, 1.0])).max() <= 1e-12
    assert aucoc(curve) == pytest.approx(1.3125, abs=1e-12)
    assert sas(errors, diags, grid4) == pytest.approx(1.0, abs=1e-12)

    rng = np.random.default_rng(3)
    sample = np.abs(rng.normal(size=500)) + 0.05
    n = len(sample)
    removed = np.array([int(np.floor(f * n + 0.5)) for f in GRID])
    draws = 10000
    curves = np.empty((draws, len(GRID)))
    for d in range(draws):
        perm = rng.permutation(sample)
        suffix = np.concatenate([np.cumsum(perm[::-1])[::-1], [0.0]])
        curves[d] = suffix[removed] / (n - removed)
    mc_curve = curves.mean(axis=0)
    flat = sample.mean()
    assert np.abs(mc_curve - flat).max() / flat < 0.01
    assert aucoc_random(sample, GRID) == pytest.approx(flat * (GRID[-1] - GRID[0]))


@criterion(4, "monotone diagnostic transforms leave curves bit-identical")
def test_c4_monotone_transform_invariance() -> None:
    rng = Rng(9)
    errors = np.abs(rng.normal(size=(200,)))
    diags = rng.normal(size=(200,))
    base_curve = cutoff_curve(errors, diags, GRID)
    base_sas = sas(errors, diags, GRID)
    for transform in (np.exp, lambda x: 3.0 * x + 7.0):
        moved = transform(diags)
        curve = cutoff_curve(errors, moved, GRID)
        assert (curve.remaining_mean == base_curve.remaining_mean).all()
        assert sas(errors, moved, GRID) == base_sas


# ---------------------------------------------------------------------------
# 5-6. freezing and non-negativity on the desk-scale run
# ---------------------------------------------------------------------------


@criterion(5, "stage 2 leaves the predictor bit-identical")
def test_c5_freezing_invariant(desk_run, tmp_path) -> None:
    from satp.pipeline import load_predictor, params_digest, train_stage2
    from satp.predictor import scene_truth, tp_loss

    cfg, dataset = desk_run["config"], desk_run["dataset"]
    model, _ = load_predictor(cfg, desk_run["out"] / "predictor.ckpt")
    digest_before = params_digest(model.params)

    def test_split_loss(predictor) -> float:
        total = 0.0
        with ad.no_grad():
            for sample, (scene, graph) in zip(dataset.test, dataset.test_scenes):
                _, pred = predictor.forward(scene, graph, training=False)
                total += tp_loss(pred, scene_truth(sample, scene), scene.valid).item()
        return total / len(dataset.test)

    loss_before = test_split_loss(model)
    train_stage2(cfg, dataset, desk_run["out"] / "predictor.ckpt", tmp_path / "sa,ckpt",
                 epochs=3)
    model_after, _ = load_predictor(cfg, desk_run["out"] / "predictor.ckpt")
    assert params_digest(model_after.params) == digest_before
    loss_after = test_split_loss(model_after)
    assert abs(loss_after - loss_before) < 1e-12


@criterion(6, "distance-form estimates are non-negative over >=1000 samples")
def test_c6_nonnegativity(desk_run) -> None:
    from satp.pipeline import score_ours

    scored = score_ours(desk_run["model"], desk_run["sa"],
                        desk_run["dataset"].test, desk_run["dataset"].test_scenes)
    assert len(scored) >= 1000, f"only {len(scored)} scored agent samples"
    minimum = min(float(s.step_diags.min()) for s in scored)
    assert minimum >= 0.0


# ---------------------------------------------------------------------------
# 7-8. parameter accounting and timing ordering
# ---------------------------------------------------------------------------


@criterion(7, "ensemble parameter count equals members times base")
def test_c7_parameter_accounting(desk_run) -> None:
    from satp.pipeline import predictor_config
    from satp.predictor import TrajectoryPredictor

    cfg = desk_run["config"]
    members = [TrajectoryPredictor(predictor_config(cfg), Rng(i)) for i in range(5)]
    single = members[0].params.count()
    assert count_parameters(*[m.params for m in members]) == 5 * single

    base = ParameterSet()
    base.add("all", np.zeros(496302))
    five = [base] * 5
    assert count_parameters(*five) == 2481510


@criterion(8, "single-forward pipeline is faster than 5-forward baselines")
def test_c8_timing_ordering(desk_run) -> None:
    from satp.baselines import ape_fpe, ensemble_predict, mc_dropout_predict
    from satp.pipeline import predictor_config
    from satp.predictor import TrajectoryPredictor
    from satp.selfaware import integrate_diagnostics

    cfg, dataset = desk_run["config"], desk_run["dataset"]
    scenes = dataset.test_scenes
    model, sa = desk_run["model"], desk_run["sa"]
    dropout_model = TrajectoryPredictor(
        predictor_config(cfg, dropout=cfg.train.dropout_rate), Rng(0))
    members = [TrajectoryPredictor(predictor_config(cfg), Rng(i)) for i in range(5)]
    timing_rng = Rng(0)

    counters = {"ours": iter(range(10**9)), "drop": iter(range(10**9)),
                "ens": iter(range(10**9))}

    def frame_ours():
        scene, graph = scenes[next(counters["ours"]) % len(scenes)]
        gf, pred = model.forward(scene, graph, training=False)
        integrate_diagnostics(sa.forward(gf, pred).values.data)

    def frame_dropout():
        i = next(counters["drop"])
        scene, graph = scenes[i % len(scenes)]
        ape_fpe(mc_dropout_predict(dropout_model, scene, graph, timing_rng.spawn(i), samples=5))

    def frame_ensemble():
        scene, graph = scenes[next(counters["ens"]) % len(scenes)]
        ape_fpe(ensemble_predict(members, scene, graph, expected_members=5))

    with ad.no_grad():
        ms_ours = time_per_frame(frame_ours, frames=100, warmup=10)
        ms_dropout = time_per_frame(frame_dropout, frames=100, warmup=10)
        ms_ensemble = time_per_frame(frame_ensemble, frames=100, warmup=10)
    print(f"\n  ms/frame: ours {ms_ours:.2f}, mc_dropout {ms_dropout:.2f}, "
          f"ensemble {ms_ensemble:.2f}", file=sys.stderr)
    assert ms_ours < ms_dropout
    assert ms_ours < ms_ensemble


# ---------------------------------------------------------------------------
# 9-10. desk-scale learnability and table structure
# ---------------------------------------------------------------------------


@criterion(9, "desk-scale two-stage run reaches SAS >= 0.3 in budget")
def test_c9_end_to_end_learnability(desk_run) -> None:
    dataset = desk_run["dataset"]
    assert len(dataset.train) + len(dataset.val) >= 800
    assert len(dataset.test) >= 200
    assert desk_run["config"].data.synthetic.hard_fraction == 0.3
    assert desk_run["train_seconds"] < 900.0, f"training took {desk_run['train_seconds']:.0f}s"
    report = desk_run["report"]
    # threshold 0.3 validated on seeds 0, 1, 2 before pinning (0.49..0.66 observed)
    assert report["sas"]["ade"] >= 0.3, report["sas"]
    assert report["sas"]["fde"] >= 0.3, report["sas"]
    assert report["sas"]["ade"] > 0.05 and report["sas"]["fde"] > 0.05  # beats random band


@criterion(10, "ablation and report tables reproduce the published shapes")
def test_c10_table_structure(desk_run) -> None:
    from satp.pipeline import run_ablations

    cfg, dataset = desk_run["config"], desk_run["dataset"]
    tables = run_ablations(cfg, dataset, desk_run["out"] / "predictor.ckpt",
                           desk_run["out"] / "ablations.json")
    assert len(tables["input_forms"]) == 10
    expected_rows = [("gf", "none"), ("gf", "mlp"), ("gf", "conv"), ("gf", "lstm"),
                     ("add", "mlp"), ("add", "conv"), ("add", "lstm"),
                     ("concat", "mlp"), ("concat", "conv"), ("concat", "lstm")]
    got_rows = [(r["input_form"], r["basic_model"]) for r in tables["input_forms"]]
    assert got_rows == expected_rows
    assert [r["error_label"] for r in tables["label_forms"]] == [
        "velocity", "position_xy", "distance"]
    assert [r["training_process"] for r in tables["training_processes"]] == [
        "weighting", "two_stage"]
    for row in tables["input_forms"] + tables["label_forms"] + tables["training_processes"]:
        assert "error" not in row, row
        assert "sas_ade" in row and "sas_fde" in row

    report = desk_run["report"]
    assert [r["moment"] for r in report["per_moment"]] == [1, 2, 3, 4, 5, 6]
    assert list(report["per_type"]) == [
        "small_vehicle", "big_vehicle", "pedestrian", "two_wheeler"]


# ---------------------------------------------------------------------------
# 11. byte-level determinism of the full pipeline
# ---------------------------------------------------------------------------


@criterion(11, "identical seeds produce byte-identical artifacts")
def test_c11_full_pipeline_determinism(tmp_path) -> None:
    from satp.cli import main

    config_path = tmp_path / "run.toml"
    config_path.write_text(
        "seed = 13\n"
        "[data.synthetic]\nrecords = 4\nduration_s = 30.0\nagents_per_record = 8\n"
        "[model]\nn_max = 6\nfeat_channels = 8\nhidden = 8\n"
        "[selfaware]\nhidden = 8\n"
        "[train]\nstage1_epochs = 2\nstage2_epochs = 2\ntrain_fraction = 0.5\n")
    digests = []
    for run in ("one", "two"):
        out = tmp_path / run
        for cmd in (["gen-data"], ["train-predictor"], ["train-selfaware"], ["evaluate"]):
            assert main([*cmd, "--config", str(config_path), "--out", str(out)]) == 0
        artifacts = sorted(p.name for p in out.iterdir())
        digests.append({name: (out / name).read_bytes() for name in artifacts})
    assert sorted(digests[0]) == sorted(digests[1])
    for name in digests[0]:
        assert digests[0][name] == digests[1][name], f"{name} differs between runs"
