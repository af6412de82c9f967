"""Acceptance criteria 1-9. Each test prints one ``[ACCEPT n] PASS|FAIL`` line."""

import json
import time

import numpy as np
import pytest

from dtnet import checkpoint as ck
from dtnet import tensor as T
from dtnet.attention import DpctLayer, HeadWeights, AttentionConfig, channel_wise_attention, dpct_forward, point_wise_attention
from dtnet.cli import format_ablation_table, run_ablation, toy_config_text
from dtnet.config import build_run_config, parse_config_text
from dtnet.data import synth_classification, synth_segmentation
from dtnet.geometry import ball_query, farthest_point_sample, interpolate_features, knn
from dtnet.layers import FcHead, FdsLayer, FusLayer, GlobalPoolLayer, Linear, fc_head_forward, fds_forward, fus_forward, global_pool_stage
from dtnet.model import DTNet
from dtnet.train import train
from conftest import randomize_bn
from gradcheck import gradient_errors, weighted_sum
from oracles import ball_query_scan, cwsa_loop, fps_greedy, interpolate_loop, knn_sort, pwsa_loop


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[ACCEPT {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return emit


def _run_config(task: str, n_classes: int, **overrides):
    values = parse_config_text(toy_config_text(task, n_classes))
    values.update({k: str(v) for k, v in overrides.items()})
    return build_run_config(values)


# ---------------------------------------------------------------------------
# 1. gradient suite


def _gradient_cases():
    rng = np.random.default_rng(100)
    cases = []

    def leaf(shape):
        return T.Tensor(rng.normal(size=shape), requires_grad=True)

    x = leaf((6, 5))
    lin = Linear(5, 4, rng)
    w = rng.normal(size=(6, 4))
    cases.append(("linear", 1e-4, lambda: weighted_sum(lin(x), w), [x, lin.W, lin.b]))

    xb, g, b = leaf((8, 4)), leaf(4), leaf(4)
    rm, rv = np.zeros(4), np.ones(4)
    wb = rng.normal(size=(8, 4))
    cases.append(("batchnorm", 1e-3, lambda: weighted_sum(T.batchnorm(xb, g, b, rm, rv, True), wb), [xb, g, b]))

    xs = leaf((5, 7))
    ws = rng.normal(size=(5, 7))
    cases.append(("softmax", 1e-4, lambda: weighted_sum(T.softmax_lastdim(xs), ws), [xs]))

    F = leaf((8, 8))
    wa = rng.normal(size=(8, 8))
    pw = HeadWeights(AttentionConfig(8, 2), rng)
    cw = HeadWeights(AttentionConfig(8, 2), rng)
    cases.append(("pwsa", 1e-4, lambda: weighted_sum(point_wise_attention(F, pw), wa), [F, pw.W_Q, pw.W_K, pw.W_V]))
    cases.append(("cwsa", 1e-4, lambda: weighted_sum(channel_wise_attention(F, cw), wa), [F, cw.W_Q, cw.W_K, cw.W_V]))
    layer = DpctLayer(8, 2, rng)
    dpct_leaves = [F] + list(layer.named_parameters().values())
    cases.append(("dpct", 1e-4, lambda: weighted_sum(dpct_forward(F, layer), wa), dpct_leaves))

    coords = rng.uniform(-1, 1, (2, 8, 3))
    feats = leaf((2, 8, 4))
    fds = FdsLayer(4, 0.9, 4, 4, 6, rng)
    wf = rng.normal(size=(2, 4, 6))
    cases.append(("fds_mlp", 1e-3, lambda: weighted_sum(fds_forward(coords, feats, fds)[1], wf),
                  [feats] + list(fds.named_parameters().values())))

    coarse = rng.uniform(-1, 1, (2, 4, 3))
    skip, cfeat = leaf((2, 8, 3)), leaf((2, 4, 5))
    fus = FusLayer(3, 5, 6, rng)
    wu = rng.normal(size=(2, 8, 6))
    cases.append(("fus_fuse", 1e-3, lambda: weighted_sum(fus_forward(coords, skip, coarse, cfeat, fus), wu),
                  [skip, cfeat] + list(fus.named_parameters().values())))

    xh = leaf((6, 8))
    head = FcHead(8, [8, 6], 3, rng, dropout=0.0)
    wh = rng.normal(size=(6, 3))
    cases.append(("fc_head", 1e-3, lambda: weighted_sum(fc_head_forward(xh, head), wh),
                  [xh] + list(head.named_parameters().values())))
    return cases


def test_criterion_1_gradient_suite(report):
    start = time.perf_counter()
    with T.precision(np.float64):
        results = {name: (max(gradient_errors(fn, leaves, h=1e-5)), tol) for name, tol, fn, leaves in _gradient_cases()}
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in results.items() if not v[0] < v[1]}
    worst = max(results.items(), key=lambda kv: kv[1][0] / kv[1][1])
    ok = not bad and elapsed < 60
    report(1, ok, f"{len(results)} layers, worst {worst[0]} rel err {worst[1][0]:.1e} (tol {worst[1][1]:g}), "
                  f"{elapsed:.1f}s; failing={sorted(bad)}")
    assert ok


# ---------------------------------------------------------------------------
# 2. equation oracles


def test_criterion_2_attention_oracles(report):
    worst = 0.0
    for i in range(20):
        g = np.random.default_rng(200 + i)
        F = g.normal(size=(6, 8))
        h = HeadWeights(AttentionConfig(8, 2), g)
        Wq, Wk, Wv = h.W_Q.data, h.W_K.data, h.W_V.data
        worst = max(worst,
                    np.abs(point_wise_attention(F, h).data - pwsa_loop(F, Wq, Wk, Wv, 2)).max(),
                    np.abs(channel_wise_attention(F, h).data - cwsa_loop(F, Wq, Wk, Wv, 2)).max())
    ok = worst < 1e-5
    report(2, ok, f"PWSA/CWSA vs scalar loops on 20 instances, max abs err {worst:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 3. permutation laws


def test_criterion_3_permutation_laws(report):
    eq, inv = 0.0, 0.0
    for i in range(10):
        g = np.random.default_rng(300 + i)
        layer = DpctLayer(16, 4, g)
        F = g.normal(size=(64, 16)).astype(np.float32)
        perm = g.permutation(64)
        eq = max(eq, np.abs(dpct_forward(F[perm], layer).data - dpct_forward(F, layer).data[perm]).max())
        pool = GlobalPoolLayer(16, 32, g)
        randomize_bn(pool, g)
        pool.eval()
        coords = g.normal(size=(64, 3))
        a = global_pool_stage(coords, F, pool)[1].data
        b = global_pool_stage(coords[perm], F[perm], pool)[1].data
        inv = max(inv, np.abs(a - b).max())
    ok = eq < 1e-5 and inv < 1e-5
    report(3, ok, f"N=64: DPCT equivariance err {eq:.1e}, global descriptor invariance err {inv:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 4. residual identities


def test_criterion_4_residual_identities(report):
    g = np.random.default_rng(400)
    layer = DpctLayer(12, 3, g)
    layer.pw_heads.W_V.data[:] = 0
    layer.cw_heads.W_V.data[:] = 0
    F = g.normal(size=(2, 10, 12)).astype(np.float32)
    pw_id = np.array_equal(point_wise_attention(F, layer.pw_heads).data, F)
    cw_id = np.array_equal(channel_wise_attention(F, layer.cw_heads).data, F)
    doubled = np.array_equal(dpct_forward(F, layer).data, 2 * F)
    ok = pw_id and cw_id and doubled
    report(4, ok, f"PWSA identity={pw_id}, CWSA identity={cw_id}, DPCT == 2F={doubled} (bit-exact)")
    assert ok


# ---------------------------------------------------------------------------
# 5. geometry oracles


def test_criterion_5_geometry_oracles(report):
    fails = {"fps": 0, "ball_query": 0, "knn": 0, "interpolate": 0}
    worst = 0.0
    for i in range(50):
        g = np.random.default_rng(500 + i)
        N = int(g.integers(4, 33))
        src = g.uniform(-1, 1, (N, 3))
        q = g.uniform(-1, 1, (int(g.integers(1, 9)), 3))
        S = int(g.integers(1, N + 1))
        fails["fps"] += farthest_point_sample(src, S).tolist() != fps_greedy(src, S)
        r, K = float(g.uniform(0.2, 1.5)), int(g.integers(1, 40))
        fails["ball_query"] += ball_query(q, src, r, K).indices.tolist() != ball_query_scan(q, src, r, K)
        k = int(g.integers(1, min(N, 6) + 1))
        nl = knn(q, src, k)
        idx, dist = knn_sort(q, src, k)
        fails["knn"] += bool(nl.indices.tolist() != idx or np.abs(nl.distances - dist).max() > 1e-6)
        feats = g.normal(size=(N, 4))
        kk = min(3, N)
        with T.precision(np.float64):
            out = interpolate_features(q, src, feats, k=kk).data
        err = np.abs(out - interpolate_loop(q, src, feats, kk)).max()
        worst = max(worst, err)
        fails["interpolate"] += bool(err > 1e-6)
    ok = not any(fails.values())
    report(5, ok, f"50 instances N<=32, mismatches {fails}, interpolation max err {worst:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 6-8. desk-scale training


@pytest.fixture(scope="module")
def cls_data(tmp_path_factory):
    m = synth_classification(tmp_path_factory.mktemp("cls"), n_points=256, n_per_class=100, n_test_per_class=20, seed=0)
    return m.dataset("train"), m.dataset("test")


@pytest.fixture(scope="module")
def seg_data(tmp_path_factory):
    m = synth_segmentation(tmp_path_factory.mktemp("seg"), n_points=512, n_instances=200, n_test=40, seed=0)
    return m.dataset("train"), m.dataset("test")


def test_criterion_6_classification(cls_data, report):
    train_set, test_set = cls_data
    assert (len(train_set), len(test_set), train_set.coords.shape[1]) == (300, 60, 256)
    spec, tc = _run_config("classification", 3, epochs=200)
    model = DTNet(spec, tc.seed)
    start = time.perf_counter()
    result = train(model, train_set, tc, eval_train=True, eval_data=test_set,
                   on_epoch_end=lambda r: r["train_oa"] >= 0.95 and r["test_oa"] >= 0.90)
    minutes = (time.perf_counter() - start) / 60
    last = result.history[-1]
    ok = last["train_oa"] >= 0.95 and last["test_oa"] >= 0.90 and result.epoch <= 200 and minutes < 15
    report(6, ok, f"train OA {last['train_oa']:.3f}, test OA {last['test_oa']:.3f} after {result.epoch} epochs, "
                  f"{minutes:.1f} min")
    assert ok


def test_criterion_7_segmentation(seg_data, report):
    train_set, _ = seg_data
    assert train_set.coords.shape == (200, 512, 3)
    spec, tc = _run_config("segmentation", 2, epochs=200)
    model = DTNet(spec, tc.seed)
    start = time.perf_counter()
    result = train(model, train_set, tc, eval_train=True, on_epoch_end=lambda r: r["train_miou"] >= 0.85)
    minutes = (time.perf_counter() - start) / 60
    last = result.history[-1]
    ok = last["train_miou"] >= 0.85 and result.epoch <= 200
    report(7, ok, f"train mIoU {last['train_miou']:.3f} after {result.epoch} epochs, {minutes:.1f} min")
    assert ok


def test_criterion_8_ablation(cls_data, report, capsys):
    train_set, test_set = cls_data
    # the configured schedule, exactly as `dtnet ablate` would run it
    spec, tc = _run_config("classification", 3)
    rows = run_ablation(spec, tc, train_set, test_set)
    table = format_ablation_table(rows)
    by = {r["variant"]: r for r in rows}
    ok = [r["variant"] for r in rows] == ["none", "pwsa", "cwsa", "both"] and by["both"]["train_oa"] >= by["none"]["train_oa"]
    with capsys.disabled():
        print("\n" + table)
    report(8, ok, f"four variants trained {tc.epochs} epochs; full train OA {by['both']['train_oa']:.3f} "
                  f"vs baseline {by['none']['train_oa']:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 9. determinism and persistence


def test_criterion_9_determinism_and_persistence(cls_data, tmp_path, report):
    train_set = cls_data[0].subset(np.arange(0, 300, 5))
    spec, tc = _run_config("classification", 3, epochs=4)

    def run(log, epochs=None, start=0, state=None, model=None):
        model = model or DTNet(spec, tc.seed)
        cfg = tc if epochs is None else type(tc)(**{**tc.__dict__, "epochs": epochs})
        res = train(model, train_set, cfg, log_path=log, state=state, start_epoch=start)
        return model, res

    m1, r1 = run(tmp_path / "a.jsonl")
    _, _ = run(tmp_path / "b.jsonl")
    logs_equal = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    p1 = ck.save_checkpoint(tmp_path / "a.ckpt", ck.Checkpoint.from_model(m1, r1.state, r1.epoch, tc.seed, tc))
    loaded = ck.load_checkpoint(p1)
    p2 = ck.save_checkpoint(tmp_path / "b.ckpt", loaded)
    rebuilt = loaded.build_model()
    bit_exact = p1.read_bytes() == p2.read_bytes() and all(
        np.array_equal(a.data, b.data) for a, b in zip(m1.named_parameters().values(), rebuilt.named_parameters().values())
    )

    half_model, half = run(None, epochs=2)
    mid = ck.load_checkpoint(ck.save_checkpoint(tmp_path / "mid.ckpt",
                                                ck.Checkpoint.from_model(half_model, half.state, half.epoch, tc.seed, tc)))
    _, rest = run(None, start=mid.epoch, state=mid.adam_state(), model=mid.build_model())
    diff = abs(rest.history[-1]["loss"] - r1.history[-1]["loss"])
    ok = logs_equal and bit_exact and diff < 1e-4
    report(9, ok, f"identical logs={logs_equal}, checkpoint bit-exact={bit_exact}, resume final-loss diff {diff:.1e}")
    assert ok
