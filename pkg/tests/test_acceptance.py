"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Criteria 6 to 9 train small networks for several minutes each; trained
models are shared through the session cache in ``conftest``.
"""

import time

import numpy as np
import pytest

from conftest import record, trained
from gradcheck import numeric_grad, rel_error
from sparsedepth.depth_grid import (DepthMap, InverseDepthMap, SegMap, decode_depth_png, encode_raw_png,
                                    from_inverse, to_inverse)
from sparsedepth.harness.baseline import baseline_predictor
from sparsedepth.harness.config import DensitySchedule, TrainConfig
from sparsedepth.harness.data import held_out_pool
from sparsedepth.harness.evaluate import evaluate_segmentation, predict_depth, predict_inverse
from sparsedepth.harness.experiments import DENSITY_GRID, experiment_density_sweep, experiment_lidar_ablation
from sparsedepth.harness.train import build_model, train
from sparsedepth.net import checkpoint
from sparsedepth.net.ops import (batchnorm_backward, batchnorm_forward, dense_conv2d, dense_conv2d_backward,
                                 dense_conv2d_forward, softmax, transposed_conv2d, transposed_conv2d_backward,
                                 transposed_conv2d_forward)
from sparsedepth.objective import (DELTA_THRESHOLDS, cross_entropy, delta_metric, depth_metrics, masked_loss,
                                   mean_iou, unobserved_mask)
from sparsedepth.sparse_conv import (MaskedTensor, SparseConvKernel, analytic_saturation, saturation_profile,
                                     sparse_conv2d, sparse_conv2d_backward)
from sparsedepth.sparsifier import LIDAR_DENSITY, LidarBands, Uniform, apply_pattern

SEEDS = (0, 1, 2)
STEPS = 600
EVAL_SCENES = 64

pytestmark = pytest.mark.acceptance


def median(values):
    return float(np.median(values))


def fmt(values):
    return "[" + ", ".join(f"{v:.2f}" for v in values) + "]"


def depth_cfg(seed, **kw):
    return TrainConfig(max_steps=STEPS, seed=seed, scene_seed=0, **kw)


def check(number, ok, detail):
    record(number, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 1. gradient oracle


def _worst(instances, run):
    rng = np.random.default_rng(2024)
    return max(run(rng, i) for i in range(instances))


def _dense_conv(rng, i):
    k, s = [(1, 1), (3, 1), (3, 2), (5, 2)][i % 4]
    x, w, b = rng.normal(size=(1, 2, 5, 6)), rng.normal(size=(2, 2, k, k)), rng.normal(size=2)
    y, cache = dense_conv2d_forward(x, w, b, s)
    up = rng.normal(size=y.shape)
    grads = dense_conv2d_backward(up, w, cache, s)
    f = lambda: float((dense_conv2d(x, w, b, s) * up).sum())  # noqa: E731
    return max(rel_error(g, numeric_grad(f, v)) for g, v in zip(grads, (x, w, b)))


def _sparse_conv(rng, i):
    k, s = [(1, 1), (3, 1), (3, 2), (5, 2)][i % 4]
    mask = (rng.random((1, 5, 6)) < 0.5).astype(float)
    feats, w, b = rng.normal(size=(1, 2, 5, 6)) * mask[:, None], rng.normal(size=(2, 2, k, k)), rng.normal(size=2)
    out = lambda: sparse_conv2d(MaskedTensor(feats, mask), SparseConvKernel(w, b, s)).features  # noqa: E731
    up = rng.normal(size=out().shape)
    f = lambda: float((out() * up).sum())  # noqa: E731
    gx, gw, gb = sparse_conv2d_backward(MaskedTensor(feats, mask), SparseConvKernel(w, b, s), up)
    # only valid pixels carry an input gradient
    return max(rel_error(gx, numeric_grad(f, feats) * mask[:, None]), rel_error(gw, numeric_grad(f, w)),
               rel_error(gb, numeric_grad(f, b)))


def _tconv(rng, i):
    x, w, b = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
    y, cache = transposed_conv2d_forward(x, w, b, 2)
    up = rng.normal(size=y.shape)
    grads = transposed_conv2d_backward(up, w, cache)
    f = lambda: float((transposed_conv2d(x, w, b, 2) * up).sum())  # noqa: E731
    return max(rel_error(g, numeric_grad(f, v)) for g, v in zip(grads, (x, w, b)))


def _batchnorm(rng, i):
    x, g, b = rng.normal(size=(3, 2, 3, 3)), rng.uniform(0.5, 2, 2), rng.normal(size=2)
    train_mode = i % 2 == 0
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, 2)
    y, cache = batchnorm_forward(x, g, b, rm.copy(), rv.copy(), train_mode)
    up = rng.normal(size=y.shape)
    grads = batchnorm_backward(up, cache)
    f = lambda: float((batchnorm_forward(x, g, b, rm.copy(), rv.copy(), train_mode)[0] * up).sum())  # noqa: E731
    return max(rel_error(gr, numeric_grad(f, v)) for gr, v in zip(grads, (x, g, b)))


def _softmax_ce(rng, i):
    logits = rng.normal(size=(1, 4, 3, 3))
    labels = rng.integers(0, 4, (1, 3, 3))
    _, g = cross_entropy(softmax(logits), labels)
    return rel_error(g, numeric_grad(lambda: cross_entropy(softmax(logits), labels)[0], logits))


def _masked(norm):
    def run(rng, i):
        pred, target = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        mask = rng.random((4, 4)) < 0.6
        mask[0, 0] = True
        _, g = masked_loss(pred, target, mask, norm)
        return rel_error(g, numeric_grad(lambda: masked_loss(pred, target, mask, norm)[0], pred))
    return run


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    ops = {"dense conv": _dense_conv, "sparse conv": _sparse_conv, "transposed conv": _tconv,
           "batchnorm": _batchnorm, "softmax-CE": _softmax_ce, "masked L1": _masked("l1"),
           "masked L2": _masked("l2")}
    worst = {name: _worst(50, run) for name, run in ops.items()}
    elapsed = time.perf_counter() - t0
    ok = all(v <= (1e-3 if name == "batchnorm" else 1e-4) for name, v in worst.items()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    check(1, ok, f"50 instances per op, worst rel. error {detail}; {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 2. sparsity-invariant conv algebra


def test_criterion_2_sparse_conv_algebra():
    rng = np.random.default_rng(7)
    worst_dense, invariant = 0.0, True
    for _ in range(20):
        kern = SparseConvKernel(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
        x = rng.normal(size=(2, 2, 9, 8))
        full = sparse_conv2d(MaskedTensor(x, np.ones((2, 9, 8))), kern).features
        ref = dense_conv2d(x, kern.weights / 9.0, kern.bias)
        # padding counts as missing, so the identity is checked where the window lies inside the image
        worst_dense = max(worst_dense, np.max(np.abs(full - ref)[:, :, 1:-1, 1:-1]))
        mask = (rng.random((2, 9, 8)) < 0.3).astype(float)
        a = sparse_conv2d(MaskedTensor(x, mask), kern)
        junk = rng.normal(scale=1e6, size=x.shape) * (1 - mask[:, None])
        b = sparse_conv2d(MaskedTensor(x + junk, mask), kern)
        invariant &= np.array_equal(a.features, b.features) and np.array_equal(a.mask, b.mask)
    m = np.zeros((1, 7, 7))
    m[0, 0, 0] = 1
    y = sparse_conv2d(MaskedTensor(np.ones((1, 1, 7, 7)), m), SparseConvKernel(np.ones((2, 1, 3, 3)), np.ones(2)))
    empty = bool(np.all(y.features[0, :, 4, 4] == 0) and y.mask[0, 4, 4] == 0)
    ok = worst_dense <= 1e-12 and invariant and empty
    check(2, ok, f"full-mask reduction {worst_dense:.1e} abs, missing-data invariance exact={invariant}, "
                 f"empty support -> (0, mask 0)={empty}")


# ---------------------------------------------------------------------------
# 3. mask saturation


def test_criterion_3_mask_saturation():
    got = saturation_profile(0.3, [(3, 1)], trials=100)[0].mean
    expect = analytic_saturation(0.3, 3)
    monotone = True
    for p in (0.01, 0.05, 0.1, 0.3):
        means = [layer.mean for layer in saturation_profile(p, [(3, 1)] * 4 + [(3, 2)], trials=20, seed=1)]
        monotone &= all(b >= a for a, b in zip(means, means[1:]))
    ok = abs(got - expect) <= 0.01 and abs(expect - (1 - 0.7**9)) < 1e-12 and monotone
    check(3, ok, f"saturation after one 3x3 layer at p=0.3: {got:.4f} vs {expect:.4f}; monotone={monotone}")


# ---------------------------------------------------------------------------
# 4. metric oracles


def test_criterion_4_metric_oracles():
    hand = []
    r = depth_metrics(DepthMap([[2.5]]), DepthMap([[2.0]]))
    hand.append(np.isclose(r.mae, 500, atol=1e-9) and np.isclose(r.rmse, 500, atol=1e-9)
                and np.isclose(r.imae, 100, atol=1e-9) and np.isclose(r.irmse, 100, atol=1e-9))
    r = depth_metrics(DepthMap([[3.0, 4.5]]), DepthMap([[3.0, 4.0]]))
    hand.append(np.isclose(r.mae, 250, atol=1e-9) and np.isclose(r.rmse, 500 / np.sqrt(2), atol=1e-9))
    same = depth_metrics(DepthMap([[4.0, 7.0]]), DepthMap([[4.0, 7.0]]))
    hand.append((same.mae, same.rmse, same.imae, same.irmse) == (0, 0, 0, 0))
    d = delta_metric(np.array([[110.0]]), np.array([[100.0]]))
    hand.append([d[e] for e in DELTA_THRESHOLDS] == [0, 0, 1, 1])
    iou = mean_iou(SegMap([[0], [0]], 2), SegMap([[0], [1]], 2))
    hand.append(iou.per_class_iou.tolist() == [0.5, 0.0] and iou.mean_iou == 0.25)
    l1, _ = masked_loss(np.array([5.0]), np.array([2.0]), np.array([True]), "l1")
    l2, _ = masked_loss(np.array([5.0]), np.array([2.0]), np.array([True]), "l2")
    hand.append((l1, l2) == (3.0, 9.0))

    rng = np.random.default_rng(11)
    corr = 0.0
    for _ in range(50):
        gt = np.where(rng.random((16, 16)) < 0.9, rng.uniform(1, 90, (16, 16)), 0.0)
        pred = rng.uniform(1, 100, (16, 16))
        sd = np.where(rng.random((16, 16)) < 0.2, gt, 0.0)
        mask = unobserved_mask(sd, gt)
        loss, _ = masked_loss(to_inverse(DepthMap(pred)).values, to_inverse(DepthMap(gt)).values, mask)
        corr = max(corr, abs(loss - depth_metrics(pred, gt, "unobserved", sd).imae))
    power_mean = True
    for _ in range(1000):
        gt, pred = rng.uniform(1, 90, (3, 4)), rng.uniform(1, 90, (3, 4))
        r = depth_metrics(pred, gt)
        power_mean &= r.rmse >= r.mae and r.irmse >= r.imae
    ok = all(hand) and corr <= 1e-9 and power_mean
    check(4, ok, f"{sum(hand)}/{len(hand)} hand examples, iMAE vs inverse L1 {corr:.1e}, "
                 f"RMSE>=MAE on 1000 instances={power_mean}")


# ---------------------------------------------------------------------------
# 5. inverse-depth output mapping


def test_criterion_5_output_mapping():
    rng = np.random.default_rng(5)
    d_max = 100.0
    dense_ok = zero_ok = mapped_ok = True
    for seed, inputs in enumerate(("sd", "rgb+sd", "rgb")):
        net = build_model(TrainConfig(inputs=inputs, seed=seed), np.float64)
        net.params["head.bias"] -= 0.05  # push part of the map onto the ReLU clamp
        sd = np.where(rng.random((4, 64, 64)) < 0.05, rng.uniform(2, 80, (4, 64, 64)), 0.0)
        rgb = rng.random((4, 3, 64, 64))
        inv = predict_inverse(net, sd, rgb)
        depth = predict_depth(net, sd, rgb, d_max)
        dense_ok &= bool(np.all(np.isfinite(depth)) and np.all(depth > 0))
        zero_ok &= bool(np.all(depth[inv == 0] == d_max)) and bool((inv == 0).any())
        far = inv >= 1000.0 / d_max
        mapped_ok &= bool(np.allclose(depth[far], 1000.0 / inv[far], rtol=1e-12))
    vals = rng.uniform(0.5, 95, (32, 32))
    back = from_inverse(to_inverse(DepthMap(vals))).values
    round_trip = float(np.max(np.abs(back - vals) / vals))
    inv = np.abs(rng.normal(50, 20, (16, 16))) + 1
    back_inv = to_inverse(from_inverse(InverseDepthMap(inv), 1e6)).values
    round_trip = max(round_trip, float(np.max(np.abs(back_inv - inv) / inv)))
    ok = dense_ok and zero_ok and mapped_ok and round_trip <= 1e-9
    check(5, ok, f"dense & positive={dense_ok}, head 0 -> d_max exactly={zero_ok}, 1000/x elsewhere={mapped_ok}, "
                 f"round trip {round_trip:.1e} rel")


# ---------------------------------------------------------------------------
# 6. desk-scale learning ordering


@pytest.mark.slow
def test_criterion_6_fusion_ordering():
    pool = held_out_pool(EVAL_SCENES)
    fixed = DensitySchedule.parse("fixed:0.02")
    table = {k: [] for k in ("rgb+sd", "sd", "rgb", "baseline")}
    for seed in SEEDS:
        nets = {inp: trained(depth_cfg(seed, inputs=inp, density=fixed)).net for inp in ("rgb+sd", "sd", "rgb")}
        nets["baseline"] = baseline_predictor
        res = experiment_density_sweep(nets, (0.02,), pool, seed=0)
        for name in table:
            table[name].append(res.value(name, "density=0.02"))
    med = {k: median(v) for k, v in table.items()}
    ok = med["rgb+sd"] <= med["sd"] <= med["rgb"] and med["sd"] < med["baseline"]
    check(6, ok, "median iMAE at density 0.02: late fusion {:.2f} <= sD {:.2f} <= RGB {:.2f}; baseline {:.2f} "
                 "(per seed late {} sD {} RGB {})".format(med["rgb+sd"], med["sd"], med["rgb"], med["baseline"],
                                                          fmt(table["rgb+sd"]), fmt(table["sd"]), fmt(table["rgb"])))


# ---------------------------------------------------------------------------
# 7. varying-density robustness


@pytest.mark.slow
def test_criterion_7_varying_density():
    pool = held_out_pool(EVAL_SCENES)
    ratios = {"fixed": [], "varying": []}
    at = {"0.1": [], "0.8": []}
    for seed in SEEDS:
        nets = {name: trained(depth_cfg(seed, first_layer="dense", density=DensitySchedule.parse(sched))).net
                for name, sched in (("fixed", "fixed:0.1"), ("varying", "uniform:0,1"))}
        res = experiment_density_sweep(nets, DENSITY_GRID, pool, seed=0)
        for name in nets:
            curve = [v for _, v in res.series(name)]
            ratios[name].append(max(curve) / min(curve))
        for d in at:
            at[d].append(res.value("fixed", f"density={d}"))
    med_fixed, med_varying = median(ratios["fixed"]), median(ratios["varying"])
    ok = med_varying < med_fixed and median(at["0.8"]) > median(at["0.1"])
    check(7, ok, f"median max/min iMAE ratio varying {med_varying:.2f} < fixed(0.1) {med_fixed:.2f}; "
                 f"fixed(0.1) net median iMAE at 0.8 {median(at['0.8']):.2f} > at 0.1 {median(at['0.1']):.2f}")


# ---------------------------------------------------------------------------
# 8. lidar ablation


@pytest.mark.slow
def test_criterion_8_lidar_ablation():
    pool = held_out_pool(EVAL_SCENES)
    curves = {"sd": [], "rgb+sd": []}
    for seed in SEEDS:
        nets = {inp: trained(depth_cfg(seed, inputs=inp, pattern="lidar")).net for inp in curves}
        res = experiment_lidar_ablation(nets, (8, 16, 32, 64), pool, seed=0)
        for name in curves:
            curves[name].append([v for _, v in res.series(name)])
    sd_med = np.median(curves["sd"], axis=0)
    fused8 = median([c[0] for c in curves["rgb+sd"]])
    monotone = bool(np.all(np.diff(sd_med) <= 0))
    depth = DepthMap(np.full((64, 64), 20.0))
    dens = {n: np.mean([np.mean(apply_pattern(depth, LidarBands(n, s)).values > 0) for s in range(20)])
            for n in (8, 16, 32, 64)}
    target = {8: 0.008, 16: 0.016, 32: 0.030, 64: 0.059}
    dens_ok = all(abs(dens[n] - target[n]) <= 0.2 * target[n] for n in target)
    dens_ok &= all(LIDAR_DENSITY[n] == target[n] for n in target)
    ok = monotone and fused8 <= sd_med[0] and dens_ok
    check(8, ok, f"median sD iMAE over 8/16/32/64 layers {fmt(sd_med)} non-increasing={monotone}; "
                 f"RGB+sD {fused8:.2f} <= sD {sd_med[0]:.2f} at 8 layers; densities "
                 + ", ".join(f"{n}:{dens[n]:.4f}" for n in dens))


# ---------------------------------------------------------------------------
# 9. segmentation head swap


@pytest.mark.slow
def test_criterion_9_segmentation():
    pool = held_out_pool(EVAL_SCENES)
    patterns = [Uniform(0.3, i) for i in range(EVAL_SCENES)]
    miou = {"sd": [], "rgb+sd": []}
    for seed in SEEDS:
        for inp in miou:
            cfg = depth_cfg(seed, task="seg", inputs=inp, density=DensitySchedule.parse("fixed:0.3"))
            miou[inp].append(evaluate_segmentation(trained(cfg).net, pool, patterns).mean_iou)
    fused, sd = median(miou["rgb+sd"]), median(miou["sd"])
    ok = fused > 0.5 and fused >= sd
    check(9, ok, f"median mean IoU late fusion {fused:.3f} (> 0.5) >= sD {sd:.3f}; "
                 f"per seed late {fmt(miou['rgb+sd'])} sD {fmt(miou['sd'])}")


# ---------------------------------------------------------------------------
# 10. determinism and I/O


def test_criterion_10_determinism_and_io():
    cfg = TrainConfig(inputs="rgb+sd", channels=(8, 16), max_steps=20, train_scenes=32, seed=3)
    runs = [train(cfg) for _ in range(2)]
    ckpts = [checkpoint.dumps(r.net, r.meta()) for r in runs]
    pool = held_out_pool(8)
    nets = [{"net": r.net, "baseline": baseline_predictor} for r in runs]
    csvs = [experiment_density_sweep(n, (0.05, 0.3), pool, seed=1).to_csv() for n in nets]
    same = ckpts[0] == ckpts[1] and csvs[0] == csvs[1]
    rng = np.random.default_rng(10)
    exact = True
    for shape in ((1, 1), (7, 13), (64, 64), (352, 1216)):
        raw = rng.integers(0, 65536, shape, dtype=np.uint16)
        back = np.rint(decode_depth_png(encode_raw_png(raw)).values * 256).astype(np.uint16)
        exact &= np.array_equal(back, raw)
    ok = same and exact
    check(10, ok, f"byte-identical checkpoints and CSVs={same}, depth PNG round trip bit-exact={exact}")
