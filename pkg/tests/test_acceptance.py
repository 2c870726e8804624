"""Acceptance suite.

Every check prints one ``[PASS]``/``[FAIL]`` line and then asserts, so the
verbose test log doubles as a scoreboard:

1. reference cost tables (parameter counts and GFLOPs, static analysis);
2. gradient correctness, per kernel and end-to-end;
3. dense-fusion block-matrix equivalence;
4. branch shape law across random configurations;
5. heatmap decoder against a brute-force reference, target round trip;
6. metric oracles (mIoU, NME, AUC/FR);
7. toy-task learnability and the V2-vs-V1 head comparison;
8. determinism and serialization round trips.
"""
import dataclasses
import time

import numpy as np
import pytest
from conftest import build_ctx, tiny_network

from hrnet_forge import kernels as K
from hrnet_forge.checkpoint import load_checkpoint, save_checkpoint
from hrnet_forge.config import (PRESETS, config_digest, load_config,
                                parse_config, render_config)
from hrnet_forge.costmodel import report
from hrnet_forge.gradcheck import check_tensor
from hrnet_forge.metrics import (accumulate_confusion, auc_fr, decode_heatmap,
                                 gaussian_target, miou, nme)
from hrnet_forge.resnet import ResNet50
from hrnet_forge.topology import Network, plain_dense_fusion
from hrnet_forge.train import run_training

SEED = 20250


def verdict(label: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    assert ok, f"{label}: {detail}"


# ---------------------------------------------------------------------------
# 1. reference cost tables


COST_ROWS = [
    # (id, preset or None for the calibration baseline,
    #  params ref, params tol, gflops ref, gflops tol)
    ("resnet50-calibration", None, 25.6e6, 0.02, 3.82, 0.05),
    ("w48-seg@1024x2048", "w48-seg", 65.9e6, 0.01, 747.3, 0.05),
    ("w40-seg@1024x2048", "w40-seg", 45.2e6, 0.01, 493.2, 0.05),
    ("w18-lmk@256x256", "w18-lmk", 9.3e6, 0.02, 4.3, 0.05),
    ("w18-cls@224x224", "w18-cls", 21.3e6, 0.01, 3.99, 0.05),
    ("w30-cls@224x224", "w30-cls", 37.7e6, 0.01, 7.55, 0.05),
    ("w40-cls@224x224", "w40-cls", 57.6e6, 0.01, 11.8, 0.05),
    ("w27-ci@224x224", "w27-ci", 21.4e6, 0.03, 5.55, 0.08),
    ("w25-cii@224x224", "w25-cii", 21.7e6, 0.03, 5.04, 0.08),
]


@pytest.mark.parametrize("name,preset,p_ref,p_tol,g_ref,g_tol",
                         COST_ROWS, ids=[row[0] for row in COST_ROWS])
def test_criterion_1_cost_tables(name, preset, p_ref, p_tol, g_ref, g_tol):
    start = time.time()
    if preset is None:
        rep = report(ResNet50(), (224, 224))
    else:
        cfg = load_config(preset)
        rep = report(Network(cfg.network(), "fast", 0), cfg.net_input_size)
    elapsed = time.time() - start
    p_err = abs(rep.total_params - p_ref) / p_ref
    g_err = abs(rep.gflops - g_ref) / g_ref
    ok = p_err <= p_tol and g_err <= g_tol and elapsed < 10.0
    verdict(f"criterion 1 cost table {name}", ok,
            f"params {rep.total_params:,} vs {p_ref:,.0f} "
            f"(err {p_err:.2%}, tol {p_tol:.0%}); "
            f"gflops {rep.gflops:.2f} vs {g_ref:g} "
            f"(err {g_err:.2%}, tol {g_tol:.0%}); {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. gradient correctness


def _fd(loss_fn, arr, analytic, rng, coords=64):
    err, n = check_tensor(loss_fn, arr, analytic, rng=rng, coords=coords)
    assert n > 0
    return err


def test_criterion_2_kernel_gradients():
    rng = np.random.default_rng(SEED)
    worst = 0.0

    # convolution (stride 2, padded, biased)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    t = rng.standard_normal((2, 4, 3, 3))

    def conv_loss():
        y, _ = K.conv2d_forward(x, w, b, stride=(2, 2), padding=(1, 1))
        return K.mse_loss(y, t)[0]

    y, cols = K.conv2d_forward(x, w, b, stride=(2, 2), padding=(1, 1))
    _, gy = K.mse_loss(y, t)
    gx, gw, gb = K.conv2d_backward(cols, x.shape, w, gy, stride=(2, 2),
                                   padding=(1, 1), has_bias=True)
    for arr, g in ((x, gx), (w, gw), (b, gb)):
        worst = max(worst, _fd(conv_loss, arr, g, rng))

    # batch norm, training and eval modes
    xb = rng.standard_normal((3, 2, 4, 4))
    gamma = rng.standard_normal(2) + 2.0
    beta = rng.standard_normal(2)
    tb = rng.standard_normal(xb.shape)

    def bn_train_loss():
        rm, rv = np.zeros(2), np.ones(2)
        yb, _ = K.batch_norm_forward(xb, gamma, beta, rm, rv, training=True)
        return K.mse_loss(yb, tb)[0]

    rm, rv = np.zeros(2), np.ones(2)
    yb, cache = K.batch_norm_forward(xb, gamma, beta, rm, rv, training=True)
    _, gyb = K.mse_loss(yb, tb)
    gxb, ggamma, gbeta = K.batch_norm_backward(cache, gyb)
    for arr, g in ((xb, gxb), (gamma, ggamma), (beta, gbeta)):
        worst = max(worst, _fd(bn_train_loss, arr, g, rng))

    rme, rve = np.array([0.1, -0.2]), np.array([1.5, 0.7])

    def bn_eval_loss():
        ye, _ = K.batch_norm_forward(xb, gamma, beta, rme, rve, training=False)
        return K.mse_loss(ye, tb)[0]

    ye, cache = K.batch_norm_forward(xb, gamma, beta, rme, rve, training=False)
    _, gye = K.mse_loss(ye, tb)
    gxe, _, _ = K.batch_norm_backward(cache, gye)
    worst = max(worst, _fd(bn_eval_loss, xb, gxe, rng))

    # relu, probed away from the non-smooth point
    xr = rng.standard_normal((2, 2, 5, 5))
    xr[np.abs(xr) < 1e-2] = 0.5
    tr = rng.standard_normal(xr.shape)
    _, gyr = K.mse_loss(K.relu(xr), tr)
    worst = max(worst, _fd(lambda: K.mse_loss(K.relu(xr), tr)[0],
                           xr, K.relu_backward(xr, gyr), rng))

    # upsampling, both modes
    for mode in ("nearest", "bilinear"):
        xu = rng.standard_normal((2, 2, 3, 3))
        tu = rng.standard_normal((2, 2, 6, 6))
        _, gyu = K.mse_loss(K.upsample(xu, 2, mode), tu)
        worst = max(worst, _fd(lambda: K.mse_loss(K.upsample(xu, 2, mode), tu)[0],
                               xu, K.upsample_backward(gyu, xu.shape, 2, mode), rng))

    # average pooling and global pooling
    xp = rng.standard_normal((2, 2, 5, 5))
    tp = rng.standard_normal((2, 2, 2, 2))
    _, gyp = K.mse_loss(K.avg_pool_forward(xp, (3, 3), (2, 2)), tp)
    worst = max(worst, _fd(
        lambda: K.mse_loss(K.avg_pool_forward(xp, (3, 3), (2, 2)), tp)[0],
        xp, K.avg_pool_backward(xp.shape, (3, 3), (2, 2), gyp), rng))

    xg = rng.standard_normal((2, 3, 4, 4))
    tg = rng.standard_normal((2, 3, 1, 1))
    _, gyg = K.mse_loss(K.global_avg_pool(xg), tg)
    worst = max(worst, _fd(lambda: K.mse_loss(K.global_avg_pool(xg), tg)[0],
                           xg, K.global_avg_pool_backward(xg.shape, gyg), rng))

    # linear
    xl = rng.standard_normal((4, 3))
    wl = rng.standard_normal((2, 3))
    bl = rng.standard_normal(2)
    tl = rng.standard_normal((4, 2))
    _, gyl = K.mse_loss(K.linear(xl, wl, bl), tl)
    gxl, gwl, gbl = K.linear_backward(xl, wl, gyl)
    for arr, g in ((xl, gxl), (wl, gwl), (bl, gbl)):
        worst = max(worst, _fd(lambda: K.mse_loss(K.linear(xl, wl, bl), tl)[0],
                               arr, g, rng))

    # losses
    logits = rng.standard_normal((2, 3, 3, 3))
    labels = rng.integers(0, 3, size=(2, 3, 3))
    _, gce = K.softmax_cross_entropy(logits, labels)
    worst = max(worst, _fd(lambda: K.softmax_cross_entropy(logits, labels)[0],
                           logits, gce, rng))

    pm = rng.standard_normal((2, 3, 4, 4))
    tm = rng.standard_normal(pm.shape)
    _, gm = K.mse_loss(pm, tm)
    worst = max(worst, _fd(lambda: K.mse_loss(pm, tm)[0], pm, gm, rng))

    verdict("criterion 2 kernel gradients", worst <= 1e-4,
            f"max relative error {worst:.3e} (tol 1e-4)")


def test_criterion_2_end_to_end_gradients():
    start = time.time()
    net = tiny_network(seed=0)
    rng = np.random.default_rng(SEED + 1)
    x = rng.standard_normal((2, 3, 32, 32))
    labels = rng.integers(0, 3, (2, 32, 32))

    def loss_fn():
        out = net.forward(x, train=True)["head"]
        up = K.upsample(out, 4, "bilinear")
        loss, g_up = K.softmax_cross_entropy(up, labels)
        return loss, K.upsample_backward(g_up, out.shape, 4, "bilinear")

    _, head_grad = loss_fn()
    net.zero_grads()
    net.backward(head_grad)
    params = net.params()
    worst, coords = 0.0, 0
    for p in params:
        err, n = check_tensor(lambda: loss_fn()[0], p.data, p.grad,
                              rng=rng, coords=16)
        worst = max(worst, err)
        coords += n
    elapsed = time.time() - start
    verdict("criterion 2 end-to-end gradients",
            worst <= 1e-3 and elapsed < 300.0,
            f"max relative error {worst:.3e} over {len(params)} tensors / "
            f"{coords} coordinates (tol 1e-3), {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 3. fusion equivalence


def test_criterion_3_fusion_block_matrix_equivalence():
    start = time.time()
    rng = np.random.default_rng(SEED + 2)
    worst = 0.0
    for trial in range(100):
        widths_in = [int(v) for v in rng.integers(1, 6, int(rng.integers(1, 4)))]
        widths_out = [int(v) for v in rng.integers(1, 6, int(rng.integers(1, 4)))]
        fb = plain_dense_fusion(build_ctx(seed=trial), "dense",
                                widths_in, widths_out)
        xs = [rng.standard_normal((2, w, 6, 6)) for w in widths_in]
        got = np.concatenate(fb.forward(xs), axis=1)

        W = np.zeros((sum(widths_out), sum(widths_in), 3, 3))
        o_off = 0
        for o, wo in enumerate(widths_out):
            i_off = 0
            for i, wi in enumerate(widths_in):
                W[o_off:o_off + wo, i_off:i_off + wi] = \
                    fb.adapters[(i, o)].weight.data
                i_off += wi
            o_off += wo
        full = K.conv2d(np.concatenate(xs, axis=1), W, padding=(1, 1))
        worst = max(worst, float(np.max(np.abs(got - full))))
    elapsed = time.time() - start
    verdict("criterion 3 fusion equivalence",
            worst <= 1e-10 and elapsed < 60.0,
            f"max |difference| {worst:.2e} over 100 instances "
            f"(tol 1e-10), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. shape law


def test_criterion_4_shape_law():
    rng = np.random.default_rng(SEED + 3)
    checked = []
    for i in range(20):
        width = int(rng.integers(4, 49))
        side = int(rng.choice([64, 96, 128]))
        head = "v2" if i % 2 == 0 else "v2p"
        cfg = load_config("w18-pyr" if head == "v2p" else "tiny-seg")
        cfg = dataclasses.replace(
            cfg, net_width=width, net_input_size=(side, side),
            net_head=head, task="pyramid" if head == "v2p" else "segmentation",
            net_num_outputs=7, data_classes=7).validate()
        net = Network(cfg.network(), "fast", seed=i)
        for r, shape in enumerate(net.branch_shapes()):
            assert shape[1] == width * 2 ** r, (i, r, shape)
            assert shape[2] == side // 2 ** (r + 2), (i, r, shape)
            assert shape[3] == side // 2 ** (r + 2), (i, r, shape)
        if head == "v2":
            assert net.head.mixed.mix_width == 15 * width, i
        else:
            levels = net.head_shape()
            assert len(levels) == 5, i
            assert all(s[1] == 256 for s in levels), i
        checked.append((width, side, head))
        del net
    verdict("criterion 4 shape law", len(checked) == 20,
            f"{len(checked)} random configs: branch channels C*2^r, "
            "spatial /2^(r+2); V2 concat 15C; V2p 5 levels of 256")


# ---------------------------------------------------------------------------
# 5. decoder oracle


def _brute_force_decode(m):
    h, w = m.shape
    best, cell = -np.inf, None
    for yy in range(h):
        for xx in range(w):
            if m[yy, xx] > best:
                best, cell = m[yy, xx], (yy, xx)
    py, px = cell
    nb, nd = -np.inf, None
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = py + dy, px + dx
        if 0 <= ny < h and 0 <= nx < w and m[ny, nx] > nb:
            nb, nd = m[ny, nx], (dy, dx)
    return px + 0.25 * nd[1], py + 0.25 * nd[0]


def test_criterion_5_decoder_matches_brute_force():
    rng = np.random.default_rng(SEED + 4)
    hms = rng.standard_normal((1000, 11, 13))
    d = decode_heatmap(hms, scale=4.0)
    mismatches = sum(
        tuple(d.map_coords[i]) != _brute_force_decode(hms[i])
        for i in range(1000))
    verdict("criterion 5 decoder vs brute force", mismatches == 0,
            f"{mismatches} mismatches over 1000 random heatmaps")


def test_criterion_5_target_round_trip():
    sigma = 1.5
    worst = 0.0
    for cy in np.arange(5.0, 18.0, 0.45):
        for cx in np.arange(5.0, 18.0, 0.45):
            maps, valid = gaussian_target(np.array([[cx, cy]]), (24, 24), sigma)
            assert valid[0]
            d = decode_heatmap(maps)
            worst = max(worst, float(np.max(np.abs(d.map_coords[0] - (cx, cy)))))
    verdict("criterion 5 target round trip", worst <= 0.5,
            f"worst recovery error {worst:.3f} cells (tol 0.5)")


# ---------------------------------------------------------------------------
# 6. metric oracles


def test_criterion_6_metric_oracles():
    checks = []

    cm = accumulate_confusion(pred=[0, 1, 1], gt=[0, 0, 1], num_classes=2)
    m, *_ = miou(cm)
    checks.append(("miou hand case", m == 0.5))

    hm = np.zeros((16, 16))
    hm[10, 10], hm[10, 11] = 1.0, 0.5
    d = decode_heatmap(hm[None], scale=4.0)
    checks.append(("decode hand case", tuple(d.coords[0]) == (41.0, 40.0)))

    gt = np.zeros((4, 2))
    checks.append(("nme hand case",
                   abs(nme(gt + (3.0, 4.0), gt, 100.0) - 0.05) < 1e-15))

    checks.append(("auc perfect", auc_fr(np.zeros(5), 0.1) == (1.0, 0.0)))
    checks.append(("auc all failures", auc_fr(np.full(5, 1.0), 0.1) == (0.0, 1.0)))

    rng = np.random.default_rng(SEED + 5)
    auc, fr = auc_fr(rng.uniform(0.0, 0.1, 10000), alpha=0.1)
    checks.append(("auc uniform +-0.01", abs(auc - 0.5) < 0.01 and fr == 0.0))

    maps, _ = gaussian_target(np.array([[8.0, 8.0]]), (16, 16), sigma=2.0)
    checks.append(("gaussian at sigma distance",
                   abs(maps[0, 8, 10] - np.exp(-0.5)) < 1e-12))

    failed = [name for name, ok in checks if not ok]
    verdict("criterion 6 metric oracles", not failed,
            f"{len(checks) - len(failed)}/{len(checks)} oracles match"
            + (f"; failed: {failed}" if failed else ""))


# ---------------------------------------------------------------------------
# 7. toy learnability


def test_criterion_7_segmentation_learnability():
    start = time.time()
    cfg = load_config("tiny-seg")
    result = run_training(cfg, quiet=True)
    elapsed = time.time() - start
    final = result.metrics["miou"]
    windows = result.losses.reshape(-1, 200).mean(axis=1)
    drops = int(np.sum(np.diff(windows) < 0))
    verdict("criterion 7 segmentation learnability",
            final >= 0.9 and elapsed < 900.0,
            f"training mIoU {final:.4f} after {cfg.opt_iters} iterations "
            f"(need >= 0.9), {elapsed:.0f}s")
    verdict("training-loss window decrease", drops >= len(windows) - 1,
            f"{drops}/{len(windows) - 1} consecutive 200-iteration windows "
            "decreased")


def test_criterion_7_landmark_learnability():
    cfg = load_config("tiny-lmk")
    result = run_training(cfg, quiet=True)
    err = result.metrics["mean_px_error"]
    verdict("criterion 7 landmark learnability", err <= 2.0,
            f"mean decode error {err:.3f}px after {cfg.opt_iters} iterations "
            "(need <= 2px)")


def test_criterion_7_v2_head_scores_at_least_v1():
    base = dataclasses.replace(load_config("tiny-seg"),
                               net_num_outputs=3, data_classes=3, opt_iters=400)
    wins, pairs = 0, []
    for seed in range(5):
        scores = {}
        for head in ("v1", "v2"):
            cfg = dataclasses.replace(base, net_head=head, seed=seed).validate()
            scores[head] = run_training(cfg, quiet=True).metrics["miou"]
        pairs.append((round(scores['v2'], 3), round(scores['v1'], 3)))
        wins += scores["v2"] >= scores["v1"]
    verdict("criterion 7 V2 >= V1 heads", wins >= 4,
            f"V2 scored >= V1 in {wins}/5 seeds (need >= 4); "
            f"(v2, v1) mIoU pairs: {pairs}")


# ---------------------------------------------------------------------------
# 8. determinism and serialization


def test_criterion_8_training_determinism(tmp_path):
    cfg = dataclasses.replace(load_config("tiny-seg"), data_count=12,
                              opt_iters=12, train_checkpoint_every=0).validate()
    a = run_training(cfg, out_dir=str(tmp_path / "a"), quiet=True)
    b = run_training(cfg, out_dir=str(tmp_path / "b"), quiet=True)
    same_losses = np.array_equal(a.losses, b.losses)
    same_bytes = (tmp_path / "a" / "ckpt_final.hrfk").read_bytes() == \
        (tmp_path / "b" / "ckpt_final.hrfk").read_bytes()
    verdict("criterion 8 training determinism", same_losses and same_bytes,
            f"losses bit-identical: {same_losses}; "
            f"final checkpoints byte-identical: {same_bytes}")


def test_criterion_8_serialization_round_trips(tmp_path):
    net = tiny_network(seed=3)
    state = net.state_arrays()
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, digest=11, iteration=7, tensors=state)
    _, _, loaded = load_checkpoint(path)
    ckpt_ok = all(np.array_equal(loaded[k], v) and loaded[k].dtype == v.dtype
                  for k, v in state.items())

    cfg_ok = all(parse_config(render_config(load_config(p))) == load_config(p)
                 and config_digest(parse_config(render_config(load_config(p))))
                 == config_digest(load_config(p))
                 for p in PRESETS)
    verdict("criterion 8 serialization round trips", ckpt_ok and cfg_ok,
            f"checkpoint tensors bit-exact: {ckpt_ok}; "
            f"config parse/render fixpoint over {len(PRESETS)} presets: {cfg_ok}")
