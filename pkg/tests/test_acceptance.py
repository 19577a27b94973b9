"""End-to-end acceptance checks; each prints one PASS/FAIL line in the terminal summary."""

import math
import time

import numpy as np
import pytest

from conftest import HELDOUT_IMAGES, gray
from oracles import conv2d_loops, fc_loops, maxpool_loops, nn_brute
from orient_learn import descriptor as D
from orient_learn import gradcheck
from orient_learn import tensor as T
from orient_learn.data import Homography, Pyramid, detect_keypoints, synth_pairs
from orient_learn.data.dataset import decode_dataset, encode_dataset
from orient_learn.data.synth import warp_image
from orient_learn.errors import IngestionError
from orient_learn.evaluation import (MatchSet, average_precision, evaluate_sequences, nn_match,
                                     pr_curve)
from orient_learn.ghh import as_maxout, as_prelu, as_relu
from orient_learn.network import ACTIVATIONS, ArchitectureSpec, OrientationNet
from orient_learn.trainer import (TrainConfig, angular_errors, train, write_ablation_csv,
                                  write_loss_csv)


def test_criterion_1_gradient_fidelity(record):
    start = time.perf_counter()
    results = gradcheck.run_gradcheck(seed=0)
    seconds = time.perf_counter() - start
    worst = {r.component: r.max_rel_error for r in results}
    ok = all(r.passed for r in results) and seconds < 60
    record(1, ok, f"worst layer {max(v for k, v in worst.items() if k != 'pair_loss'):.1e}, "
                  f"pair loss {worst['pair_loss']:.1e}, {seconds:.1f}s")
    assert ok, gradcheck.format_report(results)


def test_criterion_2_ghh_reductions(record):
    rng = np.random.default_rng(2)
    x = rng.uniform(-10, 10, 10_000)
    relu_ok = np.array_equal(as_relu()(x), np.maximum(x, 0))
    maxout_ok = all(np.array_equal(as_maxout(M)(v), v.max(axis=1))
                    for M in (2, 4, 8) for v in [rng.uniform(-10, 10, (10_000, M))])
    prelu_err = max(np.max(np.abs(as_prelu(a)(x) - (np.maximum(0, x) - a * np.maximum(0, -x))))
                    for a in (0.0, 0.1, 0.25, 1.0))
    ok = relu_ok and maxout_ok and prelu_err <= 1e-12
    record(2, ok, f"relu exact {relu_ok}, maxout exact {maxout_ok}, prelu err {prelu_err:.1e}")
    assert ok


def natural_contexts(count):
    out = []
    for name in ("camera", "astronaut", "coins", "chelsea"):
        img = gray(name)
        pyr = Pyramid(img)
        for k in detect_keypoints(img, 200, pyramid=pyr)[::4]:
            ctx = pyr.context(k.x, k.y, k.sigma)
            if ctx.is_valid():
                out.append(ctx)
            if len(out) == count:
                return out
    return out


def test_criterion_3_jacobian_soundness(record):
    rng = np.random.default_rng(3)
    sims = []
    for ctx in natural_contexts(50):
        theta = rng.uniform(0, 2 * math.pi)
        coarse = D.jacobian(D.build_table(ctx), theta)
        fine = D.jacobian(D.build_table(ctx, 360), theta)
        sims.append(coarse @ fine / (np.linalg.norm(coarse) * np.linalg.norm(fine)))
    sims = np.array(sims)
    ang = np.arange(72) * D.ANGLE_STEP
    table = np.zeros((72, 128))
    table[:, 0], table[:, 1] = np.cos(ang), np.sin(ang)
    th = rng.uniform(0, 2 * math.pi, 1000)
    manufactured = np.max(np.abs(D.jacobian(table, th)[:, 0] + np.sin(th)))
    ok = len(sims) == 50 and sims.mean() > 0.95 and manufactured < 0.01
    record(3, ok, f"cosine mean {sims.mean():.3f} (median {np.median(sims):.3f}, "
                  f"{np.mean(sims > 0.95):.0%} of patches above 0.95), cos-table err {manufactured:.4f}")
    assert ok


@pytest.fixture(scope="module")
def ablation_runs(train_pairs, heldout_pairs):
    """One 100-epoch run per activation, identical seeds, data and budget."""
    cfg = TrainConfig()
    runs = {}
    for act in ACTIVATIONS:
        start = time.perf_counter()
        net = OrientationNet(ArchitectureSpec.for_activation(act), seed=cfg.seed)
        net, report = train(net, train_pairs, cfg)
        err = angular_errors(net, heldout_pairs)
        runs[act] = dict(net=net, report=report, errors=err, seconds=time.perf_counter() - start)
    return runs


def test_criterion_4_orientation_learning(ablation_runs, heldout_pairs, tmp_path_factory, record):
    run = ablation_runs["ghh"]
    losses = run["report"].losses
    median = float(np.median(run["errors"]))
    ratio = losses[-1] / losses[0]
    write_loss_csv(tmp_path_factory.mktemp("c4") / "loss.csv", run["report"])
    ok = (len(losses) == 100 and len(run["errors"]) == 200 and median < 10 and ratio < 0.5
          and run["seconds"] < 15 * 60)
    record(4, ok, f"held-out median {median:.2f} deg, loss {losses[0]:.4f} -> {losses[-1]:.4f} "
                  f"(ratio {ratio:.3f}), {run['seconds']:.0f}s")
    assert ok


def heldout_scenes(rotated: bool, rng):
    entries = []
    for name in HELDOUT_IMAGES:
        img = gray(name)
        rows, cols = img.shape
        if rotated:
            h = Homography.similarity(math.radians(30.0), center=(cols / 2, rows / 2))
        else:
            h = Homography.similarity(0.0, shift=(3.3, 1.7))
        warped = np.clip(warp_image(img, h) + 0.01 * rng.standard_normal(img.shape), 0, 1)
        entries.append((name, img, warped, h))
    return entries


def test_criterion_5_matching_improvement(ablation_runs, record):
    net = ablation_runs["ghh"]["net"]
    rng = np.random.default_rng(5)
    rot = evaluate_sequences(heldout_scenes(True, rng), net).mean_ap()
    upright = evaluate_sequences(heldout_scenes(False, rng), net,
                                 methods=("dominant", "upright")).mean_ap()
    gain = rot["learned"] - rot["upright"]
    gap = abs(upright["upright"] - upright["dominant"])
    ok = gain >= 0.05 and gap <= 0.05
    record(5, ok, f"rotated mAP learned {rot['learned']:.3f} vs upright {rot['upright']:.3f} "
                  f"(dominant {rot['dominant']:.3f}); un-rotated upright {upright['upright']:.3f} "
                  f"vs dominant {upright['dominant']:.3f}")
    assert ok


def test_criterion_6_activation_ablation(ablation_runs, tmp_path_factory, record):
    rows = []
    for act, run in ablation_runs.items():
        losses = run["report"].losses
        rows.append(dict(activation=act, median_error_deg=float(np.median(run["errors"])),
                         mean_error_deg=float(np.mean(run["errors"])), first_loss=losses[0],
                         final_loss=losses[-1]))
    path = tmp_path_factory.mktemp("c6") / "ablation.csv"
    write_ablation_csv(path, rows)
    medians = {r["activation"]: r["median_error_deg"] for r in rows}
    best_other = min(v for k, v in medians.items() if k != "ghh")
    text = path.read_text().splitlines()
    ok = (sorted(medians) == sorted(ACTIVATIONS) and len(text) == 6
          and medians["ghh"] <= best_other + 1.0)
    record(6, ok, ", ".join(f"{k} {v:.2f}" for k, v in medians.items()) + " (median deg)")
    assert ok


def rel(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def test_criterion_7_oracle_equivalence(record):
    rng = np.random.default_rng(7)
    nn_ok = True
    for _ in range(20):
        a, b = rng.standard_normal((40, 12)), rng.standard_normal((int(rng.integers(1, 60)), 12))
        m = nn_match(a, b)
        idx, dist = nn_brute(a, b)
        nn_ok &= bool(np.array_equal(m.matched[np.argsort(m.query)], idx))
        nn_ok &= bool(np.allclose(m.distance[np.argsort(m.query)], dist, rtol=1e-12, atol=0))
    matches = MatchSet(np.arange(4), np.arange(4), np.arange(4.0),
                       np.array([True, False, True, False]))
    curve = pr_curve(matches, 2)
    pr_ok = (curve.points() == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3), (1.0, 0.5)]
             and abs(average_precision(curve) - 19 / 24) < 1e-15)
    x = rng.standard_normal((2, 3, 9, 8))
    k, bias = rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    w, wb = rng.standard_normal((6, 20)), rng.standard_normal(6)
    xf = rng.standard_normal((5, 20))
    errs = (rel(T.conv2d(x, k, bias), conv2d_loops(x, k, bias)),
            rel(T.maxpool2x2(x[:, :, :8])[0], maxpool_loops(x[:, :, :8])),
            rel(T.fully_connected(xf, w, wb), fc_loops(xf, w, wb)))
    ok = nn_ok and pr_ok and max(errs) < 1e-12
    record(7, ok, f"nn_match {nn_ok}, hand PR/AP {pr_ok}, conv/pool/fc rel "
                  + "/".join(f"{e:.0e}" for e in errs))
    assert ok


def test_criterion_8_determinism_and_formats(tmp_path, record):
    images = [gray("coins"), gray("camera")[::2, ::2]]
    data = [encode_dataset(synth_pairs(images, 30, np.random.default_rng(8))) for _ in range(2)]
    pairs = decode_dataset(data[0])
    cfg = TrainConfig(epochs=3, batch_size=5, seed=8)
    ckpts, csvs = [], []
    for i in range(2):
        net, report = train(OrientationNet(seed=8), pairs, cfg, heldout=pairs[:10],
                            checkpoint_path=tmp_path / f"m{i}")
        write_loss_csv(tmp_path / f"l{i}.csv", report)
        ckpts.append((tmp_path / f"m{i}").read_bytes())
        csvs.append((tmp_path / f"l{i}.csv").read_bytes())
    same = data[0] == data[1] and ckpts[0] == ckpts[1] and csvs[0] == csvs[1]

    loaded = OrientationNet.load(tmp_path / "m0")
    ckpt_round = all(np.array_equal(loaded.params[k], net.params[k]) for k in net.params)
    data_round = encode_dataset(pairs) == data[0]

    def record_index(fn, buf):
        try:
            fn(buf)
        except IngestionError as exc:
            return exc.record
        return None

    trunc_data = record_index(decode_dataset, data[0][: len(data[0]) - 10])
    trunc_ckpt = record_index(T.decode_checkpoint, ckpts[0][: len(ckpts[0]) - 10])
    n_params = len(net.params)
    ok = (same and ckpt_round and data_round and trunc_data == len(pairs) - 1
          and trunc_ckpt == n_params - 1)
    record(8, ok, f"bit-identical {same}, round trips {ckpt_round and data_round}, "
                  f"truncation records dataset {trunc_data} checkpoint {trunc_ckpt}")
    assert ok
