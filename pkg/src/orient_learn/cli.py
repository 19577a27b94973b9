"""``orient-learn`` command line: synth, train, detect, predict, eval, ablate, gradcheck.

Exit codes: 0 success, 1 unexpected failure, 2 bad input or usage, 3 training
diverged, 4 checkpoint/config architecture mismatch, 5 gradient check failed.
Angles are degrees on every CLI boundary.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, gradcheck, trainer
from .config import Config
from .data import (Pyramid, load_dataset, load_homography, load_image,
                   load_keypoints, save_dataset, save_keypoints, synth_pairs)
from .data.detector import detect_keypoints
from .data.patches import patch_from_context
from .errors import IngestionError, ShapeError, TrainingError, UsageError
from .network import OrientationNet

log = logging.getLogger("orient_learn")

EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_ARCHITECTURE = 4
EXIT_GRADCHECK = 5


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.set("training", "seed", args.seed)
    return cfg


def _read_image(path):
    try:
        return load_image(path)
    except OSError as exc:
        raise CliError(f"cannot read image {path}: {exc.strerror or exc}") from None
    except (IngestionError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from None


def _load_net(path, cfg: Config | None) -> OrientationNet:
    try:
        net = OrientationNet.load(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from None
    except (IngestionError, ShapeError) as exc:
        raise CliError(f"{path}: {exc}") from None
    if cfg is not None and not net.spec.compatible(cfg.architecture()):
        raise CliError(f"checkpoint {path} has a {net.spec.activation} architecture that does "
                       f"not match the configured one", EXIT_ARCHITECTURE)
    return net.eval()


def _out(args, default: str) -> Path:
    return Path(args.out) if args.out else Path(default)


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args)
    d = cfg["data"]
    images = [_read_image(p) for p in args.images]
    n = args.n if args.n is not None else d["n_pairs"]
    rng = np.random.default_rng([cfg["training"]["seed"], 3])
    try:
        pairs = synth_pairs(images, n, rng, max_rotation=d["max_rotation"],
                            perturbation=cfg.perturbation(), per_copy=d["per_copy"],
                            max_keypoints=d["max_keypoints"], lam=d["lambda"])
    except IngestionError as exc:
        raise CliError(str(exc)) from None
    out = _out(args, "pairs.bin")
    save_dataset(out, pairs)
    rot = np.degrees([p.gt_rotation for p in pairs]) if pairs else np.zeros(0)
    print(f"wrote {len(pairs)} pairs to {out}")
    if len(rot):
        print(f"rotation deg: min {rot.min():.2f} max {rot.max():.2f} mean {rot.mean():.2f} "
              f"std {rot.std():.2f}")
    return 0


def _dataset(path):
    try:
        return load_dataset(path)
    except OSError as exc:
        raise CliError(f"cannot read dataset {path}: {exc.strerror or exc}") from None
    except IngestionError as exc:
        raise CliError(f"{path}: {exc}") from None


def cmd_train(args) -> int:
    cfg = _config(args)
    pairs = _dataset(args.dataset)
    if not pairs:
        raise CliError(f"{args.dataset}: dataset is empty")
    heldout_path = args.heldout or cfg["paths"]["heldout"]
    heldout = _dataset(heldout_path) if heldout_path else None
    tcfg = cfg.train_config()
    out = _out(args, "model.ckpt")
    loss_csv = Path(args.loss_csv or cfg["paths"]["loss_csv"] or f"{out}.loss.csv")
    net = OrientationNet(cfg.architecture(), seed=tcfg.seed, atan2_eps=tcfg.atan2_eps)

    def progress(e):
        log.info("epoch %d/%d loss %.5f lr %.3g heldout %.2f deg", e["epoch"], tcfg.epochs,
                 e["mean_loss"], e["lr"], e["heldout_error_deg"])

    try:
        _, report = trainer.train(net, pairs, tcfg, heldout=heldout, checkpoint_path=out,
                                  checkpoint_every_epoch=args.checkpoint_every_epoch,
                                  progress=progress)
    except TrainingError as exc:
        raise CliError(f"training diverged: {exc}; last good parameters kept in {out}",
                       EXIT_DIVERGED) from None
    trainer.write_loss_csv(loss_csv, report)
    print(f"wrote checkpoint {out} and loss log {loss_csv} ({len(report.epochs)} epochs)")
    if report.epochs:
        print(f"loss: first {report.losses[0]:.5f} last {report.losses[-1]:.5f}")
    return 0


def cmd_detect(args) -> int:
    cfg = _config(args)
    img = _read_image(args.image)
    kps = detect_keypoints(img.pixels, cfg["data"]["max_keypoints"])
    out = _out(args, "keypoints.txt")
    save_keypoints(out, kps)
    print(f"wrote {len(kps)} keypoints to {out}")
    return 0


def cmd_predict(args) -> int:
    cfg = Config.load(args.config) if args.config else None
    net = _load_net(args.checkpoint, cfg)
    lam = cfg["data"]["lambda"] if cfg else 7.5
    img = _read_image(args.image)
    try:
        kps = load_keypoints(args.keypoints)
    except OSError as exc:
        raise CliError(f"cannot read keypoints {args.keypoints}: {exc.strerror}") from None
    except IngestionError as exc:
        raise CliError(str(exc)) from None
    pyr = Pyramid(img.pixels)
    rows, patches = [], []
    for i, k in enumerate(kps):
        ctx = pyr.context(k.x, k.y, k.sigma, i, lam)
        if not ctx.is_valid():
            log.info("keypoint %d at (%.1f, %.1f): support leaves the image", i, k.x, k.y)
            continue
        rows.append((i, k))
        patches.append(patch_from_context(ctx))
    if len(rows) < len(kps):
        log.warning("%d of %d keypoints skipped: support region leaves the image",
                    len(kps) - len(rows), len(kps))
    start = time.perf_counter()
    theta = np.zeros(0)
    if patches:
        theta, _ = net.predict_orientation(np.stack(patches)[:, None])
    elapsed = time.perf_counter() - start
    out = _out(args, "orientations.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "sigma", "theta_degrees"])
        for (i, k), t in zip(rows, theta):
            w.writerow([i, repr(k.x), repr(k.y), repr(k.sigma), repr(math.degrees(float(t)))])
    print(f"wrote {len(rows)} orientations to {out}")
    if rows:
        print(f"throughput: {1000.0 * elapsed / len(rows):.3f} ms per keypoint")
    return 0


def read_manifest(path):
    """Lines ``imgA imgB homography sequence``; relative paths are resolved against the file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CliError(f"cannot read manifest {path}: {exc.strerror}") from None
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 4:
            raise CliError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
        a, b, h, seq = fields
        entries.append((seq, path.parent / a, path.parent / b, path.parent / h))
    if not entries:
        raise CliError(f"{path}: manifest lists no image pairs")
    return entries


def cmd_eval(args) -> int:
    cfg = Config.load(args.config) if args.config else None
    net = _load_net(args.checkpoint, cfg)
    d = (cfg or Config())["data"]
    loaded = []
    for seq, a, b, h in read_manifest(args.manifest):
        if not h.exists():
            log.warning("sequence %s: homography %s missing, skipped", seq, h)
            continue
        try:
            hom = load_homography(h)
        except (IngestionError, ValueError) as exc:
            log.warning("sequence %s: %s, skipped", seq, exc)
            continue
        loaded.append((seq, _read_image(a), _read_image(b), hom))
    report = evaluation.evaluate_sequences(
        loaded, net, max_keypoints=d["max_keypoints"], lam=d["lambda"],
        dist_thresh=d["dist_thresh"])
    out = _out(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_sequence_csv(out / "sequences.csv", report)
    evaluation.write_summary_csv(out / "summary.csv", report)
    print(f"evaluated {len(report.sequences)} sequences; CSVs in {out}")
    if report.rows:
        ranks = evaluation.rank_methods(report)
        for m, ap in report.mean_ap().items():
            print(f"{m:<10} mAP {ap:.4f}  rank {ranks[m]:.2f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    pairs = _dataset(args.dataset)
    heldout = _dataset(args.heldout)
    if not pairs or not heldout:
        raise CliError("ablation needs non-empty training and held-out datasets")
    acts = args.activations.split(",") if args.activations else None
    rows = trainer.ablation(pairs, heldout, cfg.train_config(),
                            **({"activations": acts} if acts else {}),
                            progress=lambda r: log.info("%s median %.2f deg", r["activation"],
                                                        r["median_error_deg"]))
    out = _out(args, "ablation.csv")
    trainer.write_ablation_csv(out, rows)
    for r in rows:
        print(f"{r['activation']:<7} median {r['median_error_deg']:.2f} deg  "
              f"mean {r['mean_error_deg']:.2f} deg")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = gradcheck.run_gradcheck(seed)
    print(gradcheck.format_report(results))
    failed = [r.component for r in results if not r.passed]
    if failed:
        raise CliError(f"gradient check failed: {', '.join(failed)}", EXIT_GRADCHECK)
    return 0


def cmd_dump_config(args) -> int:
    text = _config(args).dumps()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides [training] seed")
    common.add_argument("--out", help="output path")
    common.add_argument("--verbose", "-v", action="store_true")

    p = argparse.ArgumentParser(prog="orient-learn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="synthesize training pairs")
    s.add_argument("images", nargs="+")
    s.add_argument("-n", type=int, help="number of pairs ([data] n_pairs)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train on a pairs file")
    s.add_argument("dataset")
    s.add_argument("--heldout", help="held-out pairs for the per-epoch angular error")
    s.add_argument("--loss-csv", help="per-epoch log (default: <out>.loss.csv)")
    s.add_argument("--checkpoint-every-epoch", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", parents=[common], help="DoG keypoints to a text file")
    s.add_argument("image")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("predict", parents=[common], help="orientations for keypoints")
    s.add_argument("checkpoint")
    s.add_argument("image")
    s.add_argument("keypoints")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", parents=[common], help="mAP of orientation methods")
    s.add_argument("checkpoint")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="train each activation, compare")
    s.add_argument("dataset")
    s.add_argument("heldout")
    s.add_argument("--activations", help="comma-separated subset")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("dump-config", parents=[common], help="print the effective config")
    s.set_defaults(func=cmd_dump_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
