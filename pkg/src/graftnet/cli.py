"""Command-line entry point: ``graftnet <train|eval|predict|synth|gradcheck|ablate> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (non-finite loss or a failed gradient check).
``GRAFTNET_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import gradcheck
from .ablation import STUDIES, run_study, split_samples
from .checkpoint import CheckpointError, load_checkpoint, restore_model, save_checkpoint
from .config import ConfigError, load_config, save_config
from .data import DataError, load_dataset, load_image, load_manifest, save_mask, synth_dataset
from .evaluation import evaluate_dataset, pcs, predict_logits
from .model import GraftNet
from .trainer import NumericalError, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("graftnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; we reserve 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _threads():
    raw = os.environ.get("GRAFTNET_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"GRAFTNET_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# -- subcommands -----------------------------------------------------------

def cmd_train(args) -> int:
    rc = load_config(args.config)
    if args.epochs is not None:
        rc = dataclasses.replace(rc, train=dataclasses.replace(rc.train, epochs=args.epochs).validate())
    manifest = load_manifest(args.data)
    samples = load_dataset(manifest, rc.model.cnn_input_hw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(rc, out / "config.ini")
    model = GraftNet(rc.model)
    with open(out / "train.log", "w", encoding="utf-8") as fh:

        def on_epoch(line):
            print(line, flush=True)
            fh.write(line + "\n")
            fh.flush()

        t0 = time.perf_counter()
        res = train(model, samples, rc.train, rc, out, on_epoch)
    ckpt = out / "model.trnc"
    save_checkpoint(ckpt, model, rc, res.optimizer, rc.train.epochs, res.step, np.random.default_rng(rc.train.seed))
    print(f"trained {len(samples)} images for {rc.train.epochs} epochs in {time.perf_counter() - t0:.1f}s; "
          f"checkpoint written to {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = restore_model(load_checkpoint(args.checkpoint))
    manifest = load_manifest(args.data)
    rep = evaluate_dataset(model, manifest, use_pcs=args.pcs, threshold=args.threshold, mask_dir=args.masks_out)
    print(rep.table())
    print(rep.records())
    return EXIT_OK


def cmd_predict(args) -> int:
    model = restore_model(load_checkpoint(args.checkpoint))
    src = Path(args.image)
    native = load_image(src)
    image = load_image(src, model.cfg.cnn_input_hw)
    z = predict_logits(model, image)
    prob = pcs(z) if args.pcs else 1.0 / (1.0 + np.exp(-z))
    mask = (prob >= 0.5).astype(np.uint8) * 255
    h, w = native.shape[1:]
    if mask.shape != (h, w):
        mask = np.asarray(Image.fromarray(mask, mode="L").resize((w, h), Image.NEAREST))
    save_mask(mask / 255.0, args.out)
    print(f"wrote {args.out} ({int((mask > 0).sum())} foreground pixels of {mask.size})")
    return EXIT_OK


def cmd_synth(args) -> int:
    m = synth_dataset(args.n, args.size, args.seed, args.out)
    print(f"wrote {len(m)} samples to {args.out}; manifest {m.path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = list(gradcheck.SUITES) if args.module == "all" else [args.module]
    ok = True
    for name in names:
        t0 = time.perf_counter()
        results = gradcheck.SUITES[name](seed=args.seed)
        limit = gradcheck.THRESHOLDS[name]
        worst = max(results.values())
        for check, err in results.items():
            print(f"{check:<24} rel_err={err:.3e}")
        status = "ok" if worst <= limit else "FAIL"
        print(f"[{name}] max rel err {worst:.3e} (limit {limit:.0e}) {status} in {time.perf_counter() - t0:.1f}s")
        ok &= worst <= limit
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_ablate(args) -> int:
    rc = load_config(args.config)
    if args.epochs is not None:
        rc = dataclasses.replace(rc, train=dataclasses.replace(rc.train, epochs=args.epochs).validate())
    samples = load_dataset(load_manifest(args.data), rc.model.cnn_input_hw)
    tr, te = split_samples(samples, args.test_fraction)
    res = run_study(args.study, rc, tr, te, seeds=range(args.seeds), threshold=args.threshold,
                    progress=lambda m: print(m, flush=True))
    print(res.table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graftnet", description="Dual-branch CNN/transformer segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train a model from a config file and manifest")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="manifest CSV")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--epochs", type=int, help="override [train] epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--pcs", action="store_true", help="apply probability correction before the metrics")
    e.add_argument("--threshold", type=float, help="binarize before Dice/IoU (soft metrics otherwise)")
    e.add_argument("--masks-out", help="also write predicted masks here")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="write a predicted mask for one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True, help="mask PNG path")
    pr.add_argument("--pcs", action="store_true")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("synth", help="generate a synthetic ellipse dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--module", choices=["all", *gradcheck.SUITES], default="all")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="run an ablation study and print a comparison table")
    a.add_argument("--study", choices=STUDIES, required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--test-fraction", type=float, default=0.25)
    a.add_argument("--epochs", type=int, help="override [train] epochs")
    a.add_argument("--threshold", type=float)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads():
            return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
