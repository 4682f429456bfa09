"""Command line entry point: ``sgsln <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("sgsln")


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def cmd_synth(args) -> int:
    from .data import SceneSpec, gen_dataset, write_dataset, write_manifest

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        return _fail(f"{out} exists and is not empty (use --force to overwrite)")
    try:
        spec = SceneSpec.for_size(args.size)
    except ValueError as exc:
        return _fail(str(exc))
    samples = gen_dataset(spec, args.scenario, args.n, args.seed)
    write_dataset(out, samples)
    write_manifest(out, spec, args.scenario, args.seed, args.n)
    print(f"wrote {len(samples)} pairs to {out}")
    return 0


def _load_or_synth(cfg, data: str | None):
    from .data import SceneSpec, gen_dataset, read_dataset

    if data:
        samples = list(read_dataset(data))
        if not samples:
            raise ValueError(f"no samples found under {data}")
        return samples
    spec = SceneSpec.for_size(cfg["data.size"])
    return gen_dataset(spec, cfg["data.scenario"], cfg["data.count"], cfg["seed"])


def cmd_train(args) -> int:
    from . import checkpoint
    from .config import RunConfig
    from .data import split
    from .train import format_log, train_loop

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    samples = _load_or_synth(cfg, args.data)
    vf = cfg["train.val_fraction"]
    train_set, val_set, _ = split(samples, (1 - vf, vf, 0.0), seed=cfg["seed"])
    result = train_loop(cfg.model_config(), train_set, val_set or train_set, cfg.train_config())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / "best.ckpt", result.best)
    (out / "log.csv").write_text(format_log(result.log))
    (out / "config.txt").write_text(cfg.dump())
    print(f"checkpoint: {out / 'best.ckpt'}")
    print(f"log: {out / 'log.csv'}")
    return 2 if result.diverged else 0


def cmd_eval(args) -> int:
    from . import checkpoint
    from .data import read_dataset
    from .metrics import csv_rows, format_report
    from .train import evaluate, model_from_checkpoint

    model = model_from_checkpoint(checkpoint.load(args.ckpt))
    samples = list(read_dataset(args.data))
    if not samples:
        return _fail(f"no samples found under {args.data}")
    m, counts = evaluate(model, samples, threshold=args.threshold)
    print(format_report(m, counts))
    if args.csv:
        Path(args.csv).write_text(csv_rows(m))
    return 0


def cmd_predict(args) -> int:
    from PIL import Image

    from . import checkpoint
    from .autograd import Tensor
    from .data import read_image
    from .metrics import binarize
    from .train import model_from_checkpoint

    model = model_from_checkpoint(checkpoint.load(args.ckpt))
    a, b = read_image(args.a), read_image(args.b)
    if a.shape != b.shape:
        return _fail(f"image extents differ: {a.shape} vs {b.shape}")
    t1 = Tensor(a.transpose(2, 0, 1)[None].copy())
    t2 = Tensor(b.transpose(2, 0, 1)[None].copy())
    out = model.predict(t1, t2)

    def save(mask, path):
        Image.fromarray(binarize(mask.data[0, 0], args.threshold) * np.uint8(255), "L").save(path)

    dest = Path(args.out)
    save(out.fusion, dest)
    if args.branches:
        if out.t1 is None:
            return _fail("this model variant has no branch outputs")
        save(out.t1, dest.with_name(dest.stem + "_t1" + dest.suffix))
        save(out.t2, dest.with_name(dest.stem + "_t2" + dest.suffix))
    return 0


def cmd_inspect(args) -> int:
    from .config import RunConfig
    from .model import ModelConfig, build_model, count_params, estimate_flops

    if args.config:
        mc = RunConfig.load(args.config).model_config()
    else:
        mc = ModelConfig(variant=args.variant, max_width=args.width)
    model = build_model(mc)
    table, total = count_params(model, depth=args.depth)
    flops, kinds = estimate_flops(model, args.size, args.size)
    print(f"model {mc.variant}/{mc.max_width}  stage widths {mc.widths}")
    print(f"{'module':<32} {'params':>12}")
    for name, n in table.items():
        print(f"{name:<32} {n:>12,}")
    print(f"{'total':<32} {total:>12,}  ({total / 1e6:.3f} M)")
    print(f"FLOPs at {args.size}x{args.size}: {flops / 1e9:.3f} G "
          f"(multiply-accumulates: {kinds.get('conv', 0) / 2e9:.3f} G in convolutions)")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed)
    worst = 0.0
    for name, err in results.items():
        ok = err <= args.tol
        worst = max(worst, err)
        print(f"{'PASS' if ok else 'FAIL'}  {name:<28} max rel err {err:.3e}")
    print(f"worst {worst:.3e} (tolerance {args.tol:g})")
    return 0 if worst <= args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgsln", description="Bitemporal change detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset in A/B/label layout")
    s.add_argument("--scenario", required=True, type=str.upper, choices=["ICCD", "SVBCD", "MVBCD"])
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model; writes best.ckpt and log.csv")
    s.add_argument("--config")
    s.add_argument("--data", help="dataset root; synthesised from the config when omitted")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--csv", help="also write metric,value rows here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="write a change mask PNG for one image pair")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--branches", action="store_true", help="also write the two half-size branch masks")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("inspect", help="parameter and FLOP table")
    s.add_argument("--config")
    s.add_argument("--variant", default="EDED", type=str.upper)
    s.add_argument("--width", type=int, default=512)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--depth", type=int, default=2)
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
