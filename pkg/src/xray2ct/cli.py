"""Command line entry point: ``xray2ct <command> ...``.

Exit codes: 0 success, 2 usage, 3 invalid config, 4 runtime failure. Failures print a
single ``error[<category>]: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _config(args):
    from .config import TrainConfig, load_config

    cfg = load_config(args.config) if args.config else TrainConfig().validate()
    if getattr(args, "out", None):
        cfg.out_dir = str(args.out)
    return cfg


def cmd_gen_data(args) -> list[Path]:
    from .phantom import PhantomSpec, build_dataset

    shape = tuple(args.shape) * (3 if len(args.shape) == 1 else 1)
    if len(shape) != 3:
        raise UsageError("--shape takes one extent or three (D H W)")
    spec = PhantomSpec(seed=args.seed, shape=shape)
    try:
        spec.validate()
    except ValueError as err:
        raise UsageError(str(err)) from err
    build_dataset(args.n, spec, args.out, seed=args.seed, test_fraction=args.test_fraction)
    return [Path(args.out) / "manifest.json"]


def cmd_train(args) -> list[Path]:
    from .trainer import train

    cfg = _config(args)
    if not cfg.manifest:
        from .config import ConfigError

        raise ConfigError("manifest", "training needs a dataset manifest")
    trainer = train(cfg)
    return [cfg.run_dir / "loss_log.csv", trainer.checkpoint_dir()]


def cmd_audit(args) -> list[Path]:
    from .evaluation import audit_from_config

    cfg = _config(args)
    report = audit_from_config(cfg)
    print(report.text())
    out = Path(args.out or cfg.out_dir) / "audit.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=1))
    return [out]


def _manifest(args) -> str:
    if args.manifest:
        return args.manifest
    if args.config:
        return _config(args).manifest
    if args.ckpt and Path(args.ckpt, "config.json").is_file():
        return json.loads(Path(args.ckpt, "config.json").read_text())["manifest"]
    raise UsageError("no dataset: pass --manifest or --config")


def cmd_eval(args) -> list[Path]:
    from .evaluation import evaluate

    report = evaluate(args.ckpt, _manifest(args), args.split)
    print(report.table())
    out = report.save(Path(args.out) / f"metrics_{args.split}.json")
    return [out]


def cmd_ablate(args) -> list[Path]:
    from .evaluation import TABLE3_GRID, ablation_table, run_ablation

    cfg = _config(args)
    if not cfg.manifest:
        from .config import ConfigError

        raise ConfigError("manifest", "ablation needs a dataset manifest")
    out = Path(args.out or cfg.out_dir)
    rows = run_ablation(cfg, TABLE3_GRID, args.split, out)
    print(ablation_table(rows))
    return [out / "ablation.json", out / "ablation.txt"]


def cmd_error_map(args) -> list[Path]:
    from .evaluation import IDENTITY_HOOK
    from .generator import generator_forward
    from .metrics import error_map, render_error_maps
    from .core import to_display
    from .phantom import load_split
    from .trainer import load_generator

    samples = load_split(_manifest(args), args.split)
    if args.id:
        samples = [s for s in samples if s.id == args.id]
        if not samples:
            raise UsageError(f"no sample {args.id!r} in split {args.split!r}")
    gen = None if args.ckpt == IDENTITY_HOOK else load_generator(args.ckpt)
    paths = []
    for s in samples[:1] if not args.id else samples:
        pred = s.ct.data if gen is None else generator_forward(gen, s.xrays).data
        emap = error_map(to_display(s.ct.data), to_display(pred))
        paths += render_error_maps(emap, args.out, prefix=s.id)
    return paths


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xray2ct", description="Biplanar X-ray to CT reconstruction pipeline.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--shape", type=int, nargs="+", default=[32])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("train", cmd_train, "train one configuration"),
                                 ("audit", cmd_audit, "epoch-0 loss-scale audit"),
                                 ("ablate", cmd_ablate, "train and score the component ablation grid")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="TOML or JSON run config (defaults when omitted)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        if name == "ablate":
            p.add_argument("--split", default="test")
        p.set_defaults(func=func)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint on a dataset split"),
                                 ("error-map", cmd_error_map, "render per-plane error maps")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--ckpt", required=True, help="checkpoint directory or 'identity-hook'")
        p.add_argument("--manifest")
        p.add_argument("--config")
        p.add_argument("--split", default="test")
        p.add_argument("--out", default=".")
        if name == "error-map":
            p.add_argument("--id", help="sample id (default: first sample of the split)")
        p.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    from .config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        paths = args.func(args)
    except UsageError as err:
        print(f"error[usage]: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as err:
        print(f"error[config]: {err.field_path}: {str(err).split(': ', 1)[-1]}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - mapped to the runtime exit code
        print(f"error[runtime]: {type(err).__name__}: {err}".replace("\n", " "), file=sys.stderr)
        return EXIT_RUNTIME
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
