"""Command line entry point: ``med <subcommand> ...``.

Exit codes: 0 ok, 1 usage/configuration error, 2 data error (missing or
unreadable files), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("med")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _deterministic():
    import torch

    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def _write_replay(out_dir, argv, resolved):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"version": __version__, "argv": list(argv), "resolved": resolved}
    (out_dir / "replay.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_corrupt(args, argv):
    from .corruption import load_pool, sample_spec, apply_spec
    from .dataio import scan_dataset, write_png

    pool = load_pool(args.pool)
    man = scan_dataset(args.inp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in man.files:
        rng = np.random.default_rng([args.seed & (2**64 - 1), int(hashlib.sha256(name.encode()).hexdigest()[:15], 16)])
        img = man.load(name)
        for v in range(args.views):
            spec = sample_spec(pool, rng)
            noisy, mask = apply_spec(img, spec)
            stem = Path(name).stem + (f"_v{v}" if args.views > 1 else "")
            write_png(out / f"{stem}.png", noisy)
            rec = {"file": name, "out": f"{stem}.png", "family": spec.family, "params": spec.params, "seed": spec.seed}
            if spec.family == "drop_mask":
                write_png(out / f"{stem}_mask.png", mask)
                rec["mask"] = f"{stem}_mask.png"
            lines.append(json.dumps(rec, sort_keys=True))
    (out / "manifest.jsonl").write_text("".join(line + "\n" for line in lines))
    _write_replay(out, argv, {"pool": pool.to_text(), "seed": args.seed, "views": args.views, "in": args.inp})
    print(f"wrote {len(lines)} corrupted images to {out}")
    return EXIT_OK


def cmd_train(args, argv):
    from .dataio import scan_dataset
    from .plotting import plot_losses
    from .trainer import config_to_flat, load_config, parse_flat, resume, train

    if args.deterministic:
        _deterministic()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.data:
        overrides["data.root"] = args.data
    if args.out:
        overrides["out_dir"] = args.out
    if args.resume:
        from .backbone import load_checkpoint

        _, extra = load_checkpoint(args.resume)
        from .trainer import TrainConfig

        cfg = TrainConfig.from_dict(extra["train_config"])
        iters = int(overrides.get("iters", cfg.iters))
    else:
        if not args.config:
            raise UsageError("train needs --config (or --resume)")
        cfg = load_config(args.config, overrides)
    if not cfg.data_root:
        raise UsageError("no training data: set data.root in the config or pass --data")
    out_dir = Path(args.out or cfg.out_dir or "run")
    manifest = scan_dataset(cfg.data_root, cfg.split)
    if args.resume:
        result = resume(args.resume, manifest, out_dir=out_dir, iters=iters)
    else:
        result = train(cfg, manifest, out_dir=out_dir)
    (out_dir / "config.resolved").write_text(config_to_flat(result.cfg))
    _write_replay(out_dir, argv, parse_flat(config_to_flat(result.cfg)) | {"deterministic": args.deterministic})
    if (out_dir / "losses.csv").exists() and result.history:
        plot_losses(out_dir / "losses.csv", out_dir / "losses.png")
    last = result.history[-1][-1] if result.history else float("nan")
    print(f"trained to step {result.state.step}; final loss {last:.5f}; checkpoint {result.path}")
    return EXIT_OK


def cmd_denoise(args, argv):
    from .backbone import load_checkpoint
    from .dataio import scan_dataset, write_png
    from .trainer import denoise

    state, _ = load_checkpoint(args.ckpt)
    state = state.freeze()
    man = scan_dataset(args.inp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in man.files:
        img = man.load(name)
        write_png(out / (Path(name).stem + ".png"), denoise(state, img, tile=args.tile, overlap=args.overlap))
    _write_replay(out, argv, {"ckpt": args.ckpt, "tile": args.tile, "overlap": args.overlap})
    print(f"denoised {len(man.files)} images into {out}")
    return EXIT_OK


def cmd_eval(args, argv):
    from .evaluate import parse_grid, render_table, run_benchmark

    grid_path = Path(args.grid)
    if not grid_path.exists():
        raise FileNotFoundError(f"grid file not found: {grid_path}")
    grid = parse_grid(grid_path.read_text(), base_dir=grid_path.parent)
    if args.seed is not None:
        grid.seed = args.seed
    for c in grid.checkpoints:
        if c != "identity" and not Path(c).exists():
            raise FileNotFoundError(f"checkpoint not found: {c}")
    rows = run_benchmark(grid, out_dir=args.out, plots=not args.no_plots)
    _write_replay(args.out, argv, {"grid": grid_path.read_text(), "seed": grid.seed})
    sys.stdout.write(render_table(rows))
    return EXIT_OK


def cmd_sr_eval(args, argv):
    from .evaluate import render_table, run_sr_eval

    rows = run_sr_eval(args.ckpt, [int(s) for s in _csv_floats(args.scales)], args.data, args.kernel, args.seed, args.out)
    _write_replay(args.out, argv, vars(args) | {"func": None})
    sys.stdout.write(render_table(rows))
    return EXIT_OK


def cmd_inpaint_eval(args, argv):
    from .evaluate import render_table, run_inpaint_eval

    rows = run_inpaint_eval(args.ckpt, _csv_floats(args.ratios), args.data, args.seed, args.out, args.masked_only)
    _write_replay(args.out, argv, vars(args) | {"func": None})
    sys.stdout.write(render_table(rows))
    return EXIT_OK


def cmd_verify(args, argv):
    from .verification import lemma1_suite, noise_statistics

    run_all = not (args.lemma1 or args.noise)
    ok = True
    if args.lemma1 or run_all:
        reports, notes = lemma1_suite(args.samples, args.tolerance_scale, args.seed)
        print(f"latent mixing distribution check ({len(reports)} cases)")
        for r in reports:
            print("  " + r.line())
            ok &= r.passed
        for n in notes:
            print("  " + n)
    if args.noise or run_all:
        checks = noise_statistics(args.pixels, args.seed)
        print("noise statistics")
        for c in checks:
            print("  " + c.line())
            ok &= c.passed
    if args.out:
        _write_replay(args.out, argv, vars(args) | {"func": None})
    print("verify: " + ("PASS" if ok else "FAIL"))
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="med", description="Multi-view self-supervised disentangled denoising.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("corrupt", help="write corrupted copies of an image folder plus a replay manifest")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pool", required=True, help="pool file: 'family param=lo:hi weight' per line")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--views", type=int, default=1)
    s.set_defaults(func=cmd_corrupt)

    s = sub.add_parser("train", help="train a model from a key=value config")
    s.add_argument("--config")
    s.add_argument("--resume")
    s.add_argument("--deterministic", action="store_true")
    s.add_argument("--data", help="override data.root")
    s.add_argument("--out", help="run directory")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("denoise", help="restore every image in a folder")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tile", type=int, default=0)
    s.add_argument("--overlap", type=int, default=16)
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("eval", help="run a benchmark grid")
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sr-eval", help="super-resolution protocol")
    s.add_argument("--ckpt", required=True, help="checkpoint path or 'identity'")
    s.add_argument("--data", required=True)
    s.add_argument("--scales", default="2,3,4")
    s.add_argument("--kernel", default="bicubic", choices=("bicubic", "lanczos", "bilinear", "hamming"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sr_eval)

    s = sub.add_parser("inpaint-eval", help="random pixel-drop inpainting protocol")
    s.add_argument("--ckpt", required=True, help="checkpoint path or 'identity'")
    s.add_argument("--data", required=True)
    s.add_argument("--ratios", default="0.5,0.7,0.9")
    s.add_argument("--masked-only", action="store_true", help="score dropped pixels only")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_inpaint_eval)

    s = sub.add_parser("verify", help="latent-mixing and noise-statistics self checks")
    s.add_argument("--lemma1", action="store_true", help="latent mixing distribution suite")
    s.add_argument("--noise", action="store_true", help="noise model moment suite")
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--pixels", type=int, default=1_000_000)
    s.add_argument("--tolerance-scale", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    from .backbone import CheckpointError, ConfigError
    from .corruption import ParameterError, PoolConfigError
    from .dataio import DataConfigError, IngestionError
    from .evaluate import GridError
    from .trainer import NumericalError, TrainConfigError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, argv)
    except (UsageError, TrainConfigError, PoolConfigError, GridError, ConfigError, ParameterError, DataConfigError) as exc:
        print(f"med {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IngestionError, CheckpointError, OSError) as exc:
        print(f"med {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"med {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
