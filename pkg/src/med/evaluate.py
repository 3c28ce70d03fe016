"""Benchmark runner: corrupt a test folder with fixed seeds, restore, score."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import load_checkpoint
from .corruption import FAMILY_PARAMS, CorruptionSpec, apply_spec, parse_pool
from .dataio import scan_dataset
from .metrics import psnr, ssim
from .trainer import denoise, parse_flat

CSV_COLUMNS = ("dataset", "family", "level", "checkpoint", "psnr", "ssim", "n_images")
IDENTITY = "identity"


class GridError(ValueError):
    pass


@dataclass
class Level:
    name: str
    family: str
    params: dict

    @property
    def value(self):
        nums = [v for v in self.params.values() if not isinstance(v, str)]
        return float(nums[0]) if nums else 0.0


@dataclass
class BenchmarkGrid:
    dataset: str
    levels: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    seed: int = 0
    tile: int = 0
    overlap: int = 16
    split: str = None


def parse_level(text, name=None):
    """``family name=value ...`` (one fixed level; ranges are not allowed here)."""
    pool = parse_pool(text)
    if len(pool.entries) != 1:
        raise GridError(f"level {text!r} must describe exactly one corruption")
    e = pool.entries[0]
    params = {}
    for key in FAMILY_PARAMS[e.family]:
        r = e.ranges[key]
        if key == "kernel":
            if len(r) != 1:
                raise GridError(f"level {text!r}: give one kernel")
            params[key] = r[0]
        else:
            if r[0] != r[1]:
                raise GridError(f"level {text!r}: test levels must be fixed values, got a range")
            params[key] = int(r[0]) if key in ("scale", "window") else float(r[0])
    CorruptionSpec(e.family, params, 0)
    if name is None:
        name = e.family + "".join(f"_{k}{v:g}" if not isinstance(v, str) else f"_{v}" for k, v in params.items())
    return Level(name, e.family, params)


def parse_grid(text, base_dir="."):
    """Flat grid file: ``dataset``, ``checkpoints``, ``seed``, ``tile``, ``overlap``, ``level.<name>``."""
    kv = parse_flat(text)
    if "dataset" not in kv:
        raise GridError("grid needs a dataset = DIR line")
    base = Path(base_dir)
    ds = kv.pop("dataset")
    grid = BenchmarkGrid(dataset=str(base / ds) if not Path(ds).is_absolute() else ds)
    for key, val in kv.items():
        if key.startswith("level."):
            grid.levels.append(parse_level(val, key.split(".", 1)[1]))
        elif key == "levels":
            grid.levels += [parse_level(part) for part in val.split("|") if part.strip()]
        elif key == "checkpoints":
            for c in (c.strip() for c in val.split(",")):
                if c:
                    grid.checkpoints.append(c if c == IDENTITY or Path(c).is_absolute() else str(base / c))
        elif key in ("seed", "tile", "overlap"):
            setattr(grid, key, int(val))
        elif key == "split":
            grid.split = val
        else:
            raise GridError(f"unknown grid key {key!r}")
    return grid


def eval_seed(seed, image, level):
    """Corruption seed fixed per (image, level) so every method sees the same input."""
    digest = hashlib.sha256(f"{seed}/{image}/{level}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def load_restorer(ref, tile=0, overlap=16):
    """Callable ``(img, mask) -> restored``; ``identity`` returns its input."""
    if ref == IDENTITY:
        return lambda img, mask=None: np.clip(img, 0.0, 1.0)
    path = Path(ref)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state, _ = load_checkpoint(path)
    state = state.freeze()
    return lambda img, mask=None: denoise(state, img, tile=tile or None, overlap=overlap, mask=mask)


def _images(dataset, split=None):
    root = Path(dataset)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset folder not found: {root}")
    man = scan_dataset(root)
    names = man.split(split) if split else man.files
    return [(n, man.load(n)) for n in names]


def evaluate_level(restore, images, level, seed, masked_only=False):
    """Mean PSNR/SSIM of ``restore`` over ``images`` under one corruption level."""
    ps, ss = [], []
    for name, clean in images:
        spec = CorruptionSpec(level.family, dict(level.params), eval_seed(seed, name, level.name))
        noisy, mask = apply_spec(clean, spec)
        out = restore(noisy, mask if level.family == "drop_mask" else None)
        ps.append(psnr(out, clean, mask=(1 - mask) if masked_only else None))
        ss.append(ssim(out, clean))
    return math.fsum(ps) / len(ps), math.fsum(ss) / len(ss)


def run_benchmark(grid, out_dir=None, plots=True, dataset_name=None):
    """Evaluate every (checkpoint, level) pair; returns rows, writes CSV/table/plots to ``out_dir``."""
    rows = []
    if grid.levels and grid.checkpoints:
        images = _images(grid.dataset, grid.split)
        restorers = {c: load_restorer(c, grid.tile, grid.overlap) for c in grid.checkpoints}
        dname = dataset_name or Path(grid.dataset).name
        for ckpt in grid.checkpoints:
            for level in grid.levels:
                p, s = evaluate_level(restorers[ckpt], images, level, grid.seed)
                rows.append(
                    {
                        "dataset": dname,
                        "family": level.family,
                        "level": level.name,
                        "level_value": level.value,
                        "checkpoint": ckpt if ckpt == IDENTITY else Path(ckpt).name,
                        "psnr": p,
                        "ssim": s,
                        "n_images": len(images),
                    }
                )
    if out_dir is not None:
        write_report(rows, out_dir, plots=plots)
    return rows


def rows_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r["dataset"], r["family"], r["level"], r["checkpoint"], f"{r['psnr']:.4f}", f"{r['ssim']:.4f}", r["n_images"]])
    return buf.getvalue()


def render_table(rows):
    """Plain-text table in the ``PSNR/SSIM`` cell style, levels down, checkpoints across."""
    if not rows:
        return "(empty grid)\n"
    ckpts = list(dict.fromkeys(r["checkpoint"] for r in rows))
    levels = list(dict.fromkeys(r["level"] for r in rows))
    cell = {(r["level"], r["checkpoint"]): f"{r['psnr']:.2f}/ {r['ssim']:.4f}" for r in rows}
    header = ["level"] + ckpts
    body = [[lv] + [cell.get((lv, c), "-") for c in ckpts] for lv in levels]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*r) for r in body]
    return "\n".join(lines) + "\n"


def write_report(rows, out_dir, stem="benchmark", plots=True):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.csv").write_text(rows_to_csv(rows))
    (out_dir / f"{stem}.txt").write_text(render_table(rows))
    if plots and rows:
        from .plotting import plot_benchmark

        plot_benchmark(rows, out_dir)


def run_sr_eval(ckpt, scales, dataset, kernel="bicubic", seed=0, out_dir=None, tile=0, overlap=16):
    """Super-resolution protocol: downscale-then-upscale input, restore, score on the clean grid."""
    levels = [Level(f"x{s}", "downscale", {"scale": int(s), "kernel": kernel}) for s in scales]
    grid = BenchmarkGrid(dataset=str(dataset), levels=levels, checkpoints=[ckpt], seed=seed, tile=tile, overlap=overlap)
    rows = run_benchmark(grid, plots=False)
    if out_dir is not None:
        write_report(rows, out_dir, stem="sr", plots=True)
    return rows


def run_inpaint_eval(ckpt, drop_ratios, dataset, seed=0, out_dir=None, masked_only=False, tile=0, overlap=16):
    """Inpainting protocol: random pixel drop; the mask reaches 4-channel models as an extra input."""
    images = _images(dataset)
    restore = load_restorer(ckpt, tile, overlap)
    rows = []
    for r in drop_ratios:
        level = Level(f"drop{r:g}", "drop_mask", {"drop_ratio": float(r)})
        p, s = evaluate_level(restore, images, level, seed, masked_only=masked_only)
        rows.append(
            {
                "dataset": Path(dataset).name,
                "family": "drop_mask",
                "level": level.name,
                "level_value": level.value,
                "checkpoint": ckpt if ckpt == IDENTITY else Path(ckpt).name,
                "psnr": p,
                "ssim": s,
                "n_images": len(images),
            }
        )
    if out_dir is not None:
        write_report(rows, out_dir, stem="inpaint", plots=True)
    return rows
