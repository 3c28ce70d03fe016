"""Training loop, baseline schemas, checkpoint rotation, resume, fine-tuning and inference."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .backbone import (
    ROLES,
    BackboneConfig,
    CheckpointError,
    TrainState,
    build_networks,
    decode_scene,
    encode_scene,
    group_mismatches,
    load_checkpoint,
    load_group,
    save_checkpoint,
    to_batch,
)
from .corruption import CorruptionPool, load_pool, parse_pool
from .dataio import batch_viewsets, step_rng
from .disentangle import LossWeights, distance, forward_paths, med_terms, total_loss

log = logging.getLogger(__name__)

SCHEMAS = ("med", "n2n", "n2c")
DEFAULT_POOL = "gaussian sigma=25:25 1"
LOSS_COLUMNS = ("step", "lr", "l_scene", "l_noise", "l_cross", "l_mix", "total")


class NumericalError(RuntimeError):
    pass


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    schema: str = "med"
    iters: int = 1000
    batch: int = 8
    patch: int = 48
    views: int = 2
    lr: float = 1e-4
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-8
    decay_every: int = 100_000
    decay_ratio: float = 0.5
    seed: int = 0
    pool: CorruptionPool = None
    weights: LossWeights = field(default_factory=LossWeights)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    ckpt_every: int = 10_000
    keep_last: int = 3
    norm: str = "l1"
    mix_p: float = 0.5
    share_mask: bool = False
    augment: bool = True
    data_root: str = None
    split: str = None
    out_dir: str = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.pool is None:
            self.pool = parse_pool(DEFAULT_POOL)
        self.validate()

    def validate(self):
        if self.schema not in SCHEMAS:
            raise TrainConfigError(f"schema must be one of {SCHEMAS}, got {self.schema!r}")
        if self.iters < 0 or self.batch < 1 or self.patch < 1:
            raise TrainConfigError("iters must be >= 0, batch and patch >= 1")
        if self.views < 2:
            raise TrainConfigError("views must be >= 2")
        if not 0 < self.decay_ratio <= 1 or self.decay_every < 1:
            raise TrainConfigError("need 0 < decay_ratio <= 1 and decay_every >= 1")
        if not 0 <= self.mix_p <= 1:
            raise TrainConfigError("mix.p must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise TrainConfigError("dtype must be float32 or float64")
        self.backbone.validate((self.patch, self.patch))

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self):
        d = asdict(self)
        d["pool"] = self.pool.to_text()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["pool"] = parse_pool(d["pool"])
        d["betas"] = tuple(d["betas"])
        d["weights"] = LossWeights(**d["weights"])
        d["backbone"] = BackboneConfig(**d["backbone"])
        return cls(**d)


# ---------------------------------------------------------------------------
# flat key=value config files
# ---------------------------------------------------------------------------

_ALIASES = {
    "data.patch": "patch",
    "data.batch": "batch",
    "data.views": "views",
    "data.augment": "augment",
    "data.root": "data_root",
    "data.split": "split",
    "mix.p": "mix_p",
    "mix.share_mask": "share_mask",
    "loss.norm": "norm",
    "optim.lr": "lr",
    "optim.eps": "eps",
}


def parse_flat(text):
    """``key = value`` lines, ``#`` comments, later keys override earlier ones."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise TrainConfigError(f"line {n}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _bool(v):
    if isinstance(v, bool):
        return v
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise TrainConfigError(f"not a boolean: {v!r}")


def config_from_flat(kv, base_dir="."):
    """Build a TrainConfig from a flat mapping (values may be strings)."""
    top = {f.name: f for f in fields(TrainConfig)}
    bb = {f.name: f for f in fields(BackboneConfig)}
    lw = {f.name: f for f in fields(LossWeights)}
    args, bargs, wargs = {}, {}, {}
    for key, val in kv.items():
        key = _ALIASES.get(key, key)
        val = str(val)
        if key.startswith("backbone."):
            name = key.split(".", 1)[1]
            if name not in bb:
                raise TrainConfigError(f"unknown config key {key!r}")
            bargs[name] = val if name == "kind" else (float(val) if name == "mlp_ratio" else int(val))
        elif key.startswith("loss."):
            name = key.split(".", 1)[1]
            if name not in lw:
                raise TrainConfigError(f"unknown config key {key!r}")
            wargs[name] = float(val)
        elif key == "pool":
            path = Path(base_dir) / val
            args["pool"] = load_pool(path) if "=" not in val and path.is_file() else parse_pool(val)
        elif key in ("beta1", "beta2"):
            args.setdefault("betas", [0.9, 0.99])
            args["betas"][0 if key == "beta1" else 1] = float(val)
        elif key == "betas":
            args["betas"] = [float(x) for x in val.split(",")]
        elif key in top:
            if key == "seed":
                args[key] = int(val)
            elif key in ("iters", "batch", "patch", "views", "decay_every", "ckpt_every", "keep_last"):
                args[key] = int(float(val))
            elif key in ("augment", "share_mask"):
                args[key] = _bool(val)
            elif key in ("lr", "eps", "decay_ratio", "mix_p"):
                args[key] = float(val)
            else:
                args[key] = val
        else:
            raise TrainConfigError(f"unknown config key {key!r}")
    if "betas" in args:
        args["betas"] = tuple(args["betas"])
    if bargs:
        args["backbone"] = BackboneConfig(**bargs)
    if wargs:
        args["weights"] = LossWeights(**wargs)
    return TrainConfig(**args)


def load_config(path, overrides=None):
    path = Path(path)
    kv = parse_flat(path.read_text())
    kv.update(overrides or {})
    return config_from_flat(kv, base_dir=path.parent)


def config_to_flat(cfg):
    lines = [
        f"schema = {cfg.schema}",
        f"iters = {cfg.iters}",
        f"batch = {cfg.batch}",
        f"patch = {cfg.patch}",
        f"views = {cfg.views}",
        f"lr = {cfg.lr!r}",
        f"betas = {cfg.betas[0]!r},{cfg.betas[1]!r}",
        f"eps = {cfg.eps!r}",
        f"decay_every = {cfg.decay_every}",
        f"decay_ratio = {cfg.decay_ratio!r}",
        f"seed = {cfg.seed}",
        f"pool = {' | '.join(cfg.pool.to_text().strip().splitlines())}",
        f"ckpt_every = {cfg.ckpt_every}",
        f"keep_last = {cfg.keep_last}",
        f"loss.norm = {cfg.norm}",
        f"mix.p = {cfg.mix_p!r}",
        f"mix.share_mask = {cfg.share_mask}",
        f"data.augment = {cfg.augment}",
        f"dtype = {cfg.dtype}",
    ]
    for k in ("data_root", "split", "out_dir"):
        if getattr(cfg, k) is not None:
            lines.append(f"{k} = {getattr(cfg, k)}")
    lines += [f"loss.{k} = {v!r}" for k, v in asdict(cfg.weights).items()]
    lines += [f"backbone.{k} = {v}" for k, v in asdict(cfg.backbone).items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------


def lr_at(step, lr0, decay_every, decay_ratio):
    """Step decay: ``lr0 * decay_ratio ** floor(step / decay_every)``."""
    return lr0 * decay_ratio ** (step // decay_every)


def make_optimizer(state, cfg):
    params = [p for role in ROLES for p in state.nets[role].parameters()]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=0.0)
    if state.optimizer_state is not None:
        opt.load_state_dict(state.optimizer_state)
    return opt


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    state: TrainState
    cfg: TrainConfig
    path: Path = None
    history: list = field(default_factory=list)
    loaded_groups: tuple = ()


def _inputs_and_targets(viewsets, cfg, dtype):
    k = viewsets[0].k
    targets = [to_batch([vs.views[i] for vs in viewsets], dtype) for i in range(k)]
    if cfg.backbone.in_channels == targets[0].shape[1] + 1:
        masks = [to_batch([vs.masks[i] for vs in viewsets], dtype) for i in range(k)]
        inputs = [torch.cat([t, m], dim=1) for t, m in zip(targets, masks)]
    else:
        inputs = targets
    return inputs, targets


def _step_losses(state, cfg, viewsets, mix_rng, dtype):
    """Differentiable terms for one batch; the clean image is only read for n2c."""
    inputs, targets = _inputs_and_targets([vs.stripped() for vs in viewsets], cfg, dtype)
    if cfg.schema == "med":
        paths = forward_paths(state, inputs, cfg.mix_p, mix_rng, share_spatial=cfg.share_mask)
        return med_terms(paths, targets, cfg.mix_p, mix_rng, cfg.norm, share_mask=cfg.share_mask)
    if cfg.schema == "n2n":
        target = targets[1]
    else:
        target = to_batch([vs.clean for vs in viewsets], dtype)
    pred = decode_scene(state, encode_scene(state, inputs[0]))
    zero = torch.zeros((), dtype=dtype)
    return {"scene": distance(pred, target, cfg.norm), "noise": zero, "cross": zero, "mix": zero}


def _ckpt_extra(cfg, step):
    # all randomness is derived from (seed, step, stream), so this is the full RNG state
    return {"train_config": cfg.to_dict(), "rng": {"seed": cfg.seed, "next_step": step, "streams": {"data": 0, "mix": 1}}}


def _rotate(out_dir, keep):
    ckpts = sorted(out_dir.glob("step_*.pt"), key=lambda p: int(p.stem.split("_")[1]))
    for old in ckpts[:-keep] if keep > 0 else []:
        old.unlink()


def _run(state, cfg, manifest, out_dir, start_step):
    dtype = cfg.torch_dtype
    state.nets.to(dtype)
    state.nets.train()
    opt = make_optimizer(state, cfg)
    history = []
    out_dir = Path(out_dir) if out_dir else None
    csv_file = events = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        new_log = start_step == 0 or not (out_dir / "losses.csv").exists()
        csv_file = open(out_dir / "losses.csv", "w" if new_log else "a", newline="")
        writer = csv.writer(csv_file)
        if new_log:
            writer.writerow(LOSS_COLUMNS)
        events = open(out_dir / "events.jsonl", "w" if new_log else "a")
        events.write(json.dumps({"event": "start", "step": start_step, "schema": cfg.schema}) + "\n")
    weights = cfg.weights if cfg.schema == "med" else LossWeights(1.0, 0.0, 0.0, 0.0)
    path = None
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed & (2**63 - 1))
            for step in range(start_step, cfg.iters):
                lr = lr_at(step, cfg.lr, cfg.decay_every, cfg.decay_ratio)
                for g in opt.param_groups:
                    g["lr"] = lr
                data_rng = step_rng(cfg.seed, step, 0)
                viewsets = batch_viewsets(manifest, cfg.pool, cfg.batch, cfg.views, cfg.patch, data_rng, cfg.augment)
                terms = _step_losses(state, cfg, viewsets, step_rng(cfg.seed, step, 1), dtype)
                report = total_loss(terms, weights)
                if not math.isfinite(report.total):
                    state.optimizer_state = opt.state_dict()
                    if out_dir:
                        snap = save_checkpoint(out_dir / f"nan_step_{step}.pt", state, _ckpt_extra(cfg, state.step))
                        events.write(json.dumps({"event": "nan", "step": step, "snapshot": str(snap)}) + "\n")
                    raise NumericalError(f"non-finite loss at step {step}: {report}")
                opt.zero_grad(set_to_none=True)
                report.tensor.backward()
                opt.step()
                state.step = step + 1
                row = (step, lr, report.l_scene, report.l_noise, report.l_cross, report.l_mix, report.total)
                history.append(row)
                if csv_file:
                    writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
                if out_dir and cfg.ckpt_every and state.step % cfg.ckpt_every == 0 and state.step < cfg.iters:
                    state.optimizer_state = opt.state_dict()
                    save_checkpoint(out_dir / f"step_{state.step}.pt", state, _ckpt_extra(cfg, state.step))
                    _rotate(out_dir, cfg.keep_last)
        state.optimizer_state = opt.state_dict()
        if out_dir:
            path = save_checkpoint(out_dir / f"step_{state.step}.pt", state, _ckpt_extra(cfg, state.step))
            _rotate(out_dir, cfg.keep_last)
            save_checkpoint(out_dir / "final.pt", state, _ckpt_extra(cfg, state.step))
            path = out_dir / "final.pt"
            events.write(json.dumps({"event": "done", "step": state.step}) + "\n")
    finally:
        if csv_file:
            csv_file.close()
            events.close()
    return TrainResult(state, cfg, path, history)


def train(cfg, manifest, out_dir=None, state=None):
    """Train from scratch (or from a prepared ``state``) for ``cfg.iters`` steps."""
    cfg.validate()
    if state is None:
        state = build_networks(cfg.backbone, cfg.seed, (cfg.patch, cfg.patch))
    return _run(state, cfg, manifest, out_dir or cfg.out_dir, state.step)


def resume(ckpt_path, manifest, out_dir=None, iters=None):
    """Continue a run from a checkpoint, optionally extending the iteration budget."""
    state, extra = load_checkpoint(ckpt_path)
    if "train_config" not in extra:
        raise CheckpointError(f"{ckpt_path} carries no training config")
    cfg = TrainConfig.from_dict(extra["train_config"])
    if iters is not None:
        cfg = replace(cfg, iters=iters)
    if state.step > cfg.iters:
        raise TrainConfigError(f"checkpoint is at step {state.step}, beyond iters={cfg.iters}")
    return _run(state, cfg, manifest, out_dir or Path(ckpt_path).parent, state.step)


def transfer_groups(schema):
    if schema == "med":
        return ROLES
    return ("scene_encoder", "scene_decoder")


def finetune(ckpt_path, cfg2, manifest, out_dir=None):
    """Load compatible groups from a checkpoint, reinitialise the rest, train under ``cfg2``."""
    src, _ = load_checkpoint(ckpt_path)
    state = build_networks(cfg2.backbone, cfg2.seed, (cfg2.patch, cfg2.patch))
    groups = transfer_groups(cfg2.schema)
    src_dtype = next(src.nets.parameters()).dtype
    state.nets.to(src_dtype)
    bad = []
    for role in groups:
        bad += group_mismatches(state, role, src.nets[role].state_dict())
    if bad:
        raise CheckpointError("incompatible backbone for fine-tuning:\n  " + "\n  ".join(bad))
    for role in groups:
        load_group(state, role, src.nets[role].state_dict(), source=str(ckpt_path))
    result = train(cfg2, manifest, out_dir=out_dir, state=state)
    result.loaded_groups = tuple(groups)
    return result


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _forward_image(state, img, mask=None):
    """D(G(img)) for one (H, W, C) array; pads (reflect) to the backbone multiple."""
    dtype = next(state.nets.parameters()).dtype
    h, w, _ = img.shape
    m = state.cfg.multiple
    ph, pw = (-h) % m, (-w) % m
    x = to_batch([img], dtype)
    if state.cfg.in_channels == img.shape[2] + 1:
        mk = np.ones((h, w, 1)) if mask is None else mask
        x = torch.cat([x, to_batch([mk], dtype)], dim=1)
    if ph or pw:
        x = torch.nn.functional.pad(x, (0, pw, 0, ph), mode="reflect")
    with torch.no_grad():
        out = decode_scene(state, encode_scene(state, x))
    return out[0, :, :h, :w].double().numpy().transpose(1, 2, 0)


def _starts(size, tile, overlap):
    if size <= tile:
        return [0]
    stride = tile - overlap
    if stride <= 0:
        raise ValueError("overlap must be smaller than tile")
    starts = list(range(0, size - tile, stride))
    starts.append(size - tile)
    return starts


def denoise(state, img, tile=None, overlap=16, mask=None):
    """Clipped scene reconstruction of ``img``; tiled with overlap for large inputs.

    Each tile drops ``overlap // 2`` pixels on every side that faces another
    tile, the remaining cores are averaged where they overlap.
    """
    was_training = state.nets.training
    state.nets.eval()
    img = np.asarray(img, dtype=np.float64)
    h, w, c = img.shape
    try:
        if not tile or (h <= tile and w <= tile):
            out = _forward_image(state, img, mask)
        else:
            acc = np.zeros((h, w, state.cfg.out_channels))
            wsum = np.zeros((h, w, 1))
            half = overlap // 2
            for top in _starts(h, tile, overlap):
                for left in _starts(w, tile, overlap):
                    bottom, right = min(top + tile, h), min(left + tile, w)
                    sub_mask = None if mask is None else mask[top:bottom, left:right]
                    pred = _forward_image(state, img[top:bottom, left:right], sub_mask)
                    weight = np.ones((bottom - top, right - left, 1))
                    if top > 0:
                        weight[:half] = 0
                    if bottom < h:
                        weight[weight.shape[0] - half :] = 0
                    if left > 0:
                        weight[:, :half] = 0
                    if right < w:
                        weight[:, weight.shape[1] - half :] = 0
                    acc[top:bottom, left:right] += pred * weight
                    wsum[top:bottom, left:right] += weight
            out = acc / np.maximum(wsum, 1e-12)
    finally:
        state.nets.train(was_training)
    return np.clip(out, 0.0, 1.0)
