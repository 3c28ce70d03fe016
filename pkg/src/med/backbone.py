"""The five networks: scene encoder/decoder, noise encoder/decoder, cross decoder.

None of the encoder-decoder pairs has a global skip from input pixels to the
output.  Decoders only ever see latents, which is what makes the scene/noise
split meaningful.

Network roles and the parameter symbols they carry:

    scene_encoder  (theta)   y -> z
    scene_decoder  (psi)     z -> x_hat
    noise_encoder  (rho)     y -> u
    noise_decoder  (phi)     u -> eta_hat (signed residual)
    cross_decoder  (delta)   (z, u) -> y_hat
"""

from __future__ import annotations

import io
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_VERSION = 1

ROLES = ("scene_encoder", "scene_decoder", "noise_encoder", "noise_decoder", "cross_decoder")
SYMBOLS = dict(zip(ROLES, ("theta", "psi", "rho", "phi", "delta")))


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class BackboneConfig:
    kind: str = "windowed_attention"
    depth: int = 2
    channels: int = 60
    window: int = 8
    patch_embed: int = 1
    heads: int = 6
    in_channels: int = 3
    out_channels: int = 3
    mlp_ratio: float = 2.0

    def validate(self, image_size=None):
        if self.kind not in ("conv_small", "windowed_attention"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.depth < 1 or self.channels < 1:
            raise ConfigError("depth and channels must be >= 1")
        if self.kind == "conv_small" and self.patch_embed != 1:
            raise ConfigError("conv_small works at full resolution (patch_embed=1)")
        if self.kind == "windowed_attention":
            if self.channels % self.heads:
                raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
            if self.window < 1 or self.patch_embed < 1:
                raise ConfigError("window and patch_embed must be >= 1")
        if image_size is not None:
            check_spatial(self, *image_size)
        return self

    @property
    def multiple(self):
        """Input sides must be a multiple of this."""
        if self.kind == "windowed_attention":
            return self.patch_embed * self.window
        return 1


def check_spatial(cfg, h, w):
    m = cfg.multiple
    if h % m or w % m:
        raise ConfigError(
            f"input {h}x{w} incompatible with patch_embed={cfg.patch_embed}, window={cfg.window}"
            f" (sides must be multiples of {m})"
        )


# ---------------------------------------------------------------------------
# conv_small
# ---------------------------------------------------------------------------


def _conv_stack(cin, ch, cout, depth):
    layers = []
    c = cin
    for _ in range(depth):
        layers += [nn.Conv2d(c, ch, 3, padding=1), nn.ReLU(inplace=False)]
        c = ch
    layers.append(nn.Conv2d(ch, cout, 1))
    return nn.Sequential(*layers)


# ---------------------------------------------------------------------------
# windowed attention
# ---------------------------------------------------------------------------


class WindowAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        # x: (num_windows * B, N, C)
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class SwinBlock(nn.Module):
    """Pre-norm windowed self-attention + MLP. Shifted blocks roll the map cyclically.

    No relative position bias and no shift mask; locality comes from the
    surrounding convolutions.
    """

    def __init__(self, dim, heads, window, shift, mlp_ratio=2.0):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        b, c, h, w = x.shape
        ws = self.window
        t = x.permute(0, 2, 3, 1)
        s = self.norm1(t)
        if self.shift:
            s = torch.roll(s, shifts=(-(ws // 2), -(ws // 2)), dims=(1, 2))
        s = s.reshape(b, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)
        s = self.attn(s)
        s = s.reshape(b, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
        if self.shift:
            s = torch.roll(s, shifts=(ws // 2, ws // 2), dims=(1, 2))
        t = t + s
        t = t + self.mlp(self.norm2(t))
        return t.permute(0, 3, 1, 2)


def _blocks(cfg):
    return [
        SwinBlock(cfg.channels, cfg.heads, cfg.window, shift=bool(i % 2), mlp_ratio=cfg.mlp_ratio)
        for i in range(cfg.depth)
    ]


class AttentionEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        ch, p = cfg.channels, cfg.patch_embed
        self.conv_in = nn.Conv2d(cfg.in_channels, ch, 3, padding=1)
        self.embed = nn.Conv2d(ch, ch, p, stride=p)
        self.blocks = nn.Sequential(*_blocks(cfg))

    def forward(self, y):
        return self.blocks(self.embed(self.conv_in(y)))


class AttentionDecoder(nn.Module):
    def __init__(self, cfg, cin):
        super().__init__()
        ch, p = cfg.channels, cfg.patch_embed
        self.fuse = nn.Conv2d(cin, ch, 1) if cin != ch else nn.Identity()
        self.blocks = nn.Sequential(*_blocks(cfg))
        self.unembed = nn.ConvTranspose2d(ch, ch, p, stride=p)
        self.conv_out = nn.Conv2d(ch, cfg.out_channels, 3, padding=1)

    def forward(self, z):
        return self.conv_out(self.unembed(self.blocks(self.fuse(z))))


def _init_attention(module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# building
# ---------------------------------------------------------------------------


class CrossDecoder(nn.Module):
    """Decode a (scene, noise) latent pair fused by channel concatenation."""

    def __init__(self, inner):
        super().__init__()
        self.inner = inner

    def forward(self, z, u):
        if z.shape[-2:] != u.shape[-2:]:
            raise ConfigError(f"scene latent {tuple(z.shape)} and noise latent {tuple(u.shape)} not aligned")
        return self.inner(torch.cat([z, u], dim=1))


def _make(cfg, role):
    ch = cfg.channels
    if cfg.kind == "conv_small":
        if role in ("scene_encoder", "noise_encoder"):
            return _conv_stack(cfg.in_channels, ch, ch, cfg.depth)
        if role == "cross_decoder":
            return CrossDecoder(_conv_stack(2 * ch, ch, cfg.out_channels, cfg.depth))
        return _conv_stack(ch, ch, cfg.out_channels, cfg.depth)
    if role in ("scene_encoder", "noise_encoder"):
        net = AttentionEncoder(cfg)
    elif role == "cross_decoder":
        net = CrossDecoder(AttentionDecoder(cfg, 2 * ch))
    else:
        net = AttentionDecoder(cfg, ch)
    _init_attention(net)
    return net


@dataclass
class TrainState:
    cfg: BackboneConfig
    nets: nn.ModuleDict
    step: int = 0
    optimizer_state: dict = None
    frozen: bool = field(default=False, repr=False)

    def group(self, role):
        return list(self.nets[role].parameters())

    def freeze(self):
        """Read-only snapshot for inference."""
        nets = _clone_nets(self.nets)
        for p in nets.parameters():
            p.requires_grad_(False)
        nets.eval()
        return TrainState(self.cfg, nets, self.step, None, frozen=True)

    def to(self, dtype):
        self.nets.to(dtype)
        return self


def _clone_nets(nets):
    buf = io.BytesIO()
    torch.save(nets, buf)
    buf.seek(0)
    return torch.load(buf, weights_only=False)


def build_networks(cfg, seed=0, image_size=None):
    cfg.validate(image_size)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) & (2**63 - 1))
        nets = nn.ModuleDict({role: _make(cfg, role) for role in ROLES})
    return TrainState(cfg, nets)


def _check_input(state, y):
    if y.ndim != 4 or y.shape[1] != state.cfg.in_channels:
        raise ConfigError(f"expected (B, {state.cfg.in_channels}, H, W) input, got {tuple(y.shape)}")
    check_spatial(state.cfg, y.shape[2], y.shape[3])


def _check_latent(state, z):
    if z.ndim != 4 or z.shape[1] != state.cfg.channels:
        raise ConfigError(f"expected (B, {state.cfg.channels}, h, w) latent, got {tuple(z.shape)}")


def encode_scene(state, y):
    _check_input(state, y)
    return state.nets["scene_encoder"](y)


def decode_scene(state, z, clip=False):
    _check_latent(state, z)
    out = state.nets["scene_decoder"](z)
    return out.clamp(0, 1) if clip else out


def encode_noise(state, y):
    _check_input(state, y)
    return state.nets["noise_encoder"](y)


def decode_noise(state, u):
    _check_latent(state, u)
    return state.nets["noise_decoder"](u)


def cross_decode(state, z, u):
    _check_latent(state, z)
    _check_latent(state, u)
    return state.nets["cross_decoder"](z, u)


# ---------------------------------------------------------------------------
# numpy <-> torch
# ---------------------------------------------------------------------------


def to_batch(images, dtype=torch.float32):
    """Stack (H, W, C) arrays into a (B, C, H, W) tensor."""
    arr = np.stack([np.asarray(im) for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def from_batch(t):
    return t.detach().cpu().double().numpy().transpose(0, 2, 3, 1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, state, extra=None):
    """Write a versioned checkpoint atomically (temp file + rename)."""
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "backbone": asdict(state.cfg),
        "groups": {role: state.nets[role].state_dict() for role in ROLES},
        "optimizer": state.optimizer_state,
        "step": int(state.step),
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f"failed writing checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path):
    """Return ``(state, extra)``.  Fails loudly on version or shape mismatch."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # truncated zip, pickle errors, ...
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has version {payload.get('version') if isinstance(payload, dict) else None},"
            f" expected {CHECKPOINT_VERSION}"
        )
    cfg = BackboneConfig(**payload["backbone"])
    state = build_networks(cfg)
    sample = next(iter(payload["groups"]["scene_encoder"].values()))
    state.nets.to(sample.dtype)
    for role in ROLES:
        load_group(state, role, payload["groups"][role], source=str(path))
    state.step = payload["step"]
    state.optimizer_state = payload["optimizer"]
    return state, payload["extra"]


def group_mismatches(state, role, tensors):
    own = state.nets[role].state_dict()
    bad = []
    if set(own) != set(tensors):
        bad.append(f"{role}: parameter names differ")
    for name, t in tensors.items():
        if name in own and own[name].shape != t.shape:
            bad.append(f"{role}.{name}: {tuple(t.shape)} vs {tuple(own[name].shape)}")
    return bad


def load_group(state, role, tensors, source="checkpoint"):
    bad = group_mismatches(state, role, tensors)
    if bad:
        raise CheckpointError(f"shape mismatch loading {source}: " + "; ".join(bad))
    state.nets[role].load_state_dict(tensors)
