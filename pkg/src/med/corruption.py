"""Synthetic corruptions and the pools they are drawn from.

All images are float arrays shaped (H, W, C) with values in [0, 1].  Noise
levels follow the usual 0-255 convention (``sigma=25`` means a standard
deviation of 25/255 on the unit scale).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage


class ParameterError(ValueError):
    pass


class PoolConfigError(ValueError):
    pass


KERNELS = ("bicubic", "lanczos", "bilinear", "hamming")

# required parameter names for each family
FAMILY_PARAMS = {
    "gaussian": ("sigma",),
    "local_var_gaussian": ("k", "window"),
    "poisson": ("lambda_mean",),
    "speckle": ("v",),
    "speckle_uniform": (),
    "salt_pepper": ("r",),
    "downscale": ("scale", "kernel"),
    "drop_mask": ("drop_ratio",),
    "identity": (),
}

DEFAULT_LVG_WINDOW = 7

_CV2_INTERP = {
    "bicubic": cv2.INTER_CUBIC,
    "lanczos": cv2.INTER_LANCZOS4,
    "bilinear": cv2.INTER_LINEAR,
}


def _rng(seed):
    return np.random.default_rng(np.uint64(seed))


def _as_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ParameterError(f"expected an (H, W, C) image, got shape {img.shape}")
    return img


# ---------------------------------------------------------------------------
# noise families
# ---------------------------------------------------------------------------


def apply_gaussian(img, sigma, seed):
    """Additive white Gaussian noise with std ``sigma/255``, clipped to [0, 1]."""
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    img = _as_image(img)
    if sigma == 0:
        return img.copy()
    noise = _rng(seed).normal(0.0, sigma / 255.0, size=img.shape)
    return np.clip(img + noise, 0.0, 1.0)


def local_std(img, window=DEFAULT_LVG_WINDOW):
    """Per-pixel, per-channel standard deviation over a ``window`` square.

    Borders are handled by reflection.  Windows whose values are all equal get
    an exact zero so flat regions stay untouched.
    """
    if window < 3 or window % 2 == 0:
        raise ParameterError(f"window must be odd and >= 3, got {window}")
    img = _as_image(img)
    size = (window, window, 1)
    mean = ndimage.uniform_filter(img, size=size, mode="reflect")
    mean_sq = ndimage.uniform_filter(img * img, size=size, mode="reflect")
    std = np.sqrt(np.maximum(mean_sq - mean * mean, 0.0))
    flat = ndimage.maximum_filter(img, size=size, mode="reflect") == ndimage.minimum_filter(
        img, size=size, mode="reflect"
    )
    std[flat] = 0.0
    return std


def apply_local_var_gaussian(img, k, window=DEFAULT_LVG_WINDOW, seed=0):
    """Gaussian noise whose per-pixel std is ``k`` times the local std."""
    if k < 0:
        raise ParameterError(f"k must be >= 0, got {k}")
    img = _as_image(img)
    std = local_std(img, int(window))
    if k == 0:
        return img.copy()
    noise = _rng(seed).standard_normal(img.shape) * (k * std)
    return np.clip(img + noise, 0.0, 1.0)


def apply_poisson(img, lambda_mean, seed):
    """Add a Poisson(lambda_mean) count on the 0-255 scale and saturate.

    The count is added to the signal rather than drawn around it, with a
    single mean shared by every pixel.
    """
    if lambda_mean < 0:
        raise ParameterError(f"lambda_mean must be >= 0, got {lambda_mean}")
    img = _as_image(img)
    if lambda_mean == 0:
        return img.copy()
    counts = _rng(seed).poisson(lambda_mean, size=img.shape)
    return np.clip(counts + img * 255.0, 0.0, 255.0) / 255.0


def apply_speckle(img, v, seed):
    """Multiplicative Gaussian speckle: ``x + x * n`` with ``n ~ N(0, (v/255)^2)``."""
    if v < 0:
        raise ParameterError(f"v must be >= 0, got {v}")
    img = _as_image(img)
    if v == 0:
        return img.copy()
    n = _rng(seed).normal(0.0, v / 255.0, size=img.shape)
    return np.clip(img + img * n, 0.0, 1.0)


def apply_speckle_uniform(img, seed):
    """Multiply every pixel by an independent U(0, 1) draw."""
    img = _as_image(img)
    return img * _rng(seed).uniform(0.0, 1.0, size=img.shape)


def apply_salt_pepper(img, r, seed, joint_channels=True):
    """Replace a fraction ``r`` of pixels, half with 1.0 (salt) and half with 0.0."""
    if not 0.0 <= r <= 1.0:
        raise ParameterError(f"r must lie in [0, 1], got {r}")
    img = _as_image(img)
    out = img.copy()
    if r == 0:
        return out
    h, w, c = img.shape
    u = _rng(seed).uniform(size=(h, w, 1) if joint_channels else (h, w, c))
    u = np.broadcast_to(u, img.shape)
    out[u < r / 2] = 1.0
    out[(u >= r / 2) & (u < r)] = 0.0
    return out


def downscale(img, scale, kernel="bicubic"):
    """Shrink by an integer factor with the named interpolation kernel."""
    if scale not in (2, 3, 4):
        raise ParameterError(f"scale must be 2, 3 or 4, got {scale}")
    if kernel not in KERNELS:
        raise ParameterError(f"unknown kernel {kernel!r}")
    img = _as_image(img)
    h, w, c = img.shape
    if h % scale or w % scale:
        raise ParameterError(f"image {h}x{w} is not divisible by scale {scale}")
    size = (w // scale, h // scale)
    if kernel == "hamming":
        # OpenCV has no Hamming filter; PIL's float mode does.
        chans = [
            np.asarray(Image.fromarray(img[:, :, i].astype(np.float32), mode="F").resize(size, Image.HAMMING))
            for i in range(c)
        ]
        return np.stack(chans, axis=-1).astype(np.float64)
    small = cv2.resize(img, size, interpolation=_CV2_INTERP[kernel])
    return small.reshape(size[1], size[0], c)


def apply_downscale(img, scale, kernel="bicubic"):
    """Downscale then bicubic-upscale back to the input grid."""
    img = _as_image(img)
    h, w, c = img.shape
    small = downscale(img, scale, kernel)
    up = cv2.resize(small, (w, h), interpolation=cv2.INTER_CUBIC).reshape(h, w, c)
    return np.clip(up, 0.0, 1.0)


def apply_drop_mask(img, drop_ratio, seed):
    """Zero an exact ``round(drop_ratio * H * W)`` pixels chosen by permutation.

    Returns ``(image, mask)`` where mask is (H, W, 1) with 1 on kept pixels.
    """
    if not 0.0 <= drop_ratio < 1.0:
        raise ParameterError(f"drop_ratio must lie in [0, 1), got {drop_ratio}")
    img = _as_image(img)
    h, w, _ = img.shape
    n_drop = int(round(drop_ratio * h * w))
    mask = np.ones(h * w)
    mask[_rng(seed).permutation(h * w)[:n_drop]] = 0.0
    mask = mask.reshape(h, w, 1)
    return img * mask, mask


# ---------------------------------------------------------------------------
# specs and pools
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorruptionSpec:
    family: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        validate_params(self.family, self.params)

    def to_json(self):
        return json.dumps({"family": self.family, "params": self.params, "seed": int(self.seed)}, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(d["family"], dict(d.get("params", {})), int(d.get("seed", 0)))


def validate_params(family, params):
    if family not in FAMILY_PARAMS:
        raise ParameterError(f"unknown corruption family {family!r}")
    required = set(FAMILY_PARAMS[family])
    if set(params) != required:
        raise ParameterError(f"{family} needs params {sorted(required)}, got {sorted(params)}")
    p = params
    if family == "gaussian" and p["sigma"] < 0:
        raise ParameterError("sigma must be >= 0")
    if family == "local_var_gaussian":
        if p["k"] < 0:
            raise ParameterError("k must be >= 0")
        if int(p["window"]) != p["window"] or p["window"] < 3 or p["window"] % 2 == 0:
            raise ParameterError("window must be an odd integer >= 3")
    if family == "poisson" and p["lambda_mean"] < 0:
        raise ParameterError("lambda_mean must be >= 0")
    if family == "speckle" and p["v"] < 0:
        raise ParameterError("v must be >= 0")
    if family == "salt_pepper" and not 0 <= p["r"] <= 1:
        raise ParameterError("r must lie in [0, 1]")
    if family == "downscale":
        if p["scale"] not in (2, 3, 4):
            raise ParameterError("scale must be 2, 3 or 4")
        if p["kernel"] not in KERNELS:
            raise ParameterError(f"kernel must be one of {KERNELS}")
    if family == "drop_mask" and not 0 <= p["drop_ratio"] < 1:
        raise ParameterError("drop_ratio must lie in [0, 1)")


def apply_spec(img, spec):
    """Apply a spec; returns ``(image, mask)`` (mask is all-ones unless pixels were dropped)."""
    img = _as_image(img)
    f, p, s = spec.family, spec.params, spec.seed
    mask = None
    if f == "gaussian":
        out = apply_gaussian(img, p["sigma"], s)
    elif f == "local_var_gaussian":
        out = apply_local_var_gaussian(img, p["k"], int(p["window"]), s)
    elif f == "poisson":
        out = apply_poisson(img, p["lambda_mean"], s)
    elif f == "speckle":
        out = apply_speckle(img, p["v"], s)
    elif f == "speckle_uniform":
        out = apply_speckle_uniform(img, s)
    elif f == "salt_pepper":
        out = apply_salt_pepper(img, p["r"], s)
    elif f == "downscale":
        out = apply_downscale(img, int(p["scale"]), p["kernel"])
    elif f == "drop_mask":
        out, mask = apply_drop_mask(img, p["drop_ratio"], s)
    else:
        out = img.copy()
    if mask is None:
        mask = np.ones(img.shape[:2] + (1,))
    return out, mask


@dataclass
class PoolEntry:
    family: str
    ranges: dict  # name -> (lo, hi) for numbers, or tuple of choices for kernel
    weight: float = 1.0


@dataclass
class CorruptionPool:
    entries: list

    def __post_init__(self):
        if not self.entries:
            raise PoolConfigError("corruption pool is empty")
        for e in self.entries:
            if e.weight < 0:
                raise PoolConfigError(f"negative weight for {e.family}")
        if sum(e.weight for e in self.entries) <= 0:
            raise PoolConfigError("pool weights sum to zero")

    @classmethod
    def single(cls, family, **params):
        ranges = {k: (v if isinstance(v, str) else (v, v)) for k, v in params.items()}
        if isinstance(ranges.get("kernel"), str):
            ranges["kernel"] = (ranges["kernel"],)
        return cls([PoolEntry(family, ranges, 1.0)])

    def to_text(self):
        return "\n".join(_format_entry(e) for e in self.entries) + "\n"


_INT_PARAMS = {"scale", "window"}


def _format_entry(e):
    parts = [e.family]
    for name, rng in e.ranges.items():
        if name == "kernel":
            parts.append(f"kernel={','.join(rng)}")
        else:
            lo, hi = rng
            parts.append(f"{name}={float(lo)!r}:{float(hi)!r}")
    parts.append(repr(float(e.weight)))
    return " ".join(parts)


def parse_pool(text):
    """Parse pool lines of the form ``family name=lo:hi ... weight``.

    ``#`` starts a comment; ``|`` may separate several entries on one line.
    A bare ``name=value`` is a degenerate range, ``kernel`` takes a comma list.
    """
    entries = []
    for raw in text.replace("|", "\n").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        family, rest = toks[0], toks[1:]
        if family not in FAMILY_PARAMS:
            raise PoolConfigError(f"unknown family {family!r} in pool line {raw!r}")
        weight = 1.0
        if rest and "=" not in rest[-1]:
            weight = float(rest.pop())
        ranges = {}
        for tok in rest:
            if "=" not in tok:
                raise PoolConfigError(f"bad token {tok!r} in pool line {raw!r}")
            name, val = tok.split("=", 1)
            if name == "kernel":
                ranges[name] = tuple(val.split(","))
                continue
            try:
                lo, hi = (float(x) for x in val.split(":")) if ":" in val else (float(val),) * 2
            except ValueError:
                raise PoolConfigError(f"bad range {tok!r} in pool line {raw!r}") from None
            if hi < lo:
                raise PoolConfigError(f"empty range {tok!r}")
            ranges[name] = (lo, hi)
        if family == "local_var_gaussian":
            ranges.setdefault("window", (DEFAULT_LVG_WINDOW, DEFAULT_LVG_WINDOW))
        if family == "downscale":
            ranges.setdefault("kernel", ("bicubic",))
        missing = set(FAMILY_PARAMS[family]) - set(ranges)
        extra = set(ranges) - set(FAMILY_PARAMS[family])
        if missing or extra:
            raise PoolConfigError(f"{family}: missing {sorted(missing)}, unexpected {sorted(extra)}")
        if not weight > 0:
            raise PoolConfigError(f"weight must be > 0 in pool line {raw!r}")
        _check_ranges(family, ranges, raw)
        entries.append(PoolEntry(family, ranges, weight))
    return CorruptionPool(entries)


def _check_ranges(family, ranges, raw):
    """Both ends of every range must be valid parameter values."""
    for end in (0, 1):
        params = {}
        for name, r in ranges.items():
            if name == "kernel":
                continue
            params[name] = r[end]
        if "window" in params:
            lo, hi = ranges["window"]
            odd = [w for w in range(math.ceil(lo), math.floor(hi) + 1) if w % 2]
            params["window"] = odd[0] if odd else lo
        for kernel in ranges.get("kernel", (None,)):
            if kernel is not None:
                params["kernel"] = kernel
            try:
                validate_params(family, params)
            except ParameterError as exc:
                raise PoolConfigError(f"{exc} in pool line {raw!r}") from None


def load_pool(path):
    return parse_pool(Path(path).read_text())


def sample_spec(pool, rng):
    """Draw one CorruptionSpec from ``pool`` using the numpy Generator ``rng``."""
    if not pool.entries:
        raise PoolConfigError("corruption pool is empty")
    w = np.array([e.weight for e in pool.entries], dtype=np.float64)
    entry = pool.entries[rng.choice(len(w), p=w / w.sum())]
    params = {}
    for name in FAMILY_PARAMS[entry.family]:
        r = entry.ranges[name]
        if name == "kernel":
            params[name] = r[rng.integers(len(r))]
        elif name in _INT_PARAMS:
            lo, hi = int(r[0]), int(r[1])
            if name == "window":
                params[name] = int(rng.choice(np.arange(lo, hi + 1)[np.arange(lo, hi + 1) % 2 == 1]))
            else:
                params[name] = int(rng.integers(lo, hi + 1))
        else:
            params[name] = float(rng.uniform(r[0], r[1]))
    seed = int(rng.integers(0, 2**63 - 1))
    return CorruptionSpec(entry.family, params, seed)
