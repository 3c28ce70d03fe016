"""Multi-view forward paths, Bernoulli latent mixing and the loss terms.

Parameter scopes of each loss (which networks it may move):

    scene   L_X : scene_encoder, scene_decoder
    noise   L_N : noise_encoder, noise_decoder
    cross   L_C : scene_encoder, noise_encoder, cross_decoder
    mix     L_M : scene_encoder, scene_decoder

The scopes coincide with the computational graph of each term, so a single
optimizer over all groups already receives correctly masked gradients.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import ROLES, cross_decode, decode_noise, decode_scene, encode_noise, encode_scene

SCOPES = {
    "scene": ("scene_encoder", "scene_decoder"),
    "noise": ("noise_encoder", "noise_decoder"),
    "cross": ("scene_encoder", "noise_encoder", "cross_decoder"),
    "mix": ("scene_encoder", "scene_decoder"),
}


@dataclass
class LossWeights:
    w_scene: float = 1.0
    w_noise: float = 1.0
    w_cross: float = 1.0
    lambda_mix: float = 0.025

    def __post_init__(self):
        for name in ("w_scene", "w_noise", "w_cross", "lambda_mix"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def for_path(self, path):
        return {"scene": self.w_scene, "noise": self.w_noise, "cross": self.w_cross, "mix": self.lambda_mix}[path]


# named presets; "table" is the final selection, "figure" the ablation-plot optimum
WEIGHT_PRESETS = {
    "table": LossWeights(1.0, 1.0, 1.0, 0.025),
    "figure": LossWeights(1.0, 1.0, 1.0, 0.05),
}


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------


def bernoulli_mask(shape, p, rng):
    """Boolean mask, True with probability ``p`` i.i.d. per element."""
    return rng.uniform(size=shape) < p


def _select(mask, m, n):
    if isinstance(m, torch.Tensor):
        mask = torch.tensor(np.asarray(mask), device=m.device)
        return torch.where(mask, m, n)
    return np.where(mask, m, n)


def mix_p(m, n, p, rng=None, mask=None):
    """Elementwise Bernoulli(p) blend: take ``m`` where the mask is 1, else ``n``.

    Works on numpy arrays and torch tensors.  Pass ``mask`` to reuse a draw.
    """
    if tuple(m.shape) != tuple(n.shape):
        raise ValueError(f"mix_p shape mismatch: {tuple(m.shape)} vs {tuple(n.shape)}")
    if mask is None:
        mask = bernoulli_mask(tuple(m.shape), p, rng)
    return _select(mask, m, n)


@dataclass
class Lemma1Report:
    p: float
    samples: int
    mu: np.ndarray
    sigma: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    mean_err: float
    mean_tol: float
    cov_err: np.ndarray
    cov_tol: np.ndarray
    passed: bool
    mask_mode: str = "elementwise"

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        worst = float(np.max(self.cov_err - self.cov_tol))
        return (
            f"{status} p={self.p:g} dim={len(self.mu)} n={self.samples} mask={self.mask_mode}"
            f" |mean-mu|inf={self.mean_err:.3e} (tol {self.mean_tol:.3e})"
            f" max(cov_err-tol)={worst:.3e}"
        )


def verify_lemma1(mu, sigma, p, samples=100_000, rng=None, tolerance_scale=1.0, mask_mode="elementwise"):
    """Monte Carlo check that mixing two i.i.d. N(mu, sigma) draws keeps N(mu, sigma).

    ``mask_mode="elementwise"`` draws one Bernoulli per coordinate (as in
    training); ``"shared"`` draws one per sample.  The mean must lie within
    4 standard errors (sup norm) and each covariance entry within 5 standard
    deviations of the sample-covariance estimator, both times
    ``tolerance_scale``.
    """
    if samples < 10_000:
        raise ValueError("need at least 1e4 samples")
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    d = len(mu)
    if sigma.shape != (d, d) or not np.allclose(sigma, sigma.T):
        raise ValueError("sigma must be a symmetric (d, d) matrix")
    w, v = np.linalg.eigh(sigma)
    if w.min() < -1e-10 * max(1.0, np.abs(w).max()):
        raise ValueError("sigma is not positive semidefinite")
    root = v * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.default_rng(0) if rng is None else rng

    a = mu + rng.standard_normal((samples, d)) @ root.T
    b = mu + rng.standard_normal((samples, d)) @ root.T
    shape = (samples, d) if mask_mode == "elementwise" else (samples, 1)
    mask = np.broadcast_to(bernoulli_mask(shape, p, rng), (samples, d))
    mixed = mix_p(a, b, p, mask=mask)

    mean = mixed.mean(axis=0)
    centred = mixed - mean
    cov = centred.T @ centred / (samples - 1)
    diag = np.diag(sigma)
    floor = 1e-12 * (1.0 + np.abs(mu).max())
    mean_tol = tolerance_scale * 4.0 * np.sqrt(diag.max()) / np.sqrt(samples) + floor
    mean_err = float(np.abs(mean - mu).max())
    cov_sd = np.sqrt((sigma**2 + np.outer(diag, diag)) / samples)
    cov_tol = tolerance_scale * 5.0 * cov_sd + 1e-12
    cov_err = np.abs(cov - sigma)
    passed = bool(mean_err < mean_tol and np.all(cov_err < cov_tol))
    return Lemma1Report(p, samples, mu, sigma, mean, cov, mean_err, mean_tol, cov_err, cov_tol, passed, mask_mode)


# ---------------------------------------------------------------------------
# forward paths
# ---------------------------------------------------------------------------


@dataclass
class Paths:
    z: list
    u: list
    x_hat: list
    eta_hat: list
    # y_hat[(i, j)] rebuilds view i from the scene latent of view j and the noise latent of view i
    y_hat: dict
    x_mix: torch.Tensor
    latent_mask: np.ndarray = field(repr=False, default=None)

    @property
    def k(self):
        return len(self.z)


def forward_paths(state, inputs, p=0.5, rng=None, latent_mask=None, share_spatial=False):
    """Run every MeD path over k >= 2 views.

    ``inputs`` is a list of (B, C, H, W) tensors, one per view.  For two
    views the latent mix is Bernoulli(p); for more views each latent element
    is drawn uniformly from the k scene latents.
    """
    k = len(inputs)
    if k < 2:
        raise ValueError("forward_paths needs at least two views")
    z = [encode_scene(state, y) for y in inputs]
    u = [encode_noise(state, y) for y in inputs]
    x_hat = [decode_scene(state, zi) for zi in z]
    eta_hat = [decode_noise(state, ui) for ui in u]
    y_hat = {(i, j): cross_decode(state, z[j], u[i]) for i, j in itertools.permutations(range(k), 2)}

    if latent_mask is None:
        shape = tuple(z[0].shape)
        if share_spatial:
            shape = (shape[0], 1) + shape[2:]
        if k == 2:
            latent_mask = bernoulli_mask(shape, p, rng)
        else:
            latent_mask = rng.integers(k, size=shape)
    latent_mask = np.broadcast_to(latent_mask, tuple(z[0].shape))
    if k == 2 and latent_mask.dtype == bool:
        z_mix = mix_p(z[0], z[1], p, mask=latent_mask)
    else:
        idx = torch.tensor(np.asarray(latent_mask, dtype=np.int64))
        z_mix = torch.gather(torch.stack(z), 0, idx.unsqueeze(0)).squeeze(0)
    x_mix = decode_scene(state, z_mix)
    return Paths(z, u, x_hat, eta_hat, y_hat, x_mix, latent_mask)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def distance(a, b, norm="l1"):
    if norm == "l1":
        return (a - b).abs().mean()
    if norm == "l2":
        return ((a - b) ** 2).mean()
    raise ValueError(f"unknown norm {norm!r}")


def loss_scene(x_hat, y_other, norm="l1"):
    return distance(x_hat, y_other, norm)


def loss_noise(y_i, eta_hat_i, y_j, norm="l1"):
    return distance(y_i - eta_hat_i, y_j, norm)


def loss_cross(y_hat_1, y_1, y_hat_2, y_2, norm="l1"):
    return distance(y_hat_1, y_1, norm) + distance(y_hat_2, y_2, norm)


def loss_mix(x_mix, y_1, y_2, p=0.5, rng=None, norm="l1", mask=None):
    return distance(x_mix, mix_p(y_1, y_2, p, rng, mask=mask), norm)


def pixel_mask_from_latent(latent_mask, image_shape):
    """Nearest-upsample a (B, 1, h, w) latent mask onto the pixel grid."""
    b, c, h, w = image_shape
    m = np.asarray(latent_mask)[:, :1]
    fy, fx = h // m.shape[2], w // m.shape[3]
    m = m.repeat(fy, axis=2).repeat(fx, axis=3)
    return np.broadcast_to(m, image_shape)


def med_terms(paths, targets, p=0.5, rng=None, norm="l1", share_mask=False):
    """Unweighted path losses for k views.

    Pairwise sums are scaled by 2 / (k (k - 1)), so for two views each term is
    exactly the symmetric sum over both orderings.
    """
    k = paths.k
    c = 2.0 / (k * (k - 1))
    pairs = list(itertools.permutations(range(k), 2))
    l_scene = c * sum(loss_scene(paths.x_hat[i], targets[j], norm) for i, j in pairs)
    l_noise = c * sum(loss_noise(targets[i], paths.eta_hat[i], targets[j], norm) for i, j in pairs)
    l_cross = c * sum(distance(paths.y_hat[(i, j)], targets[i], norm) for i, j in pairs)

    shape = tuple(targets[0].shape)
    if share_mask:
        pix = pixel_mask_from_latent(paths.latent_mask, shape)
    elif k == 2:
        pix = bernoulli_mask(shape, p, rng)
    else:
        pix = rng.integers(k, size=shape)
    if k == 2:
        l_mix = loss_mix(paths.x_mix, targets[0], targets[1], p, norm=norm, mask=pix)
    else:
        idx = torch.tensor(np.asarray(pix, dtype=np.int64))
        target = torch.gather(torch.stack(list(targets)), 0, idx.unsqueeze(0)).squeeze(0)
        l_mix = distance(paths.x_mix, target, norm)
    return {"scene": l_scene, "noise": l_noise, "cross": l_cross, "mix": l_mix}


@dataclass
class LossReport:
    l_scene: float
    l_noise: float
    l_cross: float
    l_mix: float
    total: float
    grad_norms: dict = field(default_factory=dict)
    tensor: torch.Tensor = field(default=None, repr=False)


def path_gradient_norms(state, terms, weights):
    """{path: {role: ||d(weight * term)/d(group)||}} computed in isolation per path."""
    out = {}
    params = {role: list(state.nets[role].parameters()) for role in ROLES}
    flat = [q for role in ROLES for q in params[role]]
    for path, term in terms.items():
        if not isinstance(term, torch.Tensor) or not term.requires_grad:
            out[path] = {role: 0.0 for role in ROLES}
            continue
        grads = torch.autograd.grad(weights.for_path(path) * term, flat, retain_graph=True, allow_unused=True)
        norms, pos = {}, 0
        for role in ROLES:
            g = grads[pos : pos + len(params[role])]
            pos += len(params[role])
            sq = sum(float((gi.double() ** 2).sum()) for gi in g if gi is not None)
            norms[role] = sq**0.5
        out[path] = norms
    return out


def _scalar(v):
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def total_loss(terms, weights, state=None):
    """Weighted sum of the four path losses; gradient norms per path when ``state`` is given."""
    total = (
        weights.w_scene * terms["scene"]
        + weights.w_noise * terms["noise"]
        + weights.w_cross * terms["cross"]
        + weights.lambda_mix * terms["mix"]
    )
    grad_norms = path_gradient_norms(state, terms, weights) if state is not None else {}
    return LossReport(
        _scalar(terms["scene"]),
        _scalar(terms["noise"]),
        _scalar(terms["cross"]),
        _scalar(terms["mix"]),
        _scalar(total),
        grad_norms,
        total if isinstance(total, torch.Tensor) else None,
    )
