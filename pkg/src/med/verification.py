"""Self-checks run by ``med verify``: latent-mixing moments and noise statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corruption import apply_gaussian, apply_poisson, apply_salt_pepper, apply_speckle
from .disentangle import verify_lemma1

# (mu, sigma) cases; every one is run for each p below
LEMMA1_CASES = (
    ("standard", np.zeros(2), np.eye(2)),
    ("shifted-diag", np.array([3.0, -1.0]), np.diag([4.0, 9.0])),
    ("4d-diag", np.array([0.5, -2.0, 1.0, 0.0]), np.diag([0.25, 1.0, 2.0, 0.01])),
    ("degenerate", np.array([3.0, -1.0]), np.zeros((2, 2))),
)
LEMMA1_PS = (0.1, 0.3, 0.5, 0.9)
CORRELATED = np.array([[1.0, 0.8], [0.8, 1.0]])


@dataclass
class Check:
    name: str
    value: float
    target: float
    tol: float
    passed: bool

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.6g} (target {self.target:.6g} +/- {self.tol:.3g})"


def lemma1_suite(samples=100_000, tolerance_scale=1.0, seed=0):
    """Returns ``(reports, notes)``; ``notes`` are informational and do not gate."""
    rng = np.random.default_rng(seed)
    reports = []
    for _, mu, sigma in LEMMA1_CASES:
        for p in LEMMA1_PS:
            reports.append(verify_lemma1(mu, sigma, p, samples, rng, tolerance_scale))
    # full covariance is only kept when the whole vector shares one mask draw
    for p in LEMMA1_PS:
        reports.append(verify_lemma1(np.zeros(2), CORRELATED, p, samples, rng, tolerance_scale, mask_mode="shared"))
    notes = []
    for p in (0.5,):
        r = verify_lemma1(np.zeros(2), CORRELATED, p, samples, rng, tolerance_scale)
        shrink = p * p + (1 - p) ** 2
        notes.append(
            f"note: correlated sigma with per-coordinate masks, p={p:g}: off-diagonal cov"
            f" {r.cov[0, 1]:.4f} vs sigma {CORRELATED[0, 1]:.4f} (expected shrink factor {shrink:.3f})"
        )
    return reports, notes


def noise_statistics(pixels=1_000_000, seed=0):
    """Moment checks for the stochastic noise families on constant images."""
    side = int(round(np.sqrt(pixels)))
    checks = []
    gray = np.full((side, side, 1), 0.5)

    sigma = 25.0
    res = apply_gaussian(gray, sigma, seed) - gray
    target = sigma / 255
    checks.append(Check("gaussian residual std", res.std(), target, 0.02 * target, abs(res.std() - target) < 0.02 * target))

    r = 0.3
    out = apply_salt_pepper(gray, r, seed + 1)
    salt, pepper = float((out == 1.0).mean()), float((out == 0.0).mean())
    frac = salt + pepper
    checks.append(Check("salt-and-pepper affected fraction", frac, r, 0.005, abs(frac - r) < 0.005))
    ratio = salt / pepper
    checks.append(Check("salt-and-pepper salt:pepper ratio", ratio, 1.0, 0.02, abs(ratio - 1.0) < 0.02))

    lam = 10.0
    zero = np.zeros_like(gray)
    out = apply_poisson(zero, lam, seed + 2)
    m, v = out.mean(), out.var()
    checks.append(Check("poisson mean", m, lam / 255, 0.01 * lam / 255, abs(m - lam / 255) < 0.01 * lam / 255))
    checks.append(
        Check("poisson variance", v, lam / 255**2, 0.02 * lam / 255**2, abs(v - lam / 255**2) < 0.02 * lam / 255**2)
    )

    vlev = 50.0
    res = apply_speckle(gray, vlev, seed + 3) - gray
    target = 0.5 * vlev / 255
    checks.append(Check("speckle residual std", res.std(), target, 0.02 * target, abs(res.std() - target) < 0.02 * target))
    return checks
