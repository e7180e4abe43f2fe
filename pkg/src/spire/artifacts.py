"""Experimental-artifact operators and their ordered composition.

Four operators model the measurement chain: shot-to-shot fluence scaling
(F), Poisson photon counting (P), Gaussian readout noise (G), and a
beamstop mask (B). When several are enabled they are always applied in
the canonical F -> P -> G -> B order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CANONICAL_ORDER = "FPGB"


@dataclass
class FluenceModel:
    """Distribution of the per-shot brightness factor gamma.

    kind="lognormal": exp(N(mu_ln, sigma_ln^2)) clamped to clip_range.
    kind="empirical": kernel-density resampling of user samples (draw a
    sample, add N(0, bandwidth), clamp to the sample range).
    """

    kind: str = "lognormal"
    mu_ln: float = 0.0  # median exp(mu_ln) = 1
    sigma_ln: float = 0.45
    clip_range: tuple[float, float] = (0.3, 2.6)
    samples: np.ndarray | None = None
    bandwidth: float | None = None  # None: Silverman's rule

    def __post_init__(self):
        if self.kind not in ("lognormal", "empirical"):
            raise ValueError(f"unknown fluence model kind {self.kind!r}")
        if self.kind == "empirical":
            if self.samples is None or len(self.samples) == 0:
                raise ValueError("empirical fluence model requires samples")
            self.samples = np.asarray(self.samples, dtype=np.float64)
            if self.samples.min() <= 0:
                raise ValueError("fluence samples must be positive")
            self.clip_range = (float(self.samples.min()), float(self.samples.max()))
        lo, hi = self.clip_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad clip range {self.clip_range}")


def load_fluence_samples(text: str) -> np.ndarray:
    """One float per line; blank lines ignored."""
    values = [float(tok) for tok in text.split()]
    return np.asarray(values, dtype=np.float64)


def sample_gamma(model: FluenceModel, rng: np.random.Generator, size: int | None = None):
    """Draw brightness factor(s) from the model; always inside clip_range."""
    n = 1 if size is None else size
    if model.kind == "lognormal":
        g = np.exp(rng.normal(model.mu_ln, model.sigma_ln, size=n))
    else:
        s = model.samples
        bw = model.bandwidth
        if bw is None:
            bw = 1.06 * s.std() * len(s) ** (-0.2)
        g = s[rng.integers(0, len(s), size=n)] + rng.normal(0.0, bw, size=n)
    g = np.clip(g, *model.clip_range)
    return float(g[0]) if size is None else g


def apply_fluence(img: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return np.asarray(img, dtype=np.float64) * gamma


def apply_poisson(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    img = np.asarray(img)
    if not np.all(np.isfinite(img)) or img.min() < 0:
        raise ValueError("Poisson means must be finite and non-negative")
    return rng.poisson(img).astype(np.float64)


def apply_gaussian(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive per-pixel N(0, sigma) readout noise, clamped at zero."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    return np.maximum(img + rng.normal(0.0, sigma, size=img.shape), 0.0)


@dataclass
class BeamstopMask:
    """Binary detector mask: a central disk plus a strip running to the
    j=0 edge. Zeros mark blocked pixels."""

    bits: np.ndarray  # (n, n) uint8 in {0, 1}
    disk_radius_px: float = 5.0
    strip_width_px: int = 3


def build_beamstop_mask(
    n_side: int, disk_radius_px: float = 5.0, strip_width_px: int = 3
) -> BeamstopMask:
    """Disk of radius disk_radius_px about the geometric center
    ((n-1)/2, (n-1)/2), plus a strip_width_px-row strip from the center to
    the j=0 edge. For n_side=128 the strip covers rows {63, 64, 65} and
    columns [0, 63]."""
    if n_side < 16:
        raise ValueError("n_side must be >= 16")
    c = (n_side - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(n_side), np.arange(n_side), indexing="ij")
    blocked = (ii - c) ** 2 + (jj - c) ** 2 <= disk_radius_px**2

    mid = n_side // 2
    rows = np.arange(mid - strip_width_px // 2, mid - strip_width_px // 2 + strip_width_px)
    strip = np.isin(ii, rows) & (jj <= int(np.floor(c)))
    bits = np.where(blocked | strip, 0, 1).astype(np.uint8)
    return BeamstopMask(bits=bits, disk_radius_px=disk_radius_px, strip_width_px=strip_width_px)


def apply_beamstop(img: np.ndarray, mask: BeamstopMask) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape != mask.bits.shape:
        raise ValueError(f"image shape {img.shape} != mask shape {mask.bits.shape}")
    return img * mask.bits


@dataclass
class ArtifactConfig:
    """Which operators are enabled plus their parameters.

    The enabled set may be declared in any order; application always uses
    the canonical F -> P -> G -> B sequence.
    """

    enabled: frozenset = frozenset()
    gaussian_sigma: float = 0.05
    fluence: FluenceModel = field(default_factory=FluenceModel)
    seed: int = 0

    def __post_init__(self):
        self.enabled = frozenset(self.enabled)
        unknown = self.enabled - set(CANONICAL_ORDER)
        if unknown:
            raise ValueError(f"unknown artifact codes {sorted(unknown)}")


def corrupt(
    img: np.ndarray,
    cfg: ArtifactConfig,
    rng: np.random.Generator,
    mask: BeamstopMask | None = None,
) -> tuple[np.ndarray, float]:
    """Apply the enabled artifacts in canonical order.

    Returns (corrupted image, gamma_true); gamma_true is 1 when fluence
    scaling is disabled. The mask is built on demand if B is enabled and
    none is passed.
    """
    out = np.asarray(img, dtype=np.float64).copy()
    gamma = 1.0
    for code in CANONICAL_ORDER:
        if code not in cfg.enabled:
            continue
        if code == "F":
            gamma = sample_gamma(cfg.fluence, rng)
            out = apply_fluence(out, gamma)
        elif code == "P":
            out = apply_poisson(out, rng)
        elif code == "G":
            out = apply_gaussian(out, cfg.gaussian_sigma, rng)
        elif code == "B":
            if mask is None:
                mask = build_beamstop_mask(out.shape[0])
            out = apply_beamstop(out, mask)
    return out, gamma


def corrupt_dataset(
    images: np.ndarray, cfg: ArtifactConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt a stack of images with independent per-image substreams.

    Image k uses the stream seeded by (cfg.seed, k), so parallel and
    serial application produce bit-identical results.
    """
    images = np.asarray(images)
    out = np.empty_like(images, dtype=np.float64)
    gammas = np.empty(len(images))
    mask = build_beamstop_mask(images.shape[-1]) if "B" in cfg.enabled else None
    for k in range(len(images)):
        rng = np.random.default_rng([cfg.seed, k])
        out[k], gammas[k] = corrupt(images[k], cfg, rng, mask=mask)
    return out, gammas
