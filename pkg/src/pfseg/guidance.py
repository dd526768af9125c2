"""Guidance-patch selection: random, central and variance-driven selective cropping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .volume import PatchSpec, Volume


@dataclass
class CropSearchConfig:
    """Scan resolution for :func:`selective_crop`.

    ``r_step`` is a fraction of the half-diagonal ``L``; the angular steps are
    in radians. ``strict`` returns the best patch as soon as one candidate
    leaves the volume instead of skipping that candidate.
    """

    patch_size: tuple[int, int, int]
    r_step: float = 1 / 6
    theta_step: float = math.pi / 6
    phi_step: float = math.pi / 3
    patience: int = 10
    strict: bool = False

    def __post_init__(self):
        if min(self.r_step, self.theta_step, self.phi_step) <= 0:
            raise ValueError("search steps must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def describe(self) -> str:
        return f"{_frac_label(self.r_step, 'L')} {_frac_label(self.theta_step / math.pi, 'pi')} {_frac_label(self.phi_step / math.pi, 'pi')}"


def _frac_label(x: float, unit: str) -> str:
    inv = 1 / x
    if abs(inv - round(inv)) < 1e-9:
        n = int(round(inv))
        return unit if n == 1 else f"{unit}/{n}"
    return f"{x:g}{unit}"


@dataclass
class CropSearchTrace:
    visited: list[tuple[tuple[int, int, int], float]] = field(default_factory=list)
    best: PatchSpec | None = None
    best_variance: float = float("-inf")
    exit_reason: str = "exhausted"


def patch_variance(volume: Volume, spec: PatchSpec) -> float:
    """Population variance of the patch voxels, two-pass in float64."""
    if not spec.inside(volume.dims):
        raise ValueError(f"patch {spec} lies outside volume of dims {volume.dims}")
    x = volume.data[(slice(None),) + spec.slices()].astype(np.float64)
    mu = x.mean()
    return float(((x - mu) ** 2).mean())


def spherical_to_center(r: float, theta: float, phi: float, dims) -> tuple[int, int, int]:
    """Scan point to voxel indices, origin at the volume centre, rounded half-up."""
    if r < 0:
        raise ValueError("r must be non-negative")
    w, h, d = dims
    x = r * math.sin(theta) * math.cos(phi) + w / 2
    y = r * math.sin(theta) * math.sin(phi) + h / 2
    z = r * math.cos(theta) + d / 2
    return tuple(int(math.floor(v + 0.5)) for v in (x, y, z))


def additive_center(r: float, theta: float, phi: float, dims) -> tuple[int, int, int]:
    """Variant map adding the r·sin(theta) and r·cos(phi) terms instead of multiplying them; diagnostics only."""
    w, h, d = dims
    x = r * math.sin(theta) + r * math.cos(phi) + w / 2
    y = r * math.sin(theta) + r * math.sin(phi) + h / 2
    z = r * math.cos(theta) + d / 2
    return tuple(int(math.floor(v + 0.5)) for v in (x, y, z))


def _check_size(volume: Volume, size) -> tuple[int, int, int]:
    size = tuple(int(s) for s in size)
    if len(size) != 3 or any(s < 1 or s > n for s, n in zip(size, volume.dims)):
        raise ValueError(f"patch size {size} does not fit in volume dims {volume.dims}")
    return size


def central_crop(volume: Volume, size) -> PatchSpec:
    size = _check_size(volume, size)
    return PatchSpec(tuple((n - s) // 2 for n, s in zip(volume.dims, size)), size)


def random_crop(volume: Volume, size, rng: np.random.Generator) -> PatchSpec:
    size = _check_size(volume, size)
    return PatchSpec(tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(volume.dims, size)), size)


def scan_points(config: CropSearchConfig, dims):
    """Yield ``(r, theta, phi)`` in scan order: r outermost, phi innermost, all inclusive."""
    half = math.sqrt(sum((n / 2) ** 2 for n in dims))
    n_r = int(round(1 / config.r_step))
    n_t = int(round(math.pi / config.theta_step))
    n_p = int(round(2 * math.pi / config.phi_step))
    for i in range(1, n_r + 1):
        r = half * config.r_step * i
        for j in range(n_t + 1):
            theta = config.theta_step * j
            for k in range(n_p + 1):
                yield r, theta, config.phi_step * k


def selective_crop(volume: Volume, config: CropSearchConfig) -> tuple[PatchSpec, CropSearchTrace]:
    """Variance-maximizing guidance patch by an outward spherical scan from the centre.

    Starts from the central patch and stops after ``config.patience``
    consecutive candidates that fail to strictly raise the best variance.
    Centres already evaluated are skipped without touching the patience count.
    """
    size = _check_size(volume, config.patch_size)
    dims = volume.dims
    half_size = tuple(s // 2 for s in size)

    best = central_crop(volume, size)
    best_var = patch_variance(volume, best)
    start = tuple(o + hs for o, hs in zip(best.origin, half_size))
    trace = CropSearchTrace(visited=[(start, best_var)])
    seen = {start}
    stale = 0
    reason = "exhausted"

    for r, theta, phi in scan_points(config, dims):
        center = spherical_to_center(r, theta, phi, dims)
        if center in seen:
            continue
        seen.add(center)
        spec = PatchSpec(tuple(c - hs for c, hs in zip(center, half_size)), size)
        if not spec.inside(dims):
            if config.strict:
                reason = "boundary"
                break
            continue
        var = patch_variance(volume, spec)
        trace.visited.append((center, var))
        if var > best_var:
            best, best_var, stale = spec, var, 0
        else:
            stale += 1
        if stale >= config.patience:
            reason = "patience"
            break

    trace.best, trace.best_variance, trace.exit_reason = best, best_var, reason
    return best, trace


def crop_spec(volume: Volume, size, strategy: str, rng: np.random.Generator | None = None,
              search: CropSearchConfig | None = None) -> PatchSpec:
    if strategy == "central":
        return central_crop(volume, size)
    if strategy == "random":
        if rng is None:
            raise ValueError("random cropping needs an rng")
        return random_crop(volume, size, rng)
    if strategy == "selective":
        cfg = search or CropSearchConfig(tuple(size))
        if tuple(cfg.patch_size) != tuple(size):
            cfg = CropSearchConfig(tuple(size), cfg.r_step, cfg.theta_step, cfg.phi_step, cfg.patience, cfg.strict)
        return selective_crop(volume, cfg)[0]
    raise ValueError(f"unknown crop strategy {strategy!r}")


def overlap_fraction(a: PatchSpec, b: PatchSpec) -> float:
    """Intersection volume over patch volume, for equally sized patches."""
    inter = 1
    for oa, ob, s in zip(a.origin, b.origin, a.size):
        inter *= max(0, min(oa, ob) + s - max(oa, ob))
    return inter / float(np.prod(a.size))


def mean_consecutive_overlap(trace: CropSearchTrace, size) -> float:
    """Mean overlap between consecutively visited candidates (0 when fewer than two)."""
    half = tuple(s // 2 for s in size)
    specs = [PatchSpec(tuple(c - h for c, h in zip(center, half)), tuple(size)) for center, _ in trace.visited]
    if len(specs) < 2:
        return 0.0
    return float(np.mean([overlap_fraction(a, b) for a, b in zip(specs, specs[1:])]))
