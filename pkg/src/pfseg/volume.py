"""Volumes on disk and in memory, resampling, and the synthetic phantom generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"PFV1"
KINDS = ("image", "soft-mask", "binary-mask")
_HEADER = struct.Struct("<4sIIIIB3x")
# refuse headers that would need more than this many voxels
MAX_VOXELS = 2 ** 31 - 1


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class DimOverflowError(VolumeFormatError):
    pass


@dataclass
class Volume:
    """Dense scalar field stored as ``data[c, x, y, z]`` (float32)."""

    data: np.ndarray
    kind: str = "image"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"volume data must be (C,W,H,D) with extents >= 1, got {data.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        self.data = data

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.kind)


@dataclass(frozen=True)
class PatchSpec:
    """Axis-aligned sub-volume: min-corner ``origin`` and extent ``size``."""

    origin: tuple[int, int, int]
    size: tuple[int, int, int]

    def inside(self, dims) -> bool:
        return all(o >= 0 and o + s <= n for o, s, n in zip(self.origin, self.size, dims))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))


# ---------------------------------------------------------------- file io


def save_volume(volume: Volume, path) -> None:
    w, h, d = volume.dims
    c = volume.channels
    header = _HEADER.pack(MAGIC, w, h, d, c, KINDS.index(volume.kind))
    # x-fastest, channel-major: per channel write the (W,H,D) block in Fortran order
    payload = np.concatenate([volume.data[i].ravel(order="F") for i in range(c)]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def load_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: truncated header")
    _, w, h, d, c, kind = _HEADER.unpack_from(raw)
    n = w * h * d * c
    if n > MAX_VOXELS:
        raise DimOverflowError(f"{path}: header declares {w}x{h}x{d}x{c} = {n} voxels")
    if min(w, h, d, c) < 1:
        raise VolumeFormatError(f"{path}: zero extent in header {w}x{h}x{d}x{c}")
    if kind >= len(KINDS):
        raise VolumeFormatError(f"{path}: unknown kind code {kind}")
    body = raw[_HEADER.size :]
    if len(body) < 4 * n:
        raise TruncatedPayloadError(f"{path}: truncated payload, expected {4 * n} bytes, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f4", count=n).astype(np.float32)
    data = flat.reshape(c, w * h * d)
    data = np.stack([ch.reshape((w, h, d), order="F") for ch in data])
    return Volume(data, KINDS[kind])


def read_manifest(path) -> list[tuple[Path, Path]]:
    base = Path(path).parent
    pairs = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        image, mask = line.split("\t")
        pairs.append((base / image, base / mask))
    return pairs


def write_manifest(path, pairs) -> None:
    Path(path).write_text("".join(f"{a}\t{b}\n" for a, b in pairs))


# ---------------------------------------------------------------- resampling


def _check_divisible(dims, factor):
    if any(n % factor for n in dims):
        raise ValueError(f"dims {tuple(dims)} not divisible by {factor}")


def _blocks(data: np.ndarray, f: int) -> np.ndarray:
    c, w, h, d = data.shape
    return data.reshape(c, w // f, f, h // f, f, d // f, f)


def downsample(volume: Volume, factor: int = 2) -> Volume:
    """Average each ``factor**3`` block."""
    _check_divisible(volume.dims, factor)
    out = _blocks(volume.data.astype(np.float64), factor).mean(axis=(2, 4, 6))
    return Volume(out.astype(np.float32), volume.kind)


def downsample_mask(volume: Volume, factor: int = 2) -> Volume:
    """Max-pool a mask so thin foreground survives."""
    _check_divisible(volume.dims, factor)
    return Volume(_blocks(volume.data, factor).max(axis=(2, 4, 6)), volume.kind)


def catmull_rom(p0, p1, p2, p3, t):
    """Catmull-Rom segment between ``p1`` (t=0) and ``p2`` (t=1)."""
    return 0.5 * (
        2 * p1
        + (-p0 + p2) * t
        + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t ** 2
        + (-p0 + 3 * p1 - 3 * p2 + p3) * t ** 3
    )


def cubic_interp_matrix(n: int, factor: int) -> np.ndarray:
    """``(factor*n, n)`` Catmull-Rom operator, align-corners=False.

    Sample coordinates are clamped to ``[0, n-1]``; the two ghost samples past
    each end are linear extrapolations, so linear ramps are reproduced exactly.
    """
    src = np.clip((np.arange(factor * n) + 0.5) / factor - 0.5, 0.0, n - 1)
    # ghost-extended operator: rows index the extended vector [-1, 0..n-1, n]
    ext = np.zeros((n + 2, n))
    ext[1:-1] = np.eye(n)
    if n >= 2:
        ext[0, 0], ext[0, 1] = 2.0, -1.0
        ext[-1, -1], ext[-1, -2] = 2.0, -1.0
    else:
        ext[0, 0] = ext[-1, 0] = 1.0
    m = np.zeros((factor * n, n))
    for row, s in enumerate(src):
        i = min(int(np.floor(s)), max(n - 2, 0))
        t = s - i
        w = catmull_rom(*np.eye(4), t)  # weights for p0..p3
        for k, wk in enumerate(w):
            j = i - 1 + k  # index into the original samples, ghost at -1 and n
            m[row] += wk * ext[min(max(j, -1), n) + 1]
    return m


def upsample_tricubic(volume: Volume, factor: int = 2) -> Volume:
    if factor < 2:
        raise ValueError(f"upsample factor must be >= 2, got {factor}")
    out = volume.data.astype(np.float64)
    for axis, n in enumerate(volume.dims, start=1):
        mat = cubic_interp_matrix(n, factor)
        out = np.moveaxis(np.tensordot(mat, out, axes=(1, axis)), 0, axis)
    kind = "soft-mask" if volume.kind == "binary-mask" else volume.kind
    if kind == "soft-mask":
        out = np.clip(out, 0.0, 1.0)
    return Volume(out.astype(np.float32), kind)


def normalize(volume: Volume) -> Volume:
    """Z-score over the whole volume, std floored at 1e-6."""
    if volume.kind != "image":
        raise ValueError(f"normalize expects an image volume, got {volume.kind}")
    x = volume.data.astype(np.float64)
    mu = x.mean()
    sd = max(x.std(), 1e-6)
    return Volume(((x - mu) / sd).astype(np.float32), "image")


# ---------------------------------------------------------------- cropping


def crop(volume: Volume, spec: PatchSpec) -> Volume:
    if not spec.inside(volume.dims):
        raise ValueError(f"patch {spec} lies outside volume of dims {volume.dims}")
    return Volume(volume.data[(slice(None),) + spec.slices()].copy(), volume.kind)


def paste(volume: Volume, patch: Volume, origin) -> Volume:
    spec = PatchSpec(tuple(origin), patch.dims)
    if not spec.inside(volume.dims):
        raise ValueError(f"patch {spec} lies outside volume of dims {volume.dims}")
    out = volume.copy()
    out.data[(slice(None),) + spec.slices()] = patch.data
    return out


# ---------------------------------------------------------------- phantoms


@dataclass
class PhantomSpec:
    seed: int = 0
    dims: tuple[int, int, int] = (48, 48, 32)
    lesion_count: tuple[int, int] = (2, 4)
    lesion_radius: tuple[float, float] = (4.0, 8.0)
    background_band: tuple[float, float] = (0.2, 0.45)
    lesion_band: tuple[float, float] = (0.6, 0.85)
    noise_std: float = 0.04
    smooth_scale: float = 8.0
    texture_amplitude: float = 0.08
    lesion_fraction: tuple[float, float] = (0.01, 0.15)
    max_attempts: int = 200

    def validate(self) -> None:
        if min(self.dims) < 1:
            raise ValueError(f"phantom dims must be positive, got {self.dims}")
        lo, hi = self.lesion_radius
        if not 0 < lo <= hi:
            raise ValueError(f"bad lesion radius range {self.lesion_radius}")
        if 2 * hi > min(self.dims):
            raise ValueError(f"lesion radius {hi} does not fit inside dims {self.dims}")
        for name in ("background_band", "lesion_band"):
            a, b = getattr(self, name)
            if not 0.0 <= a <= b <= 1.0:
                raise ValueError(f"{name} {a, b} must lie inside [0, 1]")
        if not 1 <= self.lesion_count[0] <= self.lesion_count[1]:
            raise ValueError(f"bad lesion count range {self.lesion_count}")


def _smooth_field(rng: np.random.Generator, dims, scale: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(dims), scale, mode="wrap")
    f -= f.min()
    peak = f.max()
    return f / peak if peak > 0 else f


def _ellipsoid(rng: np.random.Generator, dims, radius_range, grid) -> np.ndarray:
    radii = rng.uniform(*radius_range, size=3)
    margin = radius_range[1]
    center = [rng.uniform(margin, n - 1 - margin) for n in dims]
    # random orientation from the QR of a gaussian matrix
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    offs = np.stack([g - c for g, c in zip(grid, center)], axis=-1)
    local = offs @ q
    return ((local / radii) ** 2).sum(axis=-1) <= 1.0


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, Volume]:
    """Seeded image/mask pair: smooth background, textured ellipsoid lesions, voxel noise."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dims = tuple(spec.dims)
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    n_vox = float(np.prod(dims))

    for _ in range(spec.max_attempts):
        count = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
        mask = np.zeros(dims, dtype=bool)
        for _ in range(count):
            mask |= _ellipsoid(rng, dims, spec.lesion_radius, grid)
        frac = mask.sum() / n_vox
        if spec.lesion_fraction[0] <= frac <= spec.lesion_fraction[1]:
            break
    else:
        raise ValueError(f"could not place lesions within fraction {spec.lesion_fraction} for {spec}")

    bg_lo, bg_hi = spec.background_band
    background = bg_lo + (bg_hi - bg_lo) * _smooth_field(rng, dims, spec.smooth_scale)
    le_lo, le_hi = spec.lesion_band
    lesion_level = le_lo + (le_hi - le_lo) * _smooth_field(rng, dims, spec.smooth_scale / 2)
    texture = spec.texture_amplitude * (2 * _smooth_field(rng, dims, 1.0) - 1)
    image = np.where(mask, lesion_level + texture, background)
    image = image + spec.noise_std * rng.standard_normal(dims)
    return (
        Volume(image.astype(np.float32), "image"),
        Volume(mask.astype(np.float32), "binary-mask"),
    )
