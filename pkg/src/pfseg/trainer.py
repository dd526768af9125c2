"""Sample assembly, augmentation and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .guidance import CropSearchConfig, crop_spec
from .network import (
    NetworkConfig,
    config_items,
    forward_train,
    init_params,
    parse_field,
    save_checkpoint,
)
from .volume import PatchSpec, Volume, crop, downsample, downsample_mask, load_volume, normalize

log = logging.getLogger(__name__)

MODEL_KINDS = ("patchfree", "patch", "lrbaseline")
CROP_STRATEGIES = ("random", "central", "selective")
LOG_COLUMNS = ("epoch", "loss", "l_ust", "l_srt", "l_tel", "l_ssl", "lr", "seconds")


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment."""
    items = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        items[k.strip()] = v.strip()
    return items


@dataclass
class TrainConfig:
    """Every key accepted in a ``key=value`` run configuration."""

    model: str = "patchfree"
    srt: bool = True
    tel: bool = True
    ssl: bool = True
    hgm: bool = True
    msres: bool = True
    crop: str = "selective"
    epochs: int = 150
    lr: float = 1e-4
    plateau: int = 10
    lr_divisor: float = 10.0
    lr_floor: float = 1e-7
    batch_size: int = 1
    seed: int = 0
    flip: bool = True
    rotate: bool = True
    shift: bool = True
    shift_fraction: float = 0.1
    w_srt: float = 0.5
    w_tfm: float = 0.5
    tel_target_only: bool = False
    stage_channels: tuple[int, ...] = (8, 8, 16, 32)
    msres_kernels: tuple[int, ...] = (3, 5)
    leaky_slope: float = 0.01
    norm_eps: float = 1e-5
    patch_size: tuple[int, ...] = (24, 24, 16)
    stride: tuple[int, ...] = (24, 24, 16)
    scan_strict: bool = False
    crop_patience: int = 10

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.crop not in CROP_STRATEGIES:
            raise ConfigError(f"crop must be one of {CROP_STRATEGIES}, got {self.crop!r}")
        if not self.lr_floor < self.lr:
            raise ConfigError("lr_floor must be below lr")
        if self.plateau < 1 or self.epochs < 1:
            raise ConfigError("plateau and epochs must be >= 1")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 is supported")
        if self.model == "patchfree" and (self.tel or self.ssl) and not self.srt:
            raise ConfigError("tel/ssl fuse the super-resolution output and need srt=on")

    @property
    def uses_srt(self) -> bool:
        return self.model == "patchfree" and self.srt

    def network_config(self) -> NetworkConfig:
        block = "msres" if self.msres else "res"
        common = dict(
            stage_channels=self.stage_channels,
            encoder_block=block,
            hgm_block=block,
            msres_kernels=self.msres_kernels,
            leaky_slope=self.leaky_slope,
            norm_eps=self.norm_eps,
        )
        if self.model == "patchfree":
            return NetworkConfig(use_hgm=self.hgm, with_srt=True, upsample_factor=2, **common)
        return NetworkConfig(use_hgm=False, with_srt=False, upsample_factor=1, **common)

    def search_config(self, patch_size) -> CropSearchConfig:
        return CropSearchConfig(tuple(patch_size), patience=self.crop_patience, strict=self.scan_strict)

    def items(self) -> dict[str, str]:
        return config_items(self)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items().items())

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "TrainConfig":
        base = cls()
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(items) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = {}
        for k, v in items.items():
            try:
                kw[k] = parse_field(v, getattr(base, k))
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {v!r} ({exc})") from exc
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_items(parse_config_text(text))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


# ---------------------------------------------------------------- samples


@dataclass
class TrainingSample:
    x_lr: Volume
    x_patch: Volume | None
    x_hr: Volume
    gt_mask: Volume


def guidance_size(hr_dims) -> tuple[int, int, int]:
    return tuple(n // 4 for n in hr_dims)


def derive_sample(x_hr: Volume, mask: Volume, strategy: str, rng=None, search: CropSearchConfig | None = None) -> TrainingSample:
    """LR input and guidance patch from an already-normalized HR image."""
    if any(n % 4 for n in x_hr.dims):
        raise ValueError(f"image dims {x_hr.dims} must be divisible by 4")
    size = guidance_size(x_hr.dims)
    spec = crop_spec(x_hr, size, strategy, rng=rng, search=search)
    return TrainingSample(downsample(x_hr, 2), crop(x_hr, spec), x_hr, mask)


def make_sample(image: Volume, mask: Volume, strategy: str = "selective", rng=None,
                search: CropSearchConfig | None = None) -> TrainingSample:
    if any(n % 4 for n in image.dims):
        raise ValueError(f"image dims {image.dims} must be divisible by 4")
    return derive_sample(normalize(image), mask, strategy, rng, search)


def _transform(arrs: list[np.ndarray], rng: np.random.Generator, flip: bool, rotate: bool, shift: bool,
               shift_fraction: float) -> list[np.ndarray]:
    # draws happen in a fixed order regardless of toggles so streams stay aligned
    flips = rng.random(3) < 0.5
    turns = int(rng.integers(0, 4))
    dims = arrs[0].shape[1:]
    shifts = [int(rng.integers(-int(shift_fraction * n), int(shift_fraction * n) + 1)) for n in dims]
    out = []
    for a in arrs:
        if flip:
            for axis, f in enumerate(flips, start=1):
                if f:
                    a = np.flip(a, axis=axis)
        if rotate:
            k = turns if a.shape[1] == a.shape[2] else 2 * (turns % 2)
            a = np.rot90(a, k=k, axes=(1, 2))
        if shift:
            a = _shift(a, shifts)
        out.append(np.ascontiguousarray(a))
    return out


def _shift(a: np.ndarray, shifts) -> np.ndarray:
    out = np.zeros_like(a)
    src, dst = [slice(None)], [slice(None)]
    for s, n in zip(shifts, a.shape[1:]):
        if s >= 0:
            src.append(slice(0, n - s))
            dst.append(slice(s, n))
        else:
            src.append(slice(-s, n))
            dst.append(slice(0, n + s))
    out[tuple(dst)] = a[tuple(src)]
    return out


def augment(sample: TrainingSample, rng: np.random.Generator, flip: bool = True, rotate: bool = True,
            shift: bool = True, shift_fraction: float = 0.1, strategy: str = "selective",
            search: CropSearchConfig | None = None) -> TrainingSample:
    """Random flip / 90-degree in-plane turn / shift of the HR pair, then re-derive LR input and guidance."""
    if not (flip or rotate or shift):
        return sample
    x, m = _transform([sample.x_hr.data, sample.gt_mask.data], rng, flip, rotate, shift, shift_fraction)
    return derive_sample(Volume(x, "image"), Volume(m, sample.gt_mask.kind), strategy, rng, search)


# ---------------------------------------------------------------- schedule


class PlateauScheduler:
    """Divide the rate when the monitored loss has not strictly decreased for ``patience`` epochs."""

    def __init__(self, lr: float, patience: int = 10, divisor: float = 10.0, floor: float = 1e-7):
        self.lr = lr
        self.patience = patience
        self.divisor = divisor
        self.floor = floor
        self.best = math.inf
        self.stale = 0
        self.drops = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr /= self.divisor
                self.drops += 1
                self.stale = 0
        return self.lr

    @property
    def finished(self) -> bool:
        # relative slack so 1e-4 / 10**3 still counts as reaching 1e-7
        return self.lr < self.floor * (1 - 1e-9)


# ---------------------------------------------------------------- training


@dataclass
class Case:
    """A normalized HR image and its mask, held in memory for the whole run."""

    image: Volume
    mask: Volume


def load_cases(pairs) -> list[Case]:
    cases = []
    for img_path, mask_path in pairs:
        cases.append(Case(normalize(load_volume(img_path)), load_volume(mask_path)))
    return cases


def _prepare(case: Case, cfg: TrainConfig, rng: np.random.Generator) -> TrainingSample:
    x, m = case.image, case.mask
    if cfg.flip or cfg.rotate or cfg.shift:
        xa, ma = _transform([x.data, m.data], rng, cfg.flip, cfg.rotate, cfg.shift, cfg.shift_fraction)
        x, m = Volume(xa, "image"), Volume(ma, m.kind)
    if cfg.model == "patchfree":
        size = guidance_size(x.dims)
        return derive_sample(x, m, cfg.crop, rng, cfg.search_config(size))
    if cfg.model == "lrbaseline":
        return TrainingSample(downsample(x, 2), None, x, downsample_mask(m, 2))
    size = tuple(cfg.patch_size)
    origin = tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(x.dims, size))
    spec = PatchSpec(origin, size)
    return TrainingSample(crop(x, spec), None, crop(x, spec), crop(m, spec))


def training_step(sample: TrainingSample, params, net: NetworkConfig, cfg: TrainConfig,
                  weights: L.LossWeights) -> tuple[Tensor, dict[str, float]]:
    x_lr = Tensor(sample.x_lr.data)
    x_patch = Tensor(sample.x_patch.data) if (net.use_hgm and sample.x_patch is not None) else None
    y = Tensor(sample.gt_mask.data)
    o_ust, o_srt = forward_train(x_lr, x_patch, params, net, srt=cfg.uses_srt)
    l_ust = L.ust_loss(o_ust, y)
    l_srt = l_tel = l_ssl = None
    if o_srt is not None:
        x_hr = Tensor(sample.x_hr.data)
        l_srt = L.srt_loss(o_srt, x_hr)
        if cfg.tel or cfg.ssl:
            pair = L.fuse(o_srt, o_ust, x_hr, y)
            if cfg.tel:
                l_tel = L.tel_loss(pair, y if cfg.tel_target_only else None)
            if cfg.ssl:
                l_ssl = L.ssl_loss(pair)
    parts = {
        "l_ust": l_ust.item(),
        "l_srt": l_srt.item() if l_srt is not None else 0.0,
        "l_tel": l_tel.item() if l_tel is not None else 0.0,
        "l_ssl": l_ssl.item() if l_ssl is not None else 0.0,
    }
    total = L.total_loss(l_ust, l_srt, l_tel, l_ssl, weights)
    return total, parts


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    rows: list[dict] = field(default_factory=list)
    best_loss: float = math.inf
    out_dir: Path | None = None


def train(pairs, cfg: TrainConfig, out_dir=None, cases: list[Case] | None = None, progress=None) -> TrainResult:
    """Optimize from scratch on ``pairs`` (or preloaded ``cases``) and write logs/checkpoints to ``out_dir``."""
    if cases is None:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("training manifest is empty")
        cases = load_cases(pairs)
    if not cases:
        raise ValueError("no training cases")
    net = cfg.network_config()
    params = init_params(net, cfg.seed)
    plist = list(params.values())
    state = ad.AdamState.for_params(plist)
    sched = PlateauScheduler(cfg.lr, cfg.plateau, cfg.lr_divisor, cfg.lr_floor)
    weights = L.LossWeights(cfg.w_srt, cfg.w_tfm)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
        log_fh = open(out / "metrics.tsv", "w")
        log_fh.write("\t".join(LOG_COLUMNS) + "\n")

    result = TrainResult(params=params, best_params={}, out_dir=out)
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(cases))
            sums = {"loss": 0.0, "l_ust": 0.0, "l_srt": 0.0, "l_tel": 0.0, "l_ssl": 0.0}
            lr = sched.lr
            for idx in order:
                sample = _prepare(cases[idx], cfg, sample_rng(cfg.seed, epoch, int(idx)))
                for p in plist:
                    p.grad = None
                try:
                    loss, parts = training_step(sample, params, net, cfg, weights)
                except L.NonFiniteLossError as exc:
                    raise L.NonFiniteLossError(f"step {step} (epoch {epoch}, case {idx}): {exc}") from exc
                value = loss.item()
                if not math.isfinite(value):
                    raise L.NonFiniteLossError(f"step {step}: total loss {value}, components {parts}")
                loss.backward()
                ad.adam_step(plist, state, lr)
                step += 1
                sums["loss"] += value
                for k, v in parts.items():
                    sums[k] += v
            means = {k: v / len(cases) for k, v in sums.items()}
            seconds = time.perf_counter() - t0
            row = {"epoch": epoch, **means, "lr": lr, "seconds": seconds}
            result.rows.append(row)
            if log_fh is not None:
                log_fh.write("\t".join([str(epoch)] + [_fmt(row[c]) for c in LOG_COLUMNS[1:-1]] + [f"{seconds:.3f}"]) + "\n")
                log_fh.flush()
            if means["loss"] < result.best_loss:
                result.best_loss = means["loss"]
                result.best_params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}
                if out is not None:
                    save_checkpoint(params, out / "best.pfw")
            if progress is not None:
                progress(row)
            log.info("epoch %d loss %.5f lr %.1e (%.1fs)", epoch, means["loss"], lr, seconds)
            sched.step(means["loss"])
            if sched.finished:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        save_checkpoint(params, out / "last.pfw")
    return result
