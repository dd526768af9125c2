"""Inference paths, segmentation metrics and the cost benchmark."""

from __future__ import annotations

import itertools
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .guidance import CropSearchConfig, crop_spec
from .network import NetworkConfig, init_params, load_checkpoint, parameter_counts, predict_proba
from .trainer import TrainConfig, guidance_size
from .volume import PatchSpec, Volume, crop, downsample, normalize, upsample_tricubic

REPORT_COLUMNS = ("case_id", "dsc", "jaccard", "hd95", "seconds", "passes")

# published full-scale numbers, printed for orientation only
LITERATURE = (
    ("Ours (BraTS2020, 192x192x128)", 84.39, 8.11, 74.53),
    ("Ours (liver, 192x192x128)", 94.21, 4.27, 89.17),
)


def _binary(a, name="mask") -> np.ndarray:
    a = np.asarray(a.data if isinstance(a, Volume) else a)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must be binary")
    return a.astype(bool)


def dice_score(a, b) -> float:
    a, b = _binary(a), _binary(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / total


def jaccard(a, b) -> float:
    a, b = _binary(a), _binary(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return np.logical_and(a, b).sum() / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour (outside counts as background)."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    sl = tuple(slice(1, -1) for _ in range(m.ndim))
    for axis in range(m.ndim):
        for step in (-1, 1):
            interior &= np.roll(p, step, axis=axis)[sl]
    return m & ~interior


def hd95(a, b) -> float | None:
    """95th percentile of pooled symmetric boundary distances; ``None`` if either mask is empty."""
    a, b = _binary(a), _binary(b)
    a, b = np.squeeze(a), np.squeeze(b)
    if not a.any() or not b.any():
        return None
    pa = np.argwhere(boundary(a)).astype(np.float64)
    pb = np.argwhere(boundary(b)).astype(np.float64)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


@dataclass
class MetricsReport:
    dsc: float
    jaccard: float
    hd95: float | None
    seconds: float = 0.0
    passes: int = 0
    parameters: int = 0
    activation_elements: int = 0


def score(pred: Volume, truth: Volume) -> MetricsReport:
    return MetricsReport(dice_score(pred, truth), jaccard(pred, truth), hd95(pred, truth))


@dataclass
class MetricSummary:
    dsc: float
    jaccard: float
    hd95: float
    hd95_excluded: int
    cases: int


def summarize(reports: list[MetricsReport]) -> MetricSummary:
    hds = [r.hd95 for r in reports if r.hd95 is not None]
    return MetricSummary(
        float(np.mean([r.dsc for r in reports])),
        float(np.mean([r.jaccard for r in reports])),
        float(np.mean(hds)) if hds else float("nan"),
        len(reports) - len(hds),
        len(reports),
    )


# ---------------------------------------------------------------- models


@dataclass
class Model:
    config: TrainConfig
    params: dict

    @property
    def net(self) -> NetworkConfig:
        return self.config.network_config()

    @property
    def kind(self) -> str:
        return self.config.model

    @classmethod
    def load(cls, checkpoint, config=None) -> "Model":
        checkpoint = Path(checkpoint)
        cfg_path = Path(config) if config is not None else checkpoint.parent / "config.txt"
        return cls(TrainConfig.load(cfg_path), load_checkpoint(checkpoint))

    @classmethod
    def fresh(cls, config: TrainConfig) -> "Model":
        return cls(config, init_params(config.network_config(), config.seed))


# ---------------------------------------------------------------- inference


@dataclass
class SlidingWindowPlan:
    patch: tuple[int, int, int]
    stride: tuple[int, int, int]
    origins: list[tuple[int, int, int]] = field(default_factory=list)


def _axis_starts(n: int, p: int, s: int) -> list[int]:
    starts = list(range(0, n - p + 1, s))
    if starts[-1] + p < n:
        starts.append(n - p)
    return starts


def plan_windows(dims, patch, stride) -> SlidingWindowPlan:
    patch, stride = tuple(int(p) for p in patch), tuple(int(s) for s in stride)
    if any(p > n or p < 1 for p, n in zip(patch, dims)):
        raise ValueError(f"patch {patch} does not fit in dims {tuple(dims)}")
    if min(stride) < 1:
        raise ValueError("stride must be positive")
    if any(s > p for s, p in zip(stride, patch)):
        raise ValueError(f"stride {stride} exceeds patch {patch}; voxels between windows would be skipped")
    axes = [_axis_starts(n, p, s) for n, p, s in zip(dims, patch, stride)]
    return SlidingWindowPlan(patch, stride, list(itertools.product(*axes)))


def patch_free_infer(image: Volume, model: Model, strategy: str | None = None,
                     search: CropSearchConfig | None = None) -> tuple[Volume, MetricsReport]:
    """Whole-volume LR pass with a guidance patch; one network forward."""
    t0 = time.perf_counter()
    net = model.net
    x_hr = normalize(image)
    x_lr = downsample(x_hr, 2)
    x_patch = None
    if net.use_hgm:
        size = guidance_size(x_hr.dims)
        search = search or model.config.search_config(size)
        rng = np.random.default_rng(model.config.seed)
        spec = crop_spec(x_hr, size, strategy or model.config.crop, rng=rng, search=search)
        x_patch = Tensor(crop(x_hr, spec).data)
    prob = predict_proba(Tensor(x_lr.data), x_patch, model.params, net)
    mask = Volume((prob >= 0.5).astype(np.float32), "binary-mask")
    return mask, MetricsReport(0, 0, None, time.perf_counter() - t0, passes=1)


def sliding_window_probs(x_hr: Volume, model: Model, plan: SlidingWindowPlan) -> tuple[np.ndarray, np.ndarray]:
    acc = np.zeros(x_hr.dims, dtype=np.float64)
    hits = np.zeros(x_hr.dims, dtype=np.int32)
    net = model.net
    for origin in plan.origins:
        spec = PatchSpec(origin, plan.patch)
        patch = crop(x_hr, spec)
        prob = predict_proba(Tensor(patch.data), None, model.params, net)[0]
        acc[spec.slices()] += prob
        hits[spec.slices()] += 1
    return acc / hits, hits


def sliding_window_infer(image: Volume, model: Model, patch=None, stride=None) -> tuple[Volume, MetricsReport]:
    """Overlapping HR patches, probabilities averaged where windows overlap."""
    t0 = time.perf_counter()
    patch = tuple(patch or model.config.patch_size)
    stride = tuple(stride or model.config.stride)
    x_hr = normalize(image)
    plan = plan_windows(x_hr.dims, patch, stride)
    prob, _ = sliding_window_probs(x_hr, model, plan)
    mask = Volume((prob >= 0.5)[None].astype(np.float32), "binary-mask")
    return mask, MetricsReport(0, 0, None, time.perf_counter() - t0, passes=len(plan.origins))


def lr_baseline_infer(image: Volume, model: Model) -> tuple[Volume, MetricsReport]:
    """Segment the 2x down-sampled image, enlarge the probability map tricubically, threshold."""
    t0 = time.perf_counter()
    x_lr = downsample(normalize(image), 2)
    prob = predict_proba(Tensor(x_lr.data), None, model.params, model.net)
    up = upsample_tricubic(Volume(prob, "soft-mask"), 2)
    mask = Volume((up.data >= 0.5).astype(np.float32), "binary-mask")
    return mask, MetricsReport(0, 0, None, time.perf_counter() - t0, passes=1)


MODES = {"patchfree": patch_free_infer, "sliding": sliding_window_infer, "lrbaseline": lr_baseline_infer}
MODE_FOR_KIND = {"patchfree": "patchfree", "patch": "sliding", "lrbaseline": "lrbaseline"}


def infer(image: Volume, model: Model, mode: str | None = None):
    mode = mode or MODE_FOR_KIND[model.kind]
    if mode not in MODES:
        raise ValueError(f"unknown inference mode {mode!r}")
    return MODES[mode](image, model)


def evaluate(model: Model, cases, mode: str | None = None) -> list[tuple[str, MetricsReport]]:
    """``cases`` yields ``(case_id, image, mask)``."""
    rows = []
    for case_id, image, truth in cases:
        pred, timing = infer(image, model, mode)
        rep = score(pred, truth)
        rep.seconds, rep.passes = timing.seconds, timing.passes
        rows.append((case_id, rep))
    return rows


def format_report(rows: list[tuple[str, MetricsReport]]) -> str:
    lines = ["\t".join(REPORT_COLUMNS)]
    for case_id, r in rows:
        hd = "undefined" if r.hd95 is None else f"{r.hd95:.4f}"
        lines.append(f"{case_id}\t{r.dsc:.6f}\t{r.jaccard:.6f}\t{hd}\t{r.seconds:.4f}\t{r.passes}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- cost


def median_time(fn, runs: int = 5, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def activation_elements(net: NetworkConfig, params, input_dims, patch_dims=None) -> int:
    """Total elements produced by the inference forward schedule at ``input_dims``."""
    x = Tensor(np.zeros((net.in_channels,) + tuple(input_dims), dtype=np.float32))
    g = None
    if net.use_hgm:
        g = Tensor(np.zeros((net.in_channels,) + tuple(patch_dims), dtype=np.float32))
    with ad.profile() as prof:
        predict_proba(x, g, params, net)
    return prof.activation_elements()


def model_input_dims(model: Model, hr_dims) -> tuple[tuple[int, ...], tuple[int, ...] | None]:
    if model.kind == "patch":
        return tuple(model.config.patch_size), None
    lr = tuple(n // 2 for n in hr_dims)
    return lr, (guidance_size(hr_dims) if model.net.use_hgm else None)


def _input_dims_for_extent(model: Model, extent) -> tuple[tuple[int, ...], tuple[int, ...] | None]:
    # ``extent`` is the HR region a single forward covers
    if model.kind == "patch":
        return tuple(extent), None
    lr = tuple(n // 2 for n in extent)
    return lr, (guidance_size(extent) if model.net.use_hgm else None)


def activation_estimate(model: Model, extent) -> int:
    """Forward activation elements for one pass over an HR ``extent``.

    Every op's output scales with the voxel count, so the count is measured
    once at the smallest admissible extent and scaled.
    """
    p = model.net.poolings
    unit = 2 ** p if model.kind == "patch" else 2 ** (p + 1)
    # twice the unit on one axis keeps two voxels at the bottleneck for the norm
    base = (2 * unit, unit, unit)
    in_dims, patch_dims = _input_dims_for_extent(model, base)
    measured = activation_elements(model.net, model.params, in_dims, patch_dims)
    return int(round(measured * np.prod(extent, dtype=np.float64) / np.prod(base, dtype=np.float64)))


@dataclass
class BenchRow:
    name: str
    mode: str
    summary: MetricSummary
    seconds: float
    passes: int
    parameters: int
    activation_elements: int


BENCH_COLUMNS = ("model", "mode", "dsc", "jaccard", "hd95", "hd95_excluded", "seconds", "passes", "parameters", "activation_elements")


def benchmark(models: dict[str, Model], cases, runs: int = 5) -> list[BenchRow]:
    cases = list(cases)
    rows = []
    for name, model in models.items():
        mode = MODE_FOR_KIND[model.kind]
        results = evaluate(model, cases, mode)
        first = cases[0][1]
        secs = median_time(lambda: infer(first, model, mode), runs=runs)
        in_dims, patch_dims = model_input_dims(model, first.dims)
        acts = activation_elements(model.net, model.params, in_dims, patch_dims)
        counts = parameter_counts(model.params)
        inference_params = counts["total"] - counts["srt"]
        rows.append(BenchRow(name, mode, summarize([r for _, r in results]), secs,
                             results[0][1].passes, inference_params, acts))
    return rows


def format_bench(rows: list[BenchRow]) -> str:
    lines = ["\t".join(BENCH_COLUMNS)]
    for r in rows:
        s = r.summary
        lines.append(
            f"{r.name}\t{r.mode}\t{s.dsc:.6f}\t{s.jaccard:.6f}\t{s.hd95:.4f}\t{s.hd95_excluded}\t"
            f"{r.seconds:.4f}\t{r.passes}\t{r.parameters}\t{r.activation_elements}"
        )
    for name, dsc, hd, jc in LITERATURE:
        lines.append(f"# literature reference (not reproduced): {name} DSC {dsc} HD95 {hd} Jaccard {jc}")
    return "\n".join(lines) + "\n"
