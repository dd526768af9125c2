"""Command-line entry point: ``pfseg {gen-data,train,eval,crop-search,bench}``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import math
import os
import sys
import time
from dataclasses import asdict
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import plotting
from .evaluation import (
    MODE_FOR_KIND,
    Model,
    activation_estimate,
    benchmark,
    dice_score,
    evaluate,
    format_bench,
    format_report,
    plan_windows,
    sliding_window_probs,
    summarize,
)
from .guidance import CropSearchConfig, mean_consecutive_overlap, selective_crop
from .trainer import Case, ConfigError, TrainConfig, guidance_size, parse_config_text, train
from .volume import (
    PhantomSpec,
    generate_phantom,
    load_volume,
    normalize,
    read_manifest,
    save_volume,
    write_manifest,
)

log = logging.getLogger("pfseg")

# (r, theta, phi) rows of the step-size comparison, as fractions of L, pi, pi
SWEEP_STEPS = (
    ("L/4", "pi/6", "pi/3"),
    ("L/6", "pi/6", "pi/3"),
    ("L/8", "pi/6", "pi/3"),
    ("L/6", "pi/4", "pi/3"),
    ("L/6", "pi/8", "pi/3"),
    ("L/6", "pi/6", "pi/2"),
    ("L/6", "pi/6", "pi/4"),
)


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- parsing helpers


def parse_dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(x) for x in text.lower().replace(",", "x").split("x"))
    except ValueError:
        raise UsageError(f"bad dims {text!r}; expected WxHxD") from None
    if len(dims) != 3 or min(dims) < 1:
        raise UsageError(f"bad dims {text!r}; expected three positive extents WxHxD")
    return dims


def parse_step(text: str, unit: str) -> float:
    """``L/6`` -> 1/6 (unit ``L``), ``pi/3`` -> pi/3 (unit ``pi``); plain numbers pass through."""
    t = text.strip().lower().replace(" ", "")
    u = unit.lower()
    scale = math.pi if u == "pi" else 1.0
    if t.startswith(u):
        rest = t[len(u):]
        frac = Fraction(1) if not rest else Fraction(1, int(rest[1:])) if rest.startswith("/") else None
        if frac is None:
            raise UsageError(f"bad step {text!r}")
        return float(frac) * scale
    try:
        return float(t)
    except ValueError:
        raise UsageError(f"bad step {text!r}; expected e.g. {unit}/6") from None


def parse_steps(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"--steps needs three comma-separated values, got {text!r}")
    return parse_step(parts[0], "L"), parse_step(parts[1], "pi"), parse_step(parts[2], "pi")


def parse_overrides(pairs) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_snapshot(path: Path, items: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}={v}\n" for k, v in items.items()))


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _case_id(image_path: Path) -> str:
    stem = Path(image_path).stem
    return stem[: -len("_image")] if stem.endswith("_image") else stem


def _load_cases(manifest: Path):
    pairs = read_manifest(manifest)
    if not pairs:
        raise UsageError(f"manifest is empty: {manifest}")
    for img, mask in pairs:
        _need_file(img, "image volume")
        _need_file(mask, "mask volume")
    return [(_case_id(img), load_volume(img), load_volume(mask)) for img, mask in pairs]


def _tsv(path: Path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(str(r[h]) for h in header) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    dims = parse_dims(args.dims)
    if any(n % 4 for n in dims):
        raise UsageError("dims must be divisible by 4")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.split is not None and not 0 < args.split < args.count:
        raise UsageError("--split must lie strictly between 0 and --count")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(args.count):
        spec = PhantomSpec(seed=args.seed * 1000 + i, dims=dims)
        image, mask = generate_phantom(spec)
        names = (f"case_{i:03d}_image.pfv", f"case_{i:03d}_mask.pfv")
        save_volume(image, out / names[0])
        save_volume(mask, out / names[1])
        pairs.append(names)
    write_manifest(out / "manifest.tsv", pairs)
    if args.split is not None:
        write_manifest(out / "train.tsv", pairs[: args.split])
        write_manifest(out / "test.tsv", pairs[args.split:])
    snap = {"seed": args.seed, "count": args.count, "dims": "x".join(map(str, dims)), "split": args.split}
    snap.update({f"phantom.{k}": v for k, v in asdict(PhantomSpec(dims=dims)).items() if k not in ("seed", "dims")})
    write_snapshot(out / "gen-data.txt", snap)
    print(f"wrote {args.count} cases to {out}")
    return 0


def cmd_train(args) -> int:
    manifest = _need_file(args.manifest, "manifest")
    items = {}
    if args.config:
        items.update(parse_config_text(_need_file(args.config, "config").read_text()))
    items.update(parse_overrides(args.set))
    cfg = TrainConfig.from_items(items)
    cases = _load_cases(manifest)
    out = Path(args.out)

    def progress(row):
        print(f"epoch {row['epoch']}\tloss {row['loss']:.6f}\tlr {row['lr']:.1e}\t{row['seconds']:.1f}s", flush=True)

    result = train(None, cfg, out, cases=[Case(normalize(img), m) for _, img, m in cases], progress=progress)
    plotting.plot_loss_curve(result.rows, out / "loss_curve.png")
    print(f"best epoch-mean loss {result.best_loss:.6f}; checkpoints in {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = _need_file(args.checkpoint, "checkpoint")
    cfg_path = _need_file(args.config or ckpt.parent / "config.txt", "model config")
    model = Model.load(ckpt, cfg_path)
    mode = args.mode or MODE_FOR_KIND[model.kind]
    if MODE_FOR_KIND[model.kind] != mode:
        raise UsageError(f"mode {mode!r} does not apply to a {model.kind!r} model (use {MODE_FOR_KIND[model.kind]!r})")
    cases = _load_cases(_need_file(args.manifest, "manifest"))
    rows = evaluate(model, cases, mode)
    s = summarize([r for _, r in rows])
    text = format_report(rows)
    text += f"# mean\tdsc {s.dsc:.6f}\tjaccard {s.jaccard:.6f}\thd95 {s.hd95:.4f}\thd95_excluded {s.hd95_excluded}\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        write_snapshot(out.with_suffix(".config.txt"), {"checkpoint": ckpt, "mode": mode, "manifest": args.manifest, **model.config.items()})
    return 0


def _search_config(args, size, steps) -> CropSearchConfig:
    r, t, p = steps
    try:
        return CropSearchConfig(size, r, t, p, patience=args.patience, strict=args.strict)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_crop_search(args) -> int:
    vols = [normalize(load_volume(_need_file(v, "volume"))) for v in args.volume]
    size = parse_dims(args.patch) if args.patch else guidance_size(vols[0].dims)
    if args.sweep:
        return _crop_sweep(args, vols, size)
    cfg = _search_config(args, size, parse_steps(args.steps))
    spec, trace = selective_crop(vols[0], cfg)
    print(f"steps\t{cfg.describe()}")
    print(f"origin\t{' '.join(map(str, spec.origin))}\tsize\t{' '.join(map(str, spec.size))}")
    print(f"variance\t{trace.best_variance:.6g}\tvisited\t{len(trace.visited)}\texit\t{trace.exit_reason}")
    if args.trace:
        out = Path(args.trace)
        with open(out, "w") as fh:
            fh.write("x\ty\tz\tvariance\n")
            for (x, y, z), var in trace.visited:
                fh.write(f"{x}\t{y}\t{z}\t{var!r}\n")
        write_snapshot(out.with_suffix(".config.txt"), {"volume": args.volume[0], "patch": "x".join(map(str, size)),
                                                         "steps": cfg.describe(), "patience": cfg.patience, "strict": cfg.strict})
    return 0


def _crop_sweep(args, vols, size) -> int:
    rows = []
    for label in SWEEP_STEPS:
        cfg = _search_config(args, size, parse_steps(",".join(label)))
        secs, overlaps, visited = [], [], []
        for v in vols:
            t0 = time.perf_counter()
            _, trace = selective_crop(v, cfg)
            secs.append(time.perf_counter() - t0)
            overlaps.append(mean_consecutive_overlap(trace, size))
            visited.append(len(trace.visited))
        rows.append({"r_step": label[0], "theta_step": label[1], "phi_step": label[2],
                     "mean_seconds": f"{np.mean(secs):.6f}", "mean_overlap": f"{np.mean(overlaps):.4f}",
                     "mean_visited": f"{np.mean(visited):.2f}"})
    header = ("r_step", "theta_step", "phi_step", "mean_seconds", "mean_overlap", "mean_visited")
    print("\t".join(header))
    for r in rows:
        print("\t".join(str(r[h]) for h in header))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _tsv(out, header, rows)
    return 0


def _admissible(model: Model, extent) -> bool:
    """True when one forward over the HR ``extent`` leaves at least two bottleneck voxels."""
    in_dims = extent if model.kind == "patch" else tuple(n // 2 for n in extent)
    if model.kind != "patch" and any(n % 4 for n in extent):
        return False
    try:
        return int(np.prod(model.net.bottleneck_dims(in_dims))) >= 2
    except ValueError:
        return False


def _sweep_patches(model: Model, dims):
    unit = 2 ** model.net.poolings
    out = []
    for frac in (4, 3, 2, 1):
        p = tuple(max(unit, (n // frac) // unit * unit) for n in dims)
        if p not in out and all(a <= n for a, n in zip(p, dims)) and _admissible(model, p):
            out.append(p)
    return out


MEMORY_EXTENTS = ((16, 16, 16), (32, 32, 16), (32, 32, 32), (48, 48, 32), (64, 64, 64), (96, 96, 64), (192, 192, 128))


def cmd_bench(args) -> int:
    cases = _load_cases(_need_file(args.manifest, "manifest"))
    models = {}
    for ck in args.checkpoints:
        p = Path(ck)
        if not p.is_file():
            print(f"warning: checkpoint {p} not found; row skipped", file=sys.stderr)
            continue
        name = p.parent.name or p.stem
        if name in models:
            name = f"{name}/{p.stem}"
        models[name] = Model.load(p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(out / "bench-config.txt", {"manifest": args.manifest, "runs": args.runs,
                                               "checkpoints": ",".join(map(str, args.checkpoints))})
    rows = benchmark(models, cases, runs=args.runs) if models else []
    text = format_bench(rows)
    sys.stdout.write(text)
    (out / "bench.tsv").write_text(text)

    dims = cases[0][1].dims
    size_rows = []
    for name, model in models.items():
        if model.kind == "patch":
            for patch in _sweep_patches(model, dims):
                dscs = []
                for _, image, truth in cases:
                    x = normalize(image)
                    prob, _ = sliding_window_probs(x, model, plan_windows(x.dims, patch, patch))
                    dscs.append(dice_score((prob >= 0.5)[None].astype(np.float32), truth))
                size_rows.append({"model": name, "patch": "x".join(map(str, patch)),
                                  "voxels": int(np.prod(patch)), "dsc": float(np.mean(dscs)),
                                  "passes": len(plan_windows(dims, patch, patch).origins)})
        else:
            r = next(r for r in rows if r.name == name)
            size_rows.append({"model": name, "patch": "x".join(map(str, dims)), "voxels": int(np.prod(dims)),
                              "dsc": r.summary.dsc, "passes": r.passes})
    _tsv(out / "patchsize_vs_dsc.tsv", ("model", "patch", "voxels", "dsc", "passes"),
         [dict(r, dsc=f"{r['dsc']:.6f}") for r in size_rows])
    plotting.plot_patchsize_vs_dsc(size_rows, out / "patchsize_vs_dsc.png")

    mem_rows = []
    for name, model in models.items():
        for ext in MEMORY_EXTENTS:
            if not _admissible(model, ext):
                continue
            elems = activation_estimate(model, ext)
            mem_rows.append({"model": name, "extent": "x".join(map(str, ext)), "voxels": int(np.prod(ext)),
                             "activation_elements": elems, "megabytes": elems * 4 / 2 ** 20})
    _tsv(out / "memory_vs_patch.tsv", ("model", "extent", "voxels", "activation_elements", "megabytes"),
         [dict(r, megabytes=f"{r['megabytes']:.3f}") for r in mem_rows])
    plotting.plot_memory_vs_patch(mem_rows, out / "memory_vs_patch.png")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pfseg", description="Patch-free 3D segmentation with super-resolution guidance (desk scale).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write seeded phantom image/mask pairs and a manifest")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--count", type=int, default=30)
    g.add_argument("--dims", default="48x48x32")
    g.add_argument("--split", type=int, default=None, help="also write train.tsv / test.tsv with this many training cases")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a manifest")
    t.add_argument("--config", help="key=value file; see TrainConfig for keys")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="segment and score every case of a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="defaults to config.txt beside the checkpoint")
    e.add_argument("--manifest", required=True)
    e.add_argument("--mode", choices=("patchfree", "sliding", "lrbaseline"))
    e.add_argument("--out", help="also write the report here")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("crop-search", help="run the guidance-patch search and dump its trace")
    c.add_argument("--volume", required=True, nargs="+")
    c.add_argument("--patch", help="WxHxD; defaults to a quarter of each extent")
    c.add_argument("--steps", default="L/6,pi/6,pi/3")
    c.add_argument("--patience", type=int, default=10)
    c.add_argument("--strict", action="store_true", help="stop at the first out-of-bounds candidate")
    c.add_argument("--trace", help="write visited candidates as x y z variance")
    c.add_argument("--sweep", action="store_true", help="compare the tabulated step settings over all volumes")
    c.add_argument("--out", help="sweep table destination")
    c.set_defaults(func=cmd_crop_search)

    b = sub.add_parser("bench", help="compare checkpoints: accuracy, wall-clock, passes, memory estimates")
    b.add_argument("--checkpoints", required=True, nargs="+")
    b.add_argument("--manifest", required=True)
    b.add_argument("--runs", type=int, default=5)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


@contextlib.contextmanager
def _thread_cap():
    n = os.environ.get("PFSEG_THREADS")
    if not n:
        yield
        return
    try:
        limit = int(n)
    except ValueError:
        raise UsageError(f"PFSEG_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=limit):
        yield


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        with _thread_cap():
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"pfseg: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        print(f"pfseg: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
