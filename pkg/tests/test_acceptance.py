"""Acceptance checks; each prints one ``criterion N: PASS|FAIL`` line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines. The
learning criteria train on 30 phantoms and take several minutes on one core.
"""

import functools
import math
import statistics
import time

import numpy as np
import pytest

from pfseg import autodiff as ad
from pfseg.autodiff import Tensor
from pfseg.evaluation import (
    Model,
    evaluate,
    format_report,
    hd95,
    patch_free_infer,
    plan_windows,
    sliding_window_infer,
    summarize,
)
from pfseg.guidance import CropSearchConfig, selective_crop
from pfseg.losses import (
    FusionPair,
    LossWeights,
    bce_loss,
    dice_loss,
    fuse,
    srt_loss,
    ssl_loss,
    tel_loss,
    total_loss,
    ust_loss,
)
from pfseg.network import forward_infer, init_params, parameter_counts
from pfseg.trainer import Case, TrainConfig, train
from pfseg.volume import PhantomSpec, Volume, generate_phantom, normalize

pytestmark = pytest.mark.acceptance

EPOCHS = 30
SEEDS = (0, 1, 2)
# frozen from the reference run of the full configuration (seed 0 reached 0.908)
DSC_THRESHOLD = 0.858
ABLATION_GAP = 0.02

ABLATION_ROWS = {
    "ust": dict(srt=False, tel=False, ssl=False, hgm=False, msres=False),
    "+srt": dict(tel=False, ssl=False, hgm=False, msres=False),
    "+tel": dict(ssl=False, hgm=False, msres=False),
    "+ssl": dict(hgm=False, msres=False),
    "+hgm": dict(msres=False),
    "full": dict(),
}


def verdict(n, ok, detail):
    print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {n}: {detail}"


# ---------------------------------------------------------------- shared data


@functools.lru_cache(maxsize=None)
def phantoms():
    data = [generate_phantom(PhantomSpec(seed=7000 + i)) for i in range(30)]
    train_cases = [Case(normalize(im), m) for im, m in data[:24]]
    test_cases = [(f"case_{24 + i:03d}", im, m) for i, (im, m) in enumerate(data[24:])]
    return train_cases, test_cases


@functools.lru_cache(maxsize=None)
def run(row, seed):
    """Train one ablation row; returns (mean test DSC, model)."""
    train_cases, test_cases = phantoms()
    cfg = TrainConfig(epochs=EPOCHS, seed=seed, **ABLATION_ROWS[row])
    res = train(None, cfg, cases=train_cases)
    model = Model(cfg, res.params)
    return summarize([r for _, r in evaluate(model, test_cases)]).dsc, model


# ---------------------------------------------------------------- 1 gradients


def _r(shape, seed, lo=None, hi=None):
    rng = np.random.default_rng(seed)
    a = rng.uniform(lo, hi, shape) if lo is not None else rng.standard_normal(shape)
    return Tensor(a, requires_grad=True)


def _gradient_suite():
    rng = np.random.default_rng(0)
    cases = {}
    for stride, pad in ((1, 0), (1, 1), (2, 1)):
        x, w, b = _r((2, 5, 4, 5), 1), _r((3, 2, 3, 3, 3), 2), _r((3,), 3)
        cases[f"conv3d s{stride} p{pad}"] = (lambda x=x, w=w, b=b, s=stride, p=pad:
                                              ad.reduce_sum(ad.square(ad.conv3d(x, w, b, s, p))), [x, w, b])
    x, g, be = _r((2, 3, 4, 3), 4), _r((2,), 5), _r((2,), 6)
    wt = Tensor(rng.standard_normal((2, 3, 4, 3)))
    cases["instance_norm"] = (lambda: ad.reduce_sum(ad.mul(ad.instance_norm(x, g, be), wt)), [x, g, be])
    for name, op in (("leaky_relu", ad.leaky_relu), ("sigmoid", ad.sigmoid)):
        a = _r((2, 3, 3, 2), 7)
        wa = Tensor(rng.standard_normal(a.shape))
        cases[name] = (lambda a=a, op=op, wa=wa: ad.reduce_sum(ad.mul(op(a), wa)), [a])
    a = _r((2, 4, 4, 4), 8)
    wa = Tensor(rng.standard_normal((2, 2, 2, 2)))
    cases["max_pool3d"] = (lambda: ad.reduce_sum(ad.mul(ad.max_pool3d(a, 2), wa)), [a])
    u = _r((2, 3, 2, 3), 9)
    wu = Tensor(rng.standard_normal((2, 6, 4, 6)))
    cases["upsample_trilinear"] = (lambda: ad.reduce_sum(ad.mul(ad.upsample_trilinear(u, 2), wu)), [u])
    p, q = _r((2, 3, 2), 10, 0.5, 2.0), _r((2, 3, 2), 11, 0.5, 2.0)
    for name, op in (("add", ad.add), ("sub", ad.sub), ("mul", ad.mul), ("div", ad.div)):
        cases[name] = (lambda op=op: ad.reduce_sum(ad.square(op(p, q))), [p, q])
    cases["log"] = (lambda: ad.reduce_mean(ad.log(p)), [p])
    cases["clip"] = (lambda: ad.reduce_sum(ad.square(ad.clip(p, 0.1, 5.0))), [p])
    m1, m2 = _r((4, 3), 12), _r((3, 5), 13)
    cases["matmul"] = (lambda: ad.reduce_sum(ad.square(ad.matmul(m1, m2))), [m1, m2])
    cases["reshape/transpose"] = (lambda: ad.reduce_sum(ad.square(ad.matmul(ad.transpose(m1), ad.transpose(ad.reshape(m1, (3, 4)))))), [m1])
    c1, c2 = _r((1, 2, 2, 2), 14), _r((2, 2, 2, 2), 15)
    wc = Tensor(rng.standard_normal((2, 2, 2, 2)))
    cases["concat/slice"] = (lambda: ad.reduce_sum(ad.mul(ad.slice_channels(ad.concat_channels(c1, c2), 1, 3), wc)), [c1, c2])

    shape = (1, 3, 3, 2)
    o, pr = _r(shape, 20), _r(shape, 21, 0.05, 0.95)
    xh = Tensor(np.random.default_rng(22).standard_normal(shape))
    y = Tensor((np.random.default_rng(23).random(shape) > 0.5).astype(np.float64))
    cases["loss srt"] = (lambda: srt_loss(o, xh), [o])
    cases["loss bce"] = (lambda: bce_loss(pr, y), [pr])
    cases["loss dice"] = (lambda: dice_loss(pr, y), [pr])
    cases["loss ust"] = (lambda: ust_loss(pr, y), [pr])
    cases["loss tel"] = (lambda: tel_loss(fuse(o, pr, xh, y)), [o, pr])
    cases["loss tel target-only"] = (lambda: tel_loss(fuse(o, pr, xh, y), y), [o, pr])
    cases["loss ssl"] = (lambda: ssl_loss(fuse(o, pr, xh, y)), [o, pr])
    cases["loss ssl explicit"] = (lambda: ssl_loss(fuse(o, pr, xh, y), compressed=False), [o, pr])

    def total():
        pair = fuse(o, pr, xh, y)
        return total_loss(ust_loss(pr, y), srt_loss(o, xh), tel_loss(pair), ssl_loss(pair), LossWeights(0.5, 0.5))

    cases["loss total"] = (total, [o, pr])
    return cases


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    errors = {name: ad.gradient_error(f, inputs) for name, (f, inputs) in _gradient_suite().items()}
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 120
    verdict(1, ok, f"{len(errors)} checks, worst {worst} = {errors[worst]:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2 SSL identity


def test_criterion_2_ssl_gram_identity():
    rng = np.random.default_rng(2024)
    worst = 0.0
    count = 0
    for c in (1, 2):
        for _ in range(60):
            a = rng.standard_normal((c, 6, 6, 4))
            b = rng.standard_normal((c, 6, 6, 4)) * rng.uniform(0.1, 3)
            fast = ssl_loss(FusionPair(Tensor(a), Tensor(b))).item()
            A, B = a.reshape(c, -1).T, b.reshape(c, -1).T
            brute = float(((A @ A.T - B @ B.T) ** 2).sum()) / A.shape[0] ** 2
            worst = max(worst, abs(fast - brute) / abs(brute))
            count += 1
    verdict(2, count >= 100 and worst <= 1e-6, f"{count} instances, worst relative {worst:.2e}")


# ---------------------------------------------------------------- 3 selective cropping


def test_criterion_3_selective_crop_oracle():
    cfg = CropSearchConfig((6, 6, 4))
    exact = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        data = rng.gamma(2.0, 1.0, (1, 24, 24, 16))
        data[0, rng.integers(0, 18), rng.integers(0, 18), rng.integers(0, 12)] += 20
        _, trace = selective_crop(Volume(data), cfg)
        exact += trace.best_variance == max(v for _, v in trace.visited)

    const = Volume(np.full((1, 24, 24, 16), 3.0))
    spec, _ = selective_crop(const, cfg)
    central = spec.origin == (9, 9, 6)

    invariant = 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        data = rng.integers(0, 8, (1, 20, 20, 12)).astype(np.float64)
        a, c = float(rng.choice([0.5, 2.0, 4.0])), float(rng.integers(-5, 6))
        base = selective_crop(Volume(data), cfg)[0]
        moved = selective_crop(Volume(a * data + c), cfg)[0]
        invariant += base.origin == moved.origin

    ok = exact == 50 and central and invariant == 20
    verdict(3, ok, f"max-oracle {exact}/50, constant central {central}, affine {invariant}/20")


# ---------------------------------------------------------------- 4 HD95


def _boundary(m):
    pts = []
    for idx in zip(*np.nonzero(m)):
        for axis in range(3):
            for step in (-1, 1):
                j = list(idx)
                j[axis] += step
                if not (0 <= j[axis] < m.shape[axis]) or not m[tuple(j)]:
                    pts.append(idx)
                    break
            else:
                continue
            break
    return np.array(pts, dtype=np.float64)


def _brute_hd95(a, b):
    pa, pb = _boundary(a), _boundary(b)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return float(np.percentile(np.concatenate([d.min(1), d.min(0)]), 95))


def test_criterion_4_hd95_oracle():
    rng = np.random.default_rng(4)
    small = 0
    total_small = 0
    while total_small < 1000:
        # a uniform draw over the 2^64 masks of a 4^3 grid
        a = rng.integers(0, 2, (4, 4, 4)).astype(bool)
        b = rng.integers(0, 2, (4, 4, 4)).astype(bool)
        if not a.any() or not b.any():
            continue
        total_small += 1
        small += hd95(a, b) == _brute_hd95(a, b)
    large = 0
    for _ in range(100):
        dims = tuple(int(n) for n in rng.integers(2, 13, 3))
        a = rng.random(dims) < rng.uniform(0.05, 0.6)
        b = rng.random(dims) < rng.uniform(0.05, 0.6)
        a.flat[0] = b.flat[-1] = True
        large += hd95(a, b) == _brute_hd95(a, b)
    verdict(4, small == 1000 and large == 100, f"4^3 pairs {small}/1000, random <=12^3 pairs {large}/100")


# ---------------------------------------------------------------- 5, 6 learning


def test_criterion_5_desk_learning():
    t0 = time.perf_counter()
    dsc, _ = run("full", 0)
    elapsed = time.perf_counter() - t0
    ok = dsc >= DSC_THRESHOLD
    verdict(5, ok, f"full config, {EPOCHS} epochs, seed 0: mean test DSC {dsc:.4f} vs threshold {DSC_THRESHOLD}, {elapsed:.0f}s")


def test_criterion_6_ablation_trend():
    full = [run("full", s)[0] for s in SEEDS]
    base = [run("ust", s)[0] for s in SEEDS]
    gap = statistics.mean(full) - statistics.mean(base)
    # intermediate rows are reported on one seed and not asserted
    rows = {name: run(name, SEEDS[0])[0] for name in ABLATION_ROWS}
    print("\nablation (seed 0): " + ", ".join(f"{k} {v:.4f}" for k, v in rows.items()))
    print(f"full per seed {[round(v, 4) for v in full]}, ust-only per seed {[round(v, 4) for v in base]}")
    verdict(6, gap >= ABLATION_GAP, f"mean DSC full {statistics.mean(full):.4f} - ust-only {statistics.mean(base):.4f} = {gap:.4f}")


# ---------------------------------------------------------------- 7 inference cost


def test_criterion_7_inference_cost():
    _, test_cases = phantoms()
    _, image, _ = test_cases[0]
    patchfree = run("full", 0)[1]
    patch = Model.fresh(TrainConfig(model="patch"))
    pf_passes = patch_free_infer(image, patchfree)[1].passes
    sw_passes = sliding_window_infer(image, patch)[1].passes
    full_plan = len(plan_windows((192, 192, 128), (96, 96, 64), (48, 48, 32)).origins)

    def timed(fn):
        fn()
        times = []
        for _ in range(5):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return statistics.median(times)

    t_pf = timed(lambda: patch_free_infer(image, patchfree))
    t_sw = timed(lambda: sliding_window_infer(image, patch))
    ratio = t_sw / t_pf
    ok = pf_passes == 1 and sw_passes == 8 and full_plan == 27 and ratio >= 3
    verdict(7, ok, f"passes {pf_passes} vs {sw_passes}, large-geometry plan {full_plan}, "
                   f"median {t_sw:.3f}s / {t_pf:.3f}s = {ratio:.1f}x")


# ---------------------------------------------------------------- 8 structure


def test_criterion_8_structural_invariants():
    cfg = TrainConfig()
    net = cfg.network_config()
    P = init_params(net, seed=0)
    counts = parameter_counts(P)
    fraction = counts["hgm"] / counts["total"]

    ust = {k[4:]: v.shape for k, v in P.items() if k.startswith("ust.")}
    srt = {k[4:]: v.shape for k, v in P.items() if k.startswith("srt.")}
    isomorphic = bool(ust) and ust == srt

    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 24, 24, 16)).astype(np.float32))
    g = Tensor(rng.standard_normal((1, 12, 12, 8)).astype(np.float32))
    with ad.profile() as prof:
        forward_infer(x, g, P, net)
    srt_ops = prof.count("srt")

    # the fusion module is plain arithmetic: training with it on or off uses identical parameters
    no_tfm = init_params(TrainConfig(tel=False, ssl=False).network_config(), seed=0)
    tfm_params = sum(v.size for v in P.values()) - sum(v.size for v in no_tfm.values())
    with ad.profile() as prof:
        fuse(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 2, 2, 2))))
    fusion_ops = {r.op for r in prof.records}

    ok = fraction <= 0.07 and isomorphic and srt_ops == 0 and tfm_params == 0 and fusion_ops == {"mul"}
    verdict(8, ok, f"hgm fraction {fraction:.4f}, decoders isomorphic {isomorphic}, srt ops at inference {srt_ops}, "
                   f"fusion parameters {tfm_params}")


# ---------------------------------------------------------------- 9 determinism


def _without_seconds(text):
    return ["\t".join(c for i, c in enumerate(line.split("\t")) if i != 4) for line in text.splitlines()]


def test_criterion_9_determinism(tmp_path):
    train_cases, test_cases = phantoms()
    cfg = TrainConfig(epochs=2, seed=5)
    logs, reports = [], []
    for tag in ("a", "b"):
        res = train(None, cfg, tmp_path / tag, cases=train_cases[:4])
        logs.append([line.rsplit("\t", 1)[0] for line in (tmp_path / tag / "metrics.tsv").read_text().splitlines()])
        model = Model(cfg, res.params)
        reports.append(_without_seconds(format_report(evaluate(model, test_cases[:3]))))
    same_logs = logs[0] == logs[1]
    same_reports = reports[0] == reports[1]
    verdict(9, same_logs and same_reports and math.isfinite(float(logs[0][1].split("\t")[1])),
            f"training logs identical {same_logs}, evaluation reports identical {same_reports}")
