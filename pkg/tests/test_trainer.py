import numpy as np
import pytest

from pfseg.guidance import CropSearchConfig, selective_crop
from pfseg.network import init_params, load_checkpoint
from pfseg.trainer import (
    LOG_COLUMNS,
    Case,
    ConfigError,
    PlateauScheduler,
    TrainConfig,
    _transform,
    augment,
    derive_sample,
    make_sample,
    train,
)
from pfseg.volume import PhantomSpec, Volume, crop, generate_phantom, normalize

SMALL = dict(stage_channels=(2, 4), msres_kernels=(3,), epochs=2)


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(PhantomSpec(seed=11))


@pytest.fixture(scope="module")
def small_cases():
    spec = dict(dims=(16, 16, 8), lesion_radius=(2.0, 3.0), lesion_count=(1, 2))
    out = []
    for seed in range(2):
        image, mask = generate_phantom(PhantomSpec(seed=seed, **spec))
        out.append(Case(normalize(image), mask))
    return out


# ---------------------------------------------------------------- samples


def test_make_sample_desk_shapes(phantom):
    s = make_sample(*phantom)
    assert s.x_hr.dims == (48, 48, 32)
    assert s.x_lr.dims == (24, 24, 16)
    assert s.x_patch.dims == (12, 12, 8)
    assert s.gt_mask.dims == s.x_hr.dims


def test_make_sample_full_scale_shapes():
    image = Volume(np.random.default_rng(0).random((1, 192, 192, 128)).astype(np.float32))
    mask = Volume(np.zeros((1, 192, 192, 128), np.float32), "binary-mask")
    s = make_sample(image, mask, "central")
    assert s.x_lr.dims == (96, 96, 64)
    assert s.x_patch.dims == (48, 48, 32)


def test_make_sample_selective_composition(phantom):
    image, mask = phantom
    s = make_sample(image, mask, "selective")
    spec, _ = selective_crop(normalize(image), CropSearchConfig((12, 12, 8)))
    np.testing.assert_array_equal(s.x_patch.data, crop(normalize(image), spec).data)


def test_make_sample_determinism(phantom):
    a = make_sample(*phantom, "random", np.random.default_rng(4))
    b = make_sample(*phantom, "random", np.random.default_rng(4))
    np.testing.assert_array_equal(a.x_patch.data, b.x_patch.data)


def test_make_sample_rejects_indivisible():
    v = Volume(np.zeros((1, 10, 8, 8), np.float32))
    with pytest.raises(ValueError, match="divisible by 4"):
        make_sample(v, Volume(v.data, "binary-mask"))


# ---------------------------------------------------------------- augmentation


def test_augment_all_off_is_identity(phantom):
    s = make_sample(*phantom)
    out = augment(s, np.random.default_rng(0), flip=False, rotate=False, shift=False)
    np.testing.assert_array_equal(out.x_hr.data, s.x_hr.data)
    np.testing.assert_array_equal(out.gt_mask.data, s.gt_mask.data)


@pytest.mark.parametrize("seed", range(8))
def test_flip_rotate_preserve_mask_count(phantom, seed):
    s = make_sample(*phantom)
    out = augment(s, np.random.default_rng(seed), flip=True, rotate=True, shift=False)
    assert out.gt_mask.data.sum() == s.gt_mask.data.sum()
    assert out.x_hr.dims == s.x_hr.dims


@pytest.mark.parametrize("seed", range(8))
def test_augment_consistency(phantom, seed):
    s = make_sample(*phantom)
    out = augment(s, np.random.default_rng(seed))
    # lesion voxels stay brighter after the shared transform
    m = out.gt_mask.data > 0
    if m.any() and (~m).any():
        assert out.x_hr.data[m].mean() > out.x_hr.data[~m].mean()
    # the LR input and guidance are re-derived from the transformed image
    again = derive_sample(out.x_hr, out.gt_mask, "selective")
    assert out.x_lr.dims == (24, 24, 16)
    np.testing.assert_array_equal(out.x_lr.data, again.x_lr.data)
    np.testing.assert_array_equal(out.x_patch.data, again.x_patch.data)


def test_double_flip_is_identity(phantom):
    a = make_sample(*phantom).x_hr.data

    class FlipX:
        def random(self, n):
            return np.array([0.0, 1.0, 1.0])

        def integers(self, lo, hi):
            return 0

    once = _transform([a], FlipX(), True, False, False, 0.1)[0]
    twice = _transform([once], FlipX(), True, False, False, 0.1)[0]
    assert not np.array_equal(once, a)
    np.testing.assert_array_equal(twice, a)


# ---------------------------------------------------------------- scheduler


def test_scheduler_non_improving_oracle():
    sched = PlateauScheduler(1e-4, patience=10, divisor=10, floor=1e-7)
    lrs = []
    epochs = 0
    while not sched.finished:
        lrs.append(sched.lr)
        sched.step(1.0)
        epochs += 1
    assert sched.drops == 4
    assert epochs == 41
    assert lrs[:11] == [1e-4] * 11 and lrs[11] == pytest.approx(1e-5)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    ratios = {round(a / b, 9) for a, b in zip(lrs, lrs[1:]) if a != b}
    assert ratios == {10.0}


def test_scheduler_strict_improvement_resets():
    sched = PlateauScheduler(1.0, patience=2)
    for loss in (5, 4, 4, 3, 3):
        sched.step(loss)
    assert sched.drops == 0
    sched.step(3)
    assert sched.drops == 1 and sched.lr == 0.1


# ---------------------------------------------------------------- config


def test_config_defaults_and_roundtrip():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.plateau, cfg.lr_divisor, cfg.lr_floor, cfg.batch_size, cfg.epochs) == (1e-4, 10, 10.0, 1e-7, 1, 150)
    custom = TrainConfig(srt=False, tel=False, ssl=False, crop="random", stage_channels=(4, 8, 8))
    assert TrainConfig.from_text(custom.to_text()) == custom


@pytest.mark.parametrize("text", ["bogus=1", "lr=abc", "crop=diagonal", "lr_floor=1", "srt=off", "noequals"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        TrainConfig.from_text(text)


def test_ablation_flags_keep_parameter_shapes():
    on = init_params(TrainConfig(ssl=True).network_config())
    off = init_params(TrainConfig(ssl=False).network_config())
    assert {k: v.shape for k, v in on.items()} == {k: v.shape for k, v in off.items()}


# ---------------------------------------------------------------- training


def _strip_seconds(path):
    lines = path.read_text().splitlines()
    return ["\t".join(line.split("\t")[:-1]) for line in lines]


def test_train_writes_outputs_and_is_deterministic(tmp_path, small_cases):
    cfg = TrainConfig(**SMALL)
    a = train(None, cfg, tmp_path / "a", cases=small_cases)
    b = train(None, cfg, tmp_path / "b", cases=small_cases)
    assert [r["loss"] for r in a.rows] == [r["loss"] for r in b.rows]
    assert _strip_seconds(tmp_path / "a" / "metrics.tsv") == _strip_seconds(tmp_path / "b" / "metrics.tsv")
    header = (tmp_path / "a" / "metrics.tsv").read_text().splitlines()[0]
    assert header.split("\t") == list(LOG_COLUMNS)
    assert TrainConfig.load(tmp_path / "a" / "config.txt") == cfg
    best = load_checkpoint(tmp_path / "a" / "best.pfw")
    last = load_checkpoint(tmp_path / "a" / "last.pfw")
    assert set(best) == set(last) == set(a.params)


def test_train_seed_changes_losses(tmp_path, small_cases):
    a = train(None, TrainConfig(**SMALL, seed=0), cases=small_cases)
    b = train(None, TrainConfig(**SMALL, seed=1), cases=small_cases)
    assert [r["loss"] for r in a.rows] != [r["loss"] for r in b.rows]


@pytest.mark.parametrize("model", ["patch", "lrbaseline"])
def test_train_baseline_models(model, small_cases):
    cfg = TrainConfig(**SMALL, model=model, patch_size=(8, 8, 8))
    res = train(None, cfg, cases=small_cases)
    assert not any(k.startswith(("hgm", "srt")) for k in res.params)
    assert all(r["l_srt"] == 0 for r in res.rows)


def test_ust_only_ablation_zeroes_terms(small_cases):
    cfg = TrainConfig(**SMALL, srt=False, tel=False, ssl=False, hgm=False, msres=False)
    res = train(None, cfg, cases=small_cases)
    assert all(r["l_srt"] == r["l_tel"] == r["l_ssl"] == 0 for r in res.rows)
    assert all(r["loss"] == r["l_ust"] for r in res.rows)
    assert not any(k.startswith("hgm") for k in res.params)


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        train([], TrainConfig(**SMALL))


def test_training_loss_decreases(small_cases):
    res = train(None, TrainConfig(**dict(SMALL, epochs=6), lr=1e-2), cases=small_cases)
    assert res.rows[-1]["loss"] < res.rows[0]["loss"]
