"""Training objectives: segmentation, super-resolution, and the task-fusion terms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

BCE_CLAMP = 1e-7
DICE_SMOOTH = 1.0
# explicit L x L similarity matrices above this many entries are refused
GRAM_BUDGET = 4_000_000


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossWeights:
    w_srt: float = 0.5
    w_tfm: float = 0.5

    def __post_init__(self):
        if self.w_srt < 0 or self.w_tfm < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class FusionPair:
    o_fusion: Tensor
    gt_fusion: Tensor


def _same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def mse(a: Tensor, b: Tensor) -> Tensor:
    _same(a, b, "mse")
    return ad.reduce_mean(ad.square(ad.sub(a, b)))


def srt_loss(o_srt: Tensor, x_hr: Tensor) -> Tensor:
    return mse(o_srt, x_hr)


def _check_binary(y: Tensor) -> None:
    if not np.all((y.data == 0) | (y.data == 1)):
        raise ValueError("target mask must be binary")


def bce_loss(p: Tensor, y: Tensor) -> Tensor:
    _same(p, y, "bce_loss")
    _check_binary(y)
    pc = ad.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    pos = ad.mul(y, ad.log(pc))
    neg = ad.mul(ad.sub(1.0, y), ad.log(ad.sub(1.0, pc)))
    return ad.mul(ad.reduce_mean(ad.add(pos, neg)), -1.0)


def dice_loss(p: Tensor, y: Tensor) -> Tensor:
    """Soft Dice loss (probabilities in place of the binarized prediction)."""
    _same(p, y, "dice_loss")
    _check_binary(y)
    inter = ad.reduce_sum(ad.mul(p, y))
    denom = ad.add(ad.add(ad.reduce_sum(p), ad.reduce_sum(y)), DICE_SMOOTH)
    return ad.sub(1.0, ad.div(ad.add(ad.mul(inter, 2.0), DICE_SMOOTH), denom))


def hard_dice_loss(p: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> float:
    """Dice loss on the thresholded prediction; evaluation only."""
    pb = (np.asarray(p) >= threshold).astype(np.float64)
    y = np.asarray(y, dtype=np.float64)
    return 1.0 - (2.0 * (pb * y).sum() + DICE_SMOOTH) / (pb.sum() + y.sum() + DICE_SMOOTH)


def ust_loss(p: Tensor, y: Tensor) -> Tensor:
    return ad.add(bce_loss(p, y), dice_loss(p, y))


def fuse(o_srt: Tensor, o_ust: Tensor, x_hr: Tensor, gt_mask: Tensor) -> FusionPair:
    for other, name in ((o_ust, "o_ust"), (x_hr, "x_hr"), (gt_mask, "gt_mask")):
        _same(o_srt, other, f"fuse ({name})")
    return FusionPair(ad.mul(o_srt, o_ust), ad.mul(x_hr, gt_mask))


def tel_loss(pair: FusionPair, mask: Tensor | None = None) -> Tensor:
    """Mean squared fusion error over all voxels, or over ``mask`` voxels when given."""
    if mask is None:
        return mse(pair.o_fusion, pair.gt_fusion)
    sq = ad.mul(ad.square(ad.sub(pair.o_fusion, pair.gt_fusion)), mask)
    return ad.div(ad.reduce_sum(sq), max(float(mask.data.sum()), 1.0))


def _as_rows(t: Tensor) -> Tensor:
    # (C, W, H, D) -> (L, C)
    c = t.shape[0]
    return ad.transpose(ad.reshape(t, (c, t.size // c)))


def _frob2(m: Tensor) -> Tensor:
    return ad.reduce_sum(ad.square(m))


def ssl_loss(pair: FusionPair, compressed: bool = True, budget: int = GRAM_BUDGET) -> Tensor:
    """Mean squared difference of the voxel self-similarity matrices.

    With ``A``/``B`` the ``L x C`` reshapes of prediction/target, the value is
    ``||AA^T - BB^T||_F^2 / L^2``. The compressed path evaluates it exactly
    through ``C x C`` products: ``||A^T A||^2 - 2||A^T B||^2 + ||B^T B||^2``.
    """
    _same(pair.o_fusion, pair.gt_fusion, "ssl_loss")
    a = _as_rows(pair.o_fusion)
    b = _as_rows(pair.gt_fusion)
    n = a.shape[0]
    if compressed:
        at = ad.transpose(a)
        bt = ad.transpose(b)
        total = ad.add(
            ad.sub(_frob2(ad.matmul(at, a)), ad.mul(_frob2(ad.matmul(at, b)), 2.0)),
            _frob2(ad.matmul(bt, b)),
        )
    else:
        if n * n > budget:
            raise MemoryError(
                f"explicit similarity matrix would hold {n * n} entries (budget {budget}); use compressed=True"
            )
        s_pred = ad.matmul(a, ad.transpose(a))
        s_gt = ad.matmul(b, ad.transpose(b))
        total = _frob2(ad.sub(s_pred, s_gt))
    return ad.div(total, float(n) * float(n))


def total_loss(l_ust: Tensor, l_srt=None, l_tel=None, l_ssl=None, weights: LossWeights | None = None) -> Tensor:
    """``ust + w_srt*srt + w_tfm*(tel + ssl)``; absent terms count as zero."""
    weights = weights or LossWeights()
    parts = {"ust": l_ust, "srt": l_srt, "tel": l_tel, "ssl": l_ssl}
    for name, t in parts.items():
        if t is not None and not math.isfinite(t.item()):
            raise NonFiniteLossError(f"non-finite {name} loss: {t.item()}")
    out = l_ust
    if l_srt is not None:
        out = ad.add(out, ad.mul(l_srt, weights.w_srt))
    tfm = [t for t in (l_tel, l_ssl) if t is not None]
    if tfm:
        fused = tfm[0] if len(tfm) == 1 else ad.add(tfm[0], tfm[1])
        out = ad.add(out, ad.mul(fused, weights.w_tfm))
    return out
