"""Multi-task 3D ResUNet with a shared encoder, twin decoders and a guidance branch.

Parameter tensors live in a flat ``dict`` keyed by dotted names whose first
component names the submodule: ``enc``, ``hgm``, ``ust``, ``srt``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .volume import Volume

CKPT_MAGIC = b"PFW1"
SUBMODULES = ("enc", "hgm", "ust", "srt")


@dataclass
class NetworkConfig:
    stage_channels: tuple[int, ...] = (32, 32, 64, 128, 256)
    encoder_block: str = "msres"
    hgm_block: str = "msres"
    use_hgm: bool = True
    with_srt: bool = True
    msres_kernels: tuple[int, ...] = (3, 5)
    leaky_slope: float = 0.01
    norm_eps: float = 1e-5
    hgm_width: int | None = None
    upsample_factor: int = 2
    in_channels: int = 1

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.msres_kernels = tuple(int(k) for k in self.msres_kernels)
        if len(self.stage_channels) < 2:
            raise ValueError("need at least 2 stages")
        if min(self.stage_channels) < 1:
            raise ValueError("channel widths must be positive")
        for kind in (self.encoder_block, self.hgm_block):
            if kind not in ("res", "msres"):
                raise ValueError(f"unknown block kind {kind!r}")
        if any(k % 2 == 0 or k < 1 for k in self.msres_kernels) or not self.msres_kernels:
            raise ValueError(f"msres kernels must be odd, got {self.msres_kernels}")
        if self.upsample_factor not in (1, 2):
            raise ValueError("upsample_factor must be 1 or 2")

    @property
    def poolings(self) -> int:
        return len(self.stage_channels) - 1

    @property
    def guidance_width(self) -> int:
        return self.hgm_width or max(1, self.stage_channels[-1] // 4)

    def bottleneck_dims(self, lr_dims) -> tuple[int, int, int]:
        f = 2 ** self.poolings
        if any(n % f for n in lr_dims):
            raise ValueError(f"input dims {tuple(lr_dims)} must be divisible by {f} for {self.poolings} poolings")
        return tuple(n // f for n in lr_dims)

    def check_alignment(self, lr_dims, patch_dims) -> None:
        """Guidance features must land exactly on the bottleneck grid."""
        bott = self.bottleneck_dims(lr_dims)
        f = 2 ** (self.poolings - 1)
        if any(n % f for n in patch_dims) or tuple(n // f for n in patch_dims) != bott:
            raise ValueError(
                f"guidance patch {tuple(patch_dims)} reduced by {f} does not match bottleneck {bott} of input {tuple(lr_dims)}"
            )


# ---------------------------------------------------------------- parameters


def _conv_params(P, rng, name, cin, cout, k, norm=True, dtype=np.float32, scale=1.0):
    std = scale * np.sqrt(2.0 / (cin * k ** 3))
    P[f"{name}.w"] = Tensor(rng.normal(0.0, std, (cout, cin, k, k, k)).astype(dtype), requires_grad=True)
    P[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    if norm:
        P[f"{name}.g"] = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
        P[f"{name}.beta"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)


def _res_params(P, rng, name, cin, cout, dtype):
    _conv_params(P, rng, f"{name}.c1", cin, cout, 3, dtype=dtype)
    _conv_params(P, rng, f"{name}.c2", cout, cout, 3, dtype=dtype)
    if cin != cout:
        _conv_params(P, rng, f"{name}.proj", cin, cout, 1, norm=False, dtype=dtype)


def _msres_params(P, rng, name, cin, cout, kernels, dtype):
    for k in kernels:
        _conv_params(P, rng, f"{name}.k{k}", cin, cout, k, dtype=dtype)
    _conv_params(P, rng, f"{name}.fuse", cout * len(kernels), cout, 1, dtype=dtype)
    if cin != cout:
        _conv_params(P, rng, f"{name}.proj", cin, cout, 1, norm=False, dtype=dtype)


def _block_params(P, rng, kind, name, cin, cout, cfg, dtype):
    if kind == "msres":
        _msres_params(P, rng, name, cin, cout, cfg.msres_kernels, dtype)
    else:
        _res_params(P, rng, name, cin, cout, dtype)


def _decoder_params(P, rng, prefix, cfg, dtype):
    ch = cfg.stage_channels
    cin = ch[-1] + (cfg.guidance_width if cfg.use_hgm else 0)
    for i in reversed(range(cfg.poolings)):
        _res_params(P, rng, f"{prefix}.s{i}", cin + ch[i], ch[i], dtype)
        cin = ch[i]
    _conv_params(P, rng, f"{prefix}.head", ch[0], 1, 1, norm=False, dtype=dtype, scale=0.1)


def init_params(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    P: dict[str, Tensor] = {}
    cin = cfg.in_channels
    for i, c in enumerate(cfg.stage_channels):
        _block_params(P, rng, cfg.encoder_block, f"enc.s{i}", cin, c, cfg, dtype)
        cin = c
    if cfg.use_hgm:
        w = cfg.guidance_width
        cin = cfg.in_channels
        for i in range(cfg.poolings - 1):
            _conv_params(P, rng, f"hgm.down{i}", cin, w, 3, dtype=dtype)
            cin = w
        _block_params(P, rng, cfg.hgm_block, "hgm.out", cin, w, cfg, dtype)
    _decoder_params(P, rng, "ust", cfg, dtype)
    if cfg.with_srt:
        _decoder_params(P, rng, "srt", cfg, dtype)
    return P


def parameter_counts(P: dict[str, Tensor]) -> dict[str, int]:
    counts = {m: 0 for m in SUBMODULES}
    for name, t in P.items():
        counts[name.split(".", 1)[0]] += t.size
    counts["total"] = sum(counts[m] for m in SUBMODULES)
    return counts


# ---------------------------------------------------------------- blocks


def conv_norm_act(x: Tensor, P, name: str, cfg: NetworkConfig, stride: int = 1) -> Tensor:
    w = P[f"{name}.w"]
    k = w.shape[2]
    h = ad.conv3d(x, w, P[f"{name}.b"], stride=stride, padding=k // 2)
    h = ad.instance_norm(h, P[f"{name}.g"], P[f"{name}.beta"], cfg.norm_eps)
    return ad.leaky_relu(h, cfg.leaky_slope)


def _shortcut(x: Tensor, P, name: str) -> Tensor:
    if f"{name}.proj.w" in P:
        return ad.conv3d(x, P[f"{name}.proj.w"], P[f"{name}.proj.b"])
    return x


def res_block(x: Tensor, P, name: str, cfg: NetworkConfig) -> Tensor:
    if f"{name}.c1.w" not in P:
        raise ad.ShapeError(f"res_block: no parameters under {name!r}")
    h = conv_norm_act(x, P, f"{name}.c1", cfg)
    h = conv_norm_act(h, P, f"{name}.c2", cfg)
    return ad.add(h, _shortcut(x, P, name))


def msres_block(x: Tensor, P, name: str, cfg: NetworkConfig) -> Tensor:
    branches = [conv_norm_act(x, P, f"{name}.k{k}", cfg) for k in cfg.msres_kernels]
    h = branches[0]
    for b in branches[1:]:
        h = ad.concat_channels(h, b)
    h = conv_norm_act(h, P, f"{name}.fuse", cfg)
    return ad.add(h, _shortcut(x, P, name))


def block(kind: str, x: Tensor, P, name: str, cfg: NetworkConfig) -> Tensor:
    return msres_block(x, P, name, cfg) if kind == "msres" else res_block(x, P, name, cfg)


# ---------------------------------------------------------------- forward


def encoder_forward(x_lr: Tensor, P, cfg: NetworkConfig) -> tuple[Tensor, list[Tensor]]:
    cfg.bottleneck_dims(x_lr.shape[1:])
    skips = []
    h = x_lr
    with ad.scope("enc"):
        for i in range(len(cfg.stage_channels)):
            h = block(cfg.encoder_block, h, P, f"enc.s{i}", cfg)
            if i < cfg.poolings:
                skips.append(h)
                h = ad.max_pool3d(h, 2)
    return h, skips


def hgm_forward(x_patch: Tensor, P, cfg: NetworkConfig) -> Tensor:
    """Stride-2 conv stages down to the bottleneck grid, then one block of the configured kind."""
    h = x_patch
    with ad.scope("hgm"):
        for i in range(cfg.poolings - 1):
            h = conv_norm_act(h, P, f"hgm.down{i}", cfg, stride=2)
        h = block(cfg.hgm_block, h, P, "hgm.out", cfg)
    return h


def decoder_forward(features: Tensor, skips: list[Tensor], P, prefix: str, cfg: NetworkConfig) -> Tensor:
    """Decoder plus 1-channel head; the head is followed by the final up-sampling when configured."""
    h = features
    with ad.scope(prefix):
        for i in reversed(range(cfg.poolings)):
            h = ad.upsample_trilinear(h, 2)
            try:
                h = ad.concat_channels(h, skips[i])
            except ad.ShapeError as exc:
                raise ad.ShapeError(f"{prefix} decoder stage {i}: {exc}") from exc
            h = res_block(h, P, f"{prefix}.s{i}", cfg)
        h = ad.conv3d(h, P[f"{prefix}.head.w"], P[f"{prefix}.head.b"])
        if cfg.upsample_factor > 1:
            h = ad.upsample_trilinear(h, cfg.upsample_factor)
        if prefix == "ust":
            h = ad.sigmoid(h)
    return h


def _bottleneck(x_lr: Tensor, x_patch: Tensor | None, P, cfg: NetworkConfig):
    f_share, skips = encoder_forward(x_lr, P, cfg)
    if cfg.use_hgm:
        if x_patch is None:
            raise ValueError("configuration uses a guidance branch but no guidance patch was given")
        f_hgm = hgm_forward(x_patch, P, cfg)
        try:
            f_share = ad.concat_channels(f_share, f_hgm)
        except ad.ShapeError as exc:
            raise ad.ShapeError(f"bottleneck concat (encoder vs guidance branch): {exc}") from exc
    return f_share, skips


def forward_train(x_lr: Tensor, x_patch: Tensor | None, P, cfg: NetworkConfig, srt: bool = True):
    """Return ``(o_ust, o_srt)``; ``o_srt`` is ``None`` when ``srt`` is off or absent."""
    feats, skips = _bottleneck(x_lr, x_patch, P, cfg)
    o_ust = decoder_forward(feats, skips, P, "ust", cfg)
    o_srt = decoder_forward(feats, skips, P, "srt", cfg) if srt and cfg.with_srt else None
    return o_ust, o_srt


def predict_proba(x_lr: Tensor, x_patch: Tensor | None, P, cfg: NetworkConfig) -> np.ndarray:
    """Segmentation probabilities from the encoder, guidance branch and UST decoder only."""
    with ad.no_grad():
        feats, skips = _bottleneck(x_lr, x_patch, P, cfg)
        return decoder_forward(feats, skips, P, "ust", cfg).data


def forward_infer(x_lr: Tensor, x_patch: Tensor | None, P, cfg: NetworkConfig) -> Volume:
    prob = predict_proba(x_lr, x_patch, P, cfg)
    return Volume((prob >= 0.5).astype(np.float32), "binary-mask")


def shape_trace(cfg: NetworkConfig, lr_dims, patch_dims=None) -> dict[str, tuple[int, ...]]:
    """Output shapes of the main stages by arithmetic alone, without allocating activations."""
    lr_dims = tuple(lr_dims)
    bott = cfg.bottleneck_dims(lr_dims)
    ch = cfg.stage_channels
    out = {}
    dims = lr_dims
    for i, c in enumerate(ch):
        out[f"enc.s{i}"] = (c,) + dims
        if i < cfg.poolings:
            dims = tuple(n // 2 for n in dims)
    width = ch[-1]
    if cfg.use_hgm:
        if patch_dims is None:
            raise ValueError("guidance patch dims required when the guidance branch is on")
        cfg.check_alignment(lr_dims, patch_dims)
        out["hgm"] = (cfg.guidance_width,) + bott
        width += cfg.guidance_width
    out["bottleneck"] = (width,) + bott
    dims = bott
    for i in reversed(range(cfg.poolings)):
        dims = tuple(n * 2 for n in dims)
        out[f"dec.s{i}"] = (ch[i],) + dims
    hr = tuple(n * cfg.upsample_factor for n in lr_dims)
    out["ust"] = (1,) + hr
    if cfg.with_srt:
        out["srt"] = (1,) + hr
    return out


# ---------------------------------------------------------------- config files


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if v is None:
        return "auto"
    return str(v)


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def parse_field(value: str, default):
    """Parse ``value`` into the type of ``default``."""
    if isinstance(default, bool):
        return parse_bool(value)
    if isinstance(default, tuple):
        conv = type(default[0]) if default else int
        return tuple(conv(x) for x in value.replace("x", ",").split(",") if x)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def config_items(obj) -> dict[str, str]:
    return {f.name: _format_value(getattr(obj, f.name)) for f in fields(obj)}


def network_config_from(items: dict[str, str]) -> NetworkConfig:
    base = NetworkConfig()
    kw = {}
    for f in fields(NetworkConfig):
        if f.name in items:
            v = items[f.name]
            if f.name == "hgm_width":
                kw[f.name] = None if v == "auto" else int(v)
            else:
                kw[f.name] = parse_field(v, getattr(base, f.name))
    return NetworkConfig(**kw)


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(P: dict[str, Tensor], path) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(P)))
        for name, t in P.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, Tensor]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        P = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            if pos + 4 * n > len(raw):
                raise CheckpointError(f"{path}: truncated data for {name}")
            data = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(shape)
            pos += 4 * n
            P[name] = Tensor(data, requires_grad=True)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return P
