"""FGIN network: shallow 3x3 extractor, spectral-spatial fusion, Inception-like
blocks, multi-scale fusion, depthwise upsampling and a band projection.

Block functions return ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and the cache, accumulates parameter gradients into
the :class:`~fgin.params.ParamStore` and returns the input gradient.

One set of weights processes every band group.  Groups are stacked along
the batch axis, so batch-norm statistics are shared across groups.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import ops
from .bands import GroupSpec, make_groups, merge, merge_backward, single_group, split, split_backward
from .errors import ConfigError, ShapeError
from .params import ParamStore, init_bn, init_conv, init_depthwise

SCALES = (2, 4, 8)
UPSAMPLING_MODES = ("optimized", "bilinear_only")


@dataclass
class ModelConfig:
    n_bands: int = 32
    group_size: int = 32
    overlap: int | None = None  # defaults to group_size // 4
    features: int = 32
    inception_blocks: int = 3
    scale: int = 4
    use_band_grouping: bool = True
    use_spectral_fusion: bool = True
    upsampling: str = "optimized"
    use_global_residual: bool = True
    projection_scale: float = 0.1  # constant gain on the projection output

    def __post_init__(self):
        if self.overlap is None:
            self.overlap = self.group_size // 4
        if self.n_bands < 1:
            raise ConfigError(f"n_bands must be positive, got {self.n_bands}")
        if self.features < 1:
            raise ConfigError(f"features must be positive, got {self.features}")
        if self.inception_blocks < 0:
            raise ConfigError("inception_blocks must be >= 0")
        if self.use_band_grouping and not 0 < self.overlap < self.group_size:
            raise ConfigError(f"need 0 < overlap < group_size, got overlap={self.overlap}, group_size={self.group_size}")
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale}")
        if self.upsampling not in UPSAMPLING_MODES:
            raise ConfigError(f"upsampling must be one of {UPSAMPLING_MODES}, got {self.upsampling!r}")

    @property
    def in_bands(self) -> int:
        """Channel count G seen by the network."""
        if not self.use_band_grouping:
            return self.n_bands
        return min(self.group_size, self.n_bands)

    def group_spec(self) -> GroupSpec:
        if not self.use_band_grouping or self.group_size >= self.n_bands:
            return single_group(self.n_bands)
        return make_groups(self.n_bands, self.group_size, self.overlap)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


def _half(cfg: ModelConfig) -> int:
    if cfg.features % 2:
        raise ConfigError("feature width must be even for branch split")
    return cfg.features // 2


def layer_specs(cfg: ModelConfig) -> list:
    """Ordered layer layout: ``("conv", name, k, cin, cout)``,
    ``("dw", name, k, c)`` or ``("bn", name, c)``."""
    G, F = cfg.in_bands, cfg.features
    h = _half(cfg)
    specs = [("conv", "shallow", 3, G, F)]
    if cfg.use_spectral_fusion:
        specs += [("conv", "fusion.spectral", 1, F, F), ("conv", "fusion.spatial", 3, F, F)]
    for i in range(cfg.inception_blocks):
        p = f"inc{i}"
        for name, k, cin in (("b1", 1, F), ("b2a", 1, F), ("b2b", 3, h), ("b3a", 1, F),
                             ("b3b", 5, h), ("b4", 1, F)):
            specs += [("conv", f"{p}.{name}", k, cin, h), ("bn", f"{p}.{name}.bn", h)]
        specs += [("conv", f"{p}.fuse", 1, 4 * h, F), ("bn", f"{p}.fuse.bn", F)]
    specs += [("conv", "msf.c1", 1, F, h), ("conv", "msf.c3", 3, F, h), ("conv", "msf.c5", 5, F, h),
              ("conv", "msf.fuse", 1, 3 * h, F)]
    if cfg.upsampling == "optimized":
        specs += [("dw", "up.dw", 3, F), ("bn", "up.dw.bn", F)]
    specs += [("conv", "proj", 3, F, G)]
    return specs


def param_count(cfg: ModelConfig) -> int:
    """Trainable parameter census (weights, biases, BN gamma/beta)."""
    total = 0
    for spec in layer_specs(cfg):
        kind = spec[0]
        if kind == "conv":
            _, _, k, cin, cout = spec
            total += k * k * cin * cout + cout
        elif kind == "dw":
            _, _, k, c = spec
            total += k * k * c + c
        else:
            total += 2 * spec[2]
    return total


def buffer_count(cfg: ModelConfig) -> int:
    """Non-trainable BN running statistics (mean + var per channel)."""
    return sum(2 * s[2] for s in layer_specs(cfg) if s[0] == "bn")


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32, zero_projection: bool = True) -> ParamStore:
    """Fan-in uniform weights, zero biases, unit BN scale.

    With ``zero_projection`` (and a global residual) the final band
    projection starts at zero, so the untrained network reproduces the
    bilinear upsampling of its input and training learns a correction.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    for spec in layer_specs(cfg):
        if spec[0] == "conv":
            init_conv(store, rng, *spec[1:])
            if spec[1] == "proj" and zero_projection and cfg.use_global_residual:
                store.params["proj.w"][...] = 0
        elif spec[0] == "dw":
            init_depthwise(store, rng, *spec[1:])
        else:
            init_bn(store, *spec[1:])
    return store


def check_layout(store: ParamStore, cfg: ModelConfig) -> None:
    """Raise if the store's tensors do not match the config's layer layout."""
    want = {}
    for spec in layer_specs(cfg):
        if spec[0] == "conv":
            _, n, k, cin, cout = spec
            want[n + ".w"], want[n + ".b"] = (k, k, cin, cout), (cout,)
        elif spec[0] == "dw":
            _, n, k, c = spec
            want[n + ".w"], want[n + ".b"] = (k, k, c), (c,)
        else:
            _, n, c = spec
            want[n + ".gamma"], want[n + ".beta"] = (c,), (c,)
    got = {k: v.shape for k, v in store.params.items()}
    if got != want:
        missing = sorted(set(want) - set(got))
        extra = sorted(set(got) - set(want))
        raise ConfigError(f"parameter tensors do not match config (missing {missing[:3]}, unexpected {extra[:3]})")


# -- layer helpers ----------------------------------------------------------

def _conv(x, store, name):
    k = store.conv(name)
    return ops.conv2d(x, k), (name, x, k)


def _conv_backward(dy, store, cache):
    name, x, k = cache
    dx, dw, db = ops.conv2d_backward(dy, x, k)
    store.accumulate(name + ".w", dw)
    store.accumulate(name + ".b", db)
    return dx


def _bn(x, store, name, training, update_stats):
    state = store.bn(name, training)
    y, cache = ops.batchnorm(x, state)
    if update_stats:
        ops.update_running_stats(state, cache)
        store.mark_bn(name, state)
    return y, (name, cache)


def _bn_backward(dy, store, cache):
    name, bc = cache
    dx, dgamma, dbeta = ops.batchnorm_backward(dy, bc)
    store.accumulate(name + ".gamma", dgamma)
    store.accumulate(name + ".beta", dbeta)
    return dx


def _stage(x, store, name, training, update_stats):
    """relu(BN(conv(x)))"""
    y, cc = _conv(x, store, name)
    z, bc = _bn(y, store, name + ".bn", training, update_stats)
    return ops.relu(z), (cc, bc, z)


def _stage_backward(da, store, cache):
    cc, bc, z = cache
    dz = ops.relu_backward(da, z)
    return _conv_backward(_bn_backward(dz, store, bc), store, cc)


def _conv_relu(x, store, name):
    y, cc = _conv(x, store, name)
    return ops.relu(y), (cc, y)


def _conv_relu_backward(da, store, cache):
    cc, y = cache
    return _conv_backward(ops.relu_backward(da, y), store, cc)


def _check_channels(x, expected, where):
    ops._check_nhwc(x)
    if x.shape[3] != expected:
        raise ShapeError(f"{where}: input has {x.shape[3]} channels, config expects {expected}", axis="channels")


# -- blocks -----------------------------------------------------------------

def shallow_extract(x, store, cfg):
    _check_channels(x, cfg.in_bands, "shallow_extract")
    return _conv_relu(x, store, "shallow")


def shallow_extract_backward(dy, store, cache):
    return _conv_relu_backward(dy, store, cache)


def spectral_spatial_fusion(x, store, cfg):
    """1x1 channel mixing, then 3x3 spatial conv, then a residual add.

    ``Y = relu(relu(conv3x3(relu(conv1x1(x)))) + x)``; identity when the
    block is disabled.
    """
    _check_channels(x, cfg.features, "spectral_spatial_fusion")
    if not cfg.use_spectral_fusion:
        return x, None
    hs, c1 = _conv_relu(x, store, "fusion.spectral")
    hsp, c2 = _conv_relu(hs, store, "fusion.spatial")
    pre = ops.add(hsp, x)
    return ops.relu(pre), (c1, c2, pre)


def spectral_spatial_fusion_backward(dy, store, cache):
    if cache is None:
        return dy
    c1, c2, pre = cache
    dpre = ops.relu_backward(dy, pre)
    dhsp, dx = ops.add_backward(dpre)
    dhs = _conv_relu_backward(dhsp, store, c2)
    return dx + _conv_relu_backward(dhs, store, c1)


def inception_block(x, store, cfg, index=0, training=True, update_stats=False):
    """Four branches (1x1, 1x1->3x3, 1x1->5x5, 1x1), each stage conv->BN->ReLU,
    concatenated, fused by 1x1 conv + BN, added to ``x`` and rectified."""
    h = _half(cfg)
    _check_channels(x, cfg.features, "inception_block")
    p = f"inc{index}"
    f1, c1 = _stage(x, store, f"{p}.b1", training, update_stats)
    t2, c2a = _stage(x, store, f"{p}.b2a", training, update_stats)
    f2, c2b = _stage(t2, store, f"{p}.b2b", training, update_stats)
    t3, c3a = _stage(x, store, f"{p}.b3a", training, update_stats)
    f3, c3b = _stage(t3, store, f"{p}.b3b", training, update_stats)
    f4, c4 = _stage(x, store, f"{p}.b4", training, update_stats)
    cat = ops.concat_channels([f1, f2, f3, f4])
    fused, cf = _conv(cat, store, f"{p}.fuse")
    z, cbn = _bn(fused, store, f"{p}.fuse.bn", training, update_stats)
    pre = ops.add(z, x)
    return ops.relu(pre), (h, c1, c2a, c2b, c3a, c3b, c4, cf, cbn, pre)


def inception_block_backward(dy, store, cache):
    h, c1, c2a, c2b, c3a, c3b, c4, cf, cbn, pre = cache
    dpre = ops.relu_backward(dy, pre)
    dz, dx = ops.add_backward(dpre)
    dcat = _conv_backward(_bn_backward(dz, store, cbn), store, cf)
    d1, d2, d3, d4 = ops.concat_channels_backward(dcat, [h, h, h, h])
    dx = dx + _stage_backward(d1, store, c1)
    dx = dx + _stage_backward(_stage_backward(d2, store, c2b), store, c2a)
    dx = dx + _stage_backward(_stage_backward(d3, store, c3b), store, c3a)
    dx = dx + _stage_backward(d4, store, c4)
    return dx


def multiscale_fusion(x, store, cfg):
    h = _half(cfg)
    _check_channels(x, cfg.features, "multiscale_fusion")
    b1, c1 = _conv_relu(x, store, "msf.c1")
    b2, c3 = _conv_relu(x, store, "msf.c3")
    b3, c5 = _conv_relu(x, store, "msf.c5")
    mc = ops.concat_channels([b1, b2, b3])
    ld, cf = _conv_relu(mc, store, "msf.fuse")
    return ld, (h, c1, c3, c5, cf)


def multiscale_fusion_backward(dy, store, cache):
    h, c1, c3, c5, cf = cache
    dmc = _conv_relu_backward(dy, store, cf)
    d1, d2, d3 = ops.concat_channels_backward(dmc, [h, h, h])
    return (_conv_relu_backward(d1, store, c1) + _conv_relu_backward(d2, store, c3)
            + _conv_relu_backward(d3, store, c5))


def upsample_block(x, store, cfg, s=None, training=True, update_stats=False):
    """Bilinear upsampling plus a depthwise-conv/BN/ReLU refinement.

    ``out = relu(BN(dw3x3(U(x, s)))) + U(x, s)``; in ``bilinear_only`` mode
    just ``U(x, s)``.
    """
    s = cfg.scale if s is None else s
    if s not in (1, 2, 4, 8):
        raise ConfigError(f"upsampling scale must be one of 1, 2, 4, 8; got {s}")
    xh = ops.bilinear_resize(x, s)
    if cfg.upsampling == "bilinear_only":
        return xh, (s, None)
    k = store.depthwise("up.dw")
    d = ops.depthwise_conv2d(xh, k)
    z, cbn = _bn(d, store, "up.dw.bn", training, update_stats)
    D = ops.relu(z)
    return ops.add(D, xh), (s, (xh, k, cbn, z))


def upsample_block_backward(dy, store, cache):
    s, inner = cache
    if inner is None:
        return ops.bilinear_resize_backward(dy, s)
    xh, k, cbn, z = inner
    dD, dres = ops.add_backward(dy)
    dd = _bn_backward(ops.relu_backward(dD, z), store, cbn)
    dxh, dw, db = ops.depthwise_conv2d_backward(dd, xh, k)
    store.accumulate("up.dw.w", dw)
    store.accumulate("up.dw.b", db)
    return ops.bilinear_resize_backward(dxh + dres, s)


def fgin_forward(lr_group, store, cfg, training=False, update_stats=None):
    """Super-resolve a stack of band groups ``[B, h, w, G] -> [B, s*h, s*w, G]``.

    Returns ``(out, cache)``.  ``update_stats`` defaults to ``training``.
    """
    if update_stats is None:
        update_stats = training
    x, c_sh = shallow_extract(lr_group, store, cfg)
    x, c_ssf = spectral_spatial_fusion(x, store, cfg)
    c_inc = []
    for i in range(cfg.inception_blocks):
        x, c = inception_block(x, store, cfg, i, training, update_stats)
        c_inc.append(c)
    x, c_msf = multiscale_fusion(x, store, cfg)
    x, c_up = upsample_block(x, store, cfg, cfg.scale, training, update_stats)
    out, c_proj = _conv(x, store, "proj")
    if cfg.projection_scale != 1.0:
        out = out * cfg.projection_scale
    if cfg.use_global_residual:
        out = ops.add(out, ops.bilinear_resize(lr_group, cfg.scale))
    return out, (c_sh, c_ssf, c_inc, c_msf, c_up, c_proj)


def fgin_backward(dout, store, cfg, cache):
    """Accumulates parameter gradients; returns the gradient w.r.t. the input."""
    c_sh, c_ssf, c_inc, c_msf, c_up, c_proj = cache
    dx = _conv_backward(dout * cfg.projection_scale if cfg.projection_scale != 1.0 else dout, store, c_proj)
    dx = upsample_block_backward(dx, store, c_up)
    dx = multiscale_fusion_backward(dx, store, c_msf)
    for c in reversed(c_inc):
        dx = inception_block_backward(dx, store, c)
    dx = spectral_spatial_fusion_backward(dx, store, c_ssf)
    dlr = shallow_extract_backward(dx, store, c_sh)
    if cfg.use_global_residual:
        dlr = dlr + ops.bilinear_resize_backward(dout, cfg.scale)
    return dlr


def forward_cube(lr, store, cfg, training=False, update_stats=None):
    """Full band pipeline on ``[B, h, w, C]``: split into groups, run the
    shared network on all groups at once, merge overlaps by averaging."""
    if lr.shape[-1] != cfg.n_bands:
        raise ShapeError(f"input has {lr.shape[-1]} bands, config expects {cfg.n_bands}", axis="bands")
    spec = cfg.group_spec()
    B = lr.shape[0]
    stacked = np.concatenate(split(lr, spec), axis=0)
    y, cache = fgin_forward(stacked, store, cfg, training, update_stats)
    out = merge(np.split(y, len(spec), axis=0), spec, cfg.n_bands)
    return out, (spec, B, cache)


def forward_cube_backward(dout, store, cfg, cache):
    spec, B, inner = cache
    dy = np.concatenate(merge_backward(dout, spec), axis=0)
    dstacked = fgin_backward(dy, store, cfg, inner)
    return split_backward(np.split(dstacked, len(spec), axis=0), spec)


def predict(lr, store, cfg) -> np.ndarray:
    """Inference-mode super-resolution of ``[B, h, w, C]`` or ``[h, w, C]``."""
    squeeze = lr.ndim == 3
    x = lr[None] if squeeze else lr
    out, _ = forward_cube(x.astype(store.dtype, copy=False), store, cfg, training=False)
    return out[0] if squeeze else out
