"""Central finite-difference checks for every op and block.

The scalar probe is ``L = sum(out * R)`` for a fixed random ``R``, so the
analytic gradient is simply the backward pass fed with ``R``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import FginError

DEFAULT_STEP = 1e-4
DEFAULT_PROBES = 64
TOLERANCE = 1e-4


class NonDeterministicError(FginError):
    """Forward pass gave different results for identical inputs."""


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    probes: int
    per_input: dict = field(default_factory=dict)
    seconds: float = 0.0
    skipped: int = 0

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_rel_error <= tol


def _pick_probes(arrays: dict, n_probes: int, rng: np.random.Generator) -> list:
    """At least one coordinate in every array, the rest spread by size."""
    names = list(arrays)
    picks = [(n, int(rng.integers(arrays[n].size))) for n in names]
    sizes = np.array([arrays[n].size for n in names], dtype=np.float64)
    for _ in range(max(0, n_probes - len(names))):
        n = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        picks.append((n, int(rng.integers(arrays[n].size))))
    return picks


def _masks_differ(a, b) -> bool:
    return len(a) != len(b) or any(not np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(loss_fn, arrays: dict, analytic: dict, n_probes: int = DEFAULT_PROBES,
                    h: float = DEFAULT_STEP, seed: int = 0, name: str = "op") -> GradcheckResult:
    """Compare ``analytic`` gradients against central differences of ``loss_fn``.

    ``loss_fn()`` must read the (mutable) arrays in ``arrays``; each probed
    coordinate is perturbed in place and restored afterwards.  A probe whose
    +-h step flips any relu mask straddles a kink, where central differences
    are meaningless; it is discarded and another coordinate of the same
    array is drawn instead (``skipped`` counts these).
    """
    t0 = time.perf_counter()

    def run():
        with ops.record_relu_masks() as masks:
            val = loss_fn()
        return val, masks

    base, base_masks = run()
    if run()[0] != base:
        raise NonDeterministicError(f"{name}: forward is not deterministic")
    rng = np.random.default_rng(seed)
    worst = 0.0
    per_input: dict = {}
    queue = _pick_probes(arrays, n_probes, rng)
    done = skipped = 0
    while queue:
        key, idx = queue.pop(0)
        flat = arrays[key].reshape(-1)
        if not np.shares_memory(flat, arrays[key]):
            raise ValueError(f"{name}: array {key!r} must be contiguous")
        orig = flat[idx]
        flat[idx] = orig + h
        lp, mp = run()
        flat[idx] = orig - h
        lm, mm = run()
        flat[idx] = orig
        if _masks_differ(base_masks, mp) or _masks_differ(base_masks, mm):
            skipped += 1
            if skipped > 4 * n_probes:
                raise RuntimeError(f"{name}: too many probes straddle relu kinks")
            queue.append((key, int(rng.integers(flat.size))))
            continue
        numeric = (lp - lm) / (2 * h)
        a = float(analytic[key].reshape(-1)[idx])
        err = abs(a - numeric) / max(1.0, abs(numeric))
        per_input[key] = max(per_input.get(key, 0.0), err)
        worst = max(worst, err)
        done += 1
    return GradcheckResult(name, worst, done, per_input, time.perf_counter() - t0, skipped)


def gradcheck(forward, backward, inputs, n_probes: int = DEFAULT_PROBES, h: float = DEFAULT_STEP,
              seed: int = 0, name: str = "op") -> GradcheckResult:
    """Check a pure op.

    ``forward(*inputs) -> out`` and ``backward(dout, *inputs) -> grads``
    (one gradient per input, in order).  Inputs must be float64.
    """
    inputs = [np.ascontiguousarray(x, dtype=np.float64) for x in inputs]
    proj = np.random.default_rng(seed + 7919).standard_normal(np.shape(forward(*inputs)))
    grads = backward(proj, *inputs)
    arrays = {f"in{i}": x for i, x in enumerate(inputs)}
    analytic = {f"in{i}": np.asarray(g) for i, g in enumerate(grads)}
    return check_gradients(lambda: float(np.sum(forward(*inputs) * proj)), arrays, analytic,
                           n_probes, h, seed, name)


def gradcheck_block(forward, backward, x, store, n_probes: int = DEFAULT_PROBES,
                    h: float = DEFAULT_STEP, seed: int = 0, name: str = "block") -> GradcheckResult:
    """Check a model block against its input and every parameter in ``store``.

    ``forward(x, store) -> (out, cache)``; ``backward(dout, store, cache) -> dx``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    out, cache = forward(x, store)
    proj = np.random.default_rng(seed + 7919).standard_normal(out.shape)
    store.zero_grad()
    dx = backward(proj, store, cache)
    arrays = {"input": x, **store.params}
    analytic = {"input": dx, **{k: g.copy() for k, g in store.grads.items()}}
    return check_gradients(lambda: float(np.sum(forward(x, store)[0] * proj)), arrays, analytic,
                           n_probes, h, seed, name)


# -- the standard suite -------------------------------------------------------

def _op_cases(rng):
    def conv_case(k, cin, cout, shape=(1, 5, 5, 3)):
        x = rng.standard_normal(shape[:3] + (cin,))
        w = rng.standard_normal((k, k, cin, cout)) * 0.5
        b = rng.standard_normal(cout)
        fwd = lambda x, w, b: ops.conv2d(x, ops.ConvKernel(w, b))
        bwd = lambda d, x, w, b: ops.conv2d_backward(d, x, ops.ConvKernel(w, b))
        return fwd, bwd, [x, w, b]

    def dw_case():
        x = rng.standard_normal((2, 5, 5, 3))
        w = rng.standard_normal((3, 3, 3))
        b = rng.standard_normal(3)
        fwd = lambda x, w, b: ops.depthwise_conv2d(x, ops.DepthwiseKernel(w, b))
        bwd = lambda d, x, w, b: ops.depthwise_conv2d_backward(d, x, ops.DepthwiseKernel(w, b))
        return fwd, bwd, [x, w, b]

    def bn_case(training):
        x = rng.standard_normal((2, 4, 4, 3)) * 2 + 1
        g = rng.uniform(0.5, 1.5, 3)
        be = rng.standard_normal(3)
        rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)

        def state(g, be):
            return ops.BatchNormState(g, be, rm.copy(), rv.copy(), training=training, initialized=True)

        fwd = lambda x, g, be: ops.batchnorm(x, state(g, be))[0]
        bwd = lambda d, x, g, be: ops.batchnorm_backward(d, ops.batchnorm(x, state(g, be))[1])
        return fwd, bwd, [x, g, be]

    relu_x = rng.standard_normal((1, 4, 4, 4))
    relu_x = np.where(np.abs(relu_x) < 10 * DEFAULT_STEP, 0.5, relu_x)
    return {
        "conv2d_1x1": conv_case(1, 3, 4),
        "conv2d_3x3": conv_case(3, 3, 4),
        "conv2d_5x5": conv_case(5, 3, 2),
        "depthwise_conv2d": dw_case(),
        "relu": (ops.relu, lambda d, x: (ops.relu_backward(d, x),), [relu_x]),
        "batchnorm_train": bn_case(True),
        "batchnorm_infer": bn_case(False),
        "bilinear_resize": (lambda x: ops.bilinear_resize(x, 2),
                            lambda d, x: (ops.bilinear_resize_backward(d, 2),),
                            [rng.standard_normal((1, 3, 4, 2))]),
        "area_downsample": (lambda x: ops.area_downsample(x, 2),
                            lambda d, x: (ops.area_downsample_backward(d, 2),),
                            [rng.standard_normal((1, 4, 6, 2))]),
        "concat_channels": (lambda a, b: ops.concat_channels([a, b]),
                            lambda d, a, b: ops.concat_channels_backward(d, [2, 3]),
                            [rng.standard_normal((1, 3, 3, 2)), rng.standard_normal((1, 3, 3, 3))]),
        "add": (ops.add, lambda d, x, y: ops.add_backward(d),
                [rng.standard_normal((1, 3, 3, 2)), rng.standard_normal((1, 3, 3, 2))]),
    }


def tiny_config(**overrides):
    from .model import ModelConfig

    base = dict(n_bands=4, group_size=4, overlap=1, features=8, inception_blocks=3, scale=2)
    base.update(overrides)
    return ModelConfig(**base)


def _randomize_bn(store, rng):
    # non-trivial affine params so BN gradients are exercised
    for name in store.bn_names():
        store.params[name + ".gamma"][...] = rng.uniform(0.5, 1.5, store.params[name + ".gamma"].shape)
        store.params[name + ".beta"][...] = rng.standard_normal(store.params[name + ".beta"].shape) * 0.1
        store.buffers[name + ".running_mean"][...] = rng.standard_normal(store.buffers[name + ".running_mean"].shape) * 0.1
        store.buffers[name + ".running_var"][...] = rng.uniform(0.5, 1.5, store.buffers[name + ".running_var"].shape)
        store.buffers[name + ".initialized"][0] = 1.0


def _block_cases(rng):
    from . import model as M
    from .train import l1_loss

    cfg = tiny_config()
    hw = (2, 6, 6)

    def fresh(c=cfg, seed=1):
        st = M.init_params(c, seed=seed, dtype=np.float64)
        _randomize_bn(st, np.random.default_rng(seed))
        return st

    F = cfg.features
    cases = {
        "shallow_extract": (M.shallow_extract, M.shallow_extract_backward, cfg, hw + (cfg.in_bands,)),
        "spectral_spatial_fusion": (M.spectral_spatial_fusion, M.spectral_spatial_fusion_backward, cfg, hw + (F,)),
        "inception_block": (lambda x, s, c: M.inception_block(x, s, c, 0, training=True),
                            M.inception_block_backward, cfg, hw + (F,)),
        "inception_block_infer": (lambda x, s, c: M.inception_block(x, s, c, 0, training=False),
                                  M.inception_block_backward, cfg, hw + (F,)),
        "multiscale_fusion": (M.multiscale_fusion, M.multiscale_fusion_backward, cfg, hw + (F,)),
        "upsample_block": (lambda x, s, c: M.upsample_block(x, s, c, training=True),
                           M.upsample_block_backward, cfg, hw + (F,)),
        "upsample_block_bilinear": (lambda x, s, c: M.upsample_block(x, s, c, training=True),
                                    M.upsample_block_backward, tiny_config(upsampling="bilinear_only"), hw + (F,)),
        "fgin_forward": (lambda x, s, c: M.fgin_forward(x, s, c, training=True, update_stats=False),
                         lambda d, s, cache: M.fgin_backward(d, s, cfg, cache), cfg, hw + (cfg.in_bands,)),
    }
    out = {}
    for name, (fwd, bwd, c, shape) in cases.items():
        st = fresh(c)
        x = rng.standard_normal(shape)
        out[name] = (lambda x, s, fwd=fwd, c=c: fwd(x, s, c), bwd, x, st)

    pipe_cfg = tiny_config(n_bands=6)
    pst = fresh(pipe_cfg)
    out["forward_cube"] = (
        lambda x, s: M.forward_cube(x, s, pipe_cfg, training=True, update_stats=False),
        lambda d, s, cache: M.forward_cube_backward(d, s, pipe_cfg, cache),
        rng.standard_normal((2, 6, 6, 6)), pst,
    )

    # target kept >= 0.1 away from the initial prediction so no |.| kink is crossed
    # same evaluation point as the fgin_forward case
    lst = fresh(cfg)
    lx = out["fgin_forward"][2].copy()
    y0, _ = M.fgin_forward(lx, lst, cfg, training=True, update_stats=False)
    target = y0 + rng.choice([-1.0, 1.0], y0.shape) * rng.uniform(0.1, 1.0, y0.shape)

    def loss_fwd(x, s):
        y, cache = M.fgin_forward(x, s, cfg, training=True, update_stats=False)
        loss, dl = l1_loss(y, target)
        return np.asarray(loss).reshape(1, 1, 1, 1), (cache, dl)

    def loss_bwd(d, s, cache):
        inner, dl = cache
        return M.fgin_backward(dl * float(d.reshape(-1)[0]), s, cfg, inner)

    out["fgin_l1_loss"] = (loss_fwd, loss_bwd, lx, lst)
    return out


def run_suite(n_probes: int = DEFAULT_PROBES, h: float = DEFAULT_STEP, seed: int = 0) -> list:
    """Every op and every block of the tiny network (h=w=6, G=4, F=8)."""
    rng = np.random.default_rng(seed)
    results = []
    for name, (fwd, bwd, inputs) in _op_cases(rng).items():
        results.append(gradcheck(fwd, bwd, inputs, n_probes, h, seed, name))
    for name, (fwd, bwd, x, st) in _block_cases(rng).items():
        results.append(gradcheck_block(fwd, bwd, x, st, n_probes, h, seed, name))
    return results


def format_report(results, tol: float = TOLERANCE) -> str:
    lines = [f"{'op':<26} {'max_rel_err':>12} {'probes':>7} {'kinks':>6}  status"]
    for r in results:
        lines.append(f"{r.name:<26} {r.max_rel_error:>12.3e} {r.probes:>7} {r.skipped:>6}  "
                     f"{'ok' if r.passed(tol) else 'FAIL'}")
    return "\n".join(lines)
