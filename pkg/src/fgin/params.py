"""Named parameter storage, initialization and the Adam update."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .ops import BatchNormState, ConvKernel, DepthwiseKernel

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5


class ParamStore:
    """Trainable tensors, their gradients, Adam moments and BN buffers.

    Parameters are keyed ``"<layer>.<field>"`` (e.g. ``"shallow.w"``,
    ``"inc0.b1.bn.gamma"``).  Buffers hold non-trainable state: BN running
    statistics and a one-element ``initialized`` flag per BN layer.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.ascontiguousarray(value, dtype=self.dtype)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        self.buffers[name] = np.ascontiguousarray(value, dtype=self.dtype)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    # layer views share memory with the store
    def conv(self, name: str) -> ConvKernel:
        return ConvKernel(self.params[name + ".w"], self.params[name + ".b"])

    def depthwise(self, name: str) -> DepthwiseKernel:
        return DepthwiseKernel(self.params[name + ".w"], self.params[name + ".b"])

    def bn(self, name: str, training: bool) -> BatchNormState:
        return BatchNormState(
            gamma=self.params[name + ".gamma"],
            beta=self.params[name + ".beta"],
            running_mean=self.buffers[name + ".running_mean"],
            running_var=self.buffers[name + ".running_var"],
            momentum=BN_MOMENTUM,
            epsilon=BN_EPSILON,
            training=training,
            initialized=bool(self.buffers[name + ".initialized"][0]),
        )

    def mark_bn(self, name: str, state: BatchNormState) -> None:
        self.buffers[name + ".initialized"][0] = 1.0 if state.initialized else 0.0

    def bn_names(self) -> list[str]:
        return [k[: -len(".initialized")] for k in self.buffers if k.endswith(".initialized")]

    def seed_bn(self, mean=0.0, var=1.0) -> None:
        """Explicitly seed every BN layer's running statistics."""
        for name in self.bn_names():
            self.buffers[name + ".running_mean"][...] = mean
            self.buffers[name + ".running_var"][...] = var
            self.buffers[name + ".initialized"][0] = 1.0

    def trainable_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def buffer_count(self) -> int:
        return sum(b.size for k, b in self.buffers.items() if not k.endswith(".initialized"))

    def copy(self) -> "ParamStore":
        out = ParamStore(self.dtype)
        for attr in ("params", "grads", "buffers", "m", "v"):
            setattr(out, attr, {k: a.copy() for k, a in getattr(self, attr).items()})
        out.t = self.t
        return out

    def load_state(self, other: "ParamStore") -> None:
        """Copy values (not structure) from ``other`` into this store in place."""
        for attr in ("params", "grads", "buffers", "m", "v"):
            mine, theirs = getattr(self, attr), getattr(other, attr)
            if mine.keys() != theirs.keys():
                raise ConfigError(f"{attr} key sets differ")
            for k in mine:
                mine[k][...] = theirs[k]
        self.t = other.t

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for attr in ("params", "grads", "buffers", "m", "v"):
            setattr(out, attr, {k: a.astype(dtype) for k, a in getattr(self, attr).items()})
        out.t = self.t
        return out


def init_conv(store: ParamStore, rng: np.random.Generator, name: str, k: int, cin: int, cout: int) -> None:
    limit = np.sqrt(6.0 / (k * k * cin))
    store.add(name + ".w", rng.uniform(-limit, limit, size=(k, k, cin, cout)))
    store.add(name + ".b", np.zeros(cout))


def init_depthwise(store: ParamStore, rng: np.random.Generator, name: str, k: int, c: int) -> None:
    limit = np.sqrt(6.0 / (k * k))
    store.add(name + ".w", rng.uniform(-limit, limit, size=(k, k, c)))
    store.add(name + ".b", np.zeros(c))


def init_bn(store: ParamStore, name: str, c: int) -> None:
    store.add(name + ".gamma", np.ones(c))
    store.add(name + ".beta", np.zeros(c))
    store.add_buffer(name + ".running_mean", np.zeros(c))
    store.add_buffer(name + ".running_var", np.ones(c))
    store.add_buffer(name + ".initialized", np.zeros(1))


def adam_step(store: ParamStore, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, t: int | None = None) -> None:
    """Bias-corrected Adam update of every parameter in ``store``.

    ``t`` is the 1-based step index; by default the store's own counter is
    advanced.  A gradient buffer that is missing or of the wrong shape is
    reported by parameter name.
    """
    t = store.t + 1 if t is None else t
    if t < 1:
        raise ValueError("Adam step index must be >= 1")
    for name, p in store.params.items():
        g = store.grads.get(name)
        if g is None or g.shape != p.shape:
            raise KeyError(f"missing gradient for parameter {name!r}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = store.grads[name]
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)
    store.t = t
