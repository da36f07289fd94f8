"""Small deterministic numeric core: MLPs with hand-written backprop, Adam,
Polyak averaging and a forkable counter-based RNG.

Everything runs in float64. Network parameters live in a single flat buffer;
per-layer weight and bias arrays are views into it, so optimizer and target
updates are single vectorized operations.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

ACTIVATIONS = ("identity", "relu", "tanh")
_ACT_TAG = {name: i for i, name in enumerate(ACTIVATIONS)}

MLP_MAGIC = b"CFMP"
MLP_FORMAT_VERSION = 1


class NumericError(ValueError):
    """Raised when a NaN/Inf shows up where finite values are required."""


class ShapeError(ValueError):
    pass


def check_finite(x, what: str = "value") -> None:
    # A finite sum proves every entry finite; only a non-finite sum needs the full scan.
    if not math.isfinite(np.sum(x)) and not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what}")


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


def _count(size) -> int:
    if size is None:
        return 1
    if isinstance(size, int):
        return size
    n = 1
    for d in size:
        n *= d
    return n


class Rng:
    """Seedable stream on numpy's Philox-4x64 counter-based generator.

    ``fork(label)`` derives a child stream from the current state and the label
    without advancing the parent. ``draws`` counts values handed out, which
    tests use to audit how much noise a code path consumed.
    """

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if not isinstance(seed, np.random.SeedSequence):
            seed = np.random.SeedSequence(int(seed))
        self._bitgen = np.random.Philox(seed)
        self._gen = np.random.Generator(self._bitgen)
        self.draws = 0

    def uniform(self, size=None):
        self.draws += _count(size)
        return self._gen.random(size)

    def normal(self, size=None):
        self.draws += _count(size)
        return self._gen.standard_normal(size)

    def integers(self, high: int, size=None):
        """Uniform integers in [0, high)."""
        self.draws += _count(size)
        return self._gen.integers(0, high, size=size)

    def fork(self, label: str) -> "Rng":
        h = hashlib.sha256()
        h.update(self._state_bytes())
        h.update(b"\x00fork\x00")
        h.update(label.encode("utf-8"))
        words = np.frombuffer(h.digest(), dtype="<u4")
        return Rng(np.random.SeedSequence([int(w) for w in words]))

    def _state_bytes(self) -> bytes:
        st = self._bitgen.state
        inner = st["state"]
        return b"".join(
            [
                np.asarray(inner["counter"], dtype="<u8").tobytes(),
                np.asarray(inner["key"], dtype="<u8").tobytes(),
                np.asarray(st["buffer"], dtype="<u8").tobytes(),
                struct.pack("<qqQ", st["buffer_pos"], st["has_uint32"], st["uinteger"]),
            ]
        )

    def get_state(self) -> dict:
        # The bit generator hands out a fresh copy and copies on assignment.
        return {"bitgen": self._bitgen.state, "draws": self.draws}

    def set_state(self, state: dict) -> None:
        self._bitgen.state = state["bitgen"]
        self.draws = state["draws"]

    def copy(self) -> "Rng":
        other = Rng.__new__(Rng)
        other._bitgen = np.random.Philox()
        other._gen = np.random.Generator(other._bitgen)
        other.set_state(self.get_state())
        return other


def rng_fork(rng: Rng, label: str) -> Rng:
    return rng.fork(label)


def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit integer seed for a labeled sub-task of run ``seed``."""
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def pack_rng_state(state: dict) -> bytes:
    bg = state["bitgen"]
    inner = bg["state"]
    return b"".join(
        [
            np.asarray(inner["counter"], dtype="<u8").tobytes(),
            np.asarray(inner["key"], dtype="<u8").tobytes(),
            np.asarray(bg["buffer"], dtype="<u8").tobytes(),
            struct.pack("<qqQq", bg["buffer_pos"], bg["has_uint32"], bg["uinteger"], state["draws"]),
        ]
    )


RNG_STATE_BYTES = 8 * 4 + 8 * 2 + 8 * 4 + 32


def unpack_rng_state(buf: bytes) -> dict:
    if len(buf) != RNG_STATE_BYTES:
        raise ValueError("bad rng state length")
    counter = np.frombuffer(buf[0:32], dtype="<u8").astype(np.uint64)
    key = np.frombuffer(buf[32:48], dtype="<u8").astype(np.uint64)
    buffer = np.frombuffer(buf[48:80], dtype="<u8").astype(np.uint64)
    pos, has32, uint, draws = struct.unpack("<qqQq", buf[80:112])
    return {
        "bitgen": {
            "bit_generator": "Philox",
            "state": {"counter": counter, "key": key},
            "buffer": buffer,
            "buffer_pos": pos,
            "has_uint32": has32,
            "uinteger": uint,
        },
        "draws": draws,
    }


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


class MlpParams:
    """Dense feed-forward network parameters.

    ``dims`` is ``(in, h1, ..., out)``; ``activations`` has one entry per layer.
    ``layers[k]`` is ``(W, b, activation)`` with ``W`` shaped ``[out, in]``.
    """

    def __init__(self, dims: Sequence[int], activations: Sequence[str], flat=None):
        dims = tuple(int(d) for d in dims)
        activations = tuple(activations)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ShapeError(f"bad layer dims {dims}")
        if len(activations) != len(dims) - 1:
            raise ShapeError("need one activation per layer")
        for a in activations:
            if a not in _ACT_TAG:
                raise ValueError(f"unknown activation {a!r}")
        self.dims = dims
        self.activations = activations
        size = sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
        if flat is None:
            self.flat = np.zeros(size)
        else:
            self.flat = np.array(flat, dtype=np.float64)
            if self.flat.shape != (size,):
                raise ShapeError(f"expected {size} parameters, got {self.flat.shape}")
        self.layers = []
        self._spans = []
        off = 0
        for i, o, act in zip(dims[:-1], dims[1:], activations):
            self._spans.append((off, off + o * i, off + o * i + o, o, i))
            W = self.flat[off : off + o * i].reshape(o, i)
            off += o * i
            b = self.flat[off : off + o]
            off += o
            self.layers.append((W, b, act))

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def copy(self) -> "MlpParams":
        return MlpParams(self.dims, self.activations, self.flat.copy())

    def zeros_like(self) -> "MlpParams":
        return MlpParams(self.dims, self.activations)

    def same_shape(self, other: "MlpParams") -> bool:
        return self.dims == other.dims and self.activations == other.activations

    def __eq__(self, other):
        if not isinstance(other, MlpParams):
            return NotImplemented
        return self.same_shape(other) and np.array_equal(self.flat, other.flat)

    def __repr__(self):
        return f"MlpParams(dims={self.dims}, activations={self.activations})"

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MLP_MAGIC, struct.pack("<II", MLP_FORMAT_VERSION, len(self.layers))]
        for (W, _b, act) in self.layers:
            parts.append(struct.pack("<IIB", W.shape[0], W.shape[1], _ACT_TAG[act]))
        parts.append(self.flat.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MlpParams":
        if data[:4] != MLP_MAGIC:
            raise ValueError("not an MLP parameter file (bad magic)")
        version, n_layers = struct.unpack_from("<II", data, 4)
        if version != MLP_FORMAT_VERSION:
            raise ValueError(f"unsupported MLP format version {version}")
        off = 12
        dims, acts = [], []
        for k in range(n_layers):
            o, i, tag = struct.unpack_from("<IIB", data, off)
            off += 9
            if k == 0:
                dims.append(i)
            elif dims[-1] != i:
                raise ShapeError("layer dims do not chain")
            dims.append(o)
            acts.append(ACTIVATIONS[tag])
        flat = np.frombuffer(data[off:], dtype="<f8")
        return cls(dims, acts, flat)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": MLP_FORMAT_VERSION,
                "layers": [
                    {"activation": act, "weight": W.tolist(), "bias": b.tolist()}
                    for (W, b, act) in self.layers
                ],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "MlpParams":
        obj = json.loads(text)
        layers = obj["layers"]
        dims = [len(layers[0]["weight"][0])] + [len(l["bias"]) for l in layers]
        params = cls(dims, [l["activation"] for l in layers])
        for (W, b, _), l in zip(params.layers, layers):
            W[...] = np.asarray(l["weight"], dtype=np.float64)
            b[...] = np.asarray(l["bias"], dtype=np.float64)
        return params


def init_mlp(dims: Sequence[int], activations: Sequence[str], rng: Rng) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    params = MlpParams(dims, activations)
    for W, b, _ in params.layers:
        bound = 1.0 / np.sqrt(W.shape[1])
        W[...] = (rng.uniform(W.shape) * 2.0 - 1.0) * bound
        b[...] = (rng.uniform(b.shape) * 2.0 - 1.0) * bound
    return params


def _as_batch(params: MlpParams, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match in-dim {params.in_dim}")
    return x, single


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Evaluate the network on a vector or a ``[batch, in]`` matrix."""
    h, single = _as_batch(params, x)
    check_finite(h, "network input")
    for W, b, act in params.layers:
        h = h @ W.T
        h += b
        if act == "relu":
            np.maximum(h, 0.0, out=h)
        elif act == "tanh":
            np.tanh(h, out=h)
    return h[0] if single else h


def mlp_forward_cached(params: MlpParams, x):
    """Forward pass keeping what the backward pass needs.

    Returns ``(output, cache)``; ``cache`` holds each layer's input and output.
    Input must already be a 2-d batch.
    """
    h = x
    cache = []
    for W, b, act in params.layers:
        z = h @ W.T
        z += b
        if act == "relu":
            np.maximum(z, 0.0, out=z)
        elif act == "tanh":
            np.tanh(z, out=z)
        cache.append((h, z))
        h = z
    return h, cache


def mlp_backward_cached(params: MlpParams, cache, output_grad, need_input_grad=True, need_param_grad=True):
    """Backward pass over a cache from ``mlp_forward_cached``.

    Returns ``(flat_param_grad, input_grad)``; the first is a flat array laid
    out like ``params.flat`` (``None`` when not requested).
    """
    flat = np.empty_like(params.flat) if need_param_grad else None
    g = output_grad
    for k in range(len(params.layers) - 1, -1, -1):
        W, _b, act = params.layers[k]
        h_in, h_out = cache[k]
        if act == "relu":
            g = g * (h_out > 0.0)
        elif act == "tanh":
            g = g * (1.0 - h_out * h_out)
        if need_param_grad:
            w0, w1, b1, o, i = params._spans[k]
            np.matmul(g.T, h_in, out=flat[w0:w1].reshape(o, i))
            np.sum(g, axis=0, out=flat[w1:b1])
        if k > 0 or need_input_grad:
            g = g @ W
    return flat, (g if need_input_grad else None)


def mlp_backward(params: MlpParams, x, output_grad):
    """Gradients of a loss whose gradient w.r.t. the network output is ``output_grad``.

    Returns ``(param_grads, input_grad)``; ``param_grads`` is an ``MlpParams``
    laid out like ``params``. Batched inputs sum gradients over the batch.
    """
    h, single = _as_batch(params, x)
    g = np.asarray(output_grad, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (h.shape[0], params.out_dim):
        raise ShapeError(f"output_grad shape {g.shape} does not match out-dim {params.out_dim}")
    _, cache = mlp_forward_cached(params, h)
    flat, gin = mlp_backward_cached(params, cache, g)
    return MlpParams(params.dims, params.activations, flat), (gin[0] if single else gin)


# ---------------------------------------------------------------------------
# Optimizer and target updates
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, **kw) -> "AdamState":
        return cls(np.zeros_like(params.flat), np.zeros_like(params.flat), **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_step(params: MlpParams, grads, state: AdamState, lr: float):
    """One bias-corrected Adam step, in place. Returns ``(params, state)``."""
    g = grads.flat if isinstance(grads, MlpParams) else np.asarray(grads, dtype=np.float64)
    if g.shape != params.flat.shape or state.m.shape != params.flat.shape:
        raise ShapeError("gradient / optimizer state shape mismatch")
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    check_finite(g, "gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    _adam_kernel(params.flat, g, state.m, state.v, lr, b1, b2, state.eps,
                 1.0 - b1**state.t, 1.0 - b2**state.t)
    return params, state


@njit(cache=True, error_model="numpy")
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, c1, c2):
    step = lr / c1
    inv_sqrt_c2 = 1.0 / np.sqrt(c2)
    for i in range(p.shape[0]):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * (gi * gi)
        # Moments of dead units decay geometrically; flush before they go subnormal.
        mi = mi if abs(mi) >= 1e-300 else 0.0
        vi = vi if vi >= 1e-300 else 0.0
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi) * inv_sqrt_c2 + eps)


@njit(cache=True)
def _polyak_kernel(t, o, tau):
    keep = 1.0 - tau
    for i in range(t.shape[0]):
        t[i] = keep * t[i] + tau * o[i]


def soft_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    """Polyak averaging in place: ``target <- tau*online + (1-tau)*target``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    if not target.same_shape(online):
        raise ShapeError("target and online networks differ in shape")
    _polyak_kernel(target.flat, online.flat, float(tau))
    return target
