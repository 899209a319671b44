"""Feed-forward networks with hand-written reverse mode, Adam, and a finite
difference checker. Float64 throughout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh")
_MAGIC = b"OGMLP001"


class NumericalError(RuntimeError):
    """Non-finite loss or gradient during training."""


class StaleTapeError(RuntimeError):
    pass


class Mlp:
    """Dense network; ``activations[i]`` follows layer ``i``.

    Parameters live in one flat vector; per-layer weights are views into it,
    so optimiser updates written into ``params`` are seen by ``forward``.
    Dropout (inverted) is applied after every hidden activation in train mode.
    """

    def __init__(self, layer_widths: Sequence[int], activations: Sequence[str],
                 dropout_rate: float = 0.0, params: Optional[np.ndarray] = None,
                 rng: Optional[np.random.Generator] = None):
        widths = [int(w) for w in layer_widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError("need at least input and output widths")
        if len(activations) != len(widths) - 1:
            raise ValueError("one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.layer_widths = widths
        self.activations = list(activations)
        self.dropout_rate = float(dropout_rate)
        n = self.param_count(widths)
        if params is None:
            params = self._init_params(rng or np.random.default_rng(0))
        params = np.array(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {params.shape}")
        self.params = params
        self.version = 0
        self._bind()

    @staticmethod
    def param_count(widths: Sequence[int]) -> int:
        return sum((i + 1) * o for i, o in zip(widths[:-1], widths[1:]))

    def _init_params(self, rng: np.random.Generator) -> np.ndarray:
        chunks = []
        for w_in, w_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            bound = 1.0 / np.sqrt(w_in)
            chunks.append(rng.uniform(-bound, bound, size=w_in * w_out))
            chunks.append(np.zeros(w_out))
        return np.concatenate(chunks)

    def _bind(self):
        self.layers = []
        off = 0
        for w_in, w_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            W = self.params[off:off + w_in * w_out].reshape(w_in, w_out)
            off += w_in * w_out
            b = self.params[off:off + w_out]
            off += w_out
            self.layers.append((W, b))

    def set_params(self, params: np.ndarray) -> None:
        self.params[:] = params
        self.version += 1

    def copy(self) -> "Mlp":
        return Mlp(self.layer_widths, self.activations, self.dropout_rate, self.params.copy())

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


@dataclass
class Tape:
    net_id: int
    version: int
    inputs: list = field(default_factory=list)   # input to each layer
    pre: list = field(default_factory=list)      # pre-activations
    masks: list = field(default_factory=list)    # dropout masks (or None)
    squeeze: bool = False


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _dact(name: str, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - out * out
    return np.ones_like(z)


def forward(net: Mlp, x, mode: str = "eval", seed=None) -> tuple[np.ndarray, Tape]:
    """Evaluate ``net`` on one input vector or a batch (rows).

    In train mode the dropout masks are drawn from ``seed`` (an int or a
    Generator); eval mode is a pure function of the input.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != net.n_in:
        raise ValueError(f"input width {x.shape[1]} != {net.n_in}")
    train = mode == "train" and net.dropout_rate > 0
    rng = None
    if train:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tape = Tape(id(net), net.version, squeeze=squeeze)
    h = x
    last = len(net.layers) - 1
    for i, ((W, b), act) in enumerate(zip(net.layers, net.activations)):
        tape.inputs.append(h)
        z = h @ W + b
        tape.pre.append(z)
        h = _act(act, z)
        mask = None
        if train and i < last:
            keep = 1.0 - net.dropout_rate
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        tape.masks.append(mask)
    return (h[0] if squeeze else h), tape


def backward_full(net: Mlp, tape: Tape, output_gradient) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(output * output_gradient)`` w.r.t. parameters and input."""
    if tape.net_id != id(net) or tape.version != net.version:
        raise StaleTapeError("tape does not belong to the current parameters")
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    grads = []
    for i in range(len(net.layers) - 1, -1, -1):
        W, _ = net.layers[i]
        z = tape.pre[i]
        if tape.masks[i] is not None:
            g = g * tape.masks[i]
        out = _act(net.activations[i], z) if net.activations[i] == "tanh" else None
        g = g * _dact(net.activations[i], z, out)
        grads.append(g.sum(axis=0))
        grads.append((tape.inputs[i].T @ g).reshape(-1))
        g = g @ W.T
    grads.reverse()
    gin = g[0] if tape.squeeze else g
    return np.concatenate(grads), gin


def backward(net: Mlp, tape: Tape, output_gradient) -> np.ndarray:
    return backward_full(net, tape, output_gradient)[0]


def clip_global_norm(grads: np.ndarray, max_norm: float = 10.0) -> np.ndarray:
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads


class Adam:
    """Bias-corrected adaptive moment estimation."""

    def __init__(self, n_params: int, learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.first_moment = np.zeros(n_params)
        self.second_moment = np.zeros(n_params)
        self.step_count = 0
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        grads = np.asarray(grads, dtype=np.float64)
        if grads.shape != params.shape or grads.shape != self.first_moment.shape:
            raise ValueError("gradient shape does not match parameters")
        if not np.all(np.isfinite(grads)):
            bad = np.flatnonzero(~np.isfinite(grads))
            raise NumericalError(f"non-finite gradient at {bad.size} coordinates (first {bad[:5].tolist()})")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        self.first_moment = b1 * self.first_moment + (1 - b1) * grads
        self.second_moment = b2 * self.second_moment + (1 - b2) * grads * grads
        m_hat = self.first_moment / (1 - b1 ** self.step_count)
        v_hat = self.second_moment / (1 - b2 ** self.step_count)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)

    def update(self, net: Mlp, grads: np.ndarray) -> None:
        net.set_params(self.step(net.params, grads))


def soft_update(target: Mlp, source: Mlp, tau: float) -> None:
    target.set_params((1 - tau) * target.params + tau * source.params)


def gradient_check(loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
                   params: np.ndarray, tolerance: float = 1e-4, n_coords: int = 50,
                   step: float = 1e-5, seed: int = 0) -> tuple[bool, float]:
    """Compare an analytic gradient with central differences.

    ``loss_and_grad(p)`` returns the loss and its analytic gradient at ``p``.
    Coordinates whose central difference changes when the step shrinks tenfold
    straddle a ReLU kink and are skipped. Returns ``(passed, max_rel_err)``.
    """
    params = np.array(params, dtype=np.float64)
    _, grad = loss_and_grad(params)
    rng = np.random.default_rng(seed)
    coords = rng.choice(params.size, size=min(n_coords, params.size), replace=False)

    def fd(i, h):
        p = params.copy()
        p[i] += h
        lp = loss_and_grad(p)[0]
        p[i] -= 2 * h
        lm = loss_and_grad(p)[0]
        return (lp - lm) / (2 * h)

    worst = 0.0
    for i in coords:
        d1 = fd(i, step)
        d2 = fd(i, step / 10)
        scale = max(abs(d1), abs(grad[i]), 1e-7)
        if abs(d1 - d2) > 1e-3 * scale + 1e-9:
            continue
        worst = max(worst, abs(grad[i] - d1) / scale)
    return worst <= tolerance, worst


# ---------------------------------------------------------------- checkpoints

_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


def mlp_to_bytes(net: Mlp) -> bytes:
    """Layout (little endian): magic, u32 n_layers, u32 widths[n_layers+1],
    u8 activation codes[n_layers], f64 dropout, u64 n_params, f64 params."""
    n = len(net.activations)
    out = [_MAGIC, struct.pack("<I", n), struct.pack(f"<{n + 1}I", *net.layer_widths),
           struct.pack(f"<{n}B", *[_ACT_CODE[a] for a in net.activations]),
           struct.pack("<d", net.dropout_rate), struct.pack("<Q", net.params.size),
           net.params.astype("<f8").tobytes()]
    return b"".join(out)


def mlp_from_bytes(buf: bytes, offset: int = 0) -> tuple[Mlp, int]:
    if buf[offset:offset + 8] != _MAGIC:
        raise ValueError("not a network checkpoint")
    off = offset + 8
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    widths = struct.unpack_from(f"<{n + 1}I", buf, off)
    off += 4 * (n + 1)
    codes = struct.unpack_from(f"<{n}B", buf, off)
    off += n
    (dropout,) = struct.unpack_from("<d", buf, off)
    off += 8
    (count,) = struct.unpack_from("<Q", buf, off)
    off += 8
    params = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64)
    off += 8 * count
    net = Mlp(widths, [ACTIVATIONS[c] for c in codes], dropout, params)
    return net, off


def save_mlp(net: Mlp, path) -> None:
    with open(path, "wb") as fh:
        fh.write(mlp_to_bytes(net))


def load_mlp(path) -> Mlp:
    with open(path, "rb") as fh:
        return mlp_from_bytes(fh.read())[0]
