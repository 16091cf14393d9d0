"""Small dense-network engine: affine/ReLU stacks, backprop, momentum SGD.

Activations are row-major batches of shape (B, width); a 1-D input is
treated as a batch of one and returned 1-D.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths from input to output; ReLU on hidden layers, linear output.

    With ``dual_head`` the output is read as two equal halves (mean and
    log-variance of a diagonal Gaussian).
    """

    layer_widths: tuple[int, ...]
    dual_head: bool = False

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ShapeError(f"invalid layer widths {self.layer_widths}")
        if self.dual_head and widths[-1] % 2:
            raise ShapeError("dual-head output width must be even")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def head_width(self) -> int:
        return self.n_out // 2 if self.dual_head else self.n_out

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "dual_head": self.dual_head}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["layer_widths"]), bool(d.get("dual_head", False)))


@dataclass
class NetworkParams:
    spec: NetworkSpec
    weights: list[np.ndarray]  # (fan_in, fan_out)
    biases: list[np.ndarray]
    vel_weights: list[np.ndarray] = field(default_factory=list)
    vel_biases: list[np.ndarray] = field(default_factory=list)
    version: int = 0

    def __post_init__(self):
        if not self.vel_weights:
            self.vel_weights = [np.zeros_like(w) for w in self.weights]
        if not self.vel_biases:
            self.vel_biases = [np.zeros_like(b) for b in self.biases]
        for (i, o), w, b in zip(zip(self.spec.layer_widths, self.spec.layer_widths[1:]), self.weights, self.biases):
            if w.shape != (i, o) or b.shape != (o,):
                raise ShapeError("parameter shapes inconsistent with spec")

    def arrays(self) -> list[np.ndarray]:
        """Weights and biases interleaved layer by layer (live references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                             [v.copy() for v in self.vel_weights], [v.copy() for v in self.vel_biases],
                             self.version)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkParams":
        spec = NetworkSpec.from_dict(d["spec"])
        dims = list(zip(spec.layer_widths, spec.layer_widths[1:]))
        weights = [np.array(w, dtype=float).reshape(shape) for w, shape in zip(d["weights"], dims)]
        biases = [np.array(b, dtype=float) for b in d["biases"]]
        return cls(spec, weights, biases)


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class Cache:
    inputs: list[np.ndarray]  # input to each affine layer
    pre: list[np.ndarray]  # pre-activations of each layer
    version: int
    squeeze: bool


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> NetworkParams:
    """He-scaled Gaussian weights (std sqrt(2/fan_in)), zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths, spec.layer_widths[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return NetworkParams(spec, weights, biases)


def forward(params: NetworkParams, x) -> tuple[np.ndarray, Cache]:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[1] != params.spec.n_in:
        raise ShapeError(f"expected input width {params.spec.n_in}, got {h.shape[1]}")
    inputs, pre = [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    return (h[0] if squeeze else h), Cache(inputs, pre, params.version, squeeze)


def backward(params: NetworkParams, cache: Cache, output_gradient) -> tuple[Gradients, np.ndarray]:
    """Reverse-mode pass; ReLU'(0) is taken as 0.  Gradients are summed over the batch."""
    if cache.version != params.version or len(cache.pre) != len(params.weights):
        raise StaleCacheError("cache does not belong to the current parameters")
    g = np.asarray(output_gradient, dtype=float)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.pre[-1].shape:
        raise ShapeError(f"output gradient shape {g.shape} != {cache.pre[-1].shape}")
    n = len(params.weights)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        if i != n - 1:
            g = g * (cache.pre[i] > 0)
        gw[i] = cache.inputs[i].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return Gradients(gw, gb), (g[0] if cache.squeeze else g)


def sgd_step(params: NetworkParams, grads: Gradients, learning_rate: float, momentum: float) -> None:
    """Classical momentum, in place: v <- m v + g; p <- p - lr v."""
    for p, v, g in zip(params.weights + params.biases, params.vel_weights + params.vel_biases,
                       grads.weights + grads.biases):
        if p.shape != g.shape:
            raise ShapeError("gradient shape mismatch")
        v *= momentum
        v += g
        p -= learning_rate * v
    params.version += 1


def split_heads(out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = out.shape[-1] // 2
    return out[..., :k], out[..., k:]
