"""Small dense MLP stacks with hand-written forward and reverse-mode passes.

Inputs are either a single vector ``(in,)`` or a batch with one sample per
row ``(n, in)``. Weights are stored as ``(out, in)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, ShapeMismatch

ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatch("layer weight/bias shapes do not agree")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class MlpParams:
    layers: list[Layer]
    version: int = 0

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ShapeMismatch("consecutive layer dimensions do not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def size(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in declaration order (W0, b0, W1, b1, ...)."""
        out = []
        for l in self.layers:
            out.extend((l.weight, l.bias))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            self.version,
        )

    def assign(self, other: "MlpParams") -> None:
        """Overwrite values in place from a shape-identical stack."""
        check_same_shape(self, other)
        for mine, theirs in zip(self.layers, other.layers):
            mine.weight[...] = theirs.weight
            mine.bias[...] = theirs.bias
        self.bump()

    def bump(self) -> None:
        self.version += 1

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


def check_same_shape(a: MlpParams, b: MlpParams) -> None:
    if len(a.layers) != len(b.layers) or any(
        la.weight.shape != lb.weight.shape or la.activation != lb.activation
        for la, lb in zip(a.layers, b.layers)
    ):
        raise ShapeMismatch("parameter stacks are not shape-identical")


def init_mlp(dims: list[int], rng: np.random.Generator, final_activation: str = "identity") -> MlpParams:
    """He-normal weights, zero biases; relu between layers."""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        act = final_activation if i == len(dims) - 2 else "relu"
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MlpParams(layers)


def forward(stack: MlpParams, x, keep: bool = False):
    """Run ``x`` through the stack.

    Returns ``(activations, output)``. ``activations`` holds the input to every
    layer followed by every pre-activation when ``keep`` is set, else ``None``.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != stack.in_dim:
        raise DimMismatch(f"input dim {h.shape[-1]} != stack input dim {stack.in_dim}")
    acts = [] if keep else None
    for layer in stack.layers:
        pre = h @ layer.weight.T + layer.bias
        if keep:
            acts.append((h, pre))
        h = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    return acts, h


@dataclass
class StackGrad:
    layers: list[tuple[np.ndarray, np.ndarray]]
    input_grad: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def zeros_like(cls, stack: MlpParams) -> "StackGrad":
        return cls([(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in stack.layers])

    def add_(self, other: "StackGrad") -> "StackGrad":
        for (gw, gb), (ow, ob) in zip(self.layers, other.layers):
            gw += ow
            gb += ob
        return self

    def arrays(self) -> list[np.ndarray]:
        out = []
        for gw, gb in self.layers:
            out.extend((gw, gb))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


def backward(stack: MlpParams, x, upstream, activations=None) -> StackGrad:
    """Gradient of ``sum <upstream, output>`` w.r.t. every parameter and the input.

    For batched ``x`` the per-row contributions are summed.
    """
    if activations is None:
        activations, _ = forward(stack, x, keep=True)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape[-1] != stack.out_dim:
        raise DimMismatch(f"upstream dim {g.shape[-1]} != stack output dim {stack.out_dim}")
    grads = []
    for layer, (h_in, pre) in zip(reversed(stack.layers), reversed(activations)):
        if layer.activation == "relu":
            g = g * (pre > 0.0)
        if g.ndim == 1:
            gw = np.outer(g, h_in)
            gb = g.copy()
        else:
            gw = g.T @ h_in
            gb = g.sum(axis=0)
        grads.append((gw, gb))
        g = g @ layer.weight
    grads.reverse()
    return StackGrad(grads, input_grad=g)
