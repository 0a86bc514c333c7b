"""Differentiable building blocks: MLPs, positional encoding, conv stacks,
and the Adam optimizer."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def positional_encode(x, levels: int) -> Tensor:
    """NeRF-style sin/cos encoding of 3-D coordinates.

    Output layout along the last axis: the raw coordinates followed by
    (sin, cos) pairs at frequencies pi * 2^0 ... pi * 2^(levels-1), giving
    width 3 + 6 * levels.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != 3:
        raise ad.ShapeError(
            f"positional_encode: last dimension must be 3, got {x.shape}"
        )
    parts = [x]
    for level in range(levels):
        freq = math.pi * (2.0 ** level)
        scaled = x * freq
        parts.append(ad.sin(scaled))
        parts.append(ad.cos(scaled))
    return ad.concat(parts, axis=-1) if len(parts) > 1 else x


def positional_encode_np(x: np.ndarray, levels: int) -> np.ndarray:
    """Plain-array twin of ``positional_encode`` for non-differentiable paths.

    Frequencies double per level, so levels beyond the first come from the
    angle-doubling recurrence instead of fresh transcendental calls.
    """
    x = np.asarray(x, dtype=np.float64)
    if levels == 0:
        return x
    k = x.shape[-1]
    out = np.empty(x.shape[:-1] + (k * (1 + 2 * levels),))
    out[..., :k] = x
    s = np.sin(math.pi * x)
    c = np.cos(math.pi * x)
    pos = k
    for level in range(levels):
        if level:
            s, c = 2.0 * s * c, c * c - s * s
        out[..., pos:pos + k] = s
        out[..., pos + k:pos + 2 * k] = c
        pos += 2 * k
    return out


def positional_encode_jacobian(x: np.ndarray, levels: int) -> np.ndarray:
    """Jacobian of the encoding w.r.t. the raw coordinates, shape (P, D, 3).

    The encoding acts per coordinate, so each feature depends on exactly
    one input component.
    """
    p = x.shape[0]
    width = 3 + 6 * levels
    jac = np.zeros((p, width, 3))
    jac[:, 0, 0] = jac[:, 1, 1] = jac[:, 2, 2] = 1.0
    row = 3
    for level in range(levels):
        freq = math.pi * (2.0 ** level)
        c = freq * np.cos(freq * x)  # d sin / dx
        s = -freq * np.sin(freq * x)  # d cos / dx
        for k in range(3):
            jac[:, row + k, k] = c[:, k]
            jac[:, row + 3 + k, k] = s[:, k]
        row += 6
    return jac


class Linear:
    """Affine layer with weight shape (fan_in, fan_out)."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator,
                 weight_std: Optional[float] = None):
        std = weight_std if weight_std is not None else math.sqrt(2.0 / fan_in)
        self.weight = ad.parameter(rng.normal(0.0, std, size=(fan_in, fan_out)))
        self.bias = ad.parameter(np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.weight) + self.bias

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


def _activate(z: Tensor, kind: Optional[str], beta: float) -> Tensor:
    if kind is None:
        return z
    if kind == "softplus":
        return ad.softplus(z, beta=beta)
    if kind == "relu":
        return ad.relu(z)
    if kind == "sigmoid":
        return ad.sigmoid(z)
    raise ValueError(f"unknown activation {kind!r}")


class MLP:
    """Fully connected stack with optional input re-injection (skips).

    ``widths`` runs input through hidden sizes to the output width. A skip
    at hidden layer i concatenates the original input onto that layer's
    input. The final layer is linear unless ``final_activation`` is set.
    """

    def __init__(self, widths: Sequence[int], rng: np.random.Generator,
                 activation: str = "softplus", beta: float = 100.0,
                 skips: Sequence[int] = (),
                 final_activation: Optional[str] = None,
                 final_weight_std: Optional[float] = None):
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.widths = list(widths)
        self.activation = activation
        self.beta = beta
        self.skips = set(skips)
        self.final_activation = final_activation
        self.layers: list[Linear] = []
        in_dim = widths[0]
        for i, out_dim in enumerate(widths[1:]):
            fan_in = in_dim + (widths[0] if i in self.skips and i > 0 else 0)
            last = i == len(widths) - 2
            std = final_weight_std if last else None
            self.layers.append(Linear(fan_in, out_dim, rng, weight_std=std))
            in_dim = out_dim

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def __call__(self, x: Tensor) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-1] != self.widths[0]:
            raise ad.ShapeError(
                f"MLP: input width {x.shape[-1]} does not match {self.widths[0]}"
            )
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if i in self.skips and i > 0:
                h = ad.concat([h, x], axis=-1)
            h = layer(h)
            kind = self.final_activation if i == last else self.activation
            h = _activate(h, kind, self.beta)
        return h

    def forward_with_jacobian(self, x: Tensor, jac: Tensor):
        """Forward pass that also propagates the Jacobian w.r.t. 3 spatial
        inputs, built entirely from taped ops so the Jacobian stays
        differentiable w.r.t. the parameters.

        ``jac`` has shape (P, in_width, 3). Only softplus and relu hidden
        activations are supported; the final layer must be linear.
        """
        if self.final_activation is not None:
            raise ValueError("forward_with_jacobian requires a linear head")
        h, jh = x, jac
        last = len(self.layers) - 1
        p = x.shape[0]
        for i, layer in enumerate(self.layers):
            if i in self.skips and i > 0:
                h = ad.concat([h, x], axis=-1)
                jh = ad.concat([jh, jac], axis=1)
            z = layer(h)
            d_in = jh.shape[1]
            jz = ad.transpose(jh, (0, 2, 1)).reshape(p * 3, d_in) @ layer.weight
            jz = ad.transpose(jz.reshape(p, 3, layer.weight.shape[1]), (0, 2, 1))
            if i == last:
                return z, jz
            if self.activation == "softplus":
                dz = ad.sigmoid(z * self.beta)
            elif self.activation == "relu":
                dz = Tensor((z.data > 0).astype(float))
            else:
                raise ValueError(
                    f"forward_with_jacobian: unsupported activation "
                    f"{self.activation!r}"
                )
            h = _activate(z, self.activation, self.beta)
            jh = jz * dz.reshape(p, dz.shape[-1], 1)
        raise AssertionError("unreachable")

    def parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, t in layer.parameters():
                out.append((f"layers.{i}.{name}", t))
        return out


def fibonacci_directions(count: int) -> np.ndarray:
    """Quasi-uniform unit directions on the sphere (Fibonacci lattice)."""
    i = np.arange(count) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / count)
    theta = math.pi * (1.0 + math.sqrt(5.0)) * i
    return np.stack([np.sin(phi) * np.cos(theta),
                     np.sin(phi) * np.sin(theta),
                     np.cos(phi)], axis=-1)


def geometric_init(net: MLP, radius: float, rng: np.random.Generator,
                   raw_coord_width: int = 3, noise: float = 1e-3):
    """Re-initialize an MLP so its first output approximates ``|x| - radius``.

    Construction: the first layer aims one quasi-uniform unit direction per
    hidden unit at the raw coordinates, so its rectified responses sum to
    roughly ``|x|`` (E[relu(u.x)] = |x|/4 for uniform u). One channel
    accumulates that sum and is passed through the remaining layers; the
    final bias subtracts the radius. All other weights start as small
    noise, which keeps the rest of the capacity trainable without
    disturbing the sphere. Encoding columns beyond the raw coordinates
    (and skip re-entry blocks) start at noise level.
    """
    n = len(net.layers)
    for i, layer in enumerate(net.layers):
        fan_in, fan_out = layer.weight.shape
        layer.weight.data[...] = rng.normal(0.0, noise, size=(fan_in, fan_out))
        layer.bias.data[...] = 0.0
        if i == 0:
            dirs = fibonacci_directions(fan_out)
            layer.weight.data[:raw_coord_width, :] = dirs.T[:raw_coord_width]
        elif i == 1:
            prev_width = net.layers[0].weight.shape[1]
            layer.weight.data[:prev_width, 0] = 4.0 / prev_width
        else:
            layer.weight.data[0, 0] = 1.0
        if i == n - 1:
            layer.bias.data[0] = -radius


class Conv2d:
    def __init__(self, cin: int, cout: int, kernel: int, stride: int,
                 pad: int, rng: np.random.Generator):
        std = math.sqrt(2.0 / (cin * kernel * kernel))
        self.weight = ad.parameter(
            rng.normal(0.0, std, size=(cout, cin, kernel, kernel)))
        self.bias = ad.parameter(np.zeros(cout))
        self.stride = stride
        self.pad = pad
        self.scale = 1.0 / stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride,
                         pad=self.pad)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class ConvTranspose2d:
    def __init__(self, cin: int, cout: int, kernel: int, stride: int,
                 pad: int, rng: np.random.Generator):
        std = math.sqrt(2.0 / (cin * kernel * kernel))
        self.weight = ad.parameter(
            rng.normal(0.0, std, size=(cin, cout, kernel, kernel)))
        self.bias = ad.parameter(np.zeros(cout))
        self.stride = stride
        self.pad = pad
        self.scale = float(stride)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d_transpose(x, self.weight, self.bias,
                                   stride=self.stride, pad=self.pad)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class ConvStack:
    """Sequence of conv stages with per-stage activations.

    ``spatial_scale`` is the product of stage scales (1/stride for conv,
    stride for transposed conv), used to assert the stack realizes the
    intended resolution change.
    """

    def __init__(self, stages: Sequence, activations: Sequence[Optional[str]]):
        if len(stages) != len(activations):
            raise ValueError("one activation entry per stage required")
        self.stages = list(stages)
        self.activations = list(activations)

    @property
    def spatial_scale(self) -> float:
        scale = 1.0
        for stage in self.stages:
            scale *= stage.scale
        return scale

    def __call__(self, x: Tensor) -> Tensor:
        for stage, act in zip(self.stages, self.activations):
            x = stage(x)
            x = _activate(x, act, 1.0)
        return x

    def parameters(self):
        out = []
        for i, stage in enumerate(self.stages):
            for name, t in stage.parameters():
                out.append((f"stages.{i}.{name}", t))
        return out


class Adam:
    """Adam with bias correction; clears gradients after each step."""

    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(
                    f"adam: parameter {i} has no gradient; run backward first"
                )
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None
