"""Toy encoders and projection heads with explicit forward/backward passes.

The networks are deliberately small dense maps over float64 arrays so that
every gradient can be checked against central finite differences. Parameters
live in flat ``{name: array}`` dicts, which is also the checkpoint layout.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .scene import SemanticMaskSet

ParamDict = dict[str, np.ndarray]


def stable_hash(key: str, bits: int = 48) -> int:
    """Deterministic cross-run hash of a string, for seeding RNG streams."""
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (1 << bits)


def l2_rows_forward(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize each row to unit length; returns (normalized, row_norms)."""
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise FloatingPointError("cannot l2-normalize a zero row")
    return z / norms, norms


def l2_rows_backward(y: np.ndarray, norms: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    """Jacobian of row normalization: grad_z = (g - y <y, g>) / ||z||.

    The result is orthogonal to the pre-normalization row by construction.
    """
    inner = np.sum(y * grad_y, axis=-1, keepdims=True)
    return (grad_y - y * inner) / norms


class LinearL2Head:
    """Projection head: one linear layer followed by row-wise l2 normalization.

    Applied per point, or per pixel as a kernel-size-1 convolution over a
    flattened feature grid.
    """

    def __init__(self, in_dim: int, out_dim: int, seed: int, prefix: str):
        rng = np.random.default_rng([seed, stable_hash(prefix)])
        self.prefix = prefix
        self.weight = rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)
        self.bias = np.zeros(out_dim)

    def params(self) -> ParamDict:
        return {f"{self.prefix}.w": self.weight, f"{self.prefix}.b": self.bias}

    def load(self, params: ParamDict) -> None:
        self.weight = np.array(params[f"{self.prefix}.w"], dtype=np.float64)
        self.bias = np.array(params[f"{self.prefix}.b"], dtype=np.float64)

    def forward(self, x: np.ndarray):
        z = x @ self.weight + self.bias
        y, norms = l2_rows_forward(z)
        return y, (x, y, norms)

    def backward(self, cache, grad_y: np.ndarray):
        x, y, norms = cache
        grad_z = l2_rows_backward(y, norms, grad_y)
        grads = {
            f"{self.prefix}.w": x.T @ grad_z,
            f"{self.prefix}.b": grad_z.sum(axis=0),
        }
        return grads, grad_z @ self.weight.T


class ToyPointEncoder:
    """Per-point MLP (tanh hidden layers, linear output) from L input channels
    to C_p features."""

    def __init__(self, widths, seed: int, prefix: str = "point_encoder"):
        if len(widths) < 2:
            raise ValueError("encoder needs at least an input and an output width")
        rng = np.random.default_rng([seed, stable_hash(prefix)])
        self.prefix = prefix
        self.widths = tuple(int(w) for w in widths)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.widths, self.widths[1:]):
            self.weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> ParamDict:
        out: ParamDict = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.prefix}.w{i}"] = w
            out[f"{self.prefix}.b{i}"] = b
        return out

    def load(self, params: ParamDict) -> None:
        for i in range(self.n_layers):
            self.weights[i] = np.array(params[f"{self.prefix}.w{i}"], dtype=np.float64)
            self.biases[i] = np.array(params[f"{self.prefix}.b{i}"], dtype=np.float64)

    def forward(self, x: np.ndarray):
        acts = [np.asarray(x, dtype=np.float64)]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            acts.append(np.tanh(z) if i < self.n_layers - 1 else z)
        return acts[-1], acts

    def backward(self, cache, grad_out: np.ndarray):
        acts = cache
        grads: ParamDict = {}
        grad = grad_out
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                grad = grad * (1.0 - acts[i + 1] ** 2)  # tanh'
            grads[f"{self.prefix}.w{i}"] = acts[i].T @ grad
            grads[f"{self.prefix}.b{i}"] = grad.sum(axis=0)
            grad = grad @ self.weights[i].T
        return grads, grad


class FrozenImageEncoder:
    """Fixed map from mask labels plus seeded noise to a feature grid.

    Stands in for a frozen pretrained image backbone: pixels of one semantic
    label share a fixed random base vector, shifted by a per-view offset
    (appearance changes between frames, which pooling cannot average away)
    and blurred by per-pixel noise. The map has no trainable state;
    everything is derived from the seed.
    """

    def __init__(
        self,
        dim: int,
        seed: int,
        noise_scale: float = 0.1,
        view_scale: float = 1.0,
        stride: int = 1,
    ):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.dim = dim
        self.seed = seed
        self.noise_scale = float(noise_scale)
        self.view_scale = float(view_scale)
        self.stride = int(stride)
        self._bases: dict[int, np.ndarray] = {}

    def label_base(self, label: int) -> np.ndarray:
        base = self._bases.get(label)
        if base is None:
            rng = np.random.default_rng([self.seed, 101, int(label)])
            base = rng.standard_normal(self.dim)
            base.setflags(write=False)
            self._bases[label] = base
        return base

    def _view_offset(self, frame_key: str, label: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 107, stable_hash(frame_key), int(label)])
        return self.view_scale * rng.standard_normal(self.dim)

    def encode(self, mask: SemanticMaskSet, frame_key: str) -> np.ndarray:
        """Feature grid of shape (h/s, w/s, dim) for one image."""
        labels = mask.labels[:: self.stride, :: self.stride]
        h, w = labels.shape
        grid = np.empty((h, w, self.dim))
        for label in np.unique(labels):
            vec = self.label_base(int(label)) + self._view_offset(frame_key, int(label))
            grid[labels == label] = vec
        rng = np.random.default_rng([self.seed, 103, stable_hash(frame_key)])
        grid += self.noise_scale * rng.standard_normal(grid.shape)
        return grid


def upsample_forward(grid: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbour upsample of an (h, w, d) grid by an integer factor."""
    if stride == 1:
        return grid
    return np.repeat(np.repeat(grid, stride, axis=0), stride, axis=1)


def upsample_backward(grad: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return grad
    h, w, d = grad.shape
    return grad.reshape(h // stride, stride, w // stride, stride, d).sum(axis=(1, 3))


class ProjectionHeads:
    """Trainable point and image projection heads into a shared D-dim space.

    The image head acts per pixel (1x1 convolution), normalizes, then
    upsamples the grid back to mask resolution by the encoder stride.
    """

    def __init__(self, point_in: int, image_in: int, out_dim: int, seed: int, stride: int = 1):
        self.point = LinearL2Head(point_in, out_dim, seed, "point_head")
        self.image = LinearL2Head(image_in, out_dim, seed, "image_head")
        self.out_dim = out_dim
        self.stride = int(stride)

    def params(self) -> ParamDict:
        return {**self.point.params(), **self.image.params()}

    def load(self, params: ParamDict) -> None:
        self.point.load(params)
        self.image.load(params)

    def forward_image_grid(self, grid: np.ndarray):
        h, w, d = grid.shape
        rows, cache = self.image.forward(grid.reshape(h * w, d))
        emb = upsample_forward(rows.reshape(h, w, self.out_dim), self.stride)
        return emb, (cache, (h, w))

    def backward_image_grid(self, cache, grad_emb: np.ndarray):
        head_cache, (h, w) = cache
        grad_rows = upsample_backward(grad_emb, self.stride).reshape(h * w, self.out_dim)
        return self.image.backward(head_cache, grad_rows)
