"""Time-conditioned deformation of canonical Gaussians.

A small ReLU network maps an encoding of (canonical position, time) to
offsets for position, rotation and log-scale. The final layer is split into
three heads by column: ``[0:3]`` position, ``[3:7]`` rotation, ``[7:10]``
log-scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRotationError, StructuralError, UsageError

N_OUT = 10
HEAD_POSITION = slice(0, 3)
HEAD_ROTATION = slice(3, 7)
HEAD_SCALE = slice(7, 10)


def encoding_length(n_freq_pos: int, n_freq_time: int) -> int:
    return 4 + 2 * (3 * n_freq_pos + n_freq_time)


def encode(x, t, n_freq_pos: int = 6, n_freq_time: int = 4) -> np.ndarray:
    """Positional encoding of points ``x`` (shape (3,) or (N, 3)) at time ``t``.

    Layout: ``[x, t, sin(2^0 x), cos(2^0 x), ..., sin(2^0 t), cos(2^0 t), ...]``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[0]
    tcol = np.full((n, 1), float(t))
    parts = [x, tcol]
    for level in range(n_freq_pos):
        arg = (2.0 ** level) * x
        parts += [np.sin(arg), np.cos(arg)]
    for level in range(n_freq_time):
        arg = (2.0 ** level) * tcol
        parts += [np.sin(arg), np.cos(arg)]
    out = np.concatenate(parts, axis=1)
    return out[0] if single else out


def _encode_backward_x(x, grad_feat, n_freq_pos):
    # only the position columns depend on x
    grad = grad_feat[:, 0:3].copy()
    col = 4
    for level in range(n_freq_pos):
        freq = 2.0 ** level
        arg = freq * x
        grad += grad_feat[:, col:col + 3] * freq * np.cos(arg)
        grad -= grad_feat[:, col + 3:col + 6] * freq * np.sin(arg)
        col += 6
    return grad


@dataclass
class DeformedState:
    """Per-Gaussian geometry at one time, plus the cache needed for backward."""

    t: float
    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    rotations_raw: np.ndarray
    cache: dict | None = field(default=None, repr=False)


class DeformationField:
    """ReLU MLP over encoded (x, t) with zero-initialised output heads."""

    def __init__(self, weights, biases, n_freq_pos: int = 6, n_freq_time: int = 4):
        if len(weights) != len(biases) or not weights:
            raise StructuralError("need one bias per weight matrix")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.n_freq_pos = int(n_freq_pos)
        self.n_freq_time = int(n_freq_time)
        dims = self.layer_dims
        if dims[0][0] != encoding_length(self.n_freq_pos, self.n_freq_time):
            raise StructuralError(
                f"first layer expects {dims[0][0]} inputs, encoding has "
                f"{encoding_length(self.n_freq_pos, self.n_freq_time)}"
            )
        if dims[-1][1] != N_OUT:
            raise StructuralError(f"last layer must have {N_OUT} outputs")
        for (_, out_a), (in_b, _) in zip(dims[:-1], dims[1:]):
            if out_a != in_b:
                raise StructuralError("layer dimensions do not chain")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise StructuralError("bias shape does not match weight")

    @classmethod
    def create(cls, hidden=(64, 64), n_freq_pos=6, n_freq_time=4, rng=None, zero_heads=True):
        rng = np.random.default_rng(0) if rng is None else rng
        sizes = [encoding_length(n_freq_pos, n_freq_time), *hidden, N_OUT]
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            is_head = i == len(sizes) - 2
            if is_head and zero_heads:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, n_freq_pos, n_freq_time)

    @classmethod
    def from_dims(cls, dims, n_freq_pos, n_freq_time):
        weights = [np.zeros((a, b)) for a, b in dims]
        biases = [np.zeros(b) for _, b in dims]
        return cls(weights, biases, n_freq_pos, n_freq_time)

    @property
    def layer_dims(self):
        return [tuple(w.shape) for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "DeformationField":
        return DeformationField(self.weights, self.biases, self.n_freq_pos, self.n_freq_time)

    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise StructuralError(f"expected {self.n_params} weights, got {vec.size}")
        pos = 0
        for i, w in enumerate(self.weights):
            self.weights[i] = vec[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            nb = self.biases[i].size
            self.biases[i] = vec[pos:pos + nb].copy()
            pos += nb

    def _mlp(self, feats):
        pre, acts = [], [feats]
        h = feats
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if i < last:
                pre.append(z)
                h = np.maximum(z, 0.0)
                acts.append(h)
            else:
                h = z
        return h, pre, acts

    def offsets(self, x, t):
        feats = encode(x, t, self.n_freq_pos, self.n_freq_time)
        out, _, _ = self._mlp(np.atleast_2d(feats))
        return out

    def forward(self, gaussians, t: float) -> DeformedState:
        x = gaussians.positions
        feats = encode(x, t, self.n_freq_pos, self.n_freq_time)
        out, pre, acts = self._mlp(feats)
        means = x + out[:, HEAD_POSITION]
        raw = gaussians.rotations + out[:, HEAD_ROTATION]
        norm = np.linalg.norm(raw, axis=1)
        if np.any(norm < 1e-8):
            bad = int(np.argmin(norm))
            raise DegenerateRotationError(f"Gaussian {bad}: |q + dq| = {norm[bad]:.3g} < 1e-8")
        rotations = raw / norm[:, None]
        scales = np.exp(gaussians.log_scales + out[:, HEAD_SCALE])
        cache = {"x": x.copy(), "pre": pre, "acts": acts, "norm": norm}
        return DeformedState(float(t), means, rotations, scales, raw, cache)

    def backward(self, state: DeformedState, grad_means, grad_rotations, grad_scales):
        """Pull gradients on deformed (mean, unit quaternion, scale) back.

        Returns ``(grad_positions, grad_rotations, grad_log_scales, grad_weights)``
        where the first three are w.r.t. canonical parameters and the last is a
        flat vector in ``get_flat`` order.
        """
        if state is None or state.cache is None:
            raise UsageError("deformation backward called without a cached forward pass")
        cache = state.cache
        n = state.means.shape[0]
        grad_means = np.asarray(grad_means, dtype=np.float64).reshape(n, 3)
        grad_rotations = np.asarray(grad_rotations, dtype=np.float64).reshape(n, 4)
        grad_scales = np.asarray(grad_scales, dtype=np.float64).reshape(n, 3)

        qn = state.rotations
        g_raw = (grad_rotations - qn * np.sum(qn * grad_rotations, axis=1, keepdims=True))
        g_raw /= cache["norm"][:, None]
        g_logs = grad_scales * state.scales

        g_out = np.concatenate([grad_means, g_raw, g_logs], axis=1)
        acts, pre = cache["acts"], cache["pre"]
        n_layers = len(self.weights)
        gw = [None] * n_layers
        gb = [None] * n_layers
        g = g_out
        for i in range(n_layers - 1, -1, -1):
            gw[i] = acts[i].T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (pre[i - 1] > 0.0)
        g_pos = grad_means + _encode_backward_x(cache["x"], g, self.n_freq_pos)
        parts = []
        for w_, b_ in zip(gw, gb):
            parts += [w_.ravel(), b_]
        return g_pos, g_raw, g_logs, np.concatenate(parts)
