"""A small convolutional keypoint regressor trained with plain gradient
descent and hand-written backpropagation.

Architecture: one 3x3 conv + tanh producing the feature map F (exposed for
feature distillation), then a head of 3x3 conv + tanh and 1x1 conv producing
M score maps, decoded by a spatial-softmax soft-argmax into grid coordinates.
tanh keeps every path twice differentiable, which the finite-difference
checks rely on.

All convolutions are stride-1 and same-padded; the head's layer spec is what
`pfkd.receptive_field_extent` consumes to size feature regions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pfkd import ConvLayerSpec

_DT = np.float32


def im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B, Ho, Wo, C*k*k) patch matrix for stride-1 conv."""
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = x.shape[2] - k + 1
    Wo = x.shape[3] - k + 1
    s = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (B, C, Ho, Wo, k, k), (s[0], s[1], s[2], s[3], s[2], s[3]))
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B, Ho, Wo, C * k * k)


class Conv2d:
    """Same-padded stride-1 convolution with cached columns for backprop."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.pad = (kernel - 1) // 2
        bound = 1.0 / np.sqrt(c_in * kernel * kernel)
        self.weight = rng.uniform(-bound, bound, (c_out, c_in * kernel * kernel)).astype(_DT)
        self.bias = np.zeros(c_out, _DT)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cols = None
        self._xshape = None

    def spec(self) -> ConvLayerSpec:
        return ConvLayerSpec(kernel=self.kernel, stride=1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cols = im2col(x, self.kernel, self.pad)
        self._xshape = x.shape
        y = self._cols @ self.weight.T + self.bias
        return y.transpose(0, 3, 1, 2)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        B, c_out, Ho, Wo = dy.shape
        dyf = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, c_out)
        self.grad_weight = dyf.T @ self._cols.reshape(-1, self._cols.shape[-1])
        self.grad_bias = dyf.sum(axis=0)
        dcols = (dyf @ self.weight).reshape(B, Ho, Wo, self.c_in,
                                            self.kernel, self.kernel)
        _, C, H, W = self._xshape
        k, pad = self.kernel, self.pad
        dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dy.dtype)
        for di in range(k):
            for dj in range(k):
                dxp[:, :, di:di + Ho, dj:dj + Wo] += dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return dxp[:, :, pad:H + pad, pad:W + pad] if pad else dxp


@dataclass
class RegressorSpec:
    in_channels: int
    channels: int
    num_keypoints: int
    grid: int            # feature/score maps are grid x grid
    image_size: float    # square image side in pixels
    softmax_beta: float = 5.0

    @property
    def delta(self) -> float:
        """Output-pixel -> feature-grid scale (the region-center scale)."""
        return self.grid / self.image_size


class ToyRegressor:
    """Keypoint regressor; `forward` returns pixel keypoints and the feature map."""

    def __init__(self, spec: RegressorSpec, rng: np.random.Generator):
        self.spec = spec
        c = spec.channels
        self.backbone = Conv2d(spec.in_channels, c, 3, rng)
        self.head = [Conv2d(c, c, 3, rng), Conv2d(c, spec.num_keypoints, 1, rng)]
        g = spec.grid
        rr, cc = np.meshgrid(np.arange(g, dtype=_DT), np.arange(g, dtype=_DT),
                             indexing="ij")
        self._rows = rr.ravel()
        self._cols = cc.ravel()
        self._cache = None

    def head_spec(self) -> list[ConvLayerSpec]:
        return [layer.spec() for layer in self.head]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in (self.backbone, *self.head):
            out += [layer.weight, layer.bias]
        return out

    def gradients(self) -> list[np.ndarray]:
        out = []
        for layer in (self.backbone, *self.head):
            out += [layer.grad_weight, layer.grad_bias]
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """x: (B, C_in, G, G) -> keypoints (B, M, 2) in pixels, features (B, C, G, G)."""
        feats = np.tanh(self.backbone.forward(x.astype(_DT)))
        a = np.tanh(self.head[0].forward(feats))
        scores = self.head[1].forward(a)
        B, M, g, _ = scores.shape
        logits = (self.spec.softmax_beta * scores).reshape(B, M, -1)
        logits -= logits.max(axis=2, keepdims=True)
        e = np.exp(logits)
        prob = e / e.sum(axis=2, keepdims=True)
        col = prob @ self._cols
        row = prob @ self._rows
        # grid cell centers map to pixels: (g + 0.5) / delta
        kps = np.stack([(col + 0.5) / self.spec.delta,
                        (row + 0.5) / self.spec.delta], axis=2)
        self._cache = (feats, a, prob)
        return kps, feats

    def backward(self, dkps: np.ndarray,
                 dfeats: np.ndarray | None = None) -> None:
        """Accumulates parameter gradients for the last forward pass.

        dkps: (B, M, 2) loss gradient in pixel coordinates; dfeats: optional
        extra gradient flowing directly into the feature map (the feature-
        distillation path).
        """
        feats, a, prob = self._cache
        B = prob.shape[0]
        dcol = dkps[:, :, 0] / self.spec.delta
        drow = dkps[:, :, 1] / self.spec.delta
        dprob = dcol[:, :, None] * self._cols + drow[:, :, None] * self._rows
        inner = (dprob * prob).sum(axis=2, keepdims=True)
        dlogits = self.spec.softmax_beta * prob * (dprob - inner)
        g = self.spec.grid
        dscores = dlogits.reshape(B, -1, g, g).astype(_DT)
        da = self.head[1].backward(dscores)
        dfe = self.head[0].backward(da * (1.0 - a * a))
        if dfeats is not None:
            dfe = dfe + dfeats.astype(_DT)
        self.backbone.backward(dfe * (1.0 - feats * feats))

    def gd_step(self, lr: float) -> None:
        for p, grad in zip(self.parameters(), self.gradients()):
            p -= (lr * grad).astype(p.dtype)
