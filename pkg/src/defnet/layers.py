"""Differentiable building blocks: conv, ReLU, max-pool, fully connected,
and the two training losses.

Every layer exposes ``forward(x) -> (y, cache)`` and
``backward(cache, dy) -> (dx, param_grads)``; layers themselves are
immutable during both passes, so distinct network instances can run in
parallel.  Convolution is cross-correlation (no kernel flip).  Max-pool
windows are centered on ``stride * output_index`` with out-of-range cells
dropped, output ``floor(in / stride)`` per axis, and ties broken by the
first maximum in row-major order — the same rule the deformation pooling
layer uses, which is what makes the two agree exactly in the degenerate
case.
"""

import numpy as np

from . import kernels


class ConvLayer:
    """Cross-correlation with bias.

    weights: [out_ch, in_ch, kh, kw], odd kh/kw; bias: [out_ch].
    Output H' = floor((H + 2*pad - kh) / stride) + 1.
    """

    def __init__(self, weights, bias, stride=1, padding=0):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 4:
            raise ValueError(f"conv weights must be 4-d, got shape {weights.shape}")
        out_ch, in_ch, kh, kw = weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"conv kernel dims must be odd, got {kh}x{kw}")
        if bias.shape != (out_ch,):
            raise ValueError(f"conv bias shape {bias.shape} != ({out_ch},)")
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        self.weights = weights
        self.bias = bias
        self.stride = int(stride)
        self.padding = int(padding)

    def forward(self, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        y = kernels.conv2d_forward(x, self.weights, self.bias, self.stride, self.padding)
        return np.asarray(y), x

    def backward(self, cache, dy):
        dy = np.ascontiguousarray(dy, dtype=np.float64)
        dx, dw, db = kernels.conv2d_backward(
            cache, self.weights, self.stride, self.padding, dy
        )
        return np.asarray(dx), {"weights": np.asarray(dw), "bias": np.asarray(db)}


class MaxPoolLayer:
    """Per-window maximum over [C, H, W] input, one window per output cell."""

    def __init__(self, kernel, stride):
        kh, kw = kernel
        sy, sx = stride
        if min(kh, kw, sy, sx) < 1:
            raise ValueError(f"kernel {kernel} and stride {stride} must be positive")
        self.kernel = (int(kh), int(kw))
        self.stride = (int(sy), int(sx))

    def forward(self, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        y, arg = kernels.maxpool_forward(x, *self.kernel, *self.stride)
        return np.asarray(y), (np.asarray(arg), x.shape)

    def backward(self, cache, dy):
        arg, (c, h, w) = cache
        dy = np.ascontiguousarray(dy, dtype=np.float64)
        dx = kernels.maxpool_backward(arg, dy, h, w)
        return np.asarray(dx), {}


class FcLayer:
    """Affine map Wx + b on a flat vector."""

    def __init__(self, weights, bias):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2:
            raise ValueError(f"fc weights must be 2-d, got shape {weights.shape}")
        if bias.shape != (weights.shape[0],):
            raise ValueError(f"fc bias shape {bias.shape} != ({weights.shape[0]},)")
        self.weights = weights
        self.bias = bias

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.size != self.weights.shape[1]:
            raise ValueError(
                f"fc input length {x.size} != expected {self.weights.shape[1]}"
            )
        return self.weights @ x + self.bias, x

    def backward(self, cache, dy):
        dy = np.asarray(dy, dtype=np.float64).reshape(-1)
        dx = self.weights.T @ dy
        return dx, {"weights": np.outer(dy, cache), "bias": dy.copy()}


class ReluLayer:
    """Elementwise max(0, x); subgradient 0 at exactly 0."""

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.maximum(x, 0.0), x > 0

    def backward(self, cache, dy):
        return np.asarray(dy, dtype=np.float64) * cache, {}


def conv2d(x, layer):
    return layer.forward(x)


def maxpool(x, layer):
    return layer.forward(x)


def fully_connected(x, layer):
    return layer.forward(x)


def relu(x):
    return ReluLayer().forward(x)


SOFTMAX_CE = "softmax_cross_entropy"
MULTI_HINGE = "multi_class_hinge"


class LossKind:
    """Which training loss to use.

    ``softmax()`` is the cross-entropy of a softmax over class scores.
    ``hinge()`` treats the score vector as K one-vs-all classifiers with a
    margin (L1 by default; ``squared=True`` switches to L2 terms), averaged
    over classes.  A hinge label of -1 means background: every class target
    is -1.
    """

    def __init__(self, name, margin=1.0, squared=False):
        if name not in (SOFTMAX_CE, MULTI_HINGE):
            raise ValueError(f"unknown loss kind {name!r}")
        if margin <= 0:
            raise ValueError(f"margin must be positive, got {margin}")
        self.name = name
        self.margin = float(margin)
        self.squared = bool(squared)

    @classmethod
    def softmax(cls):
        return cls(SOFTMAX_CE)

    @classmethod
    def hinge(cls, margin=1.0, squared=False):
        return cls(MULTI_HINGE, margin=margin, squared=squared)

    def __repr__(self):
        if self.name == SOFTMAX_CE:
            return "LossKind.softmax()"
        return f"LossKind.hinge(margin={self.margin}, squared={self.squared})"


def _hinge_targets(label, k):
    """One-vs-all ±1 target vector from an int label or an explicit vector."""
    if np.isscalar(label) or getattr(label, "ndim", None) == 0:
        idx = int(label)
        if idx < -1 or idx >= k:
            raise ValueError(f"hinge label {idx} out of range for {k} classes")
        y = -np.ones(k)
        if idx >= 0:
            y[idx] = 1.0
        return y
    y = np.asarray(label, dtype=np.float64)
    if y.shape != (k,):
        raise ValueError(f"hinge target vector shape {y.shape} != ({k},)")
    if not np.all(np.abs(y) == 1.0):
        raise ValueError("hinge target vector entries must be +1 or -1")
    return y


def loss_forward_backward(scores, label, kind):
    """Loss value and gradient w.r.t. the raw scores.

    Softmax cross-entropy: -log softmax(scores)[label].
    Multi-class hinge: mean_j max(0, margin - y_j * s_j) with y the
    one-vs-all target vector for ``label``.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    k = s.size
    if k < 2:
        raise ValueError(f"need at least 2 classes, got {k}")
    if kind.name == SOFTMAX_CE:
        idx = int(label)
        if idx < 0 or idx >= k:
            raise ValueError(f"softmax label {idx} out of range for {k} classes")
        shifted = s - s.max()
        logz = np.log(np.exp(shifted).sum())
        loss = float(logz - shifted[idx])
        grad = np.exp(shifted - logz)
        grad[idx] -= 1.0
        return loss, grad
    y = _hinge_targets(label, k)
    slack = np.maximum(0.0, kind.margin - y * s)
    if kind.squared:
        loss = float(np.mean(slack**2))
        grad = -2.0 * y * slack / k
    else:
        loss = float(np.mean(slack))
        grad = np.where(slack > 0, -y / k, 0.0)
    return loss, grad
