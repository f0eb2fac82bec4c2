"""Feature-redundancy suppression for the convolutional encoder.

Two stages operating on (steps, channels) sequences:

* SRU (separated reconstruction): standardize each channel over time, weight
  channels by normalized learned gates, split them at the mean gate weight
  into informative/redundant groups, cross-reconstruct the halves by
  addition, then undo the standardization with each destination channel's
  own statistics.
* CRU (channel refinement): split channels in half, run a pointwise (1x1)
  transform on one part and a k x 1 convolution on the other, then fuse the
  transformed candidate with the untouched input through per-channel softmax
  pooling weights.

Both stages are constructed in an identity-passing configuration: with
uniform gates and identity transforms the block is an exact no-op, which is
the contract the unit tests pin down.
"""

from __future__ import annotations

import numpy as np

from .nn import Conv1d, Linear, Module, softmax


class SpatialReconstruction(Module):
    def __init__(self, channels, eps=1e-6):
        super().__init__()
        if channels % 2 != 0 or channels < 2:
            raise ValueError(f"channel count must be even and >= 2, got {channels}")
        self.c, self.eps = channels, eps
        self.gate = self.add_param("gate", np.ones(channels))

    def forward(self, x):
        t_len, c = x.shape
        if c != self.c:
            raise ValueError(f"expected {self.c} channels, got {c}")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        s = np.sqrt(var + self.eps)
        xn = (x - mu) / s

        wn = softmax(self.gate)
        info = wn >= 1.0 / c
        gated = xn * (wn * c)
        x1 = gated * info
        x2 = gated * ~info

        h = c // 2
        yn = np.empty_like(x)
        yn[:, :h] = x1[:, :h] + x2[:, h:]
        yn[:, h:] = x1[:, h:] + x2[:, :h]

        self._x, self._mu, self._s, self._xn = x, mu, s, xn
        self._wn, self._info, self._yn = wn, info, yn
        return yn * s + mu

    def backward(self, dout):
        x, mu, s, xn = self._x, self._mu, self._s, self._xn
        wn, info, yn = self._wn, self._info, self._yn
        t_len, c = x.shape
        h = c // 2

        dyn = dout * s
        ds = (dout * yn).sum(axis=0)
        dmu = dout.sum(axis=0)

        dx1 = np.empty_like(x)
        dx2 = np.empty_like(x)
        dx1[:, :h], dx2[:, h:] = dyn[:, :h], dyn[:, :h]
        dx1[:, h:], dx2[:, :h] = dyn[:, h:], dyn[:, h:]
        dgated = dx1 * info + dx2 * ~info

        dxn = dgated * (wn * c)
        dwn = c * (dgated * xn).sum(axis=0)
        self._grads["gate"] += wn * (dwn - np.dot(dwn, wn))

        # standardization backward per channel (totals include the de-norm path)
        ds += -(dxn * xn).sum(axis=0) / s
        dmu += -dxn.sum(axis=0) / s
        dvar = ds / (2.0 * s)
        dx = dxn / s + dvar * 2.0 * (x - mu) / t_len + dmu / t_len
        return dx


class ChannelRefinement(Module):
    def __init__(self, channels, rng, k=3):
        super().__init__()
        if channels % 2 != 0:
            raise ValueError(f"channel count must be even, got {channels}")
        self.c = channels
        h = channels // 2
        self.pointwise = Linear(h, h, rng)
        self.conv = Conv1d(h, h, k, rng, pad=k // 2)
        self.fuse_logits = self.add_param("fuse_logits", np.zeros((2, channels)))
        self.set_identity()

    def set_identity(self):
        h = self.c // 2
        self.pointwise.w[:] = np.eye(h)
        self.pointwise.b[:] = 0.0
        self.conv.w[:] = 0.0
        self.conv.w[:, :, self.conv.k // 2] = np.eye(h)
        self.conv.b[:] = 0.0
        self.fuse_logits[:] = 0.0

    def forward(self, x):
        h = self.c // 2
        cand = np.concatenate(
            [self.pointwise(x[:, :h]), self.conv(x[:, h:])], axis=1
        )
        sw = softmax(self.fuse_logits, axis=0)
        self._x, self._cand, self._sw = x, cand, sw
        return sw[0] * cand + sw[1] * x

    def backward(self, dout):
        x, cand, sw = self._x, self._cand, self._sw
        h = self.c // 2
        dsw = np.stack([(dout * cand).sum(axis=0), (dout * x).sum(axis=0)])
        dlogits = sw * (dsw - (dsw * sw).sum(axis=0, keepdims=True))
        self._grads["fuse_logits"] += dlogits

        dcand = dout * sw[0]
        dx = dout * sw[1]
        dx[:, :h] += self.pointwise.backward(dcand[:, :h])
        dx[:, h:] += self.conv.backward(dcand[:, h:])
        return dx


class ScConv(Module):
    """SRU followed by CRU; shape-preserving, identity at initialization."""

    def __init__(self, channels, rng, k=3):
        super().__init__()
        self.sru = SpatialReconstruction(channels)
        self.cru = ChannelRefinement(channels, rng, k=k)

    def forward(self, x):
        return self.cru(self.sru(x))

    def backward(self, dout):
        return self.sru.backward(self.cru.backward(dout))
