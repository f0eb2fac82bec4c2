"""Minimal neural toolkit: every block the tagging model needs, with forward
passes and hand-derived gradients.

Everything runs in 64-bit numpy. There is no autodiff: each layer caches what
its backward pass needs and `grad_check` validates every analytic gradient
against central finite differences. Layers are pure given their parameters;
a module instance must not be shared between concurrent training steps
because forward overwrites the cache.
"""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    # single-pass and stable in both tails
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# positional encodings
# ---------------------------------------------------------------------------

def sinusoidal_pe(t: int, d: int, base: float = 10000.0) -> np.ndarray:
    """Absolute positional vector: sin/cos pairs with wavelengths in geometric
    progression, component 2i = sin(t / base^(2i/d)), 2i+1 the cosine."""
    if d % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {d}")
    if t < 0:
        raise ValueError(f"position must be nonnegative, got {t}")
    return sinusoidal_pe_table(np.asarray([t]), d, base)[0]


def sinusoidal_pe_table(positions, d: int, base: float = 10000.0) -> np.ndarray:
    if d % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {d}")
    positions = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, d, 2) / d)  # (d/2,)
    ang = positions[:, None] * inv_freq[None, :]
    table = np.empty((len(positions), d))
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    return table


def rope_apply(x: np.ndarray, positions=None, base: float = 10000.0) -> np.ndarray:
    """Rotate consecutive value pairs of the last axis by position-dependent
    angles m * base^(-2i/d); pairwise norms are preserved, so attention logits
    depend only on relative offsets.

    Accepts (..., T, d_head); `positions` defaults to 0..T-1. Negative
    positions invert the rotation (used by backward passes).
    """
    d_head = x.shape[-1]
    if d_head % 2 != 0:
        raise ValueError(f"head dim must be even, got {d_head}")
    t_len = x.shape[-2]
    if positions is None:
        positions = np.arange(t_len)
    positions = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, d_head, 2) / d_head)
    ang = positions[:, None] * inv_freq[None, :]  # (T, d/2)
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x, dtype=np.float64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


# ---------------------------------------------------------------------------
# module machinery
# ---------------------------------------------------------------------------

class Module:
    """Base layer: owns named parameter/gradient arrays, discovers children
    from attributes, and walks the tree with dotted names."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.ascontiguousarray(value, dtype=np.float64)
        self._params[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_params(self, prefix: str = ""):
        for name, arr in self._params.items():
            yield prefix + name, arr
        for key, child in self.children():
            yield from child.named_params(prefix + key + ".")

    def named_grads(self, prefix: str = ""):
        for name, arr in self._grads.items():
            yield prefix + name, arr
        for key, child in self.children():
            yield from child.named_grads(prefix + key + ".")

    def param_grad_pairs(self):
        params = dict(self.named_params())
        grads = dict(self.named_grads())
        return [(name, params[name], grads[name]) for name in params]

    def zero_grad(self):
        for _, g in self.named_grads():
            g.fill(0.0)

    def n_params(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def jitter(self, rng, scale: float = 0.1):
        """Perturb every parameter in place (grad checks need generic points)."""
        for _, p in self.named_params():
            p += rng.uniform(-scale, scale, size=p.shape)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        self.w = self.add_param("w", uniform_init(rng, (d_in, d_out), d_in))
        self.b = self.add_param("b", np.zeros(d_out)) if bias else None

    def forward(self, x):
        self._x = x
        out = x @ self.w
        if self.b is not None:
            out = out + self.b
        return out

    def backward(self, dout):
        x2 = self._x.reshape(-1, self.w.shape[0])
        d2 = dout.reshape(-1, self.w.shape[1])
        self._grads["w"] += x2.T @ d2
        if self.b is not None:
            self._grads["b"] += d2.sum(axis=0)
        return dout @ self.w.T


class Embedding(Module):
    def __init__(self, vocab, d, rng):
        super().__init__()
        self.table = self.add_param("table", uniform_init(rng, (vocab, d), d))

    def forward(self, idx):
        self._idx = np.asarray(idx)
        return self.table[self._idx]

    def backward(self, dout):
        d = self.table.shape[1]
        np.add.at(self._grads["table"], self._idx.reshape(-1), dout.reshape(-1, d))
        return None  # integer input has no gradient


class Conv1d(Module):
    """Cross-correlation along the time axis of a (T, c_in) sequence."""

    def __init__(self, c_in, c_out, k, rng, stride=1, pad=0):
        super().__init__()
        self.k, self.stride, self.pad = k, stride, pad
        self.w = self.add_param("w", uniform_init(rng, (c_out, c_in, k), c_in * k))
        self.b = self.add_param("b", np.zeros(c_out))

    def out_len(self, t_len: int) -> int:
        return (t_len + 2 * self.pad - self.k) // self.stride + 1

    def forward(self, x):
        t_len = x.shape[0]
        t_out = self.out_len(t_len)
        if t_out <= 0:
            raise ValueError(
                f"conv output length {t_out} for input {t_len}, k={self.k}, "
                f"stride={self.stride}, pad={self.pad}"
            )
        xp = np.pad(x, ((self.pad, self.pad), (0, 0))) if self.pad else x
        # im2col: one GEMM over (t_out, c_in*k) patches
        windows = np.lib.stride_tricks.sliding_window_view(xp, self.k, axis=0)
        patches = windows[:: self.stride].reshape(t_out, -1)
        self._patches, self._xp_shape, self._t_len, self._t_out = (
            patches,
            xp.shape,
            t_len,
            t_out,
        )
        wflat = self.w.reshape(self.w.shape[0], -1)
        return patches @ wflat.T + self.b

    def backward(self, dout):
        c_out, c_in, k = self.w.shape
        t_out = self._t_out
        wflat = self.w.reshape(c_out, -1)
        self._grads["w"] += (dout.T @ self._patches).reshape(c_out, c_in, k)
        self._grads["b"] += dout.sum(axis=0)
        dpatches = (dout @ wflat).reshape(t_out, c_in, k)
        dxp = np.zeros(self._xp_shape)
        for tap in range(k):
            dxp[tap : tap + self.stride * t_out : self.stride] += dpatches[:, :, tap]
        return dxp[self.pad : self.pad + self._t_len] if self.pad else dxp


class RmsNorm(Module):
    """Per-step RMS normalization with a learned gain."""

    def __init__(self, d, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.g = self.add_param("g", np.ones(d))

    def forward(self, x):
        r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + self.eps)
        self._x, self._r = x, r
        return self.g * x / r

    def backward(self, dout):
        x, r = self._x, self._r
        d = x.shape[-1]
        u = dout * self.g
        self._grads["g"] += (dout * x / r).reshape(-1, d).sum(axis=0)
        return u / r - x * np.sum(u * x, axis=-1, keepdims=True) / (d * r**3)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention with rotary position encoding on
    queries and keys. Set residual=False when the caller owns the skip."""

    def __init__(self, d, heads, rng, rope_base=10000.0, residual=True):
        super().__init__()
        if d % heads != 0:
            raise ValueError(f"dim {d} not divisible by {heads} heads")
        self.heads, self.d_head = heads, d // heads
        if self.d_head % 2 != 0:
            raise ValueError(f"head dim {self.d_head} must be even for rotation pairs")
        self.rope_base = rope_base
        self.residual = residual
        self.wq = self.add_param("wq", uniform_init(rng, (d, d), d))
        self.wk = self.add_param("wk", uniform_init(rng, (d, d), d))
        self.wv = self.add_param("wv", uniform_init(rng, (d, d), d))
        self.wo = self.add_param("wo", uniform_init(rng, (d, d), d))
        self.attn = None  # (heads, T, T) softmax rows, kept for inspection

    def _split(self, x):
        t_len = x.shape[0]
        return x.reshape(t_len, self.heads, self.d_head).transpose(1, 0, 2)

    def _merge(self, x):
        return x.transpose(1, 0, 2).reshape(x.shape[1], -1)

    def forward(self, x):
        t_len = x.shape[0]
        pos = np.arange(t_len)
        q = self._split(x @ self.wq)
        k = self._split(x @ self.wk)
        v = self._split(x @ self.wv)
        q = rope_apply(q, pos, self.rope_base)
        k = rope_apply(k, pos, self.rope_base)
        logits = q @ k.transpose(0, 2, 1) / np.sqrt(self.d_head)
        attn = softmax(logits, axis=-1)
        ctx = attn @ v
        ctx_flat = self._merge(ctx)
        out = ctx_flat @ self.wo
        self._x, self._pos, self._q, self._k, self._v = x, pos, q, k, v
        self.attn, self._ctx_flat = attn, ctx_flat
        return out + x if self.residual else out

    def backward(self, dout):
        x, attn = self._x, self.attn
        scale = 1.0 / np.sqrt(self.d_head)
        self._grads["wo"] += self._ctx_flat.T @ dout
        dctx = self._split(dout @ self.wo.T)
        dattn = dctx @ self._v.transpose(0, 2, 1)
        dv = attn.transpose(0, 2, 1) @ dctx
        dlogits = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
        dq = dlogits @ self._k * scale
        dk = dlogits.transpose(0, 2, 1) @ self._q * scale
        dq = self._merge(rope_apply(dq, -self._pos, self.rope_base))
        dk = self._merge(rope_apply(dk, -self._pos, self.rope_base))
        dv = self._merge(dv)
        self._grads["wq"] += x.T @ dq
        self._grads["wk"] += x.T @ dk
        self._grads["wv"] += x.T @ dv
        dx = dq @ self.wq.T + dk @ self.wk.T + dv @ self.wv.T
        return dx + dout if self.residual else dx


class SwiGluFfn(Module):
    """Gated feedforward: W2(silu(Wg x) * (Wu x)) with optional residual."""

    def __init__(self, d, hidden, rng, residual=True):
        super().__init__()
        self.residual = residual
        self.wg = self.add_param("wg", uniform_init(rng, (d, hidden), d))
        self.bg = self.add_param("bg", np.zeros(hidden))
        self.wu = self.add_param("wu", uniform_init(rng, (d, hidden), d))
        self.bu = self.add_param("bu", np.zeros(hidden))
        self.w2 = self.add_param("w2", uniform_init(rng, (hidden, d), hidden))
        self.b2 = self.add_param("b2", np.zeros(d))

    def forward(self, x):
        hg = x @ self.wg + self.bg
        u = x @ self.wu + self.bu
        z = silu(hg) * u
        self._x, self._hg, self._u, self._z = x, hg, u, z
        out = z @ self.w2 + self.b2
        return out + x if self.residual else out

    def backward(self, dout):
        x, hg, u, z = self._x, self._hg, self._u, self._z
        x2, d2 = x.reshape(-1, x.shape[-1]), dout.reshape(-1, dout.shape[-1])
        dz = dout @ self.w2.T
        self._grads["w2"] += z.reshape(-1, z.shape[-1]).T @ d2
        self._grads["b2"] += d2.sum(axis=0)
        da = dz * u
        du = dz * silu(hg)
        dhg = da * silu_grad(hg)
        self._grads["wg"] += x2.T @ dhg.reshape(-1, dhg.shape[-1])
        self._grads["bg"] += dhg.reshape(-1, dhg.shape[-1]).sum(axis=0)
        self._grads["wu"] += x2.T @ du.reshape(-1, du.shape[-1])
        self._grads["bu"] += du.reshape(-1, du.shape[-1]).sum(axis=0)
        dx = dhg @ self.wg.T + du @ self.wu.T
        return dx + dout if self.residual else dx


class RepConvVec(Module):
    """Re-parameterizable block on pooled vectors: identity plus two parallel
    learned branches, summed."""

    def __init__(self, d, rng):
        super().__init__()
        self.a = self.add_param("a", uniform_init(rng, (d, d), d))
        self.c = self.add_param("c", uniform_init(rng, (d, d), d))
        self.b = self.add_param("b", np.zeros(d))

    def forward(self, x):
        self._x = x
        return x + x @ self.a + x @ self.c + self.b

    def backward(self, dout):
        x2 = self._x.reshape(-1, self.a.shape[0])
        d2 = dout.reshape(-1, self.a.shape[0])
        self._grads["a"] += x2.T @ d2
        self._grads["c"] += x2.T @ d2
        self._grads["b"] += d2.sum(axis=0)
        return dout + dout @ self.a.T + dout @ self.c.T


class ResidualSilu(Module):
    """y = x + silu(inner(x)); the inner module must preserve shape."""

    def __init__(self, inner: Module):
        super().__init__()
        self.inner = inner

    def forward(self, x):
        self._pre = self.inner(x)
        return x + silu(self._pre)

    def backward(self, dout):
        return dout + self.inner.backward(dout * silu_grad(self._pre))


class DecoderLayer(Module):
    """Pre-norm attention/feedforward pair with residuals spanning the norms."""

    def __init__(self, d, heads, rng, rope_base=10000.0):
        super().__init__()
        self.norm1 = RmsNorm(d)
        self.attn = MultiHeadSelfAttention(d, heads, rng, rope_base, residual=False)
        self.norm2 = RmsNorm(d)
        self.ffn = SwiGluFfn(d, 2 * d, rng, residual=False)

    def forward(self, x):
        h = x + self.attn(self.norm1(x))
        return h + self.ffn(self.norm2(h))

    def backward(self, dout):
        dh = dout + self.norm2.backward(self.ffn.backward(dout))
        return dh + self.norm1.backward(self.attn.backward(dh))


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def fd_max_rel_error(loss_fn, pairs, eps: float = 1e-5) -> float:
    """Central finite differences on every component of every (param, grad)
    pair; returns the worst relative error against the analytic gradient.

    `loss_fn` must recompute the scalar loss from scratch on each call;
    the analytic gradients in `pairs` must already be populated.
    """
    worst = 0.0
    for param, grad in pairs:
        flat_p = param.reshape(-1)
        flat_g = grad.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            lp = loss_fn()
            flat_p[i] = orig - eps
            lm = loss_fn()
            flat_p[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            worst = max(worst, relative_error(flat_g[i], numeric))
    return worst


def grad_check(module: Module, x, rng=None, eps: float = 1e-5) -> float:
    """Check a module's backward pass (parameters and, for float inputs, the
    input itself) against central finite differences of the projected output
    sum(forward(x) * R) for a fixed random direction R.

    Returns the max relative error |analytic - numeric| / max(1, |numeric|).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.array(x)
    direction = rng.standard_normal(np.shape(module.forward(x)))

    def loss():
        return float(np.sum(module.forward(x) * direction))

    module.zero_grad()
    module.forward(x)
    dx = module.backward(direction)

    pairs = [(p, g) for _, p, g in module.param_grad_pairs()]
    if np.asarray(x).dtype.kind == "f" and dx is not None:
        pairs.append((x, dx))
    return fd_max_rel_error(loss, pairs, eps)
