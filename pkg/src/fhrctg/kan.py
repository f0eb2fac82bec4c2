"""Spline-parameterized layer: each output sums learned univariate functions
of each input, phi(x) = base_w * silu(x) + sum_g coef_g * B_g(x) over a
uniform cubic B-spline basis on a fixed grid. Inputs are clamped to the grid,
so evaluation is total and extrapolation cannot blow up."""

from __future__ import annotations

import numpy as np

from .nn import Module, silu, silu_grad, uniform_init

GRID_LO = -3.0
GRID_HI = 3.0
GRID_INTERVALS = 8
DEGREE = 3


class BSplineBasis:
    """Uniform cubic B-spline basis with knots extended past the grid so the
    basis forms a partition of unity on [lo, hi]."""

    def __init__(self, lo=GRID_LO, hi=GRID_HI, intervals=GRID_INTERVALS, degree=DEGREE):
        self.lo, self.hi, self.degree = lo, hi, degree
        self.h = (hi - lo) / intervals
        self.n_basis = intervals + degree
        self.knots = lo + (np.arange(intervals + 2 * degree + 1) - degree) * self.h

    def _clamp(self, x):
        # keep strictly below hi so the half-open degree-0 supports cover it
        return np.clip(x, self.lo, np.nextafter(self.hi, self.lo))

    def _raise_degree(self, x, basis, k):
        t = self.knots
        n = basis.shape[-1] - 1
        left = (x[..., None] - t[:n]) / (t[k : k + n] - t[:n])
        right = (t[k + 1 : k + 1 + n] - x[..., None]) / (t[k + 1 : k + 1 + n] - t[1 : 1 + n])
        return left * basis[..., :-1] + right * basis[..., 1:]

    def evaluate(self, x):
        """Basis values B_g(clamp(x)) with shape x.shape + (n_basis,)."""
        return self._eval(np.asarray(x, dtype=np.float64))[0]

    def evaluate_with_grad(self, x):
        """Returns (values, d/dx values); the derivative is zero outside the
        grid where clamping flattens the input."""
        return self._eval(np.asarray(x, dtype=np.float64))

    def _eval(self, x):
        xc = self._clamp(x)
        t = self.knots
        basis = ((t[:-1] <= xc[..., None]) & (xc[..., None] < t[1:])).astype(np.float64)
        for k in range(1, self.degree):
            basis = self._raise_degree(xc, basis, k)
        lower = basis  # degree-2 basis, needed for the derivative
        basis = self._raise_degree(xc, lower, self.degree)
        deriv = (lower[..., :-1] - lower[..., 1:]) / self.h
        inside = ((x >= self.lo) & (x <= self.hi)).astype(np.float64)
        return basis, deriv * inside[..., None]


class KanLayer(Module):
    """Maps (..., d_in) -> (..., d_out) by summing per-edge spline functions."""

    def __init__(self, d_in, d_out, rng, basis: BSplineBasis | None = None):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.basis = basis or BSplineBasis()
        self.base_w = self.add_param("base_w", uniform_init(rng, (d_out, d_in), d_in))
        self.coef = self.add_param(
            "coef", uniform_init(rng, (d_out, d_in, self.basis.n_basis), d_in)
        )

    def forward(self, x):
        xc = self.basis._clamp(x)
        b, bd = self.basis.evaluate_with_grad(x)
        self._xc, self._x, self._b, self._bd = xc, x, b, bd
        out = silu(xc) @ self.base_w.T + np.einsum("...ig,oig->...o", b, self.coef)
        return out

    def backward(self, dout):
        xc, b, bd = self._xc, self._b, self._bd
        s = silu(xc)
        d2 = dout.reshape(-1, self.d_out)
        self._grads["base_w"] += d2.T @ s.reshape(-1, self.d_in)
        self._grads["coef"] += np.einsum("no,nig->oig", d2, b.reshape(-1, self.d_in, self.basis.n_basis))
        inside = (self._x >= self.basis.lo) & (self._x <= self.basis.hi)
        dx = (dout @ self.base_w) * silu_grad(xc) * inside
        dx += np.einsum("...o,oig,...ig->...i", dout, self.coef, bd)
        return dx
