"""Monotone rational-quadratic splines on [0, 1].

The batched functions below are written against :mod:`trjmcmc.autodiff` so
they work on plain arrays and on gradient-tracked tensors alike. Knot arrays
have shape ``(..., B + 1)`` and inputs shape ``(...)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad

__all__ = [
    "RQSpline",
    "rq_spline_eval",
    "knots_from_unnormalized",
    "rq_forward",
    "rq_inverse",
    "DERIVATIVE_OFFSET",
]


def derivative_offset(min_derivative):
    """Shift so that an all-zero unnormalized derivative gives slope exactly 1."""
    return float(np.log(np.expm1(1.0 - min_derivative)))


DERIVATIVE_OFFSET = derivative_offset(1e-3)


def _normalized_knots(u, min_size):
    B = u.shape[-1]
    sizes = min_size + (1.0 - min_size * B) * ad.softmax(u, axis=-1)
    inner = ad.cumsum(sizes, axis=-1)[..., :-1]
    lead = np.zeros(u.shape[:-1] + (1,))
    return ad.concatenate([lead, inner, np.ones(u.shape[:-1] + (1,))], axis=-1)


def knots_from_unnormalized(uw, uh, ud, min_bin_width=1e-3, min_bin_height=1e-3, min_derivative=1e-3):
    """Knot x/y positions and knot derivatives from raw conditioner outputs."""
    B = uw.shape[-1]
    if min_bin_width * B >= 1 or min_bin_height * B >= 1:
        raise ValueError("minimum bin size too large for the bin count")
    cw = _normalized_knots(uw, min_bin_width)
    ch = _normalized_knots(uh, min_bin_height)
    d = min_derivative + ad.softplus(ud + derivative_offset(min_derivative))
    return cw, ch, d


def _bin_index(x, knots):
    inner = knots[..., 1:-1]
    return (x[..., None] >= inner).sum(axis=-1)[..., None]


def rq_forward(x, cw, ch, d):
    """y = spline(x) and log dy/dx; ``x`` values must lie in [0, 1]."""
    cwv = ad.value_of(cw)
    idx = _bin_index(ad.value_of(x), cwv)

    def at(a, offset=0):
        return ad.take_along_axis(a, idx + offset, axis=-1)[..., 0]

    xk, yk, d0 = at(cw), at(ch), at(d)
    wk = at(cw, 1) - xk
    hk = at(ch, 1) - yk
    d1 = at(d, 1)
    s = hk / wk
    xi = (x - xk) / wk
    omx = 1.0 - xi
    cross = xi * omx
    den = s + (d0 + d1 - 2.0 * s) * cross
    y = yk + hk * (s * xi * xi + d0 * cross) / den
    top = ad.value_of(xi) >= 1.0
    if top.any():
        y = ad.where(top, at(ch, 1), y)
    dnum = d1 * xi * xi + 2.0 * s * cross + d0 * omx * omx
    logderiv = 2.0 * ad.log(s) + ad.log(dnum) - 2.0 * ad.log(den)
    return y, logderiv


def rq_inverse(y, cw, ch, d):
    """x = spline^{-1}(y) by the closed-form quadratic root; also log dx/dy."""
    idx = _bin_index(y, ch)
    if ch.ndim == 2:
        rows, flat = np.arange(len(ch)), idx[:, 0]

        def at(a, offset=0):
            return a[rows, flat + offset]
    else:

        def at(a, offset=0):
            return np.take_along_axis(a, idx + offset, axis=-1)[..., 0]

    xk, yk, d0 = at(cw), at(ch), at(d)
    wk = at(cw, 1) - xk
    hk = at(ch, 1) - yk
    d1 = at(d, 1)
    s = hk / wk
    dy = y - yk
    t = d0 + d1 - 2.0 * s
    a = hk * (s - d0) + dy * t
    b = hk * d0 - dy * t
    c = -s * dy
    disc = np.maximum(b * b - 4.0 * a * c, 0.0)
    # numerically stable root of a xi^2 + b xi + c = 0 lying in [0, 1]
    denom = -b - np.sqrt(disc)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = np.where(denom != 0.0, 2.0 * c / denom, 0.0)
    xi = np.clip(xi, 0.0, 1.0)
    x = np.where(xi >= 1.0, at(cw, 1), xk + xi * wk)
    omx = 1.0 - xi
    cross = xi * omx
    den = s + t * cross
    dnum = d1 * xi * xi + 2.0 * s * cross + d0 * omx * omx
    logderiv = -(2.0 * np.log(s) + np.log(dnum) - 2.0 * np.log(den))
    return x, logderiv


@dataclass(frozen=True)
class RQSpline:
    """A single monotone spline given directly by its knots."""

    knot_x: np.ndarray
    knot_y: np.ndarray
    derivatives: np.ndarray

    def __post_init__(self):
        kx = np.asarray(self.knot_x, float)
        ky = np.asarray(self.knot_y, float)
        dv = np.asarray(self.derivatives, float)
        if not (kx.shape == ky.shape == dv.shape) or kx.ndim != 1 or kx.size < 2:
            raise ValueError("knot_x, knot_y and derivatives must be 1-D arrays of equal length B+1 >= 2")
        if kx[0] != 0 or kx[-1] != 1 or ky[0] != 0 or ky[-1] != 1:
            raise ValueError("knots must start at 0 and end at 1")
        if np.any(np.diff(kx) <= 0) or np.any(np.diff(ky) <= 0):
            raise ValueError("knots must be strictly increasing")
        if np.any(dv <= 0):
            raise ValueError("knot derivatives must be positive")
        object.__setattr__(self, "knot_x", kx)
        object.__setattr__(self, "knot_y", ky)
        object.__setattr__(self, "derivatives", dv)

    @property
    def n_bins(self):
        return self.knot_x.size - 1

    @classmethod
    def identity(cls, n_bins):
        k = np.linspace(0.0, 1.0, n_bins + 1)
        return cls(k, k.copy(), np.ones(n_bins + 1))

    @classmethod
    def from_unnormalized(cls, uw, uh, ud, **kw):
        cw, ch, d = knots_from_unnormalized(np.asarray(uw, float), np.asarray(uh, float), np.asarray(ud, float), **kw)
        return cls(cw, ch, d)

    @classmethod
    def random(cls, rng, n_bins, scale=1.0):
        return cls.from_unnormalized(
            scale * rng.standard_normal(n_bins),
            scale * rng.standard_normal(n_bins),
            scale * rng.standard_normal(n_bins + 1),
        )


def rq_spline_eval(spline, x, direction="fwd"):
    """Evaluate one spline at scalar or array ``x`` in [0, 1]; returns ``(y, logderiv)``."""
    xa = np.asarray(x, dtype=float)
    if not np.all((xa >= 0.0) & (xa <= 1.0)):
        raise ValueError("spline input must lie in [0, 1]")
    shape = xa.shape
    flat = xa.reshape(-1)
    cw = np.broadcast_to(spline.knot_x, (flat.size, spline.knot_x.size))
    ch = np.broadcast_to(spline.knot_y, cw.shape)
    d = np.broadcast_to(spline.derivatives, cw.shape)
    if direction == "fwd":
        y, ld = rq_forward(flat, cw, ch, d)
    elif direction == "inv":
        y, ld = rq_inverse(flat, cw, ch, d)
    else:
        raise ValueError(f"direction must be 'fwd' or 'inv', got {direction!r}")
    y, ld = np.asarray(y).reshape(shape), np.asarray(ld).reshape(shape)
    if shape == ():
        return float(y), float(ld)
    return y, ld
