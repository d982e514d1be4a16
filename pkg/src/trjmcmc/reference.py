"""Univariate reference distributions for auxiliary variables."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def std_normal_logpdf(x):
    x = np.asarray(x, dtype=float)
    return -0.5 * x * x - LOG_SQRT_2PI


@dataclass(frozen=True)
class GaussianReference:
    """N(loc, scale^2), the reference used throughout the library.

    ``scale=1`` is the standard Gaussian reference; other scales reproduce the
    independent-auxiliary-variable construction where the reference is a prior.
    """

    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"reference scale must be positive, got {self.scale}")

    def logpdf(self, u):
        return std_normal_logpdf((np.asarray(u, float) - self.loc) / self.scale) - np.log(self.scale)

    def cdf(self, u):
        return special.ndtr((np.asarray(u, float) - self.loc) / self.scale)

    def ppf(self, p):
        return self.loc + self.scale * special.ndtri(p)

    def from_std_normal(self, e):
        """Map standard normal draws to reference draws (used for sampling)."""
        return self.loc + self.scale * np.asarray(e, float)

    def to_std_normal(self, u):
        """Phi^{-1}(F(u)) and its log-derivative; exact for the Gaussian family."""
        u = np.asarray(u, float)
        return (u - self.loc) / self.scale, np.full(u.shape, -np.log(self.scale))

    def sample(self, rng, size):
        return self.from_std_normal(rng.standard_normal(size))

    @property
    def is_standard(self):
        return self.loc == 0.0 and self.scale == 1.0

    def to_dict(self):
        return {"family": "gaussian", "loc": self.loc, "scale": self.scale}

    @classmethod
    def from_dict(cls, d):
        if d.get("family") != "gaussian":
            raise ValueError(f"unsupported reference family {d.get('family')!r}")
        return cls(loc=float(d["loc"]), scale=float(d["scale"]))


STANDARD_NORMAL = GaussianReference()
