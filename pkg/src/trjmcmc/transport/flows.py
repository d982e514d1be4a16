"""Masked autoregressive rational-quadratic spline flows.

A flow in the target -> reference direction is

    z = logit(F(sigmoid(s(theta))))

where ``s`` is a frozen elementwise standardization and ``F`` a stack of
autoregressive spline layers on [0, 1]^n whose coordinate order is reversed
between consecutive layers. The conditional variant adds a one-hot model
context, a masked standardization for auxiliary coordinates, and a per-model
diagonal affine (the conditional Gaussian base folded into the map) so the
reference is always the standard Gaussian.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .. import autodiff as ad
from ..reference import GaussianReference
from .base import ConditionalMap, DomainError, TransportMap
from .splines import derivative_offset, knots_from_unnormalized, rq_forward, rq_inverse

__all__ = [
    "CLAMP",
    "FlowSpec",
    "FlowParams",
    "made_masks",
    "init_flow_params",
    "SplineFlow",
    "ConditionalSplineFlow",
    "flow_forward_graph",
    "flow_log_density_graph",
]

# sigmoid-space values outside [CLAMP, 1 - CLAMP] are treated as off-domain
CLAMP = 1e-7

LAYER_KEYS = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass(frozen=True)
class FlowSpec:
    """Architecture of a spline flow.

    ``hidden_per_dim`` sets the width of *each* of the two hidden layers of
    every conditioner network to ``hidden_per_dim * n``.
    """

    n_layers: int = 3
    n_bins: int = 10
    hidden_per_dim: int = 32
    min_bin_width: float = 1e-3
    min_bin_height: float = 1e-3
    min_derivative: float = 1e-3

    def hidden(self, n):
        return self.hidden_per_dim * n

    @property
    def n_out(self):
        return 3 * self.n_bins + 1


def made_masks(n, hidden, n_out):
    """Connectivity masks giving output block i dependence on inputs < i only."""
    in_deg = np.arange(1, n + 1)
    hid_deg = np.arange(hidden) % n
    out_deg = np.repeat(np.arange(1, n + 1), n_out)
    m1 = (in_deg[:, None] <= hid_deg[None, :]).astype(float)
    m2 = (hid_deg[:, None] <= hid_deg[None, :]).astype(float)
    m3 = (hid_deg[:, None] < out_deg[None, :]).astype(float)
    return m1, m2, m3


@dataclass
class FlowParams:
    spec: FlowSpec
    n: int
    shift: np.ndarray  # (n,) or (K, n)
    scale: np.ndarray
    layers: list
    models: tuple = None
    aux_mask: np.ndarray = None  # (K, n) bool, conditional only
    reference: GaussianReference = None
    base_loc: np.ndarray = None  # (K, n)
    base_log_scale: np.ndarray = None
    _masks: tuple = field(default=None, repr=False, compare=False)

    @property
    def conditional(self):
        return self.models is not None

    @property
    def masks(self):
        if self._masks is None:
            self._masks = made_masks(self.n, self.spec.hidden(self.n), self.spec.n_out)
        return self._masks

    def layer_keys(self):
        return LAYER_KEYS + (("C1",) if self.conditional else ())

    def trainable(self):
        out = [layer[key] for layer in self.layers for key in self.layer_keys()]
        if self.conditional:
            out += [self.base_loc, self.base_log_scale]
        return out

    def with_trainable(self, arrays):
        arrays = [np.array(a, dtype=float) for a in arrays]
        keys = self.layer_keys()
        layers, i = [], 0
        for _ in self.layers:
            layers.append(dict(zip(keys, arrays[i : i + len(keys)])))
            i += len(keys)
        extra = {}
        if self.conditional:
            extra = {"base_loc": arrays[i], "base_log_scale": arrays[i + 1]}
        return replace(self, layers=layers, _masks=self._masks, **extra)

    def n_trainable(self):
        return int(sum(a.size for a in self.trainable()))

    def flat(self):
        return np.concatenate([a.ravel() for a in self.trainable()])

    def from_flat(self, vec):
        vec = np.asarray(vec, float)
        arrays, i = [], 0
        for a in self.trainable():
            arrays.append(vec[i : i + a.size].reshape(a.shape))
            i += a.size
        if i != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {i}")
        return self.with_trainable(arrays)

    def to_dict(self):
        def arr(a):
            a = np.asarray(a, float)
            return {"shape": list(a.shape), "data": a.ravel().tolist()}

        d = {
            "spec": self.spec.__dict__.copy(),
            "n": self.n,
            "shift": arr(self.shift),
            "scale": arr(self.scale),
            "layers": [{k: arr(v) for k, v in layer.items()} for layer in self.layers],
        }
        if self.conditional:
            d.update(
                models=[list(m) if isinstance(m, tuple) else m for m in self.models],
                aux_mask=arr(self.aux_mask.astype(float)),
                reference=self.reference.to_dict(),
                base_loc=arr(self.base_loc),
                base_log_scale=arr(self.base_log_scale),
            )
        return d

    @classmethod
    def from_dict(cls, d):
        def arr(e):
            return np.array(e["data"], dtype=float).reshape(e["shape"])

        kw = {}
        if "models" in d:
            kw = dict(
                models=tuple(tuple(m) if isinstance(m, list) else m for m in d["models"]),
                aux_mask=arr(d["aux_mask"]).astype(bool),
                reference=GaussianReference.from_dict(d["reference"]),
                base_loc=arr(d["base_loc"]),
                base_log_scale=arr(d["base_log_scale"]),
            )
        return cls(
            spec=FlowSpec(**d["spec"]),
            n=int(d["n"]),
            shift=arr(d["shift"]),
            scale=arr(d["scale"]),
            layers=[{k: arr(v) for k, v in layer.items()} for layer in d["layers"]],
            **kw,
        )


def init_flow_params(n, spec=FlowSpec(), shift=None, scale=None, rng=None, models=None,
                     aux_mask=None, reference=None, zero_last=True):
    """Fresh parameters. With ``zero_last`` the spline layers start as the identity."""
    rng = np.random.default_rng(0) if rng is None else rng
    K = None if models is None else len(models)
    shape = (n,) if K is None else (K, n)
    shift = np.zeros(shape) if shift is None else np.asarray(shift, float).reshape(shape)
    scale = np.ones(shape) if scale is None else np.asarray(scale, float).reshape(shape)
    if not np.all(scale > 0):
        raise ValueError("standardization scales must be positive")
    H = spec.hidden(n)
    out = n * spec.n_out
    layers = []
    for _ in range(spec.n_layers):
        layer = {
            "W1": rng.standard_normal((n, H)) / np.sqrt(n),
            "b1": np.zeros(H),
            "W2": rng.standard_normal((H, H)) / np.sqrt(H),
            "b2": np.zeros(H),
            "W3": np.zeros((H, out)) if zero_last else rng.standard_normal((H, out)) / np.sqrt(H),
            "b3": np.zeros(out) if zero_last else 0.1 * rng.standard_normal(out),
        }
        if K is not None:
            layer["C1"] = rng.standard_normal((K, H)) / np.sqrt(K)
        layers.append(layer)
    kw = {}
    if K is not None:
        aux_mask = np.zeros((K, n), bool) if aux_mask is None else np.asarray(aux_mask, bool)
        kw = dict(
            models=tuple(models),
            aux_mask=aux_mask,
            reference=GaussianReference() if reference is None else reference,
            base_loc=np.zeros((K, n)),
            base_log_scale=np.zeros((K, n)),
        )
    return FlowParams(spec=spec, n=n, shift=shift, scale=scale, layers=layers, **kw)


def _masked_layers(params, weights):
    """Apply connectivity masks to the raw weights (arrays or tensors)."""
    m1, m2, m3 = params.masks
    keys = params.layer_keys()
    layers = []
    for i in range(params.spec.n_layers):
        w = dict(zip(keys, weights[i * len(keys) : (i + 1) * len(keys)]))
        w["W1"] = ad.mul(w["W1"], m1)
        w["W2"] = ad.mul(w["W2"], m2)
        w["W3"] = ad.mul(w["W3"], m3)
        layers.append(w)
    return layers


def _conditioner(layer, x, ctx, n, spec):
    a1 = x @ layer["W1"] + layer["b1"]
    if ctx is not None:
        a1 = a1 + ctx @ layer["C1"]
    h1 = ad.tanh(a1)
    h2 = ad.tanh(h1 @ layer["W2"] + layer["b2"])
    out = (h2 @ layer["W3"] + layer["b3"]).reshape(-1, n, spec.n_out)
    B = spec.n_bins
    return knots_from_unnormalized(
        out[..., :B], out[..., B : 2 * B], out[..., 2 * B :],
        spec.min_bin_width, spec.min_bin_height, spec.min_derivative,
    )


def _core_forward(layers, p, ctx, n, spec):
    logdet = 0.0
    for i, layer in enumerate(layers):
        rev = i % 2 == 1
        x = p[:, ::-1] if rev else p
        cw, ch, d = _conditioner(layer, x, ctx, n, spec)
        y, ld = rq_forward(x, cw, ch, d)
        logdet = logdet + ad.sum(ld, axis=1)
        p = y[:, ::-1] if rev else y
    return p, logdet


def _dim_knots(out, spec):
    # knots of one coordinate from its (N, 3B+1) conditioner block; plain-array twin of knots_from_unnormalized
    B = spec.n_bins

    def norm(u, m):
        e = np.exp(u - u.max(axis=1, keepdims=True))
        sizes = m + (1.0 - m * B) * (e / e.sum(axis=1, keepdims=True))
        k = np.empty((len(u), B + 1))
        k[:, 0] = 0.0
        k[:, 1:-1] = np.cumsum(sizes, axis=1)[:, :-1]
        k[:, -1] = 1.0
        return k

    d = spec.min_derivative + np.logaddexp(0.0, out[:, 2 * B :] + derivative_offset(spec.min_derivative))
    return norm(out[:, :B], spec.min_bin_width), norm(out[:, B : 2 * B], spec.min_bin_height), d


def _core_inverse(layers, q, ctx, n, spec):
    # coordinate j only depends on x_{<j}, so each sweep evaluates the conditioner block of j alone
    logdet = np.zeros(len(q))
    m = spec.n_out
    for i in reversed(range(len(layers))):
        L = layers[i]
        rev = i % 2 == 1
        y = q[:, ::-1] if rev else q
        x = np.full_like(y, 0.5)
        base = L["b1"] + (ctx @ L["C1"] if ctx is not None else 0.0)
        for j in range(n):
            h1 = np.tanh(x @ L["W1"] + base)
            h2 = np.tanh(h1 @ L["W2"] + L["b2"])
            out = h2 @ L["W3"][:, j * m : (j + 1) * m] + L["b3"][j * m : (j + 1) * m]
            cw, ch, d = _dim_knots(out, spec)
            xj, ld = rq_inverse(y[:, j], cw, ch, d)
            x[:, j] = xj
            logdet += ld
        q = x[:, ::-1] if rev else x
    return q, logdet


def _one_hot(k_idx, K):
    out = np.zeros((len(k_idx), K))
    out[np.arange(len(k_idx)), k_idx] = 1.0
    return out


def _standardize(params, x, k_idx):
    if not params.conditional:
        v = (x - params.shift) * params.scale
        return v, np.full(len(x), np.sum(np.log(params.scale)))
    shift, scale, mask = params.shift[k_idx], params.scale[k_idx], params.aux_mask[k_idx]
    v_aux, ld_aux = params.reference.to_std_normal(x)
    v = np.where(mask, v_aux, (x - shift) * scale)
    return v, np.where(mask, ld_aux, np.log(scale)).sum(axis=1)


def _unstandardize(params, v, k_idx):
    if not params.conditional:
        return v / params.scale + params.shift, np.full(len(v), -np.sum(np.log(params.scale)))
    shift, scale, mask = params.shift[k_idx], params.scale[k_idx], params.aux_mask[k_idx]
    ref = params.reference
    u = ref.from_std_normal(v)
    _, ld_aux = ref.to_std_normal(u)
    x = np.where(mask, u, v / scale + shift)
    return x, -np.where(mask, ld_aux, np.log(scale)).sum(axis=1)


def _in_clamp(p):
    return np.all((p >= CLAMP) & (p <= 1.0 - CLAMP), axis=1)


def flow_forward_graph(params, weights, x, k_idx=None):
    """Target -> reference pass usable with plain arrays or autodiff tensors.

    ``weights`` follows ``params.trainable()`` order. Returns ``(z, logdet, ok)``.
    """
    x = np.asarray(x, float)
    v, ld0 = _standardize(params, x, k_idx)
    p = expit(v)
    ok = _in_clamp(p)
    p = np.where(ok[:, None], p, 0.5)
    ld0 = ld0 - (np.logaddexp(0.0, v) + np.logaddexp(0.0, -v)).sum(axis=1)
    ctx = _one_hot(k_idx, len(params.models)) if params.conditional else None
    layers = _masked_layers(params, weights)
    q, ld1 = _core_forward(layers, p, ctx, params.n, params.spec)
    qv = ad.value_of(q)
    ok &= _in_clamp(qv)
    if not ok.all():
        q = ad.where(ok[:, None], q, 0.5)
    logq, log1mq = ad.log(q), ad.log(1.0 - q)
    z = logq - log1mq
    logdet = ld0 + ld1 - ad.sum(logq + log1mq, axis=1)
    if params.conditional:
        nw = len(weights)
        loc, log_scale = weights[nw - 2][k_idx], weights[nw - 1][k_idx]
        z = (z - loc) * ad.exp(-log_scale)
        logdet = logdet - ad.sum(log_scale, axis=1)
    return z, logdet, ok


def flow_log_density_graph(params, weights, x, k_idx=None):
    z, logdet, ok = flow_forward_graph(params, weights, x, k_idx)
    return -0.5 * ad.sum(z * z, axis=1) - params.n * 0.5 * np.log(2 * np.pi) + logdet, ok


def _flow_inverse(params, layers, z, k_idx):
    ld = np.zeros(len(z))
    if params.conditional:
        log_scale = params.base_log_scale[k_idx]
        z = z * np.exp(log_scale) + params.base_loc[k_idx]
        ld += log_scale.sum(axis=1)
    q = expit(z)
    ok = _in_clamp(q)
    q = np.where(ok[:, None], q, 0.5)
    ld -= (np.logaddexp(0.0, z) + np.logaddexp(0.0, -z)).sum(axis=1)
    ctx = _one_hot(k_idx, len(params.models)) if params.conditional else None
    p, ld1 = _core_inverse(layers, q, ctx, params.n, params.spec)
    ok &= _in_clamp(p)
    p = np.where(ok[:, None], p, 0.5)
    v = np.log(p) - np.log1p(-p)
    ld += ld1 - (np.log(p) + np.log1p(-p)).sum(axis=1)
    x, ld2 = _unstandardize(params, v, k_idx)
    return x, ld + ld2, ok


class SplineFlow(TransportMap):
    kind = "spline-flow"

    def __init__(self, params):
        if params.conditional:
            raise ValueError("use ConditionalSplineFlow for conditional parameters")
        super().__init__(params.n)
        self.params = params
        self._weights = params.trainable()
        self._layers = _masked_layers(params, self._weights)

    def _forward(self, x):
        return flow_forward_graph(self.params, self._weights, x)

    def _inverse(self, z):
        return _flow_inverse(self.params, self._layers, z, None)

    def log_density(self, theta):
        from .base import flow_log_density

        return flow_log_density(self, theta)

    def to_dict(self):
        return {"kind": self.kind, "n": self.n, "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(FlowParams.from_dict(d["params"]))


class ConditionalSplineFlow(ConditionalMap):
    kind = "conditional-flow"

    def __init__(self, params):
        if not params.conditional:
            raise ValueError("parameters carry no model context")
        super().__init__(params.n, params.models)
        self.params = params
        self._weights = params.trainable()
        self._layers = _masked_layers(params, self._weights)

    @property
    def aux_mask(self):
        return self.params.aux_mask

    def _forward(self, xi, k_idx):
        return flow_forward_graph(self.params, self._weights, xi, k_idx)

    def _inverse(self, z, k_idx):
        return _flow_inverse(self.params, self._layers, z, k_idx)

    def to_dict(self):
        return {"kind": self.kind, "n": self.n, "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(FlowParams.from_dict(d["params"]))


def check_domain(ok, what):
    if not np.all(ok):
        raise DomainError(f"{what}: {int(np.sum(~ok))} point(s) saturate the sigmoid sandwich")
