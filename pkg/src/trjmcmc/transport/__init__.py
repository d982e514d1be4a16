"""Transport maps: closed-form, affine, and spline-flow diffeomorphisms."""
from .base import (
    AffineMap,
    ComposedMap,
    ConditionalMap,
    DomainError,
    IdentityMap,
    LogPositiveMap,
    TransportMap,
    fit_affine,
    flow_log_density,
)
from .conditional import BlockConditionalMap, IdentityConditionalMap
from .flows import ConditionalSplineFlow, FlowParams, FlowSpec, SplineFlow, init_flow_params
from .io import load_map, map_from_dict, map_to_dict, save_map
from .sas import SasMap, inverse_sinh_arcsinh, make_sas_map, sinh_arcsinh
from .splines import RQSpline, rq_spline_eval

forward = TransportMap.forward
inverse = TransportMap.inverse

__all__ = [
    "AffineMap",
    "BlockConditionalMap",
    "ComposedMap",
    "ConditionalMap",
    "ConditionalSplineFlow",
    "DomainError",
    "FlowParams",
    "FlowSpec",
    "IdentityConditionalMap",
    "IdentityMap",
    "LogPositiveMap",
    "RQSpline",
    "SasMap",
    "SplineFlow",
    "TransportMap",
    "fit_affine",
    "flow_log_density",
    "forward",
    "init_flow_params",
    "inverse",
    "inverse_sinh_arcsinh",
    "load_map",
    "make_sas_map",
    "map_from_dict",
    "map_to_dict",
    "rq_spline_eval",
    "save_map",
    "sinh_arcsinh",
]
