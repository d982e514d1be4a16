"""Text serialization of transport maps.

Maps are written as JSON objects with keys ``kind``, ``n`` and per-kind
parameters; arrays are flat row-major lists (with a ``shape`` where needed).
Python's float repr is shortest-round-trip, so reloading is bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path

from .base import AffineMap, ComposedMap, IdentityMap, LogPositiveMap
from .flows import ConditionalSplineFlow, SplineFlow
from .sas import SasMap

__all__ = ["map_to_dict", "map_from_dict", "save_map", "load_map"]

_REGISTRY = {
    cls.kind: cls
    for cls in (IdentityMap, AffineMap, LogPositiveMap, SasMap, SplineFlow, ConditionalSplineFlow)
}


def map_to_dict(tmap):
    return tmap.to_dict()


def map_from_dict(d):
    kind = d.get("kind")
    if kind == ComposedMap.kind:
        return ComposedMap([map_from_dict(m) for m in d["maps"]])
    if kind not in _REGISTRY:
        raise ValueError(f"unknown map kind {kind!r}")
    return _REGISTRY[kind].from_dict(d)


def save_map(tmap, path):
    Path(path).write_text(json.dumps(map_to_dict(tmap), indent=1))


def load_map(path):
    return map_from_dict(json.loads(Path(path).read_text()))
