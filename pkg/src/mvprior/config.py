"""Experiment configuration (YAML).

Every key is optional; an empty file runs the defaults.  Unknown keys and
out-of-range values raise :class:`ConfigError` carrying the dotted path of the
offending field.  All randomness comes from the ``seed`` fields.

Key set::

    layout:    views, rows, cols, cell_dim, per_view_bias
    geometry:  ellipsoid [a, b, c], elevation, distance, focal,
               patch_radius, max_partners
    world:     band, n_waves, sigma_view, sigma_pos, sigma_neg, relatedness,
               n_subcategories, sub_spread, scale, seed
    data:      source_pool, target_pool, neg_count, n_maps, per_map,
               map_shape [H, W], cell_size, seed
    trainer:   C, tol, max_passes, seed
    prior:     kind (none|sv|mv|dense), mask (none|td2nd|td2all|nb2all),
               data_views, n_sources, source_k, mean_over (first|both),
               factorization (auto|cholesky|eigen), seed
    target:    k (int or "all"), availability (per-view counts)
    protocol:  kind (kshot|sparse_kshot), ks, availability, methods
               (e.g. ["none", "dense", "dense:td2all"]), repetitions, seed
    eval:      iou, nms_iou, score_threshold
    paths:     out
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from .geometry import CameraSpec, EllipsoidSpec
from .model import TemplateLayout
from .priors import KINDS, MASKS
from .svm import TrainConfig
from .synth import Method, ProtocolSpec, WorldConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


DEFAULTS = {
    "layout": {"views": 8, "rows": 4, "cols": 6, "cell_dim": 6, "per_view_bias": True},
    "geometry": {"ellipsoid": [2.0, 1.0, 0.8], "elevation": 10.0, "distance": None,
                 "focal": 1.0, "patch_radius": None, "max_partners": 4},
    "world": {"band": 3.0, "n_waves": 24, "sigma_view": 0.2, "sigma_pos": 1.5, "sigma_neg": 1.0,
              "relatedness": 0.9, "n_subcategories": 3, "sub_spread": 0.5, "scale": 1.0,
              "seed": 0},
    "data": {"source_pool": 30, "target_pool": 20, "neg_count": 30, "n_maps": 8, "per_map": 6,
             "map_shape": [18, 26], "cell_size": 8, "seed": 1},
    "trainer": {"C": 0.002, "tol": 1e-6, "max_passes": 2000, "seed": 0},
    "prior": {"kind": "dense", "mask": "none", "data_views": [], "n_sources": 5, "source_k": 15,
              "mean_over": "first", "factorization": "auto", "seed": 2},
    "target": {"k": 1, "availability": None},
    "protocol": {"kind": "kshot", "ks": [1, 5, 10], "availability": None,
                 "methods": ["none", "dense"], "repetitions": 5, "seed": 3},
    "eval": {"iou": 0.5, "nms_iou": 0.5, "score_threshold": None},
    "paths": {"out": "run"},
}


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _int(lo=None):
    def check(x):
        return _is_int(x) and (lo is None or x >= lo)
    check.__doc__ = f"an integer >= {lo}" if lo is not None else "an integer"
    return check


def _num(lo=None, hi=None, strict=False, nullable=False):
    def check(x):
        if x is None:
            return nullable
        if not _is_num(x):
            return False
        if lo is not None and (x <= lo if strict else x < lo):
            return False
        return hi is None or x <= hi
    rng = []
    if lo is not None:
        rng.append(f"{'>' if strict else '>='} {lo}")
    if hi is not None:
        rng.append(f"<= {hi}")
    check.__doc__ = "a number " + " and ".join(rng) + (" or null" if nullable else "")
    return check


def _choice(options):
    def check(x):
        return x in options
    check.__doc__ = "one of " + ", ".join(map(str, options))
    return check


def _bool(x):
    """a boolean"""
    return isinstance(x, bool)


def _int_list(length=None, lo=0, nullable=False):
    def check(x):
        if x is None:
            return nullable
        return (isinstance(x, list) and all(_is_int(v) and v >= lo for v in x)
                and (length is None or len(x) == length))
    check.__doc__ = f"a list of integers >= {lo}" + (" or null" if nullable else "")
    return check


def _k(x):
    """a positive integer or "all\""""
    return x == "all" or (_is_int(x) and x >= 1)


def _ks(x):
    """a nonempty list of positive integers or "all\""""
    return isinstance(x, list) and len(x) > 0 and all(_k(v) for v in x)


def _methods(x):
    """a list of "kind" or "kind:mask" strings"""
    if not isinstance(x, list) or not x:
        return False
    for m in x:
        if not isinstance(m, str):
            return False
        kind, _, mask = m.partition(":")
        if kind not in ("none",) + KINDS or (mask and mask not in MASKS):
            return False
    return True


def _axes(x):
    """a list of three positive numbers"""
    return isinstance(x, list) and len(x) == 3 and all(_is_num(v) and v > 0 for v in x)


def _shape(x):
    """a list [H, W] of positive integers"""
    return isinstance(x, list) and len(x) == 2 and all(_is_int(v) and v > 0 for v in x)


def _str(x):
    """a string"""
    return isinstance(x, str) and bool(x)


SCHEMA = {
    "layout": {"views": _int(1), "rows": _int(1), "cols": _int(1), "cell_dim": _int(1),
               "per_view_bias": _bool},
    "geometry": {"ellipsoid": _axes, "elevation": _num(-89.0, 89.0), "distance": _num(0, strict=True, nullable=True),
                 "focal": _num(0, strict=True), "patch_radius": _num(0, nullable=True),
                 "max_partners": lambda x: x is None or (_is_int(x) and x >= 1)},
    "world": {"band": _num(0), "n_waves": _int(1), "sigma_view": _num(0), "sigma_pos": _num(0),
              "sigma_neg": _num(0), "relatedness": _num(0, 1), "n_subcategories": _int(0),
              "sub_spread": _num(0), "scale": _num(0, strict=True), "seed": _int(0)},
    "data": {"source_pool": _int(0), "target_pool": _int(0), "neg_count": _int(1), "n_maps": _int(1),
             "per_map": _int(1), "map_shape": _shape, "cell_size": _int(1), "seed": _int(0)},
    "trainer": {"C": _num(0, strict=True), "tol": _num(0, strict=True), "max_passes": _int(1),
                "seed": _int(0)},
    "prior": {"kind": _choice(("none",) + KINDS), "mask": _choice(MASKS), "data_views": _int_list(),
              "n_sources": _int(1), "source_k": _k, "mean_over": _choice(("first", "both")),
              "factorization": _choice(("auto", "cholesky", "eigen")), "seed": _int(0)},
    "target": {"k": _k, "availability": _int_list(nullable=True)},
    "protocol": {"kind": _choice(("kshot", "sparse_kshot")), "ks": _ks,
                 "availability": _int_list(nullable=True), "methods": _methods,
                 "repetitions": _int(1), "seed": _int(0)},
    "eval": {"iou": _num(0, 1, strict=True), "nms_iou": _num(0, 1), "score_threshold": _num(nullable=True)},
    "paths": {"out": _str},
}


def _doc(check):
    return check.__doc__ or "valid"


def validate(raw) -> dict:
    """Merge ``raw`` over the defaults and check every field."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in raw.items():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(section, "must be a mapping")
        for key, value in values.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            if isinstance(value, float) and value != value:
                raise ConfigError(f"{section}.{key}", "NaN is not allowed")
            if not SCHEMA[section][key](value):
                raise ConfigError(f"{section}.{key}", f"expected {_doc(SCHEMA[section][key])}, got {value!r}")
            cfg[section][key] = value
    _cross_checks(cfg)
    return cfg


def _cross_checks(cfg):
    V = cfg["layout"]["views"]
    for path, val in (("prior.data_views", cfg["prior"]["data_views"]),):
        if any(v >= V for v in val):
            raise ConfigError(path, f"view index out of range for {V} views")
    if cfg["prior"]["mask"] in ("td2nd", "td2all") and not cfg["prior"]["data_views"]:
        raise ConfigError("prior.data_views", f"mask {cfg['prior']['mask']} requires data_views")
    for sec in ("target", "protocol"):
        av = cfg[sec]["availability"]
        if av is not None and len(av) != V:
            raise ConfigError(f"{sec}.availability", f"needs {V} entries, got {len(av)}")
    if cfg["protocol"]["kind"] == "sparse_kshot" and cfg["protocol"]["availability"] is None:
        raise ConfigError("protocol.availability", "sparse_kshot needs per-view availability")
    lay = cfg["layout"]
    H, W = cfg["data"]["map_shape"]
    if H < lay["rows"] or W < lay["cols"]:
        raise ConfigError("data.map_shape", "map smaller than the template")
    slots = (H // (lay["rows"] + 1)) * (W // (lay["cols"] + 1))
    if cfg["data"]["per_map"] > slots:
        raise ConfigError("data.per_map", f"at most {slots} instances fit on a {H}x{W} map")
    sk = cfg["prior"]["source_k"]
    if sk != "all" and sk > cfg["data"]["source_pool"]:
        raise ConfigError("prior.source_k", "exceeds data.source_pool")
    k = cfg["target"]["k"]
    if k != "all" and k > cfg["data"]["target_pool"]:
        raise ConfigError("target.k", "exceeds data.target_pool")
    for k in cfg["protocol"]["ks"]:
        if k != "all" and k > cfg["data"]["target_pool"]:
            raise ConfigError("protocol.ks", f"k={k} exceeds data.target_pool")
    ax = cfg["geometry"]["ellipsoid"]
    d = cfg["geometry"]["distance"]
    if d is not None and d <= max(ax):
        raise ConfigError("geometry.distance", "must exceed the largest semi-axis")


def load_config(path=None) -> dict:
    if path is None:
        return validate({})
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from exc
    return validate(raw)


@dataclass(frozen=True)
class Built:
    """Typed objects assembled from a validated config."""

    layout: TemplateLayout
    ellipsoid: EllipsoidSpec
    camera: CameraSpec
    world: WorldConfig
    trainer: TrainConfig


def build(cfg: dict) -> Built:
    lay = TemplateLayout(**cfg["layout"])
    g = cfg["geometry"]
    ell = EllipsoidSpec(*g["ellipsoid"])
    cam = CameraSpec(g["elevation"], g["distance"], g["focal"])
    w = cfg["world"]
    world = WorldConfig(layout=lay, ellipsoid=ell, camera=cam, **w)
    t = cfg["trainer"]
    return Built(lay, ell, cam, world, TrainConfig(float(t["C"]), float(t["tol"]), t["max_passes"], t["seed"]))


def parse_method(text: str) -> Method:
    if not _methods([text]):
        raise ConfigError("protocol.methods", f"expected {_doc(_methods)}, got {text!r}")
    kind, _, mask = text.partition(":")
    return Method(kind, mask or "none")


def protocol_spec(cfg: dict) -> ProtocolSpec:
    p, d, g, pr = cfg["protocol"], cfg["data"], cfg["geometry"], cfg["prior"]
    built = build(cfg)
    return ProtocolSpec(
        kind=p["kind"], ks=tuple(p["ks"]), target_pool=d["target_pool"],
        availability=tuple(p["availability"]) if p["availability"] is not None else None,
        methods=tuple(parse_method(m) for m in p["methods"]),
        n_sources=pr["n_sources"], source_k=pr["source_k"], source_pool=d["source_pool"],
        neg_count=d["neg_count"], n_maps=d["n_maps"], per_map=d["per_map"],
        map_shape=tuple(d["map_shape"]), repetitions=p["repetitions"], seed=p["seed"],
        iou_threshold=cfg["eval"]["iou"], patch_radius=g["patch_radius"],
        max_partners=g["max_partners"], trainer=built.trainer)
