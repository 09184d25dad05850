"""Synthetic multi-view worlds and the k-shot / sparse k-shot protocols.

A category is a smooth random vector field on the ellipsoid surface.  The
ground-truth template of view ``v`` reads the field at the surface point each
cell back-projects to, so templates of different views share a common 3D
cause.  The field is a random Fourier expansion over the normalized surface
direction ``u = (x/a, y/b, z/c)``::

    f_l(u) = sqrt(2/K) * sum_k A[k, l] * cos(band * omega_k . u + phi_k)

with ``omega_k`` uniform in the unit ball, ``phi_k`` uniform in [0, 2 pi) and
``A ~ N(0, 1)``.  ``band`` is the single smoothness knob; ``band = 0`` gives a
constant field.  Source and target categories share ``omega``/``phi`` and
mix their amplitudes: ``A_t = rho * A_s + sqrt(1 - rho^2) * A_fresh``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .detection import (EvalReport, FeatureMap, GroundTruthBox, detect, evaluate,
                        view_accuracy)
from .geometry import (GRID_RELATIONS, CameraSpec, EllipsoidSpec, ViewRig, build_grid_pairs,
                       build_mv_pairs)
from .model import MultiViewModel, TemplateLayout
from .priors import MaskSpec, SigmaMatrix, apply_mask, build_sparse_prior, compute_dense_sigma
from .regularizer import build_regularizer, factorize
from .svm import (TrainConfig, WindowSet, bootstrap_sources, sample_per_view, stack_examples,
                  train_transformed)

log = logging.getLogger(__name__)

MEASURES = ("AP", "VP", "AP+VP-D", "AP+VP-C")


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    layout: TemplateLayout = TemplateLayout(8, 4, 6, 6)
    ellipsoid: EllipsoidSpec = EllipsoidSpec()
    camera: CameraSpec = CameraSpec()
    band: float = 3.0
    n_waves: int = 24
    sigma_view: float = 0.2
    sigma_pos: float = 1.5
    sigma_neg: float = 1.0
    relatedness: float = 0.9
    n_subcategories: int = 3
    sub_spread: float = 0.5
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("band", "sigma_view", "sigma_pos", "sigma_neg", "sub_spread", "scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.relatedness <= 1.0:
            raise ValueError("relatedness must be in [0, 1]")
        if self.n_waves < 1:
            raise ValueError("n_waves must be >= 1")


@dataclass(frozen=True)
class SurfaceField:
    omega: np.ndarray       # (K, 3)
    phase: np.ndarray       # (K,)
    amp: np.ndarray         # (K, L)
    band: float
    axes: np.ndarray

    def __call__(self, points) -> np.ndarray:
        u = np.atleast_2d(points) / self.axes
        arg = self.band * (u @ self.omega.T) + self.phase
        return math.sqrt(2.0 / len(self.phase)) * np.cos(arg) @ self.amp

    def lipschitz(self) -> float:
        """Bound on ``|f(p) - f(q)| / |p - q|`` (Euclidean, over surface points)."""
        per_wave = self.band * np.linalg.norm(self.omega, axis=1) / np.min(self.axes)
        per_channel = math.sqrt(2.0 / len(self.phase)) * (np.abs(self.amp).T @ per_wave)
        return float(np.linalg.norm(per_channel))


@dataclass
class World:
    cfg: WorldConfig
    points: np.ndarray                 # (V, n, m, 3), NaN for misses
    fields: dict                       # category -> SurfaceField
    models: dict                       # category -> ground-truth MultiViewModel

    @property
    def layout(self) -> TemplateLayout:
        return self.cfg.layout

    def category_names(self) -> list[str]:
        return list(self.models)


def _render(field_: SurfaceField, points: np.ndarray, layout: TemplateLayout,
            sigma_view: float, scale: float, rng) -> MultiViewModel:
    V, n, m = layout.views, layout.rows, layout.cols
    T = np.zeros((V, n, m, layout.cell_dim))
    hit = ~np.isnan(points[..., 0])
    T[hit] = field_(points[hit])
    T += sigma_view * rng.standard_normal(T.shape)
    T *= scale
    params = np.concatenate([T.ravel(), np.zeros(V if layout.per_view_bias else 0)])
    return MultiViewModel(layout, params)


def generate_world(cfg: WorldConfig = WorldConfig()) -> World:
    """Ground-truth templates for ``source``, ``target`` and ``target/<i>`` subcategories."""
    lay = cfg.layout
    ss = np.random.SeedSequence(cfg.seed)
    basis_rng, src_rng, tgt_rng, sub_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(5))
    K, L = cfg.n_waves, lay.cell_dim
    direction = basis_rng.standard_normal((K, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    omega = direction * np.cbrt(basis_rng.uniform(size=(K, 1)))
    phase = basis_rng.uniform(0.0, 2.0 * np.pi, K)
    axes = cfg.ellipsoid.axes
    amp_s = src_rng.standard_normal((K, L))
    rho = cfg.relatedness
    amp_t = rho * amp_s + math.sqrt(1.0 - rho * rho) * tgt_rng.standard_normal((K, L))
    fields = {"source": SurfaceField(omega, phase, amp_s, cfg.band, axes),
              "target": SurfaceField(omega, phase, amp_t, cfg.band, axes)}
    s = cfg.sub_spread
    for i in range(cfg.n_subcategories):
        amp = (amp_t + s * sub_rng.standard_normal((K, L))) / math.sqrt(1.0 + s * s)
        fields[f"target/{i}"] = SurfaceField(omega, phase, amp, cfg.band, axes)
    points = ViewRig(lay, cfg.ellipsoid, cfg.camera).surface_points()
    models = {}
    for name, f in fields.items():
        m = _render(f, points, lay, cfg.sigma_view, cfg.scale, noise_rng)
        models[name] = MultiViewModel(lay, m.params, meta=name)
    return World(cfg, points, fields, models)


def sample_windows(world: World, category: str, pos_per_view, neg_count: int, rng) -> WindowSet:
    """Positives are the view template plus ``sigma_pos`` noise; negatives pure ``sigma_neg`` noise."""
    lay = world.layout
    if isinstance(pos_per_view, (int, np.integer)):
        pos_per_view = [int(pos_per_view)] * lay.views
    if len(pos_per_view) != lay.views or min(pos_per_view) < 0 or neg_count < 0:
        raise ProtocolError("invalid positive / negative counts")
    T = world.models[category].templates()
    feats, views = [], []
    for v, k in enumerate(pos_per_view):
        if k:
            feats.append(T[v] + world.cfg.scale * world.cfg.sigma_pos * rng.standard_normal((k,) + T.shape[1:]))
            views.extend([v] * k)
    if neg_count:
        feats.append(world.cfg.scale * world.cfg.sigma_neg * rng.standard_normal((neg_count,) + T.shape[1:]))
        views.extend([-1] * neg_count)
    if not feats:
        return WindowSet(np.zeros((0,) + T.shape[1:]), np.zeros(0, dtype=np.int64))
    return WindowSet(np.concatenate(feats), np.array(views))


def sample_maps(world: World, categories, n_maps: int, per_map: int, rng, map_shape=(18, 26),
                cell_size: int = 8, prefix: str = "img"):
    """Noise maps with axis-aligned template-size instances at recorded boxes.

    The map is cut into a grid of slots, each large enough for one instance
    plus a one-cell border; ``per_map`` slots are drawn at random and the
    instance is jittered inside its slot.  Instance views cycle through all
    bins so the split is balanced.
    """
    lay = world.layout
    if isinstance(categories, str):
        categories = [categories]
    H, W = map_shape
    n, m = lay.rows, lay.cols
    srows, scols = H // (n + 1), W // (m + 1)
    if srows * scols < per_map:
        raise ProtocolError(f"a {H}x{W} map holds at most {srows * scols} instances")
    sh, sw = H // srows, W // scols
    scale = world.cfg.scale
    maps, gts = [], []
    count = 0
    for i in range(n_maps):
        data = scale * world.cfg.sigma_neg * rng.standard_normal((H, W, lay.cell_dim))
        image_id = f"{prefix}{i:04d}"
        for slot in np.sort(rng.choice(srows * scols, size=per_map, replace=False)):
            r0, c0 = (slot // scols) * sh, (slot % scols) * sw
            r = r0 + int(rng.integers(0, sh - n))
            c = c0 + int(rng.integers(0, sw - m))
            view = count % lay.views
            cat = categories[count % len(categories)]
            count += 1
            T = world.models[cat].templates()[view]
            data[r:r + n, c:c + m] = T + scale * world.cfg.sigma_pos * rng.standard_normal(T.shape)
            gts.append(GroundTruthBox((c * cell_size, r * cell_size, m * cell_size, n * cell_size),
                                      view, cat, False, image_id))
        maps.append(FeatureMap(data, cell_size, image_id))
    return maps, gts


@dataclass(frozen=True)
class Dataset:
    source_train: WindowSet
    target_train: WindowSet
    test_maps: list
    test_gts: list


def sample_dataset(world: World, source_pos: int, target_pos, neg_count: int, n_maps: int,
                   per_map: int, rng, map_shape=(18, 26), target: str = "target") -> Dataset:
    """Source pool, target pool (ordered: the first k per view form the k-shot set) and test maps."""
    src = sample_windows(world, "source", source_pos, neg_count, rng)
    tgt = sample_windows(world, target, target_pos, neg_count, rng)
    maps, gts = sample_maps(world, target, n_maps, per_map, rng, map_shape)
    return Dataset(src, tgt, maps, gts)


@dataclass(frozen=True)
class Method:
    """A prior configuration: kind in {none, sv, mv, dense} plus a mask."""

    kind: str = "none"
    mask: str = "none"

    @property
    def name(self) -> str:
        base = {"none": "SVM", "sv": "SVM-SV", "mv": "SVM-MV", "dense": "SVM-Sigma"}[self.kind]
        return base if self.mask == "none" else f"{base}-{self.mask.upper()}"


@dataclass(frozen=True)
class ProtocolSpec:
    kind: str = "kshot"
    ks: tuple = (1, 5, 10)                   # ints or "all" (= target_pool)
    availability: tuple | None = None        # sparse: per-view positive counts
    methods: tuple = (Method("none"), Method("dense"))
    n_sources: int = 5
    source_k: int = 15
    source_pool: int = 30
    neg_count: int = 30
    n_maps: int = 8
    per_map: int = 6
    map_shape: tuple = (18, 26)
    repetitions: int = 5
    seed: int = 0
    iou_threshold: float = 0.5
    patch_radius: float | None = None
    max_partners: int | None = 4
    trainer: TrainConfig = TrainConfig()
    target_pool: int = 20

    def __post_init__(self):
        if self.kind not in ("kshot", "sparse_kshot"):
            raise ProtocolError(f"unknown protocol kind {self.kind!r}")
        if self.kind == "sparse_kshot" and self.availability is None:
            raise ProtocolError("sparse_kshot needs a per-view availability list")
        if self.repetitions < 1 or self.n_sources < 1:
            raise ProtocolError("repetitions and n_sources must be >= 1")

    def settings(self, layout: TemplateLayout):
        """(label, per-view counts) for every training-set size the protocol visits."""
        if self.kind == "sparse_kshot":
            if len(self.availability) != layout.views:
                raise ProtocolError("availability needs one entry per view")
            return [("sparse", tuple(int(a) for a in self.availability))]
        out = []
        for k in self.ks:
            n = self.target_pool if k == "all" else int(k)
            if n > self.target_pool and self.target_pool:
                raise ProtocolError(f"k={k} exceeds the target pool of {self.target_pool}")
            out.append((str(k), (n,) * layout.views))
        return out

    def data_views(self, layout: TemplateLayout) -> tuple:
        if self.kind == "sparse_kshot":
            return tuple(v for v, a in enumerate(self.availability) if a > 0)
        return tuple(range(layout.views))


def prior_relations(kind: str, layout: TemplateLayout, ellipsoid: EllipsoidSpec,
                    camera: CameraSpec, patch_radius=None, max_partners=4, points=None) -> dict:
    """Pair sets feeding a sparse prior: the grid relations, plus ``mv`` for kind ``mv``."""
    rels = {r: build_grid_pairs(layout, r) for r in GRID_RELATIONS}
    if kind == "mv":
        rels["mv"] = build_mv_pairs(layout, ellipsoid, camera, patch_radius, max_partners,
                                    points=points)
    return rels


def build_prior(method: Method, sources: list[MultiViewModel], world: World,
                spec: ProtocolSpec, data_views=()) -> SigmaMatrix | None:
    lay = world.layout
    if method.kind == "none":
        return None
    if method.kind == "dense":
        sigma = compute_dense_sigma(sources)
    else:
        rels = prior_relations(method.kind, lay, world.cfg.ellipsoid, world.cfg.camera,
                               spec.patch_radius, spec.max_partners, world.points)
        sigma = build_sparse_prior(sources, rels, method.kind)
    if method.mask != "none":
        sigma = apply_mask(sigma, MaskSpec(method.mask, data_views))
    return sigma


def factor_method(kind: str) -> str:
    """Default factorization: eigen for ``sv`` (block-structured, small), Cholesky otherwise."""
    return "eigen" if kind == "sv" else "cholesky"


def _factor_for(method: Method, sigma):
    if sigma is None:
        return None, None
    reg = build_regularizer(sigma)
    return reg, factorize(reg, factor_method(method.kind))


def evaluate_model(model: MultiViewModel, maps, gts, iou_threshold: float = 0.5) -> EvalReport:
    dets = [d for fm in maps for d in detect(model, fm)]
    return evaluate(dets, gts, model.layout.views, iou_threshold)


def run_protocol(spec: ProtocolSpec, world: World, progress=None) -> list[dict]:
    """Run every repetition and return result rows.

    Row keys: ``protocol, method, k, repetition, measure, value``.  Per
    repetition rows come first (repetition ``0..R-1``), then ``mean`` and
    ``std`` (population) rows per (method, k, measure).  Sparse protocols add
    ``VP-withheld`` and ``diag-mass`` measures and a summed confusion matrix
    per method in ``rows[i]['confusion']`` of the mean rows.
    """
    lay = world.layout
    settings = spec.settings(lay)
    max_pos = [max(counts[v] for _, counts in settings) for v in range(lay.views)]
    withheld = [v for v in range(lay.views) if spec.kind == "sparse_kshot" and max_pos[v] == 0]
    data_views = spec.data_views(lay)
    rows = []
    conf_sum: dict = {}
    for rep, child in enumerate(np.random.SeedSequence(spec.seed).spawn(spec.repetitions)):
        data_seed, src_seed, train_seed = (int(s.generate_state(1)[0]) for s in child.spawn(3))
        rng = np.random.default_rng(data_seed)
        ds = sample_dataset(world, spec.source_pool, max_pos, spec.neg_count, spec.n_maps,
                            spec.per_map, rng, spec.map_shape)
        need_sources = any(m.kind != "none" for m in spec.methods)
        sources = bootstrap_sources(ds.source_train, lay, spec.n_sources, spec.source_k,
                                    src_seed, spec.trainer) if need_sources else []
        for method in spec.methods:
            sigma = build_prior(method, sources, world, spec, data_views)
            reg, fac = _factor_for(method, sigma)
            for label, counts in settings:
                sub = first_k(ds.target_train, lay, counts)
                cfg = replace(spec.trainer, seed=train_seed)
                model = train_transformed(stack_examples(sub, lay), fac, cfg, meta=method.name)
                rep_ = evaluate_model(model, ds.test_maps, ds.test_gts, spec.iou_threshold)
                values = rep_.as_row()
                if withheld:
                    values["VP-withheld"] = view_accuracy(rep_.confusion, withheld)
                    values["diag-mass"] = float(np.trace(rep_.confusion) / max(rep_.confusion.sum(), 1))
                    key = (method.name, label)
                    conf_sum[key] = conf_sum.get(key, 0) + rep_.confusion
                for measure, value in values.items():
                    rows.append(dict(protocol=spec.kind, method=method.name, k=label,
                                     repetition=str(rep), measure=measure, value=float(value)))
                if progress:
                    progress(rep, method, label, values)
    rows.extend(_aggregate(rows, conf_sum))
    return rows


def first_k(pool: WindowSet, layout: TemplateLayout, counts) -> WindowSet:
    """First ``counts[v]`` positives of each view (pool order) plus all negatives."""
    keep = []
    for v, k in enumerate(counts):
        keep.append(np.flatnonzero(pool.views == v)[:k])
    keep.append(pool.negatives)
    return pool.subset(np.concatenate(keep))


def _aggregate(rows, conf_sum):
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["protocol"], r["method"], r["k"], r["measure"]), []).append(r["value"])
    out = []
    for (proto, method, k, measure), vals in groups.items():
        arr = np.array(vals, dtype=float)
        finite = arr[np.isfinite(arr)]
        mean = float(finite.mean()) if len(finite) else float("nan")
        std = float(finite.std()) if len(finite) else float("nan")
        row = dict(protocol=proto, method=method, k=k, repetition="mean", measure=measure, value=mean)
        if (method, k) in conf_sum and measure == "VP":
            row["confusion"] = conf_sum[(method, k)]
        out.append(row)
        out.append(dict(protocol=proto, method=method, k=k, repetition="std", measure=measure, value=std))
    return out


def summary(rows, measure: str, method: str, k: str, stat: str = "mean") -> float:
    for r in rows:
        if (r["measure"], r["method"], r["k"], r["repetition"]) == (measure, method, k, stat):
            return r["value"]
    raise KeyError((measure, method, k, stat))
