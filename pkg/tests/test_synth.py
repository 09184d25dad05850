from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from mvprior.geometry import EllipsoidSpec, build_mv_pairs
from mvprior.svm import WindowSet
from mvprior.synth import (Method, ProtocolError, ProtocolSpec, WorldConfig, first_k,
                           generate_world, run_protocol, sample_dataset, sample_maps,
                           sample_windows, summary)

SPHERE = EllipsoidSpec(1.0, 1.0, 1.0)


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldConfig())


def test_paired_cells_within_lipschitz_bound():
    w = generate_world(WorldConfig(ellipsoid=SPHERE, sigma_view=0.0, seed=5))
    lay = w.layout
    pairs = build_mv_pairs(lay, SPHERE, w.cfg.camera, points=w.points)
    assert len(pairs)
    cells = w.models["target"].templates().reshape(lay.n_cells(), -1)
    pts = w.points.reshape(lay.n_cells(), 3)
    lip = w.fields["target"].lipschitz()
    tau = max(np.linalg.norm(pts[j] - pts[k]) for j, k in pairs)
    for j, k in pairs:
        d = np.linalg.norm(cells[j] - cells[k])
        assert d <= lip * np.linalg.norm(pts[j] - pts[k]) + 1e-12
        assert d <= lip * tau + 1e-12


def test_lipschitz_bound_holds_on_random_points(world):
    f = world.fields["source"]
    g = np.random.default_rng(0)
    u = g.standard_normal((500, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    p = u * world.cfg.ellipsoid.axes
    q = p + 1e-3 * g.standard_normal(p.shape)
    ratio = np.linalg.norm(f(p) - f(q), axis=1) / np.linalg.norm(p - q, axis=1)
    assert ratio.max() <= f.lipschitz()


def test_same_seed_same_world(world):
    again = generate_world(WorldConfig())
    for name, m in world.models.items():
        assert again.models[name].params.tobytes() == m.params.tobytes()
    other = generate_world(WorldConfig(seed=1))
    assert other.models["target"].params.tobytes() != world.models["target"].params.tobytes()


def test_constant_field_makes_views_identical():
    w = generate_world(WorldConfig(band=0.0, sigma_view=0.0))
    T = w.models["source"].templates()
    hit = ~np.isnan(w.points[..., 0])
    vals = T[hit]
    np.testing.assert_allclose(vals, np.broadcast_to(vals[0], vals.shape), atol=1e-12)
    assert not np.any(T[~hit])


def test_world_categories(world):
    assert set(world.category_names()) == {"source", "target", "target/0", "target/1", "target/2"}
    src = world.models["source"].params
    tgt = world.models["target"].params
    cos = src @ tgt / (np.linalg.norm(src) * np.linalg.norm(tgt))
    assert 0.5 < cos < 1.0


def test_zero_positive_counts(world):
    ws = sample_windows(world, "target", [0] * 8, 5, np.random.default_rng(0))
    assert len(ws.positives) == 0 and len(ws.negatives) == 5


def test_noise_free_positives_equal_templates(world):
    w = replace(world, cfg=replace(world.cfg, sigma_pos=0.0))
    ws = sample_windows(w, "target", 2, 0, np.random.default_rng(0))
    T = world.models["target"].templates()
    for x, v in zip(ws.features, ws.views):
        np.testing.assert_array_equal(x, T[v])


def test_embedded_instances_match_annotations(world):
    maps, gts = sample_maps(world, "target", 6, 5, np.random.default_rng(1))
    for fm in maps:
        boxes = [g for g in gts if g.image_id == fm.image_id]
        assert len(boxes) == 5
        for a in boxes:
            for b in boxes:
                if a is not b:
                    ax, ay, aw, ah = a.bbox
                    bx, by, _, _ = b.bbox
                    assert abs(ax - bx) >= aw or abs(ay - by) >= ah   # no overlap
    # recover each instance exactly with noise-free sampling
    quiet = replace(world, cfg=replace(world.cfg, sigma_pos=0.0, sigma_neg=0.0))
    maps, gts = sample_maps(quiet, "target", 2, 4, np.random.default_rng(2))
    T = world.models["target"].templates()
    for g in gts:
        fm = next(m for m in maps if m.image_id == g.image_id)
        c, r = int(g.bbox[0] // 8), int(g.bbox[1] // 8)
        np.testing.assert_array_equal(fm.data[r:r + 4, c:c + 6], T[g.view])
    assert sum(np.count_nonzero(np.any(m.data != 0, axis=2)) for m in maps) <= len(gts) * 24


def test_too_many_instances_rejected(world):
    with pytest.raises(ProtocolError):
        sample_maps(world, "target", 1, 50, np.random.default_rng(0))


def test_first_k_is_nested(world):
    ds = sample_dataset(world, 4, 6, 7, 1, 1, np.random.default_rng(0))
    a = first_k(ds.target_train, world.layout, [2] * 8)
    b = first_k(ds.target_train, world.layout, [5] * 8)
    assert len(a.negatives) == len(b.negatives) == 7
    for v in range(8):
        fa = a.features[a.views == v]
        fb = b.features[b.views == v]
        np.testing.assert_array_equal(fa, fb[:2])


def test_window_set_validation():
    with pytest.raises(Exception):
        WindowSet(np.zeros((2, 1, 1, 1)), [0])


# -- protocols ----------------------------------------------------------------------------

SMALL = dict(n_maps=4, per_map=6, source_pool=15, repetitions=1)


def test_plain_pipeline_smoke(world):
    spec = ProtocolSpec(ks=("all",), methods=(Method("none"),), target_pool=10, **SMALL)
    rows = run_protocol(spec, world)
    ap = summary(rows, "AP", "SVM", "all")
    assert 0.0 < ap <= 1.0
    assert {r["measure"] for r in rows} == {"AP", "VP", "AP+VP-D", "AP+VP-C"}


def test_protocol_reproducible(world):
    spec = ProtocolSpec(ks=(1, 3), methods=(Method("none"), Method("sv"), Method("dense", "nb2all")),
                        **SMALL)
    a, b = run_protocol(spec, world), run_protocol(spec, world)
    assert [(r["method"], r["k"], r["measure"], r["value"]) for r in a] == \
           [(r["method"], r["k"], r["measure"], r["value"]) for r in b]


def test_protocol_rejects_infeasible(world):
    with pytest.raises(ProtocolError):
        ProtocolSpec(kind="sparse_kshot")
    with pytest.raises(ProtocolError):
        ProtocolSpec(kind="sparse_kshot", availability=(1, 0)).settings(world.layout)
    with pytest.raises(ProtocolError):
        ProtocolSpec(ks=(50,), target_pool=20).settings(world.layout)


@pytest.fixture(scope="module")
def kshot_rows(world):
    spec = ProtocolSpec(ks=(1, 10), methods=(Method("none"), Method("dense")), repetitions=5)
    return run_protocol(spec, world)


def test_dense_prior_raises_vp_at_one_shot(kshot_rows):
    assert summary(kshot_rows, "VP", "SVM-Sigma", "1") > summary(kshot_rows, "VP", "SVM", "1")


def test_more_data_never_hurts_without_prior(kshot_rows):
    assert summary(kshot_rows, "AP", "SVM", "10") >= summary(kshot_rows, "AP", "SVM", "1")


@pytest.fixture(scope="module")
def zero_shot_confusion(world):
    spec = ProtocolSpec(kind="sparse_kshot", availability=(1, 0, 1, 0, 1, 0, 1, 0),
                        methods=(Method("none"),), repetitions=5, n_maps=16)
    rows = run_protocol(spec, world)
    vp = summary(rows, "VP-withheld", "SVM", "sparse")
    conf = next(r["confusion"] for r in rows if "confusion" in r)
    return vp, conf


ZERO_SHOT_REASON = ("without a prior every withheld-view template is trained on negatives only, so "
                    "withheld instances are picked up by the neighboring data-view templates and "
                    "labelled with those views; see the decision ledger")


@pytest.mark.xfail(strict=True, reason=ZERO_SHOT_REASON)
def test_zero_shot_without_prior_is_chance(zero_shot_confusion):
    vp, _ = zero_shot_confusion
    assert abs(vp - 1 / 8) <= 0.10


@pytest.mark.xfail(strict=True, reason=ZERO_SHOT_REASON)
def test_zero_shot_predictions_uniform(zero_shot_confusion):
    _, conf = zero_shot_confusion
    sub = conf[[1, 3, 5, 7]]
    assert sub.sum() >= 200
    assert stats.chisquare(sub.sum(axis=0)).pvalue >= 0.01
