import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvprior.geometry import CellPairSet, build_grid_pairs
from mvprior.model import MultiViewModel, TemplateLayout
from mvprior.priors import (MaskSpec, PriorError, SigmaMatrix, apply_mask, assemble_sparse_sigma,
                            build_sparse_prior, compute_block_covariance, compute_dense_sigma,
                            load_prior, read_prior_header, save_prior, view_block_mask)


def models(layout, n, seed):
    g = np.random.default_rng(seed)
    return [MultiViewModel(layout, g.standard_normal(layout.n_params)) for _ in range(n)]


def cell_vec(model, j):
    L = model.layout.cell_dim
    return np.array([model.params[j * L + c] for c in range(L)])


def oracle_block(sources, pairs):
    """Double loop over sources and pairs, scalar accumulation."""
    L = sources[0].layout.cell_dim
    mean = [0.0] * L
    count = 0
    for s in sources:
        for j, _ in pairs:
            w = cell_vec(s, j)
            for a in range(L):
                mean[a] += w[a]
            count += 1
    mean = [x / count for x in mean]
    out = np.zeros((L, L))
    for s in sources:
        for j, k in pairs:
            wj, wk = cell_vec(s, j), cell_vec(s, k)
            for a in range(L):
                for b in range(L):
                    out[a, b] += (wj[a] - mean[a]) * (wk[b] - mean[b])
    return out / (len(sources) * len(pairs))


def oracle_dense(sources):
    lay = sources[0].layout
    P = lay.n_params
    out = np.zeros((P, P))
    for s in sources:
        for p in range(P):
            for q in range(P):
                out[p, q] += s.params[p] * s.params[q]
    out /= len(sources)
    for b in range(lay.n_appearance, P):
        out[b, :] = 0.0
        out[:, b] = 0.0
    return out


def oracle_assemble(layout, blocks, pairsets):
    P, L = layout.n_params, layout.cell_dim
    out = np.zeros((P, P))
    for rel, pairs in pairsets.items():
        S = blocks[rel]
        done = set()
        for j, k in pairs:
            if (k, j) in done:
                continue
            done.add((j, k))
            for a in range(L):
                for b in range(L):
                    if j == k:
                        out[j * L + a, j * L + b] += 0.5 * (S[a, b] + S[b, a])
                    else:
                        out[j * L + a, k * L + b] += S[a, b]
                        out[k * L + b, j * L + a] += S[a, b]
    return out


# -- block covariance ---------------------------------------------------------------------

def test_constant_cells_give_zero_block():
    lay = TemplateLayout(2, 2, 2, 3)
    p = np.concatenate([np.tile([1.0, -2.0, 0.5], lay.n_cells()), np.zeros(2)])
    srcs = [MultiViewModel(lay, p)] * 3
    blk = compute_block_covariance(srcs, build_grid_pairs(lay, "h"))
    assert not np.any(blk.matrix)


def test_single_self_pair_is_zero():
    lay = TemplateLayout(1, 2, 2, 2)
    blk = compute_block_covariance(models(lay, 1, 0), CellPairSet("cell", ((3, 3),)))
    np.testing.assert_array_equal(blk.matrix, 0.0)


def test_hand_picked_block_matches_double_loop():
    lay = TemplateLayout(1, 1, 3, 2, per_view_bias=False)
    s1 = MultiViewModel(lay, [1.0, 2.0, 3.0, 5.0, -1.0, 0.0])
    s2 = MultiViewModel(lay, [0.0, 1.0, 2.0, -2.0, 4.0, 1.0])
    pairs = CellPairSet("h", ((0, 1), (1, 2)))
    blk = compute_block_covariance([s1, s2], pairs)
    # first elements: cells 0 and 1 of both sources -> mean (1.5, 1.5)
    np.testing.assert_array_equal(blk.mean, [1.5, 1.5])
    np.testing.assert_array_equal(blk.matrix, oracle_block([s1, s2], pairs.pairs))
    assert blk.n_pairs == 2


def test_mean_over_both():
    lay = TemplateLayout(1, 1, 2, 1, per_view_bias=False)
    s = MultiViewModel(lay, [1.0, 3.0])
    blk = compute_block_covariance([s], CellPairSet("h", ((0, 1),)), mean_over="both")
    assert blk.mean[0] == 2.0
    assert blk.matrix[0, 0] == pytest.approx(-1.0)


@given(st.integers(0, 2**31), st.integers(1, 4), st.sampled_from(["h", "v", "d1", "d2", "cell"]))
def test_block_covariance_oracle(seed, N, rel):
    lay = TemplateLayout(2, 3, 3, 2)
    srcs = models(lay, N, seed)
    ps = build_grid_pairs(lay, rel)
    np.testing.assert_allclose(compute_block_covariance(srcs, ps).matrix,
                               oracle_block(srcs, ps.pairs), rtol=0, atol=1e-12)


def test_block_covariance_errors():
    lay = TemplateLayout(1, 2, 2, 1)
    with pytest.raises(PriorError):
        compute_block_covariance(models(lay, 2, 0), CellPairSet("h", ()))
    with pytest.raises(PriorError):
        compute_block_covariance(models(lay, 1, 0) + models(TemplateLayout(1, 2, 2, 2), 1, 0),
                                 build_grid_pairs(lay, "h"))
    with pytest.raises(PriorError):
        compute_block_covariance([], build_grid_pairs(lay, "h"))


# -- sparse assembly ----------------------------------------------------------------------

def test_no_relations_is_zero():
    lay = TemplateLayout(2, 2, 2, 2)
    assert not np.any(assemble_sparse_sigma(lay, {}, {}).to_dense())


def test_identity_cell_block():
    lay = TemplateLayout(2, 2, 2, 3)
    sig = assemble_sparse_sigma(lay, {"cell": np.eye(3)}, {"cell": build_grid_pairs(lay, "cell")})
    D = sig.to_dense()
    expect = np.diag(np.concatenate([np.ones(lay.n_appearance), np.zeros(lay.views)]))
    np.testing.assert_array_equal(D, expect)


def test_h_plus_cell_on_two_cells_hand_assembled():
    lay = TemplateLayout(1, 1, 2, 2, per_view_bias=False)
    Sh = np.array([[1.0, 2.0], [3.0, 4.0]])
    Sc = np.array([[5.0, 6.0], [6.0, 7.0]])
    sig = assemble_sparse_sigma(lay, {"h": Sh, "cell": Sc},
                                {"h": build_grid_pairs(lay, "h"), "cell": build_grid_pairs(lay, "cell")})
    expect = np.zeros((4, 4))
    expect[0:2, 0:2] = Sc
    expect[2:4, 2:4] = Sc
    expect[0:2, 2:4] = Sh
    expect[2:4, 0:2] = Sh.T
    np.testing.assert_array_equal(sig.to_dense(), expect)


def test_assembly_rejects_missing_block_and_bad_pairs():
    lay = TemplateLayout(1, 1, 2, 1)
    with pytest.raises(PriorError):
        assemble_sparse_sigma(lay, {}, {"h": build_grid_pairs(lay, "h")})
    with pytest.raises(PriorError):
        assemble_sparse_sigma(lay, {"x": np.eye(1)}, {"x": CellPairSet("h", ((0, 2),))})


def _symmetric_mv_like(lay, g, n):
    cpv = lay.cells_per_view
    pairs = set()
    while len(pairs) < n:
        j = int(g.integers(lay.n_cells()))
        v = j // cpv
        k = ((v + 1) % lay.views) * cpv + int(g.integers(cpv))
        pairs |= {(j, k), (k, j)}
    return CellPairSet("mv", tuple(sorted(pairs)))


@given(st.integers(0, 2**31), st.integers(1, 5))
def test_sparse_prior_oracle(seed, N):
    """P <= 200: assembled matrix equals the naive double loop, and is symmetric."""
    lay = TemplateLayout(3, 2, 3, 3)
    assert lay.n_params <= 200
    g = np.random.default_rng(seed)
    srcs = models(lay, N, seed)
    rels = {r: build_grid_pairs(lay, r) for r in ("h", "v", "d1", "d2", "cell")}
    rels["mv"] = _symmetric_mv_like(lay, g, 10)
    sig = build_sparse_prior(srcs, rels, "mv")
    blocks = {r: oracle_block(srcs, ps.pairs) for r, ps in rels.items()}
    ref = oracle_assemble(lay, blocks, {r: ps.pairs for r, ps in rels.items()})
    D = sig.to_dense()
    np.testing.assert_allclose(D, ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(D, D.T, rtol=0, atol=1e-12)
    assert not np.any(D[lay.bias_mask()]) and not np.any(D[:, lay.bias_mask()])


def test_sparse_prior_skips_empty_relations():
    lay = TemplateLayout(2, 1, 1, 2)
    rels = {r: build_grid_pairs(lay, r) for r in ("h", "v", "cell")}
    sig = build_sparse_prior(models(lay, 3, 1), rels, "sv")
    assert set(sig.blocks) == {(0, 0), (1, 1)}


# -- dense --------------------------------------------------------------------------------

def test_dense_single_source_is_outer_product():
    lay = TemplateLayout(2, 1, 2, 2)
    (m,) = models(lay, 1, 3)
    w = np.array(m.params)
    w[lay.bias_mask()] = 0.0
    sig = compute_dense_sigma([m])
    np.testing.assert_allclose(sig.to_dense(), np.outer(w, w), atol=1e-15)
    assert sig.rank() == 1 and sig.n_sources == 1


def test_dense_signs_cancel():
    lay = TemplateLayout(2, 1, 2, 2)
    (m,) = models(lay, 1, 4)
    neg = MultiViewModel(lay, -m.params)
    np.testing.assert_allclose(compute_dense_sigma([m, neg]).dense, compute_dense_sigma([m]).dense,
                               atol=1e-15)


@given(st.integers(0, 2**31), st.integers(1, 6))
def test_dense_oracle_rank_and_psd(seed, N):
    lay = TemplateLayout(2, 2, 2, 3)
    srcs = models(lay, N, seed)
    sig = compute_dense_sigma(srcs)
    D = sig.to_dense()
    np.testing.assert_allclose(D, oracle_dense(srcs), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(D, D.T)
    ev = np.linalg.eigvalsh(D)
    assert ev.min() >= -1e-9 * ev.max()
    assert np.sum(ev > 1e-9 * np.trace(D)) <= N
    assert sig.rank() <= N


# -- masks --------------------------------------------------------------------------------

def test_mask_none_is_identity():
    lay = TemplateLayout(3, 1, 2, 2)
    sig = compute_dense_sigma(models(lay, 3, 0))
    assert apply_mask(sig, MaskSpec("none")) is sig


def test_nb2all_two_views_keeps_everything():
    lay = TemplateLayout(2, 1, 2, 2)
    sig = compute_dense_sigma(models(lay, 3, 0))
    np.testing.assert_array_equal(apply_mask(sig, MaskSpec("nb2all")).dense, sig.dense)


def test_td2nd_enumeration():
    lay = TemplateLayout(4, 1, 1, 1)
    m = MaskSpec("td2nd", (0,))
    kept = {(i, j) for i, j in itertools.product(range(4), repeat=2) if m.keep(i, j, lay)}
    expect = {(0, 1), (0, 2), (0, 3), (1, 0), (2, 0), (3, 0)} | {(i, i) for i in range(4)}
    assert kept == expect


def test_td2all_and_nb2all_predicates():
    lay = TemplateLayout(6, 1, 1, 1)
    td = MaskSpec("td2all", (0, 3))
    nb = MaskSpec("nb2all")
    for i, j in itertools.product(range(6), repeat=2):
        assert td.keep(i, j, lay) == (i == j or i in (0, 3) or j in (0, 3))
        assert nb.keep(i, j, lay) == (min(abs(i - j), 6 - abs(i - j)) <= 1)


def test_mask_needs_data_views():
    for v in ("td2nd", "td2all"):
        with pytest.raises(PriorError):
            MaskSpec(v, ())


masks = st.sampled_from([MaskSpec("nb2all"), MaskSpec("td2nd", (0, 2)), MaskSpec("td2all", (1,)),
                         MaskSpec("td2nd", (3,))])


@given(st.integers(0, 2**31), masks, st.booleans())
def test_mask_idempotent_and_symmetric(seed, mask, dense):
    lay = TemplateLayout(4, 2, 2, 2)
    srcs = models(lay, 3, seed)
    if dense:
        sig = compute_dense_sigma(srcs)
    else:
        rels = {r: build_grid_pairs(lay, r) for r in ("h", "v", "cell")}
        rels["mv"] = _symmetric_mv_like(lay, np.random.default_rng(seed), 8)
        sig = build_sparse_prior(srcs, rels, "mv")
    once = apply_mask(sig, mask)
    twice = apply_mask(once, mask)
    np.testing.assert_array_equal(once.to_dense(), twice.to_dense())
    D = once.to_dense()
    np.testing.assert_allclose(D, D.T, atol=1e-12)
    # dense masking equals elementwise product with the slot mask
    S = view_block_mask(lay, mask)
    np.testing.assert_allclose(D, S * sig.to_dense(), atol=1e-12)


# -- persistence --------------------------------------------------------------------------

def test_prior_roundtrip_dense(tmp_path):
    lay = TemplateLayout(3, 2, 2, 2)
    sig = apply_mask(compute_dense_sigma(models(lay, 4, 0)), MaskSpec("td2all", (1,)))
    save_prior(sig, tmp_path / "p.mvp")
    head = read_prior_header(tmp_path / "p.mvp")
    assert head["kind"] == "dense" and head["mask"] == "td2all" and head["n_sources"] == 4
    assert head["rank"] == sig.rank()
    back = load_prior(tmp_path / "p.mvp", lay, (1,))
    assert back.dense.tobytes() == sig.dense.tobytes()


def test_prior_roundtrip_sparse(tmp_path):
    lay = TemplateLayout(3, 2, 2, 2)
    rels = {r: build_grid_pairs(lay, r) for r in ("h", "v", "cell")}
    sig = build_sparse_prior(models(lay, 2, 0), rels, "sv")
    save_prior(sig, tmp_path / "p.mvp")
    back = load_prior(tmp_path / "p.mvp", lay)
    assert back.kind == "sv"
    np.testing.assert_array_equal(back.to_dense(), sig.to_dense())


def test_prior_layout_mismatch(tmp_path):
    lay = TemplateLayout(3, 2, 2, 2)
    save_prior(compute_dense_sigma(models(lay, 2, 0)), tmp_path / "p.mvp")
    with pytest.raises(PriorError):
        load_prior(tmp_path / "p.mvp", TemplateLayout(3, 2, 3, 2))
    raw = (tmp_path / "p.mvp").read_bytes()
    (tmp_path / "q.mvp").write_bytes(b"XX" + raw[2:])
    with pytest.raises(PriorError):
        read_prior_header(tmp_path / "q.mvp")
    (tmp_path / "r.mvp").write_bytes(raw[:-8])
    with pytest.raises(PriorError):
        load_prior(tmp_path / "r.mvp", lay)


def test_sigma_matrix_kind_checked():
    with pytest.raises(PriorError):
        SigmaMatrix(TemplateLayout(1, 1, 1, 1), "bogus", blocks={})
