"""Prior correlation matrices learned from source models.

Three kinds are produced:

* ``sv``: within-view neighbor structure (h, v, d1, d2, cell blocks),
* ``mv``: ``sv`` plus cross-view blocks for cells that meet on the surface,
* ``dense``: second-moment matrix of the stacked source parameter vectors.

Sparse kinds are stored as a map of ``L x L`` blocks keyed by flat cell
indices; dense kinds as a full ``P x P`` array.  Bias slots are never coupled.

Prior file layout (little-endian)::

    0   8   magic b"MVTPRIOR"
    8   4   uint32 version (1)
    12  1   uint8 kind (0 sv, 1 mv, 2 dense)
    13  1   uint8 mask variant (0 none, 1 td2nd, 2 td2all, 3 nb2all)
    14  4   uint32 P
    18  4   uint32 source count N
    22  4   uint32 numerical rank
    26  4   uint32 L
    30  4   uint32 block count B (0 for dense)
    34  ..  dense: P*P float64 row-major
            sparse: B records of (uint32 j, uint32 k, L*L float64)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CellPairSet
from .model import MultiViewModel, TemplateLayout

PRIOR_MAGIC = b"MVTPRIOR"
PRIOR_VERSION = 1
KINDS = ("sv", "mv", "dense")
MASKS = ("none", "td2nd", "td2all", "nb2all")
_HEADER = struct.Struct("<8sIBBIIIII")


class PriorError(ValueError):
    pass


@dataclass(frozen=True)
class BlockCovariance:
    relation: str
    matrix: np.ndarray
    n_pairs: int
    mean: np.ndarray


@dataclass(frozen=True)
class MaskSpec:
    variant: str = "none"
    data_views: tuple = ()

    def __post_init__(self):
        if self.variant not in MASKS:
            raise PriorError(f"unknown mask variant {self.variant!r}")
        if self.variant in ("td2nd", "td2all") and not self.data_views:
            raise PriorError(f"mask {self.variant} needs a nonempty data_views set")
        object.__setattr__(self, "data_views", tuple(sorted(set(int(v) for v in self.data_views))))

    def keep(self, i: int, j: int, layout: TemplateLayout) -> bool:
        """Whether view-block ``(i, j)`` survives the mask."""
        D = self.data_views
        if self.variant == "none":
            return True
        if self.variant == "td2nd":
            return i == j or ((i in D) != (j in D))
        if self.variant == "td2all":
            return i == j or i in D or j in D
        return layout.cyclic_distance(i, j) <= 1


@dataclass
class SigmaMatrix:
    layout: TemplateLayout
    kind: str
    dense: np.ndarray | None = None
    blocks: dict = field(default_factory=dict)
    n_sources: int = 0
    mask: MaskSpec = MaskSpec()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PriorError(f"unknown prior kind {self.kind!r}")

    @property
    def P(self) -> int:
        return self.layout.n_params

    def to_dense(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense
        L = self.layout.cell_dim
        out = np.zeros((self.P, self.P))
        for (j, k), block in self.blocks.items():
            out[j * L:(j + 1) * L, k * L:(k + 1) * L] += block
        return out

    def rank(self, rtol: float = 1e-9) -> int:
        ev = np.linalg.eigvalsh(self.to_dense())
        scale = max(np.sum(np.abs(ev)), np.finfo(float).tiny)
        return int(np.sum(np.abs(ev) > rtol * scale))


def _check_layouts(sources):
    if not sources:
        raise PriorError("need at least one source model")
    layout = sources[0].layout
    for s in sources[1:]:
        if s.layout != layout:
            raise PriorError("source models have different layouts")
    return layout


def _cells(model: MultiViewModel) -> np.ndarray:
    lay = model.layout
    return model.params[:lay.n_appearance].reshape(lay.n_cells(), lay.cell_dim)


def compute_block_covariance(sources: list[MultiViewModel], pairs: CellPairSet,
                             mean_over: str = "first") -> BlockCovariance:
    """Cross-covariance of the cells linked by ``pairs``, pooled over sources.

    The sum of centered outer products is divided by ``N * |pairs|`` so block
    magnitudes do not depend on template size; the prior is later rescaled by
    its top eigenvalue anyway.  ``mean_over="first"`` centers with the mean of
    the first cell of each pair, ``"both"`` with the mean of both cells.
    """
    _check_layouts(sources)
    if len(pairs) == 0:
        raise PriorError(f"empty pair set for relation {pairs.relation!r}")
    idx = np.asarray(pairs.pairs)
    cells = np.stack([_cells(s) for s in sources])           # (N, cells, L)
    first, second = cells[:, idx[:, 0]], cells[:, idx[:, 1]]  # (N, pairs, L)
    if mean_over == "first":
        mean = first.reshape(-1, first.shape[-1]).mean(axis=0)
    elif mean_over == "both":
        mean = np.concatenate([first, second], axis=1).reshape(-1, first.shape[-1]).mean(axis=0)
    else:
        raise PriorError(f"mean_over must be 'first' or 'both', got {mean_over!r}")
    a = (first - mean).reshape(-1, first.shape[-1])
    b = (second - mean).reshape(-1, first.shape[-1])
    sigma = a.T @ b / (len(sources) * len(pairs))
    return BlockCovariance(pairs.relation, sigma, len(pairs), mean)


def assemble_sparse_sigma(layout: TemplateLayout, blocks: dict, pairsets: dict,
                          kind: str = "mv") -> SigmaMatrix:
    """Place each relation's block at every pair of that relation.

    ``blocks`` and ``pairsets`` are keyed by relation tag.  A pair ``(j, k)``
    puts ``S`` at block ``(j, k)`` and ``S^T`` at ``(k, j)``; a self pair puts
    ``(S + S^T) / 2`` once.  Pair sets that already contain both orientations
    (mv) are reduced to one orientation first.
    """
    out: dict = {}
    for rel, pairs in pairsets.items():
        if rel not in blocks:
            raise PriorError(f"no block computed for relation {rel!r}")
        S = blocks[rel].matrix if isinstance(blocks[rel], BlockCovariance) else np.asarray(blocks[rel])
        seen = set()
        n_cells = layout.n_cells()
        for j, k in pairs:
            if not (0 <= j < n_cells and 0 <= k < n_cells):
                raise PriorError(f"pair {(j, k)} touches a non-appearance slot")
            if (k, j) in seen:
                continue
            seen.add((j, k))
            if j == k:
                _add(out, (j, j), 0.5 * (S + S.T))
            else:
                _add(out, (j, k), S)
                _add(out, (k, j), S.T)
    return SigmaMatrix(layout, kind, blocks=out)


def _add(store: dict, key, block):
    if key in store:
        store[key] = store[key] + block
    else:
        store[key] = np.array(block, dtype=float)


def compute_dense_sigma(sources: list[MultiViewModel]) -> SigmaMatrix:
    layout = _check_layouts(sources)
    W = np.stack([s.params for s in sources])
    sigma = W.T @ W / len(sources)
    bias = layout.bias_mask()
    sigma[bias, :] = 0.0
    sigma[:, bias] = 0.0
    sigma = 0.5 * (sigma + sigma.T)
    return SigmaMatrix(layout, "dense", dense=sigma, n_sources=len(sources))


def view_block_mask(layout: TemplateLayout, mask: MaskSpec) -> np.ndarray:
    """Elementwise 0/1 matrix ``S`` of the mask over all ``P`` slots."""
    owner = layout.slot_views()
    keep = np.array([[mask.keep(i, j, layout) for j in range(layout.views)]
                     for i in range(layout.views)])
    return keep[owner][:, owner].astype(float)


def apply_mask(sigma: SigmaMatrix, mask: MaskSpec) -> SigmaMatrix:
    lay = sigma.layout
    for v in mask.data_views:
        if not 0 <= v < lay.views:
            raise PriorError(f"data view {v} out of range")
    if mask.variant == "none":
        return sigma
    if sigma.dense is not None:
        M = view_block_mask(lay, mask) * sigma.dense
        return SigmaMatrix(lay, sigma.kind, dense=0.5 * (M + M.T),
                           n_sources=sigma.n_sources, mask=mask)
    cpv = lay.cells_per_view
    kept = {key: blk for key, blk in sigma.blocks.items()
            if mask.keep(key[0] // cpv, key[1] // cpv, lay)}
    return SigmaMatrix(lay, sigma.kind, blocks=kept, n_sources=sigma.n_sources, mask=mask)


def build_sparse_prior(sources: list[MultiViewModel], relations: dict,
                       kind: str, mean_over: str = "first") -> SigmaMatrix:
    """Compute one block per relation from ``sources`` and assemble them.

    ``relations`` maps relation tag to its pair set on the shared layout.
    Relations with no pairs (e.g. ``h`` on a one-column template) are skipped.
    """
    layout = _check_layouts(sources)
    live = {rel: ps for rel, ps in relations.items() if len(ps)}
    blocks = {rel: compute_block_covariance(sources, ps, mean_over) for rel, ps in live.items()}
    sigma = assemble_sparse_sigma(layout, blocks, live, kind)
    sigma.n_sources = len(sources)
    return sigma


def save_prior(sigma: SigmaMatrix, path) -> None:
    lay = sigma.layout
    L = lay.cell_dim
    rank = sigma.rank()
    nblocks = 0 if sigma.dense is not None else len(sigma.blocks)
    header = _HEADER.pack(PRIOR_MAGIC, PRIOR_VERSION, KINDS.index(sigma.kind),
                          MASKS.index(sigma.mask.variant), lay.n_params, sigma.n_sources,
                          rank, L, nblocks)
    parts = [header]
    if sigma.dense is not None:
        parts.append(np.ascontiguousarray(sigma.dense, dtype="<f8").tobytes())
    else:
        for (j, k) in sorted(sigma.blocks):
            parts.append(struct.pack("<II", j, k))
            parts.append(np.ascontiguousarray(sigma.blocks[(j, k)], dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_prior_header(path) -> dict:
    data = Path(path).read_bytes()[:_HEADER.size]
    if len(data) < _HEADER.size:
        raise PriorError("truncated prior header")
    magic, version, kind, mask, P, N, rank, L, nblocks = _HEADER.unpack(data)
    if magic != PRIOR_MAGIC:
        raise PriorError(f"bad prior magic {magic!r}")
    if version != PRIOR_VERSION:
        raise PriorError(f"unsupported prior version {version}")
    return dict(kind=KINDS[kind], mask=MASKS[mask], P=P, n_sources=N, rank=rank,
                cell_dim=L, n_blocks=nblocks)


def load_prior(path, layout: TemplateLayout, data_views=()) -> SigmaMatrix:
    """Load a prior for ``layout``; the file stores only P, so the caller supplies the layout."""
    info = read_prior_header(path)
    if info["P"] != layout.n_params or info["cell_dim"] != layout.cell_dim:
        raise PriorError(
            f"prior dimension P={info['P']} does not match layout P={layout.n_params}")
    data = Path(path).read_bytes()
    off = _HEADER.size
    P, L = info["P"], info["cell_dim"]
    mask = MaskSpec(info["mask"], tuple(data_views)) if info["mask"] in ("td2nd", "td2all") \
        else MaskSpec(info["mask"])
    if info["n_blocks"] == 0 and info["kind"] == "dense":
        if len(data) != off + 8 * P * P:
            raise PriorError("truncated dense prior payload")
        dense = np.frombuffer(data, "<f8", P * P, off).reshape(P, P).astype(float)
        return SigmaMatrix(layout, "dense", dense=dense, n_sources=info["n_sources"], mask=mask)
    rec = 8 + 8 * L * L
    if len(data) != off + rec * info["n_blocks"]:
        raise PriorError("truncated sparse prior payload")
    blocks = {}
    for b in range(info["n_blocks"]):
        j, k = struct.unpack_from("<II", data, off + b * rec)
        blocks[(j, k)] = np.frombuffer(data, "<f8", L * L, off + b * rec + 8).reshape(L, L).astype(float)
    return SigmaMatrix(layout, info["kind"], blocks=blocks, n_sources=info["n_sources"], mask=mask)
