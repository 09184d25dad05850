"""On-disk dataset formats.

A split directory holds::

    maps/<image_id>.fmap    feature grids
    annotations.txt         one "image_id x y w h view_bin category" per line
    windows.win             labeled training windows (train splits)

Feature map file (little-endian): magic ``b"MVTFMAP1"``, uint32 version,
uint32 H, W, L, uint32 cell_size, uint32 id length, utf-8 id, then H*W*L
float64 in row-major ``(H, W, L)`` order.

Window file: magic ``b"MVTWIND1"``, uint32 version, uint32 count N, n, m, L,
then N int32 view labels (-1 negative), N float64 weights and N*n*m*L float64
features.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .detection import Detection, FeatureMap, GroundTruthBox
from .svm import WindowSet

FMAP_MAGIC = b"MVTFMAP1"
WIN_MAGIC = b"MVTWIND1"
FORMAT_VERSION = 1
_FMAP = struct.Struct("<8sIIIIII")
_WIN = struct.Struct("<8sIIIII")


class DatasetFormatError(ValueError):
    pass


def save_feature_map(fmap: FeatureMap, path) -> None:
    H, W, L = fmap.data.shape
    ident = fmap.image_id.encode("utf-8")
    head = _FMAP.pack(FMAP_MAGIC, FORMAT_VERSION, H, W, L, fmap.cell_size, len(ident))
    Path(path).write_bytes(head + ident + np.ascontiguousarray(fmap.data, "<f8").tobytes())


def load_feature_map(path) -> FeatureMap:
    data = Path(path).read_bytes()
    if len(data) < _FMAP.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, H, W, L, cs, nid = _FMAP.unpack_from(data)
    if magic != FMAP_MAGIC or version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: not a version-{FORMAT_VERSION} feature map")
    off = _FMAP.size + nid
    if len(data) != off + 8 * H * W * L:
        raise DatasetFormatError(f"{path}: payload size mismatch")
    grid = np.frombuffer(data, "<f8", H * W * L, off).reshape(H, W, L).astype(float)
    return FeatureMap(grid, cs, data[_FMAP.size:off].decode("utf-8"))


def save_windows(ws: WindowSet, path) -> None:
    N, n, m, L = ws.features.shape
    head = _WIN.pack(WIN_MAGIC, FORMAT_VERSION, N, n, m, L)
    Path(path).write_bytes(head + ws.views.astype("<i4").tobytes()
                           + ws.weights.astype("<f8").tobytes()
                           + np.ascontiguousarray(ws.features, "<f8").tobytes())


def load_windows(path) -> WindowSet:
    data = Path(path).read_bytes()
    if len(data) < _WIN.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, N, n, m, L = _WIN.unpack_from(data)
    if magic != WIN_MAGIC or version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: not a version-{FORMAT_VERSION} window file")
    off = _WIN.size
    if len(data) != off + 4 * N + 8 * N + 8 * N * n * m * L:
        raise DatasetFormatError(f"{path}: payload size mismatch")
    views = np.frombuffer(data, "<i4", N, off).astype(np.int64)
    off += 4 * N
    weights = np.frombuffer(data, "<f8", N, off).astype(float)
    off += 8 * N
    feats = np.frombuffer(data, "<f8", N * n * m * L, off).reshape(N, n, m, L).astype(float)
    return WindowSet(feats, views, weights)


def write_annotations(gts: list[GroundTruthBox], path) -> None:
    lines = [f"{g.image_id} {g.bbox[0]:g} {g.bbox[1]:g} {g.bbox[2]:g} {g.bbox[3]:g} "
             f"{g.view} {g.category or '-'}" for g in gts]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_annotations(path) -> list[GroundTruthBox]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise DatasetFormatError(f"{path}:{n}: expected 7 fields, got {len(parts)}")
        img, x, y, w, h, view, cat = parts
        out.append(GroundTruthBox((float(x), float(y), float(w), float(h)), int(view),
                                  "" if cat == "-" else cat, False, img))
    return out


def write_detections(dets: list[Detection], path) -> None:
    lines = ["image_id,x,y,w,h,score,view,model_id"]
    for d in dets:
        lines.append(f"{d.image_id},{d.bbox[0]:g},{d.bbox[1]:g},{d.bbox[2]:g},{d.bbox[3]:g},"
                     f"{d.score!r},{d.view},{d.model_id}")
    Path(path).write_text("\n".join(lines) + "\n")


def save_split(path, maps=(), gts=(), windows: WindowSet | None = None) -> None:
    root = Path(path)
    (root / "maps").mkdir(parents=True, exist_ok=True)
    for fmap in maps:
        save_feature_map(fmap, root / "maps" / f"{fmap.image_id}.fmap")
    if maps or gts:
        write_annotations(list(gts), root / "annotations.txt")
    if windows is not None:
        save_windows(windows, root / "windows.win")


def load_split_maps(path):
    root = Path(path)
    maps = [load_feature_map(p) for p in sorted((root / "maps").glob("*.fmap"))]
    gts = read_annotations(root / "annotations.txt")
    return maps, gts


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(root, seeds: dict, extra: dict | None = None) -> dict:
    """Hash every file under ``root`` (except the manifest) into ``manifest.json``."""
    root = Path(root)
    files = {str(p.relative_to(root)): sha256_file(p)
             for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}
    manifest = {"seeds": seeds, "files": files}
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
