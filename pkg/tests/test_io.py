import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvprior.detection import Detection, FeatureMap, GroundTruthBox
from mvprior.io import (DatasetFormatError, load_feature_map, load_split_maps, load_windows,
                        read_annotations, save_feature_map, save_split, save_windows,
                        write_annotations, write_detections, write_manifest)
from mvprior.cli import read_detections
from mvprior.svm import WindowSet


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31))
def test_feature_map_round_trip(H, W, L, seed):
    import tempfile
    from pathlib import Path
    data = np.random.default_rng(seed).standard_normal((H, W, L))
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "m.fmap"
        save_feature_map(FeatureMap(data, 8, "img_é"), p)
        back = load_feature_map(p)
    assert back.data.tobytes() == data.tobytes()
    assert back.image_id == "img_é" and back.cell_size == 8


def test_windows_round_trip(tmp_path, rng):
    ws = WindowSet(rng.standard_normal((5, 2, 3, 2)), [0, 1, -1, -1, 2], [1, 2, 1, 0.5, 1])
    save_windows(ws, tmp_path / "w.win")
    back = load_windows(tmp_path / "w.win")
    assert back.features.tobytes() == ws.features.tobytes()
    np.testing.assert_array_equal(back.views, ws.views)
    np.testing.assert_array_equal(back.weights, ws.weights)


@pytest.mark.parametrize("mangle", ["magic", "truncate", "extend", "empty"])
def test_corrupt_binary_files(tmp_path, rng, mangle):
    save_feature_map(FeatureMap(rng.standard_normal((2, 2, 2)), 8, "a"), tmp_path / "m.fmap")
    save_windows(WindowSet(rng.standard_normal((2, 1, 1, 1)), [0, -1]), tmp_path / "w.win")
    for p, loader in ((tmp_path / "m.fmap", load_feature_map), (tmp_path / "w.win", load_windows)):
        raw = p.read_bytes()
        raw = {"magic": b"XXXX" + raw[4:], "truncate": raw[:-3], "extend": raw + b"\0",
               "empty": b""}[mangle]
        p.write_bytes(raw)
        with pytest.raises(DatasetFormatError):
            loader(p)


def test_annotations_round_trip(tmp_path):
    gts = [GroundTruthBox((8.0, 16.0, 48.0, 32.0), 3, "target/1", False, "m0"),
           GroundTruthBox((0.5, 0.0, 48.0, 32.0), 0, "", False, "m1")]
    write_annotations(gts, tmp_path / "a.txt")
    assert read_annotations(tmp_path / "a.txt") == gts


def test_bad_annotation_line(tmp_path):
    (tmp_path / "a.txt").write_text("m0 1 2 3 4 0 x\nm0 1 2 3\n")
    with pytest.raises(DatasetFormatError, match=":2:"):
        read_annotations(tmp_path / "a.txt")


def test_detections_round_trip(tmp_path):
    dets = [Detection((8.0, 0.0, 48.0, 32.0), 0.1 + 0.2, 5, 2, "m3"),
            Detection((1.5, 2.0, 48.0, 32.0), -1e-300, 0, 0, "m0")]
    write_detections(dets, tmp_path / "d.csv")
    assert read_detections(tmp_path / "d.csv") == dets


def test_split_round_trip(tmp_path, rng):
    maps = [FeatureMap(rng.standard_normal((3, 4, 2)), 8, f"m{i}") for i in range(3)]
    gts = [GroundTruthBox((0.0, 0.0, 16.0, 8.0), i, "t", False, f"m{i}") for i in range(3)]
    save_split(tmp_path / "s", maps, gts)
    back_maps, back_gts = load_split_maps(tmp_path / "s")
    assert [m.image_id for m in back_maps] == ["m0", "m1", "m2"]
    assert back_gts == gts


def test_manifest_deterministic(tmp_path):
    for d in ("a", "b"):
        (tmp_path / d / "sub").mkdir(parents=True)
        (tmp_path / d / "x.txt").write_text("1")
        (tmp_path / d / "sub" / "y.bin").write_bytes(b"\0\1")
    ma = write_manifest(tmp_path / "a", {"seed": 1}, {"command": "c"})
    mb = write_manifest(tmp_path / "b", {"seed": 1}, {"command": "c"})
    assert ma == mb
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    assert set(json.loads((tmp_path / "a" / "manifest.json").read_text())["files"]) == {"x.txt", "sub/y.bin"}
    # re-writing does not hash the manifest into itself
    assert write_manifest(tmp_path / "a", {"seed": 1}, {"command": "c"}) == ma
