import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualstain import datasetkit as dk
from dualstain.boxgeom import BBox

unit = st.floats(0.05, 0.95)
norm_box = st.builds(lambda cx, cy, w, h: BBox(cx, cy, w, h),
                     unit, unit, st.floats(0.01, 0.1), st.floats(0.01, 0.1))


def _sample(image_id, boxes, h=64, w=80, fill=None, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8) if fill is None else \
        np.full((h, w, 3), fill, dtype=np.uint8)
    return dk.Sample(image_id, list(boxes), image=img)


# -- YOLO text ------------------------------------------------------------------------

def test_parse_yolo_line():
    b = dk.parse_yolo_line("0 0.5 0.25 0.1 0.2")
    assert (b.class_id, b.cx, b.cy, b.w, b.h, b.confidence) == (0, 0.5, 0.25, 0.1, 0.2, None)
    assert dk.parse_yolo_line("0 0.5 0.5 0.1 0.1 0.75").confidence == 0.75


@pytest.mark.parametrize("line,err", [
    ("0 0.5 0.5 0.1", dk.ParseError),
    ("x 0.5 0.5 0.1 0.1", dk.ParseError),
    ("0 0.5 abc 0.1 0.1", dk.ParseError),
    ("0 0.5 0.5 0.0 0.1", dk.ValidationError),
    ("0 1.2 0.5 0.1 0.1", dk.ValidationError),
    ("0 0.5 -0.01 0.1 0.1", dk.ValidationError),
])
def test_parse_yolo_rejects(line, err):
    with pytest.raises(err):
        dk.parse_yolo_line(line)


def test_boxes_overhanging_the_border_are_clipped():
    b = dk.parse_yolo_line("0 0.02 0.5 0.1 0.1")
    assert b.corners()[0] == 0.0


@given(st.lists(norm_box, max_size=8))
def test_yolo_roundtrip_to_six_decimals(boxes):
    back = [dk.parse_yolo_line(line) for line in dk.format_yolo(boxes).splitlines()]
    assert len(back) == len(boxes)
    for a, b in zip(boxes, back):
        assert np.abs(a.as_array() - b.as_array()).max() <= 5e-7 + 1e-12
    assert dk.format_yolo(back) == dk.format_yolo(boxes)


def test_load_yolo_directory(tmp_path):
    s = _sample("b", [BBox(0.5, 0.5, 0.2, 0.2)])
    dk.write_image(tmp_path / "b.png", s.image)
    dk.write_yolo_file(tmp_path / "b.txt", s.boxes)
    dk.write_yolo_file(tmp_path / "a.txt", [])
    loaded = dk.load_annotations(tmp_path)
    assert [x.image_id for x in loaded] == ["a", "b"]
    assert loaded[0].path is None and loaded[1].width == 80 and loaded[1].height == 64
    np.testing.assert_array_equal(loaded[1].load(), s.image)


def test_malformed_file_reports_location(tmp_path):
    (tmp_path / "bad.txt").write_text("0 0.5 0.5 0.1 0.1\n0 oops\n")
    with pytest.raises(dk.ParseError, match="bad.txt:2"):
        dk.load_annotations(tmp_path)


def test_unknown_format():
    with pytest.raises(dk.ParseError):
        dk.load_annotations(".", "pascal-voc")


# -- COCO ------------------------------------------------------------------------------

def test_coco_roundtrip(tmp_path):
    samples = [_sample("s1", [BBox(0.25, 0.5, 0.25, 0.5), BBox(0.75, 0.25, 0.125, 0.25)]),
               _sample("s0", [])]
    doc = samples_doc = dk.samples_to_coco(samples)
    assert [im["file_name"] for im in doc["images"]] == ["s0.png", "s1.png"]
    assert doc["annotations"][0]["bbox"] == [10.0, 16.0, 20.0, 32.0]
    (tmp_path / "ann.json").write_text(json.dumps(samples_doc))
    back = dk.load_annotations(tmp_path, "coco-json")
    assert [s.image_id for s in back] == ["s0", "s1"]
    for a, b in zip(samples[0].boxes, back[1].boxes):
        np.testing.assert_allclose(a.as_array(), b.as_array(), atol=1e-15)


def test_coco_bad_reference():
    doc = {"images": [{"id": 1, "file_name": "a.png", "width": 10, "height": 10}],
           "annotations": [{"image_id": 7, "bbox": [0, 0, 1, 1]}]}
    with pytest.raises(dk.ParseError):
        dk.coco_to_samples(doc)


def test_coco_needs_single_json(tmp_path):
    with pytest.raises(dk.ParseError):
        dk.load_annotations(tmp_path, "coco-json")


# -- tiling ------------------------------------------------------------------------------

def test_tile_grid_and_padding():
    s = _sample("slide", [], h=100, w=150, fill=7)
    tiles = dk.tile_image(s, 64)
    assert [t.image_id for t in tiles][:3] == ["slide_r000_c000", "slide_r000_c001",
                                               "slide_r000_c002"]
    assert len(tiles) == 2 * 3
    last = tiles[-1].image
    assert np.all(last[:36, :22] == 7) and np.all(last[36:] == 255) and np.all(last[:, 22:] == 255)


def test_tile_box_assignment_and_quarter_rule():
    # 20x20 px box at (54..74, 10..30): 10/20 of it lies in each of the two top tiles
    b = BBox(64 / 128, 20 / 128, 20 / 128, 20 / 128)
    # 20x20 px box at (0..20, 70..90) wholly inside the bottom-left tile
    c = BBox(10 / 128, 80 / 128, 20 / 128, 20 / 128)
    # box with only 3/20 of its width in the right tile: dropped there
    d = BBox(51 / 128, 110 / 128, 20 / 128, 20 / 128)
    tiles = dk.tile_image(_sample("s", [b, c, d], h=128, w=128), 64)
    counts = [len(t.boxes) for t in tiles]
    assert counts == [1, 1, 2, 0]
    left = tiles[0].boxes[0]
    np.testing.assert_allclose(left.corners(), [54 / 64, 10 / 64, 1.0, 30 / 64], atol=1e-12)


# -- splits --------------------------------------------------------------------------------

IDS = [f"img{i:03d}" for i in range(23)]


def test_split_ratio_and_disjoint():
    plan = dk.split_dataset(IDS, (8, 2), seed=4)
    assert len(plan.val) == 23 * 2 // 10 and len(plan.train) == 23 - 4
    assert sorted(plan.train + plan.val) == IDS


@pytest.mark.parametrize("n,k", [(23, 5), (10, 5), (5, 5), (7, 2), (100, 3)])
def test_kfold_properties(n, k):
    ids = IDS[:n] if n <= len(IDS) else [f"x{i}" for i in range(n)]
    plan = dk.kfold_split(ids, k, seed=1)
    sizes = [len(f) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1
    seen = [x for _, val in plan.iter_folds() for x in val]
    assert sorted(seen) == sorted(ids)
    for train, val in plan.iter_folds():
        assert not set(train) & set(val) and len(train) + len(val) == n
    assert dk.kfold_split(list(reversed(ids)), k, seed=1).folds == plan.folds


def test_kfold_rejects_bad_k():
    with pytest.raises(dk.ProtocolError):
        dk.kfold_split(IDS[:3], 5)
    with pytest.raises(dk.ProtocolError):
        dk.kfold_split(IDS, 1)


def test_split_plan_json_roundtrip():
    plan = dk.kfold_split(IDS, 5, seed=2)
    assert dk.SplitPlan.from_json(plan.to_json()) == plan
    tv = dk.split_dataset(IDS, seed=2)
    assert dk.SplitPlan.from_json(tv.to_json()) == tv


# -- augmentation ------------------------------------------------------------------------

def test_hflip_is_involution():
    s = _sample("a", [BBox(0.2, 0.3, 0.1, 0.2), BBox(0.9, 0.5, 0.1, 0.1)])
    back = dk.hflip(dk.hflip(s))
    np.testing.assert_array_equal(back.image, s.image)
    assert back.image_id == "a"
    for a, b in zip(s.boxes, back.boxes):
        np.testing.assert_allclose(a.as_array(), b.as_array(), atol=1e-12)


def test_hflip_moves_box_with_pixels():
    img = np.zeros((10, 20, 3), np.uint8)
    img[2:4, 1:3] = 255
    s = dk.Sample("p", [BBox(2 / 20, 3 / 10, 2 / 20, 2 / 10)], image=img)
    f = dk.hflip(s)
    assert np.all(f.image[2:4, 17:19] == 255)
    assert f.boxes[0].cx == pytest.approx(18 / 20)


def test_mosaic_keeps_boxes_inside():
    ss = [_sample(f"m{i}", [BBox(0.5, 0.5, 0.3, 0.3)], h=64, w=64, seed=i) for i in range(4)]
    out = dk.augment(ss, "mosaic", seed=3)
    assert out.image.shape == (64, 64, 3)
    assert 1 <= len(out.boxes) <= 4
    for b in out.boxes:
        x0, y0, x1, y1 = b.corners()
        assert 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1


def test_mixup_blend_and_boxes():
    a = _sample("a", [BBox(0.5, 0.5, 0.1, 0.1)], fill=0)
    b = _sample("b", [BBox(0.2, 0.2, 0.1, 0.1)], fill=200)
    out = dk.augment([a, b], "mixup", seed=0)
    assert len(out.boxes) == 2
    v = int(out.image[0, 0, 0])
    assert 0 < v < 200 and np.all(out.image == v)


def test_augment_deterministic_and_validated():
    ss = [_sample(f"m{i}", [BBox(0.4, 0.6, 0.2, 0.2)], seed=i) for i in range(4)]
    a, b = dk.augment(ss, "mosaic", seed=9), dk.augment(ss, "mosaic", seed=9)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.boxes == b.boxes
    with pytest.raises(dk.ProtocolError):
        dk.augment(ss[:3], "mosaic")
    with pytest.raises(dk.ProtocolError):
        dk.augment(ss[0], "rotate")
