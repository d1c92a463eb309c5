import json

import numpy as np
import pytest

from dualstain import qclinter as ql
from dualstain import synthgen as sg
from dualstain.boxgeom import BBox
from dualstain.datasetkit import Sample


def masks_from(shape, *rects, label=ql.P16):
    lab = np.zeros(shape, dtype=np.uint8)
    for x0, y0, x1, y1 in rects:
        lab[y0:y1, x0:x1] = label
    return ql.StainMasks(lab)


# -- segmentation --------------------------------------------------------------------

@pytest.mark.parametrize("rgb,label", [
    (sg.MAGENTA, ql.P16), (sg.BROWN, ql.KI67), (sg.BLUE_PURPLE, ql.NEGATIVE),
    (sg.PALE, ql.BACKGROUND), (sg.WHITE, ql.BACKGROUND),
])
def test_palette_segments_to_expected_label(rgb, label):
    img = np.tile(np.array(rgb, np.uint8), (9, 9, 1))
    assert np.all(ql.stain_segment(img).labels == label)


def test_hsv_matches_colorsys():
    import colorsys
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(20, 3), dtype=np.uint8)
    h, s, v = ql.rgb_to_hsv(img)
    for i, px in enumerate(img / 255.0):
        hh, ss, vv = colorsys.rgb_to_hsv(*px)
        assert h[i] == pytest.approx(hh * 360.0, abs=1e-9)
        assert (s[i], v[i]) == pytest.approx((ss, vv), abs=1e-12)


def test_majority_filter_removes_salt():
    lab = np.zeros((7, 7), np.uint8)
    lab[3, 3] = ql.P16
    assert np.all(ql.majority_filter(lab) == 0)
    block = np.zeros((7, 7), np.uint8)
    block[1:6, 1:6] = ql.P16
    np.testing.assert_array_equal(ql.majority_filter(block)[2:5, 2:5], ql.P16)


def test_overlapping_hue_ranges_rejected():
    with pytest.raises(ValueError):
        ql.StainColorConfig(p16=ql.HsvRange((200.0, 300.0)))


# -- tightness --------------------------------------------------------------------------

def test_tight_box_passes_and_loose_box_is_fixed():
    m = masks_from((60, 60), (20, 20, 30, 34))
    assert ql.check_tightness((20, 20, 30, 34), m) is None
    assert ql.check_tightness((16, 16, 34, 38), m) is None  # gaps of exactly 4
    f = ql.check_tightness((10, 20, 30, 34), m)
    assert f.measurement == 10.0 and f.suggested_fix == [(20, 20, 30, 34)]


def test_empty_box_is_degenerate():
    f = ql.check_tightness((0, 0, 10, 10), masks_from((20, 20)))
    assert f.flags == ["degenerate_content"] and f.suggested_fix == []


# -- scale disparity ------------------------------------------------------------------------

def test_scale_disparity_splits_merged_box():
    m = masks_from((200, 200), (10, 10, 20, 20), (60, 60, 70, 70), (100, 10, 110, 20))
    small = [(10, 10, 20, 20), (100, 10, 110, 20), (60, 60, 70, 70)]
    merged = (5, 5, 115, 75)
    findings, median = ql.check_scale_disparity([("a", small + [merged], m)], ratio_thr=20)
    assert median == 100.0
    assert len(findings) == 1
    f = findings[0]
    assert f.measurement == pytest.approx(110 * 70 / 100)
    assert sorted(f.suggested_fix) == sorted(small)


def test_scale_disparity_ignores_single_object_box():
    m = masks_from((200, 200), (10, 10, 150, 150))
    items = [("a", [(1, 1, 3, 3), (5, 5, 7, 7), (8, 8, 10, 10), (10, 10, 150, 150)], m)]
    assert ql.check_scale_disparity(items)[0] == []


def test_scale_disparity_needs_three_boxes():
    with pytest.raises(ql.ProtocolError):
        ql.check_scale_disparity([("a", [(0, 0, 2, 2)], masks_from((5, 5)))])


# -- unlabeled -------------------------------------------------------------------------------

def test_unlabeled_component_found():
    m = masks_from((100, 100), (10, 10, 22, 22), (50, 50, 62, 62))
    out = ql.find_unlabeled(m, [(10, 10, 22, 22)])
    assert [f.suggested_fix for f in out] == [[(50, 50, 62, 62)]]
    assert out[0].measurement == 0.0


def test_unlabeled_respects_size_and_coverage():
    m = masks_from((100, 100), (10, 10, 18, 18), (50, 50, 62, 62))
    # 64 px component is below the area floor; 4 of 12 columns covered is 1/3 >= 0.30
    assert ql.find_unlabeled(m, [(50, 50, 54, 62)]) == []


def test_negative_stain_is_not_foreground():
    m = masks_from((50, 50), (10, 10, 30, 30), label=ql.NEGATIVE)
    assert ql.find_unlabeled(m, []) == []


# -- diagonal ---------------------------------------------------------------------------------

def _diagonal_band(n=80, width=4):
    lab = np.zeros((n, n), np.uint8)
    for i in range(n):
        lab[i, max(i - width, 0):i + width] = ql.P16
    return ql.StainMasks(lab)


def test_diagonal_cluster_is_sliced():
    m = _diagonal_band()
    f = ql.check_diagonal_cluster((0, 0, 80, 80), m)
    assert f is not None and f.measurement > 3
    fill = sum(ql.box_area(b) for b in f.suggested_fix)
    assert len(f.suggested_fix) >= 3 and fill < 0.5 * 80 * 80
    covered = np.zeros((80, 80), bool)
    for x0, y0, x1, y1 in f.suggested_fix:
        covered[y0:y1, x0:x1] = True
    assert np.all(covered[m.foreground])


def test_compact_blob_is_not_diagonal():
    m = masks_from((40, 40), (5, 5, 35, 35))
    assert ql.check_diagonal_cluster((0, 0, 40, 40), m) is None


def test_axis_aligned_strip_is_dense_not_diagonal():
    m = masks_from((40, 80), (0, 15, 80, 25))
    assert ql.check_diagonal_cluster((0, 15, 80, 25), m) is None


# -- corpus driver ------------------------------------------------------------------------------

def _samples(corpus, defects=None):
    out, logs = [], []
    for image_id, img, boxes, reg in corpus:
        if defects is not None:
            boxes, log = sg.inject_defects(boxes, reg, defects, image_id)
            logs += log
        out.append(Sample(image_id, boxes, image=img))
    return out, logs


def test_clean_corpus_is_quiet(lint_corpus):
    samples, _ = _samples(lint_corpus)
    rep = ql.lint_dataset(samples)
    assert rep.summary["images"] == 12 and rep.summary["errors"] == 0
    assert rep.summary["total"] <= 1


@pytest.mark.parametrize("kind,rule", [("loosen", "LOOSE_BOX"), ("delete", "UNLABELED_CELL"),
                                       ("merge", "SCALE_DISPARITY"),
                                       ("diagonal", "DIAGONAL_CLUSTER")])
def test_each_defect_kind_is_caught(lint_corpus, kind, rule):
    samples, log = _samples(lint_corpus, sg.DefectSpec(**{kind: 1.0}, seed=1))
    rep = ql.lint_dataset(samples)
    assert len(ql.findings_for(rep.findings, rule)) >= len(log) > 0


def test_autofix_restores_clean_lint(lint_corpus):
    samples, _ = _samples(lint_corpus, sg.DefectSpec.uniform(0.5, seed=2))
    rep = ql.lint_dataset(samples, autofix=True)
    assert rep.summary["total"] > 0
    again = ql.lint_dataset([Sample(s.image_id, rep.fixed[s.image_id], image=s.image)
                             for s in samples])
    assert again.summary["total"] <= 1


def test_unreadable_image_is_reported_and_corpus_continues(lint_corpus, tmp_path):
    samples, _ = _samples(lint_corpus[:3])
    broken = Sample("zz_broken", [BBox(0.5, 0.5, 0.1, 0.1)], path=tmp_path / "missing.png")
    rep = ql.lint_dataset(samples + [broken])
    assert rep.summary["errors"] == 1 and rep.summary["images"] == 4
    err = [f for f in rep.findings if f.rule == "IMAGE_ERROR"]
    assert err[0].image_id == "zz_broken"


def test_report_serialization(lint_corpus):
    samples, _ = _samples(lint_corpus[:4], sg.DefectSpec(loosen=1.0))
    rep = ql.lint_dataset(samples)
    rows = [json.loads(line) for line in rep.to_jsonl().splitlines()]
    assert rows and all(r["rule"] == "LOOSE_BOX" for r in rows)
    assert "LOOSE_BOX" in rep.summary_text()


def test_lint_is_deterministic(lint_corpus):
    samples, _ = _samples(lint_corpus[:4], sg.DefectSpec.uniform(0.5))
    assert ql.lint_dataset(samples).to_jsonl() == ql.lint_dataset(samples).to_jsonl()


def test_px_roundtrip():
    b = ql.px_to_box((10, 20, 30, 50), 100, 200)
    assert ql.box_to_px(b, 100, 200) == (10, 20, 30, 50)
