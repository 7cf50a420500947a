import math

import pytest

import coedg
from coedg import BBox, Detection, GroundTruthBox


def det(cat, x0, y0, x1, y1, score, source="student"):
    return Detection(cat, BBox(x0, y0, x1, y1), score, source)


def test_iou_one_third():
    assert coedg.iou(BBox(0, 0, 2, 2), BBox(1, 0, 3, 2)) == pytest.approx(1 / 3)


def test_degenerate_box_raises_with_kind():
    with pytest.raises(coedg.CoedgError) as info:
        coedg.iou(BBox(0, 0, 0, 2), BBox(0, 0, 1, 1))
    assert info.value.kind == "invalid argument"
    assert "degenerate box" in str(info.value)


def test_nms_suppresses_same_category_only():
    dets = [det(1, 0, 0, 10, 10, 0.9), det(1, 1, 1, 10, 10, 0.8), det(2, 1, 1, 10, 10, 0.7)]
    kept = coedg.nms(dets, 0.5)
    assert [(d.category, d.score) for d in kept] == [(1, 0.9), (2, 0.7)]


def test_sa_nms_marks_merged_and_keeps_source():
    teacher = [det(1, 0, 0, 10, 10, 0.95, "teacher")]
    student = [det(1, 0, 0, 10, 10, 0.99), det(3, 50, 50, 60, 60, 0.92)]
    out = coedg.sa_nms(teacher, student, 0.5)
    assert [d.source for d in out] == ["student", "student"]
    assert all(d.merged for d in out)


def test_pseudo_label_pipeline_counts():
    teacher = [det(1, 0, 0, 10, 10, 0.95, "teacher"), det(2, 20, 20, 30, 30, 0.5, "teacher")]
    student = [det(4, 40, 40, 50, 50, 0.97)]
    p = coedg.assemble_pseudo_labels("s0", teacher, student, [1], tau=0.9, iou_thr=0.5)
    assert p["include_in_unsup_loss"] is True
    assert [l["category"] for l in p["labels"]] == [1]
    prov = p["provenance"]
    assert (prov["after_threshold"], prov["after_sa_nms"], prov["after_gip"]) == (2, 2, 1)


def test_normal_case_rules():
    whole = coedg.normal_case_detection([], 512, 512)
    assert len(whole) == 1 and whole[0].category == 0
    assert (whole[0].box.x1, whole[0].box.y1) == (512, 512)
    assert not coedg.loss_inclusion([], [], [1])
    assert not coedg.loss_inclusion([det(1, 0, 0, 5, 5, 0.95)], [], [])


def test_quantize_location():
    q = coedg.quantize_location(BBox(128, 256, 384, 512), 512, 512)
    assert q.as_tuple() == (25, 50, 75, 100)


def test_losses_match_closed_forms():
    value, grad = coedg.focal_loss(0.9, 1)
    assert value == pytest.approx(-0.25 * 0.01 * math.log(0.9))
    assert len(grad) == 1
    value, _ = coedg.smooth_l1([0.5], [0.0])
    assert value == pytest.approx(0.125)
    value, _ = coedg.multilabel_cross_entropy([0.5, 0.5, 0.5], [1, 0, 1])
    assert value == pytest.approx(3 * math.log(2))
    value, grad = coedg.report_nll([0.5, 0.5, 0.5])
    assert value == pytest.approx(3 * math.log(2))
    assert grad == pytest.approx([-2.0, -2.0, -2.0])


def test_metric_hand_examples():
    assert coedg.bleu("the cat sat".split(), "the cat sat down".split(), 1) == pytest.approx(0.7165, abs=1e-4)
    assert coedg.rouge_l("a b c d".split(), "a b e d".split(), 1.0) == pytest.approx(0.75)
    assert coedg.roc_auc([0.5, 0.5], [1, 0]) == 0.5
    assert coedg.wilcoxon_signed_rank([1, 2, 3, 4, 5], "exact") == 0.0625


def test_average_precision_and_map():
    gts = [GroundTruthBox(1, BBox(0, 0, 10, 10))]
    preds = [det(1, 50, 50, 60, 60, 0.9), det(1, 0, 0, 10, 10, 0.8)]
    assert coedg.average_precision(preds, gts, 1, 0.5) == pytest.approx(0.5)
    assert coedg.average_precision(preds, gts, 2, 0.5) is None
    assert coedg.mean_ap([([det(1, 0, 0, 10, 10, 1.0)], gts)]) == [1.0, 1.0, 1.0]


def test_config_validation():
    cfg = coedg.validate_config({"iterations": 2})
    assert cfg["iterations"] == 2 and cfg["tau"] == 0.9
    with pytest.raises(coedg.CoedgError) as info:
        coedg.validate_config({"tau": 2.0})
    assert info.value.kind == "config error"


def test_small_coevolution_run_is_deterministic(tmp_path):
    cfg = {
        "iterations": 2,
        "epochs_per_iteration": 2,
        "seed": 0,
        "dataset": {"synthetic": {"n_samples": 100, "n_categories": 8, "labeled_fraction": 0.2}},
    }
    a = coedg.run_coevolution(cfg, tmp_path / "a")
    b = coedg.run_coevolution(cfg, tmp_path / "b")
    assert a["completed"] and len(a["log"]) == 2
    assert a["trace_digest"] == b["trace_digest"]
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()
