"""Python bindings for the coedg engine."""

import json as _json
import os as _os

from ._core import (
    BBox,
    CoedgError,
    Detection,
    GroundTruthBox,
    LocationEmbedding,
    __version__,
    average_precision,
    bleu,
    category_precision,
    focal_loss,
    gip_filter,
    iou,
    loss_inclusion,
    mean_ap,
    multilabel_auc,
    multilabel_cross_entropy,
    nms,
    normal_case_detection,
    quantize_location,
    report_nll,
    roc_auc,
    rouge_l,
    sa_nms,
    smooth_l1,
    threshold_filter,
    wilcoxon_signed_rank,
)
from ._core import assemble_pseudo_labels as _assemble
from ._core import run_coevolution as _run_coevolution
from ._core import sweep_tau as _sweep_tau
from ._core import validate_config as _validate_config


def assemble_pseudo_labels(sample_id, teacher, student, gen_cats, tau=0.9, iou_thr=0.5):
    """Threshold, SA-NMS and generator filter in one call. Returns a dict."""
    return _json.loads(_assemble(sample_id, teacher, student, sorted(gen_cats), tau, iou_thr))


def validate_config(config):
    """Returns the normalized config with every default filled in."""
    return _json.loads(_validate_config(_json.dumps(config)))


def run_coevolution(config, out_dir, resume=False):
    """Runs co-evolution into out_dir and returns the metric log."""
    return _json.loads(_run_coevolution(_json.dumps(config), _os.fspath(out_dir), resume))


def sweep_tau(config, taus):
    """One short run per tau; returns [{"tau": t, "map": [...]}, ...]."""
    return _json.loads(_sweep_tau(_json.dumps(config), list(taus)))
