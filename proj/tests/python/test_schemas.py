import json
from pathlib import Path

import pytest
from jsonschema import Draft202012Validator
from referencing import Registry, Resource

import coedg

ROOT = Path(__file__).resolve().parents[2]
SCHEMAS = ROOT / "docs" / "schemas"
GOLDEN = ROOT / "tests" / "golden"


def load(name):
    return json.loads((SCHEMAS / name).read_text())


PROTOCOL = load("protocol.schema.json")
FILES = load("files.schema.json")
REGISTRY = Registry().with_resources(
    [(s["$id"], Resource.from_contents(s)) for s in (PROTOCOL, FILES)]
)


def validator(schema, name):
    return Draft202012Validator({"$ref": schema["$id"] + "#/$defs/" + name}, registry=REGISTRY)


def check(schema, name, instance):
    errors = list(validator(schema, name).iter_errors(instance))
    assert not errors, f"{name}: {errors[0].message}"


def exchanges(path):
    lines = path.read_text().splitlines()
    for req_line, resp_line in zip(lines[0::2], lines[1::2]):
        try:
            req = json.loads(req_line)
        except json.JSONDecodeError:
            req = None
        yield req, json.loads(resp_line)


@pytest.mark.parametrize("session", ["detector", "generator", "errors"])
def test_golden_corpus_matches_protocol_schema(session):
    n = 0
    for req, resp in exchanges(GOLDEN / "protocol" / f"{session}.jsonl"):
        check(PROTOCOL, "response", resp)
        if req is None:
            continue
        check(PROTOCOL, "request", req)
        assert resp["id"] == req["id"]
        if not resp["ok"]:
            continue
        op = req["op"]
        if op == "train_epoch":
            check(PROTOCOL, f"train_epoch.{session}.request", req["payload"])
            check(PROTOCOL, "train_epoch.response", resp["payload"])
        else:
            check(PROTOCOL, f"{op}.request", req["payload"])
            check(PROTOCOL, f"{op}.response", resp["payload"])
        n += 1
    assert n > 0


def test_cli_fixtures_match_file_schema():
    cli = GOLDEN / "cli"
    for name in ("preds.json", "teacher.json", "student.json"):
        check(FILES, "predictions", json.loads((cli / name).read_text()))
    check(FILES, "ground_truth", json.loads((cli / "gt.json").read_text()))
    check(FILES, "generator_categories", json.loads((cli / "gen_cats.json").read_text()))
    for name in ("reports_pred.jsonl", "reports_ref.jsonl"):
        for line in (cli / name).read_text().splitlines():
            check(FILES, "report_line", json.loads(line))


def test_run_directory_outputs_match_file_schema(tmp_path):
    cfg = {
        "iterations": 1,
        "epochs_per_iteration": 2,
        "dataset": {"synthetic": {"n_samples": 80, "n_categories": 8, "labeled_fraction": 0.2}},
    }
    coedg.run_coevolution(cfg, tmp_path)
    preds = json.loads((tmp_path / "predictions" / "iter_0_detections.json").read_text())
    check(FILES, "predictions", preds)
    for line in (tmp_path / "predictions" / "iter_0_reports.jsonl").read_text().splitlines():
        check(FILES, "report_line", json.loads(line))


def test_pseudo_label_output_matches_file_schema():
    teacher = [coedg.Detection(1, coedg.BBox(0, 0, 10, 10), 0.95, "teacher")]
    student = [coedg.Detection(2, coedg.BBox(20, 20, 40, 40), 0.97)]
    out = coedg.assemble_pseudo_labels("s0", teacher, student, [1])
    check(FILES, "pseudo_labels", [out])
