"""Scenario runners and report emission.

The runners are checked structurally on tiny untrained models: row
counts, field wiring, and the invariant that a zero-budget attack
reproduces the clean accuracy bit for bit. Curve shapes on trained
models belong to the acceptance tests.
"""

import numpy as np
import pytest
from conftest import blob_datasets, small_classifier

from advbench.harness import (
    REPORT_COLUMNS,
    ReportRow,
    ScenarioSpec,
    emit_report,
    merge_rows,
    read_report_rows,
    run_transfer,
    run_whitebox_fgsm,
    run_whitebox_pgd,
)


def _row(**overrides):
    base = dict(dataset="fm", scenario="whitebox", attack="fgsm",
                source_model="resnet", target_model="resnet",
                param_name="perturbation", param_value=0.0, metric="accuracy",
                value=93.75, clean_value=93.75, seed=0)
    base.update(overrides)
    return ReportRow(**base)


def test_report_row_metric_complements():
    acc_row = _row(metric="accuracy", value=80.0)
    assert acc_row.accuracy() == 80.0
    assert acc_row.error() == 20.0
    err_row = _row(metric="error", value=35.0)
    assert err_row.error() == 35.0
    assert err_row.accuracy() == 65.0


SPEC_DEFAULTS = dict(dataset="fm", attack="fgsm", mode="transfer",
                     source_model="a", target_models=("b",), sweep=(0.0, 0.1))

BAD_SPECS = [
    (dict(attack="cw"), r"scenario.attack must be 'fgsm' or 'pgd', got 'cw'"),
    (dict(mode="gray"), r"scenario.mode must be 'whitebox' or 'transfer', got 'gray'"),
    (dict(sweep=()), r"scenario.sweep must not be empty"),
    (dict(sweep=(0.1, 0.1)), r"scenario.sweep must be strictly increasing"),
    (dict(sweep=(0.2, 0.1)), r"scenario.sweep must be strictly increasing"),
    (dict(mode="whitebox", target_models=("b",)),
     r"whitebox scenario targets exactly its source model"),
    (dict(target_models=()), r"transfer scenario needs at least one target model"),
    (dict(target_models=("a", "b")), r"transfer source 'a' cannot also be a target"),
]


def test_scenario_spec_validation():
    ScenarioSpec(**SPEC_DEFAULTS).validate()
    ScenarioSpec(**{**SPEC_DEFAULTS, "mode": "whitebox",
                    "target_models": ("a",)}).validate()
    for overrides, pattern in BAD_SPECS:
        with pytest.raises(ValueError, match=pattern):
            ScenarioSpec(**{**SPEC_DEFAULTS, **overrides}).validate()


def test_whitebox_fgsm_sweep_validation():
    model = small_classifier()
    _, test_set = blob_datasets()
    with pytest.raises(ValueError, match="fgsm sweep must include epsilon 0"):
        run_whitebox_fgsm(model, "m", test_set, (0.1, 0.2))
    with pytest.raises(ValueError, match="strictly increasing"):
        run_whitebox_fgsm(model, "m", test_set, (0.0, 0.2, 0.1))


def test_whitebox_fgsm_rows():
    model = small_classifier(seed=4)
    _, test_set = blob_datasets()
    rows = run_whitebox_fgsm(model, "tiny", test_set, (0.0, 0.1, 0.25), seed=5)
    assert len(rows) == 3
    for row in rows:
        assert (row.dataset, row.scenario, row.attack) == ("blobs", "whitebox", "fgsm")
        assert row.source_model == row.target_model == "tiny"
        assert (row.param_name, row.metric, row.seed) == ("perturbation", "accuracy", 5)
        assert 0.0 <= row.value <= 100.0
        assert row.clean_value == rows[0].clean_value
    assert [row.param_value for row in rows] == [0.0, 0.1, 0.25]
    assert rows[0].value == rows[0].clean_value


def test_whitebox_pgd_rows():
    model = small_classifier(seed=4)
    _, test_set = blob_datasets()
    with pytest.raises(ValueError, match="pgd sweep must be non-empty"):
        run_whitebox_pgd(model, "tiny", test_set, ())
    rows = run_whitebox_pgd(model, "tiny", test_set, (0, 2),
                            epsilon=0.1, alpha=0.05, seed=2)
    assert len(rows) == 2
    for row in rows:
        assert (row.param_name, row.metric) == ("iterations", "error")
        assert row.attack == "pgd"
    assert rows[0].param_value == 0.0
    assert rows[0].value == 100.0 - rows[0].clean_value


def test_transfer_replays_identical_bytes(tmp_path):
    source = small_classifier(seed=1)
    targets = [("b", small_classifier(seed=2)), ("c", small_classifier(seed=3))]
    _, test_set = blob_datasets()
    rows, digests = run_transfer(source, "a", targets, test_set, "fgsm",
                                 (0, 0.1), tmp_path)
    assert len(rows) == 6
    assert set(digests) == {"perturbation=0", "perturbation=0.1"}
    for point in digests.values():
        assert set(point) == {"a", "b", "c"}
        assert len(set(point.values())) == 1
    assert (tmp_path / "blobs_fgsm_a_perturbation_0.advt").exists()
    assert (tmp_path / "blobs_fgsm_a_perturbation_0.1.advt").exists()
    for row in rows:
        assert row.scenario == "transfer:a"
        assert row.source_model == "a"
        if row.param_value == 0.0:
            assert row.value == row.clean_value
    again_rows, again_digests = run_transfer(source, "a", targets, test_set,
                                             "fgsm", (0, 0.1), tmp_path)
    assert again_digests == digests
    assert again_rows == rows


def test_transfer_pgd_reports_error(tmp_path):
    source = small_classifier(seed=1)
    targets = [("b", small_classifier(seed=2))]
    _, test_set = blob_datasets()
    rows, digests = run_transfer(source, "a", targets, test_set, "pgd",
                                 (0, 1), tmp_path, epsilon=0.1, alpha=0.05)
    assert len(rows) == 4
    assert set(digests) == {"iterations=0", "iterations=1"}
    for row in rows:
        assert (row.param_name, row.metric) == ("iterations", "error")
        if row.param_value == 0.0:
            assert row.value == 100.0 - row.clean_value


def test_transfer_rejects_source_among_targets(tmp_path):
    source = small_classifier(seed=1)
    _, test_set = blob_datasets()
    with pytest.raises(ValueError, match="cannot also be a target"):
        run_transfer(source, "a", [("a", source)], test_set, "fgsm",
                     (0, 0.1), tmp_path)


GOLDEN_REPORT = (
    "dataset,scenario,attack,source_model,target_model,param_name,"
    "param_value,metric,value,clean_value,seed\n"
    "fm,whitebox,fgsm,resnet,resnet,perturbation,0.0,accuracy,93.75,93.75,0\n"
    "fm,whitebox,fgsm,resnet,resnet,perturbation,0.1,accuracy,43.75,93.75,0\n"
)

GOLDEN_SERIES = "perturbation,resnet\n0.0,93.75\n0.1,43.75\n"


def test_emit_report_golden_bytes(tmp_path):
    rows = [_row(param_value=0.1, value=43.75), _row()]
    written = emit_report(rows, tmp_path, name="demo")
    assert [p.name for p in written] == ["demo.csv", "fm_fgsm_whitebox.csv"]
    assert (tmp_path / "demo.csv").read_text() == GOLDEN_REPORT
    assert (tmp_path / "fm_fgsm_whitebox.csv").read_text() == GOLDEN_SERIES


def test_emit_report_is_deterministic(tmp_path):
    rows = [_row(param_value=0.1, value=43.75), _row()]
    first = emit_report(rows, tmp_path / "one", formats=("csv", "json"))
    second = emit_report(list(reversed(rows)), tmp_path / "two",
                         formats=("csv", "json"))
    for a, b in zip(first, second):
        assert a.name == b.name
        assert a.read_bytes() == b.read_bytes()


def test_emit_report_round_trips_both_formats(tmp_path):
    rows = [_row(), _row(param_value=0.1, value=43.75),
            _row(scenario="transfer:vgg", source_model="vgg",
                 target_model="cbam", value=61.0, clean_value=92.0, seed=3)]
    emit_report(rows, tmp_path, formats=("csv", "json"))
    from_csv = read_report_rows(tmp_path / "report.csv")
    from_json = read_report_rows(tmp_path / "report.json")
    assert from_csv == sorted(rows, key=lambda r: r.as_list())
    assert from_csv == from_json


def test_emit_report_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError, match="cannot emit an empty report"):
        emit_report([], tmp_path)
    with pytest.raises(ValueError, match=r"unknown report formats: \['yaml'\]"):
        emit_report([_row()], tmp_path, formats=("csv", "yaml"))


def test_series_files_split_by_mode_and_pad_missing_cells(tmp_path):
    rows = [
        _row(),
        _row(scenario="transfer:vgg", source_model="vgg", target_model="resnet",
             param_value=0.0, value=90.0, clean_value=90.0),
        _row(scenario="transfer:vgg", source_model="vgg", target_model="cbam",
             param_value=0.1, value=61.0, clean_value=92.0),
    ]
    written = emit_report(rows, tmp_path)
    names = [p.name for p in written]
    assert names == ["report.csv", "fm_fgsm_transfer.csv", "fm_fgsm_whitebox.csv"]
    transfer = (tmp_path / "fm_fgsm_transfer.csv").read_text().split("\n")
    assert transfer[0] == "perturbation,vgg->cbam,vgg->resnet"
    assert transfer[1] == "0.0,,90.0"
    assert transfer[2] == "0.1,61.0,"


def test_read_report_rows_rejects_foreign_headers(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("epoch,loss\n1,0.5\n")
    with pytest.raises(ValueError, match="header does not match the report schema"):
        read_report_rows(path)
    assert len(REPORT_COLUMNS) == 11


def test_merge_rows_deduplicates_and_orders():
    stale = _row(value=10.0)
    fresh = _row(value=99.0)
    extra = _row(param_value=0.1, value=43.75)
    merged = merge_rows([[extra, stale], [fresh]])
    assert merged == [stale, extra]
