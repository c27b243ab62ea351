"""Tests for presence detection, localization error, identification and reports."""

import numpy as np
import pandas as pd
import pytest

from vertebra_locator.landmarks import LandmarkSet
from vertebra_locator.metrics import (
    REPORT_COLUMNS,
    detect_presence,
    evaluate_cases,
    identification_rate,
    identify,
    localization_errors,
    plot_refinement_errors,
    region_report,
    stack_landmarks,
    write_case_errors,
    write_report_csv,
)
from vertebra_locator.volume import HeatmapStack


def chain(labels, zs, present=None):
    return LandmarkSet.from_arrays(labels, [[0.0, 0.0, z] for z in zs], present)


def test_presence_threshold():
    data = np.zeros((3, 2, 2, 2))
    data[0, 0, 0, 0] = 0.6
    data[1, 1, 1, 1] = 0.5
    stack = HeatmapStack(("L1", "L2", "L3"), data)
    assert detect_presence(stack, 0.5) == ("L1",)
    with pytest.raises(ValueError):
        detect_presence(stack, 0.0)


def test_stack_landmarks_use_world_coordinates():
    data = np.zeros((2, 3, 3, 3))
    data[0, 2, 1, 0] = 1.0
    data[1, 0, 0, 2] = 1.0
    stack = HeatmapStack(("L1", "L2"), data, (2.0, 2.0, 2.0), (10.0, 0.0, 0.0))
    lm = stack_landmarks(stack, ("L1",))
    assert lm.get("L1").position == (14.0, 2.0, 0.0)
    assert lm.get("L2").position == (10.0, 0.0, 4.0)
    assert list(lm.present) == [True, False]


def test_localization_errors_skip_absent():
    gt = chain(("L1", "L2", "L3"), [30, 15, 0], [True, True, False])
    pred = LandmarkSet.from_arrays(gt.labels, [[3, 4, 30], [0, 0, 15], [0, 0, 0]], [True, True, True])
    assert localization_errors(pred, gt) == {"L1": 5.0, "L2": 0.0}


def test_identification_rules():
    gt = chain(("L1", "L2", "L3"), [30, 15, 0])
    assert identification_rate(gt, gt) == 1.0
    # within the radius of its own centroid but closer to the neighbour's
    pred = chain(gt.labels, [30, 5, 0])
    assert identify(pred, gt) == {"L1": True, "L2": False, "L3": True}
    # equidistant counts as a miss
    pred = chain(gt.labels, [30, 7.5, 0])
    assert identify(pred, gt)["L2"] is False
    far = LandmarkSet.from_arrays(gt.labels, [[25, 0, 30], [0, 0, 15], [0, 0, 0]])
    assert identify(far, gt)["L1"] is False
    missing = gt.with_present([True, False, True])
    assert identification_rate(missing, gt) == pytest.approx(2 / 3)


def test_identification_rate_without_ground_truth():
    gt = chain(("L1", "L2"), [15, 0], [False, False])
    assert identification_rate(gt, gt) is None


def test_region_report_population_std():
    errors = pd.DataFrame({"label": ["T1", "T2", "L1", "S1"], "error_mm": [1.0, 3.0, 4.0, 10.0]})
    ids = pd.DataFrame({"label": ["T1", "T2", "L1", "S1"], "identified": [True, False, True, True]})
    report = region_report(errors, ids, "net")
    assert report.region("Thoracic").mean == 2.0
    assert report.region("Thoracic").std == 1.0
    assert report.region("Thoracic").id_rate == 0.5
    assert report.region("All").count == 4
    assert report.region("All").mean == pytest.approx(4.5)
    cervical = report.region("Cervical")
    assert cervical.mean is None and cervical.id_rate is None and cervical.count == 0



def test_region_report_without_errors():
    report = region_report(pd.DataFrame(columns=["label", "error_mm"]), pd.DataFrame(columns=["label", "identified"]), "net")
    for name in ("All", "Cervical", "Thoracic", "Lumbar"):
        stats = report.region(name)
        assert stats.count == 0 and stats.mean is None and stats.id_rate is None


def test_region_report_from_empty_lists():
    report = region_report([], [], "net")
    assert report.region("All").absent


def test_evaluate_cases_with_nothing_present(tmp_path):
    labels = ("T12", "L1")
    truths = [chain(labels, [15, 0], [False, False])]
    preds = [chain(labels, [15, 0])]
    report = evaluate_cases("net", preds, truths)
    assert report.cases.empty
    assert report.region("Lumbar").mean is None
    df = write_report_csv([report], tmp_path / "report.csv")
    assert len(df) == 4 and df["count"].sum() == 0


def test_evaluate_and_write(tmp_path):
    labels = ("T12", "L1", "L2")
    truths = [chain(labels, [30, 15, 0]), chain(labels, [31, 16, 1], [True, True, False])]
    preds = [chain(labels, [32, 15, 0]), chain(labels, [31, 16, 1])]
    report = evaluate_cases("net", preds, truths)
    assert report.region("All").count == 5
    assert report.region("All").mean == pytest.approx(0.4)
    assert report.region("Lumbar").id_rate == 1.0
    assert list(report.per_label_mean().index) == ["T12", "L1", "L2"]
    path = tmp_path / "report.csv"
    write_report_csv([report], path)
    df = pd.read_csv(path)
    assert list(df.columns) == REPORT_COLUMNS
    assert list(df["region"]) == ["All", "Cervical", "Thoracic", "Lumbar"]
    assert np.isnan(df.loc[1, "mean_mm"])
    write_case_errors([report], tmp_path / "cases.csv")
    cases = pd.read_csv(tmp_path / "cases.csv")
    assert len(cases) == 5 and set(cases["method"]) == {"net"}


def test_refinement_plot_is_deterministic(tmp_path):
    labels = ("T12", "L1")
    truths = [chain(labels, [15, 0])]
    before = evaluate_cases("before", [chain(labels, [18, 0])], truths)
    after = evaluate_cases("after", [chain(labels, [16, 0])], truths)
    a = plot_refinement_errors(before, after, tmp_path / "a.svg", labels)
    b = plot_refinement_errors(before, after, tmp_path / "b.svg", labels)
    text = a.read_text()
    assert text.startswith("<?xml") and "<svg" in text
    assert text == b.read_text()
