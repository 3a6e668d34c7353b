import numpy as np
import pandas as pd
import pytest

from conftest import blobs
from errors import ConfigError
from harness import RunResult, RunSpec
from model_bridge import SamplingParams
from report import emit_figures, emit_metric_rows, emit_tables, layer_curve_points, projection_points


def _result(key, value, dataset, method="probe", model="stub", modality="d+v", seeds=(0,), **spec_fields):
    spec = RunSpec(model=model, dataset=dataset, modality=modality, method=method, seeds=seeds, **spec_fields).normalized()
    result = RunResult(cell_key=key, spec=spec.to_dict(), status="ok", metrics={"macro_f1": value}, n_classes=2)
    if method in ("probe", "random_probe"):
        result.curve = {"scores": [0.5, value, 0.6], "chosen_c": [1.0] * 3, "converged": [True] * 3, "best_layer": 1}
        result.metrics["best_layer"] = 1.0
    return result


def _stability(key, dataset, delta, modality="d"):
    spec = RunSpec(model="stub", dataset=dataset, modality=modality, method="stability", variant_set="system:abc:all",
                   sampling=SamplingParams.sampled(n=20)).normalized()
    f1s = [0.5, 0.5 + delta]
    metrics = {"min": 0.5, "max": 0.5 + delta, "mean": 0.5 + delta / 2, "median": 0.5 + delta / 2, "delta": delta,
               "pass@1": 0.6, "pass@20": 0.9, "delta_pass": 0.3}
    return RunResult(cell_key=key, spec=spec.to_dict(), status="ok", metrics=metrics, extra={"spread": {"f1s": f1s}})


@pytest.fixture
def results():
    return [
        _result("p-a", 0.9, "a"),
        _result("p-b", 1.0, "b"),
        _result("p-a-seed1", 0.1, "a", seeds=(1,)),
        _result("q-a", 0.5, "a", method="prompt"),
        _result("q-b", 0.7, "b", method="prompt"),
        _result("q-a-d", 0.4, "a", method="prompt", modality="d"),
        _result("h-a", 0.3, "a", method="heuristic", model="", heuristic="majority"),
        _result("h-b", 0.4, "b", method="heuristic", model="", heuristic="majority"),
        _result("r-a", 0.5, "a", method="random_probe"),
        _result("q-a-cot", 0.2, "a", method="prompt", style="cot"),
    ]


def _row(frame, **match):
    mask = np.ones(len(frame), dtype=bool)
    for column, value in match.items():
        mask &= frame[column] == value
    assert mask.sum() == 1
    return frame[mask].iloc[0]


def test_main_table_groups_and_averages(results, tmp_path):
    reference = tmp_path / "reference.csv"
    pd.DataFrame([{"model": "ROCKET", "method": "reference", "dataset": "a", "value": 0.8},
                  {"model": "ROCKET", "method": "reference", "dataset": "b", "value": 0.6}]).to_csv(reference, index=False)
    paths = emit_tables(results, "main", tmp_path / "tables", reference_csv=reference)
    wide = pd.read_csv(paths["csv"])

    probe = _row(wide, group="model", model="stub", method="probe")
    assert (probe["a"], probe["b"], probe["Avg"]) == (0.9, 1.0, pytest.approx(0.95))
    assert _row(wide, group="model", method="prompt")["Avg"] == pytest.approx(0.6)
    assert _row(wide, group="baseline", model="majority")["Avg"] == pytest.approx(0.35)
    control = _row(wide, group="baseline", model="stub-random")
    assert control["a"] == 0.5 and np.isnan(control["b"]) and np.isnan(control["Avg"])
    assert _row(wide, group="reference", model="ROCKET")["Avg"] == pytest.approx(0.7)

    provenance = pd.read_csv(paths["provenance"])
    assert _row(provenance, group="model", method="probe", column="a")["cell_key"] == "p-a"
    assert set(provenance[provenance["group"] == "reference"]["cell_key"]) == {"imported"}
    assert "| group | model | method | a | b | Avg |" in paths["markdown"].read_text()


def test_modality_split_and_ablation(results, tmp_path):
    split = pd.read_csv(emit_tables(results, "modality_split", tmp_path)["csv"])
    assert _row(split, method="prompt", modality="d")["a"] == 0.4
    assert _row(split, method="prompt", modality="d+v")["b"] == 0.7

    ablation = pd.read_csv(emit_tables(results, "ablation", tmp_path)["csv"])
    assert _row(ablation, method="prompt", modality="d+v", style="cot")["a"] == 0.2
    assert "heuristic" not in set(ablation["method"])


def test_stability_table_adds_averages(tmp_path):
    store = [_stability("s-a", "a", 0.2), _stability("s-b", "b", 0.4)]
    wide = pd.read_csv(emit_tables(store, "stability", tmp_path)["csv"])
    assert _row(wide, dataset="a")["delta"] == pytest.approx(0.2)
    assert _row(wide, dataset="Avg (d)")["delta"] == pytest.approx(0.3)
    assert _row(wide, dataset="Total Avg")["pass@n"] == pytest.approx(0.9)


def test_tables_need_results(tmp_path):
    with pytest.raises(ConfigError):
        emit_tables([], "main", tmp_path)
    with pytest.raises(ConfigError):
        emit_tables([], "stability", tmp_path)
    with pytest.raises(ConfigError):
        emit_tables([], "pivot", tmp_path)


def test_layer_curve_points_have_one_row_per_layer(results):
    points = layer_curve_points(results)
    probes = [r for r in results if r.curve is not None]
    assert len(points) == 3 * len(probes)
    assert set(points["chance"]) == {0.5}
    assert "stub-random" in set(points["model"])


def test_emit_figures(results, tmp_path):
    x, y = blobs(6, 2)
    store = results + [_stability("s-a", "a", 0.2)]
    paths = emit_figures(store, tmp_path, embeddings={"stub (d)": (x, y)}, seed=0)
    assert paths["layer_curves_csv"].exists()
    assert paths["layer_curve_a_d+v"].name == "layer_curve_a_dpv.html"
    assert len(pd.read_csv(paths["variant_box_csv"])) == 2
    projection = pd.read_csv(paths["projection_csv"])
    assert len(projection) == 12
    assert list(projection.columns) == ["x", "y", "label", "source", "seed"]


def test_figures_skip_missing_families(tmp_path):
    assert emit_figures([], tmp_path) == {}


def test_projection_needs_three_samples():
    with pytest.raises(ConfigError):
        projection_points(np.zeros((2, 4)), [1, 2], "x")


def test_metric_rows(results, tmp_path):
    frame = pd.read_csv(emit_metric_rows(results, tmp_path / "metrics.csv"))
    assert len(frame) == sum(len(r.metrics) for r in results)
    assert frame.columns[-1] == "cell_key"
