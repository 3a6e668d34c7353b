from dataclasses import replace

import pytest

from conftest import ScriptedRewriter
from errors import ConfigError
from harness import (
    NO_MODALITY,
    ResultStore,
    RunResult,
    RunSpec,
    Workspace,
    audit_result,
    expand_matrix,
    probe_embeddings,
    run_cell,
    run_matrix,
    stability_run,
)
from model_bridge import SamplingParams, StubAdapter, payload_mean
from probes import ProbeConfig


def correct_answer(bundle, params, draw):
    """Reads the level off the digits, so every answer is right."""
    letter, name = bundle.answer_schema[1 if payload_mean(bundle.user_text) > 500 else 0]
    return f"The answer is [{letter}] {name}"


def _prompt(**overrides):
    fields = dict(model="stub", dataset="toy", modality="d", method="prompt")
    fields.update(overrides)
    return RunSpec(**fields)


def test_normalized_heuristic_drops_model_settings():
    spec = RunSpec(model="stub", dataset="toy", modality="d", method="heuristic", heuristic="prior",
                   sampling=SamplingParams(), probe=ProbeConfig()).normalized()
    assert (spec.model, spec.modality, spec.sampling, spec.probe, spec.extraction_style) == ("", NO_MODALITY, None, None, "")


def test_normalized_fills_method_defaults():
    probe = _prompt(method="probe", seeds=(3,), sampling=SamplingParams()).normalized()
    assert probe.sampling is None
    assert probe.probe == ProbeConfig(seed=3)
    prompt = _prompt(seeds=(3,), probe=ProbeConfig()).normalized()
    assert prompt.probe is None
    assert prompt.sampling == SamplingParams(seed=3)
    assert RunSpec.from_dict(prompt.to_dict()) == prompt


def test_normalized_rejects_unknown_method_and_heuristic():
    with pytest.raises(ConfigError):
        _prompt(method="finetune").normalized()
    with pytest.raises(ConfigError):
        RunSpec(model="", dataset="toy", modality="-", method="heuristic", heuristic="oracle").normalized()


def test_cell_key_ignores_unused_settings(experiment):
    ws = Workspace(experiment)
    assert ws.cell_key(_prompt()) == ws.cell_key(_prompt(probe=ProbeConfig(folds=7)))
    assert ws.cell_key(_prompt()) != ws.cell_key(_prompt(seeds=(1,)))
    assert ws.cell_key(_prompt()) != ws.cell_key(_prompt(model="textonly"))
    heuristic = RunSpec(model="stub", dataset="toy", modality="d", method="heuristic", heuristic="uniform")
    assert ws.cell_key(heuristic) == ws.cell_key(replace(heuristic, model="textonly", modality="v"))


def test_expand_matrix_covers_the_grid(experiment):
    specs = expand_matrix(experiment)
    assert len(specs) == 6
    assert {(s.modality, s.method) for s in specs} == {(m, k) for m in ("d", "v", "d+v") for k in ("prompt", "probe")}


def test_expand_matrix_drops_images_for_text_only_adapters(experiment):
    grid = replace(experiment.grid, models=("textonly",), heuristics=("majority", "uniform"), random_probe_models=("stub",))
    specs = expand_matrix(replace(experiment, grid=grid))
    textonly = [s for s in specs if s.model == "textonly"]
    assert {s.modality for s in textonly} == {"d"}
    assert {s.method for s in specs if s.model == "stub"} == {"random_probe"}
    heuristics = {s.heuristic: s for s in specs if s.method == "heuristic"}
    assert heuristics["majority"].seeds == (0,)
    assert len(heuristics["uniform"].seeds) > 1


def test_full_matrix_then_rerun_is_a_no_op(experiment):
    ws = Workspace(experiment)
    summary = run_matrix(ws, expand_matrix(experiment))
    assert (summary.executed, summary.failed, summary.exit_code) == (6, 0, 0)
    probe_d = next(r for r in summary.results if r.spec["method"] == "probe" and r.spec["modality"] == "d")
    assert probe_d.metrics == {"macro_f1": 1.0, "best_layer": 1.0}
    assert len(probe_d.curve["scores"]) == 3
    assert all(audit_result(r) == [] for r in summary.results)

    before = ws.store.path.read_bytes()
    again = run_matrix(Workspace(experiment), expand_matrix(experiment))
    assert (again.executed, again.cached) == (0, 6)
    assert ws.store.path.read_bytes() == before


def test_failed_cell_is_recorded_and_retried(experiment):
    ws = Workspace(experiment)
    broken = _prompt(variant_set="system:000000000000:1")
    summary = run_matrix(ws, [_prompt(), broken])
    assert (summary.executed, summary.failed, summary.exit_code) == (2, 1, 2)
    failed = next(r for r in summary.results if not r.ok)
    assert failed.error.startswith("NotFoundError")
    assert ws.cell_key(broken) not in ws.store.completed_keys()

    again = run_matrix(ws, [_prompt(), broken])
    assert (again.executed, again.cached) == (1, 1)


def test_result_store_keeps_the_last_line(tmp_path):
    store = ResultStore(tmp_path / "results.jsonl")
    store.append(RunResult(cell_key="k", spec={}, status="failed"))
    store.append(RunResult(cell_key="k", spec={}, status="ok", metrics={"macro_f1": 0.5}))
    assert len(store.results()) == 2
    assert store.get("k").metrics == {"macro_f1": 0.5}
    assert store.completed_keys() == {"k"}


def test_sampled_prompt_records_pass_at_k(experiment):
    ws = Workspace(experiment, adapter_factory=lambda cfg: StubAdapter(cfg, answer_fn=correct_answer))
    result = run_cell(ws, _prompt(sampling=SamplingParams.sampled(n=4)))
    assert result.ok
    assert result.extra["correct_counts"] == [4] * 10
    assert result.metrics["pass@1"] == result.metrics["pass@4"] == 1.0
    assert result.metrics["macro_f1"] == 1.0
    assert audit_result(result) == []


def test_heuristic_cell(experiment):
    ws = Workspace(experiment)
    result = run_cell(ws, RunSpec(model="", dataset="toy", modality="-", method="heuristic",
                                  heuristic="uniform", seeds=(0, 1, 2)))
    assert result.ok
    assert sorted(result.extra["predictions_by_seed"]) == ["0", "1", "2"]
    assert set(result.versions) == {"data", "host"}
    assert audit_result(result) == []


def test_random_probe_cell_goes_through_the_factory(experiment):
    built = []

    def factory(cfg):
        built.append(cfg)
        return StubAdapter(cfg)

    ws = Workspace(experiment, adapter_factory=factory)
    result = run_cell(ws, _prompt(method="random_probe"))
    assert result.ok
    assert [cfg.pretrained for cfg in built] == [False]
    assert result.extra["baseline"] == "random_probe"


def test_audit_flags_tampered_metrics(experiment):
    result = run_cell(Workspace(experiment), _prompt())
    result.metrics["macro_f1"] += 0.1
    assert len(audit_result(result)) == 1


def test_probe_embeddings_read_the_best_layer(experiment):
    ws = Workspace(experiment)
    result = run_cell(ws, _prompt(method="probe"))
    features, labels = probe_embeddings(ws, result)
    assert features.shape == (10, 8)
    assert labels.tolist() == result.labels


def test_stability_with_an_always_correct_model(experiment):
    rewriter = ScriptedRewriter()
    ws = Workspace(experiment, adapter_factory=lambda cfg: StubAdapter(cfg, answer_fn=correct_answer), rewriter=rewriter)
    report = stability_run(ws, "toy", "stub", "d", n_samples=4, total_n=10, batch_b=5)
    assert len(rewriter.calls) == 2
    assert len(report.variant_keys) == 10
    assert report.spread.delta == 0.0
    assert report.spread.mean == 1.0
    assert report.pass_at_k.estimates == {1: 1.0, 4: 1.0}

    summary = next(r for r in ws.store.results() if r.spec["method"] == "stability")
    assert summary.spec["variant_set"].endswith(":all")
    assert summary.metrics["delta"] == 0.0 and summary.metrics["pass@4"] == 1.0
    assert audit_result(summary) == []

    lines = ws.store.path.read_text().count("\n")
    stability_run(ws, "toy", "stub", "d", n_samples=4, total_n=10, batch_b=5)
    assert len(rewriter.calls) == 2
    assert ws.store.path.read_text().count("\n") == lines


def _with_toy_settings(experiment, **fields):
    return replace(experiment, datasets={"toy": replace(experiment.datasets["toy"], **fields)})


def test_representation_settings_change_cell_keys(experiment):
    digits, image = _prompt(), _prompt(modality="v")
    ws = Workspace(experiment)
    coarse = Workspace(_with_toy_settings(experiment, serialization={"precision": 0}))
    small = Workspace(_with_toy_settings(experiment, render={"dpi": 20}))
    assert coarse.cell_key(digits) != ws.cell_key(digits)
    assert coarse.cell_key(image) == ws.cell_key(image)
    assert small.cell_key(image) != ws.cell_key(image)
    assert small.cell_key(digits) == ws.cell_key(digits)


def test_changed_precision_reruns_with_fresh_activations(experiment):
    probe = _prompt(method="probe")
    ws = Workspace(experiment)
    assert run_matrix(ws, [probe]).executed == 1
    acts = ws.out_dir / "acts"
    assert len(list(acts.iterdir())) == 2

    coarse = Workspace(_with_toy_settings(experiment, serialization={"precision": 0}))
    assert run_matrix(coarse, [probe]).executed == 1
    assert len(list(acts.iterdir())) == 4
