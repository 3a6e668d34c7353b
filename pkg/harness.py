"""Run matrix execution, the prompt-stability protocol and the JSON-lines result store."""
import hashlib
import json
import os
import platform
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import psutil

from baselines import HEURISTICS, evaluate_heuristic, random_probe_run
from config import ExperimentConfig, config
from dataset import load_manifest, load_split, subsample
from errors import ConfigError, ContextLengthError, HarnessError, NotFoundError
from logging_setup import get_logger, log_duration
from metrics import dataset_pass_at_k, macro_f1, pass_at_k_table, variant_spread
from model_bridge import (
    ActivationStore,
    AdapterConfig,
    ExtractionStyle,
    ModelAdapter,
    SamplingParams,
    StoreKey,
    adapter_version,
    extract_dataset,
    load_adapter,
    store_key_for,
)
from probes import ProbeConfig, train_layerwise
from prompting import (
    OpenAICompatibleClient,
    apply_variant,
    assemble_prompt,
    check_template_matches,
    generate_variants,
    load_template,
    load_variant_set,
    parse_answer,
    save_variant_set,
    select_shots,
)
from represent import (
    Modality,
    RenderConfig,
    SerializationConfig,
    representation_digest,
    representation_for,
)

logger = get_logger("harness")

METHODS = ("prompt", "probe", "heuristic", "random_probe", "stability")
NO_MODALITY = "-"


@dataclass(frozen=True)
class RunSpec:
    model: str
    dataset: str
    modality: str
    method: str
    style: str = "direct"
    shots: int = 0
    seeds: Tuple[int, ...] = (0,)
    sampling: Optional[SamplingParams] = None
    probe: Optional[ProbeConfig] = None
    variant_set: Optional[str] = None  # "<target>:<base-hash>:<variant id>"
    heuristic: Optional[str] = None
    extraction_style: str = ExtractionStyle.PREFILL.value
    subsample: Optional[Tuple[int, int]] = None

    def normalized(self) -> "RunSpec":
        """Drop settings the method never reads so they cannot perturb the cell key."""
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        seeds = tuple(int(s) for s in self.seeds)
        if self.method == "heuristic":
            if self.heuristic not in HEURISTICS:
                raise ConfigError(f"heuristic cells need one of {HEURISTICS}, got {self.heuristic!r}")
            return replace(self, model="", modality=NO_MODALITY, style="direct", shots=0, seeds=seeds,
                           sampling=None, probe=None, variant_set=None, extraction_style="")
        modality = Modality(self.modality).value
        if self.method in ("probe", "random_probe"):
            return replace(self, modality=modality, seeds=seeds, sampling=None, heuristic=None, variant_set=None,
                           probe=self.probe or ProbeConfig(seed=seeds[0]))
        return replace(self, modality=modality, seeds=seeds, probe=None, heuristic=None, extraction_style="",
                       sampling=self.sampling or SamplingParams(seed=seeds[0]))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["seeds"] = list(self.seeds)
        data["sampling"] = self.sampling.to_dict() if self.sampling else None
        data["probe"] = self.probe.to_dict() if self.probe else None
        data["subsample"] = list(self.subsample) if self.subsample else None
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunSpec":
        data = dict(data)
        data["seeds"] = tuple(data.get("seeds", (0,)))
        data["sampling"] = SamplingParams.from_dict(data["sampling"]) if data.get("sampling") else None
        data["probe"] = ProbeConfig.from_dict(data["probe"]) if data.get("probe") else None
        data["subsample"] = tuple(data["subsample"]) if data.get("subsample") else None
        return cls(**data)

    @property
    def label(self) -> str:
        parts = [self.dataset, self.model or self.heuristic, self.modality, self.method, self.style, f"{self.shots}shot"]
        if self.variant_set:
            parts.append(self.variant_set)
        return "/".join(str(p) for p in parts)


@dataclass
class RunResult:
    cell_key: str
    spec: dict
    status: str
    metrics: Dict[str, float] = field(default_factory=dict)
    n_classes: int = 0
    sample_ids: List[str] = field(default_factory=list)
    labels: List[int] = field(default_factory=list)
    predictions: List[int] = field(default_factory=list)
    curve: Optional[dict] = None
    failures: int = 0
    skips: int = 0
    extra: dict = field(default_factory=dict)
    error: Optional[str] = None
    wall_clock: float = 0.0
    versions: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def run_spec(self) -> RunSpec:
        return RunSpec.from_dict(self.spec)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunResult":
        return cls(**data)


class ResultStore:
    """Append-only JSON lines; the last line for a cell key wins."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def results(self) -> List[RunResult]:
        if not self.path.exists():
            return []
        with open(self.path, "r", encoding="utf-8") as f:
            return [RunResult.from_dict(json.loads(line)) for line in f if line.strip()]

    def latest(self) -> Dict[str, RunResult]:
        return {r.cell_key: r for r in self.results()}

    def completed_keys(self) -> set:
        return {key for key, r in self.latest().items() if r.ok}

    def get(self, cell_key: str) -> Optional[RunResult]:
        return self.latest().get(cell_key)

    def append(self, result: RunResult) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(result.to_json() + "\n")
            f.flush()
            os.fsync(f.fileno())


def host_stamp() -> dict:
    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "cpus": psutil.cpu_count(logical=True),
        "ram_gb": round(psutil.virtual_memory().total / 1024 ** 3, 1),
    }


# --- workspace ------------------------------------------------------------------------


class Workspace:
    """Resolves datasets, templates and adapters for one experiment; holds at most one adapter."""

    def __init__(
        self,
        exp: ExperimentConfig,
        adapter_factory: Optional[Callable[[AdapterConfig], ModelAdapter]] = None,
        rewriter=None,
    ):
        self.exp = exp
        self.out_dir = Path(exp.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.store = ResultStore(self.out_dir / "results.jsonl")
        self.variants_root = self.out_dir / "prompts"
        self.adapter_factory = adapter_factory or load_adapter
        self.rewriter = rewriter
        self._splits = {}
        self._adapter: Optional[ModelAdapter] = None

    def _entry(self, dataset_id: str):
        if dataset_id not in self.exp.datasets:
            raise ConfigError(f"dataset {dataset_id!r} is not declared in {self.exp.name}")
        return self.exp.datasets[dataset_id]

    def split(self, dataset_id: str, split: str):
        if (dataset_id, split) not in self._splits:
            self._splits[(dataset_id, split)] = load_split(dataset_id, split, self.exp.data_root)
        return self._splits[(dataset_id, split)]

    def template(self, dataset_id: str):
        return load_template(self._entry(dataset_id).template)

    def serial_config(self, dataset_id: str) -> SerializationConfig:
        return SerializationConfig.from_dict(self._entry(dataset_id).serialization)

    def render_config(self, dataset_id: str) -> RenderConfig:
        return RenderConfig.from_dict(self._entry(dataset_id).render)

    def adapter_config(self, name: str) -> AdapterConfig:
        if name not in self.exp.adapters:
            raise ConfigError(f"adapter {name!r} is not declared in {self.exp.name}")
        return AdapterConfig.from_entry(self.exp.adapters[name])

    def adapter(self, name: str) -> ModelAdapter:
        if self._adapter is not None and self._adapter.name == name:
            return self._adapter
        self.release_adapter()
        self._adapter = self.adapter_factory(self.adapter_config(name))
        return self._adapter

    def release_adapter(self) -> None:
        if self._adapter is not None:
            logger.info(f"Releasing adapter {self._adapter.name}")
            self._adapter.close()
            self._adapter = None

    def data_version(self, dataset_id: str) -> str:
        manifest = load_manifest(dataset_id, self.exp.data_root)
        return hashlib.sha256(json.dumps(manifest.checksums, sort_keys=True).encode()).hexdigest()[:16]

    def versions(self, spec: RunSpec) -> dict:
        versions = {"data": self.data_version(spec.dataset)}
        if spec.method != "heuristic":
            versions.update(
                representation=representation_digest(
                    spec.modality, self.serial_config(spec.dataset), self.render_config(spec.dataset)
                ),
                template=self.template(spec.dataset).template_hash(),
                adapter=adapter_version(self.adapter_config(spec.model)),
            )
        return versions

    def cell_key(self, spec: RunSpec) -> str:
        payload = {"spec": spec.normalized().to_dict(), "versions": self.versions(spec)}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()

    def splits_for(self, spec: RunSpec):
        train, test = self.split(spec.dataset, "train"), self.split(spec.dataset, "test")
        if spec.subsample:
            seed = spec.seeds[0]
            train, test = subsample(train, spec.subsample[0], seed), subsample(test, spec.subsample[1], seed)
        return train, test


# --- cells --------------------------------------------------------------------------------


def _variant_template(ws: Workspace, spec: RunSpec, template):
    if not spec.variant_set:
        return template
    target, base_hash, variant_id = spec.variant_set.split(":")
    variant_set = load_variant_set(template, target, ws.variants_root)
    if variant_set is None or not variant_set.base_hash.startswith(base_hash):
        raise NotFoundError(f"variant set {spec.variant_set} not found for {spec.dataset}")
    text = next((v.text for v in variant_set.variants if v.id == int(variant_id)), None)
    if text is None:
        raise NotFoundError(f"variant {variant_id} missing from {variant_set.set_id}")
    return apply_variant(template, target, text)


def _run_prompt(ws: Workspace, spec: RunSpec, result: RunResult) -> None:
    train, test = ws.splits_for(spec)
    template = ws.template(spec.dataset).with_style(spec.style, spec.shots)
    check_template_matches(template, test)
    template = _variant_template(ws, spec, template)
    serial, render = ws.serial_config(spec.dataset), ws.render_config(spec.dataset)
    shots = select_shots(train, spec.shots, spec.modality, serial, render) if spec.shots else None
    adapter = ws.adapter(spec.model)
    params = spec.sampling

    correct_counts = []
    for i, sid in enumerate(test.sample_ids):
        rep = representation_for(test, i, spec.modality, serial, render)
        bundle = assemble_prompt(rep, template, shots, sample_id=sid)
        try:
            outputs = adapter.generate(bundle, params)
        except ContextLengthError as e:
            logger.warning(f"Skipping {sid}: {e}")
            result.skips += 1
            continue
        parsed = [parse_answer(text, template.letters) for text in outputs]
        truth = int(test.y[i])
        result.sample_ids.append(sid)
        result.labels.append(truth)
        result.predictions.append(parsed[0].label)
        result.failures += int(parsed[0].failed)
        correct_counts.append(sum(p.label == truth for p in parsed))

    result.n_classes = test.n_classes
    result.metrics = {
        "macro_f1": macro_f1(result.labels, result.predictions, result.n_classes).macro_f1,
        "failure_rate": result.failures / len(result.predictions) if result.predictions else 0.0,
        "skipped": float(result.skips),
    }
    if params.n > 1 and correct_counts:
        result.extra["correct_counts"] = correct_counts
        result.metrics["pass@1"] = dataset_pass_at_k(correct_counts, params.n, 1)
        result.metrics[f"pass@{params.n}"] = dataset_pass_at_k(correct_counts, params.n, params.n)


def extract_stores(ws: Workspace, spec: RunSpec, adapter: ModelAdapter, train, test):
    """Train and test activation stores for a probe cell, extracting what is missing."""
    template = ws.template(spec.dataset).with_style(spec.style, spec.shots)
    check_template_matches(template, test)
    serial, render = ws.serial_config(spec.dataset), ws.render_config(spec.dataset)
    shots = select_shots(train, spec.shots, spec.modality, serial, render) if spec.shots else None
    style = ExtractionStyle(spec.extraction_style)
    stores = {}
    for ds in (train, test):
        store = ActivationStore(ws.out_dir, store_key_for(adapter, ds, spec.modality, template, style, serial, render))
        stores[ds.split] = extract_dataset(ds, spec.modality, template, adapter, store, serial, render, style, shots)
    return stores


def _fill_from_curve(result: RunResult, curve, test) -> None:
    labels = test.labels_by_id()
    best = curve.best_layer
    result.n_classes = test.n_classes
    result.sample_ids = list(curve.test_ids)
    result.labels = [labels[sid] for sid in curve.test_ids]
    result.predictions = list(curve.predictions[best])
    result.curve = curve.to_dict()
    result.metrics = {"macro_f1": curve.best_score, "best_layer": float(best)}


def _run_probe(ws: Workspace, spec: RunSpec, result: RunResult) -> None:
    train, test = ws.splits_for(spec)
    stores = extract_stores(ws, spec, ws.adapter(spec.model), train, test)
    curve = train_layerwise(
        stores["train"], stores["test"], train.labels_by_id(), test.labels_by_id(),
        n_classes=test.n_classes, config=spec.probe, out_dir=ws.out_dir / "probes" / result.cell_key[:16],
    )
    result.skips = len(stores["train"].skips) + len(stores["test"].skips)
    _fill_from_curve(result, curve, test)


def _run_random_probe(ws: Workspace, spec: RunSpec, result: RunResult) -> None:
    train, test = ws.splits_for(spec)
    ws.release_adapter()
    template = ws.template(spec.dataset).with_style(spec.style, spec.shots)
    check_template_matches(template, test)
    serial, render = ws.serial_config(spec.dataset), ws.render_config(spec.dataset)
    shots = select_shots(train, spec.shots, spec.modality, serial, render) if spec.shots else None
    curve = random_probe_run(
        ws.adapter_config(spec.model), train, test, spec.modality, template, spec.probe, spec.seeds[0], ws.out_dir,
        serial, render, ExtractionStyle(spec.extraction_style), shots,
        out_dir=ws.out_dir / "probes" / result.cell_key[:16], factory=ws.adapter_factory,
    )
    _fill_from_curve(result, curve, test)
    result.extra["baseline"] = "random_probe"


def _run_heuristic(ws: Workspace, spec: RunSpec, result: RunResult) -> None:
    train, test = ws.splits_for(spec)
    seeds = list(spec.seeds)
    score = evaluate_heuristic(spec.heuristic, train.y, test.y, test.n_classes, seeds)
    result.n_classes = test.n_classes
    result.sample_ids = list(test.sample_ids)
    result.labels = [int(v) for v in test.y]
    result.predictions = score.predictions[score.seeds[0]]
    result.metrics = {"macro_f1": score.mean, "macro_f1_sd": score.sd}
    result.extra["predictions_by_seed"] = {str(s): p for s, p in score.predictions.items()}


RUNNERS = {
    "prompt": _run_prompt,
    "probe": _run_probe,
    "random_probe": _run_random_probe,
    "heuristic": _run_heuristic,
}


def run_cell(ws: Workspace, spec: RunSpec, cell_key: Optional[str] = None) -> RunResult:
    """Execute one cell. Exceptions are recorded on the result, never raised."""
    spec = spec.normalized()
    result = RunResult(cell_key=cell_key or ws.cell_key(spec), spec=spec.to_dict(), status="ok")
    timing = {}
    try:
        result.versions = {**ws.versions(spec), "host": host_stamp()}
        with log_duration(logger, f"Cell {spec.label}") as timing:
            RUNNERS[spec.method](ws, spec, result)
    except Exception as e:
        logger.error(f"Cell {spec.label} failed: {e}", exc_info=True)
        result.status = "failed"
        result.error = f"{type(e).__name__}: {e}\n{traceback.format_exc(limit=5)}"
    result.wall_clock = timing.get("seconds", 0.0)
    return result


# --- matrix -------------------------------------------------------------------------------


def expand_matrix(exp: ExperimentConfig) -> List[RunSpec]:
    """Enumerate grid cells; image modalities on text-only adapters are dropped with a warning."""
    grid = exp.grid
    sampling = SamplingParams.from_dict(exp.sampling) if exp.sampling else None
    specs = []
    for dataset_id in grid.datasets:
        for kind in grid.heuristics:
            seeds = (0,) if kind == "majority" else tuple(range(config.HEURISTIC_SEEDS))
            specs.append(RunSpec(model="", dataset=dataset_id, modality=NO_MODALITY, method="heuristic",
                                 heuristic=kind, seeds=seeds, subsample=exp.subsample))
        for seed in grid.seeds:
            probe = ProbeConfig.from_dict({**exp.probe, "seed": seed})
            for model in grid.models + grid.random_probe_models:
                methods = grid.methods if model in grid.models else ()
                if model in grid.random_probe_models:
                    methods = tuple(methods) + ("random_probe",)
                entry = exp.adapters[model]
                for modality in grid.modalities:
                    if Modality(modality).has_images and not entry.supports_images:
                        logger.warning(f"Dropping {model} x {modality} on {dataset_id}: adapter is text-only")
                        continue
                    for method in methods:
                        for style in grid.styles:
                            for shots in grid.shots:
                                specs.append(RunSpec(
                                    model=model, dataset=dataset_id, modality=modality, method=method,
                                    style=style, shots=shots, seeds=(seed,),
                                    sampling=replace(sampling, seed=seed) if sampling and method == "prompt" else None,
                                    probe=probe if method in ("probe", "random_probe") else None,
                                    extraction_style=(ExtractionStyle.POST_COT if style == "cot" else ExtractionStyle.PREFILL).value,
                                    subsample=exp.subsample,
                                ))
    return specs


@dataclass
class MatrixSummary:
    executed: int = 0
    cached: int = 0
    failed: int = 0
    results: List[RunResult] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 2 if self.failed else 0


def _dispatch_celery(spec: RunSpec, exp: ExperimentConfig) -> RunResult:
    # tasks imports this module
    from tasks import run_cell_task

    if exp.source_path is None:
        raise ConfigError("celery dispatch needs an experiment loaded from a file")

    async_result = run_cell_task.delay(spec.to_dict(), str(exp.source_path), str(exp.out_dir))
    return RunResult.from_dict(async_result.get())


def run_matrix(ws: Workspace, specs: List[RunSpec], dispatch: str = "local") -> MatrixSummary:
    """Run every cell not yet completed; cells are grouped by model so one adapter is loaded at a time."""
    summary = MatrixSummary()
    done = ws.store.completed_keys()
    pending, seen = [], set()
    for spec in specs:
        spec = spec.normalized()
        key = ws.cell_key(spec)
        if key in done:
            summary.cached += 1
            continue
        if key in seen:
            continue
        seen.add(key)
        pending.append((spec, key))
    pending.sort(key=lambda item: (item[0].model, item[0].method == "random_probe"))
    logger.info(f"Matrix: {len(pending)} cell(s) to run, {summary.cached} already complete")

    try:
        for spec, key in pending:
            if dispatch == "celery":
                result = _dispatch_celery(spec, ws.exp)
            else:
                result = run_cell(ws, spec, key)
            ws.store.append(result)
            summary.results.append(result)
            summary.executed += 1
            if not result.ok:
                summary.failed += 1
    finally:
        ws.release_adapter()
    logger.info(f"Matrix finished: {summary.executed} executed, {summary.cached} cached, {summary.failed} failed")
    return summary


# --- stability ------------------------------------------------------------------------------


@dataclass
class StabilityReport:
    spread: object
    pass_at_k: object
    variant_keys: List[str]
    sampling_key: str

    def to_dict(self) -> dict:
        return {
            "spread": self.spread.to_dict(),
            "pass_at_k": self.pass_at_k.to_dict(),
            "variant_keys": self.variant_keys,
            "sampling_key": self.sampling_key,
        }


def ensure_variants(ws: Workspace, dataset_id: str, target: str, total_n: int = 10, batch_b: int = 5):
    """Persisted variant set for the dataset template, generating it on first use."""
    template = ws.template(dataset_id)
    variant_set = load_variant_set(template, target, ws.variants_root)
    if variant_set is None:
        rewriter = ws.rewriter or OpenAICompatibleClient()
        variant_set = generate_variants(template, target, rewriter, total_n, batch_b)
        save_variant_set(variant_set, ws.variants_root)
    return variant_set


def _run_or_reuse(ws: Workspace, spec: RunSpec) -> RunResult:
    spec = spec.normalized()
    key = ws.cell_key(spec)
    cached = ws.store.get(key)
    if cached is not None and cached.ok:
        return cached
    result = run_cell(ws, spec, key)
    ws.store.append(result)
    if not result.ok:
        raise HarnessError(f"stability cell {spec.label} failed: {result.error}")
    return result


def stability_run(
    ws: Workspace,
    dataset_id: str,
    model: str,
    modality: str,
    target: str = "system",
    n_samples: int = 20,
    total_n: int = 10,
    batch_b: int = 5,
    seed: int = 0,
) -> StabilityReport:
    """Per-variant greedy macro F1 spread, plus pass@K of n samples on the base prompt."""
    variant_set = ensure_variants(ws, dataset_id, target, total_n, batch_b)
    tag = f"{target}:{variant_set.base_hash[:12]}"
    try:
        variant_results = [
            _run_or_reuse(ws, RunSpec(model=model, dataset=dataset_id, modality=modality, method="prompt",
                                      seeds=(seed,), variant_set=f"{tag}:{v.id}"))
            for v in variant_set.variants
        ]
        sampled = _run_or_reuse(ws, RunSpec(model=model, dataset=dataset_id, modality=modality, method="prompt",
                                            seeds=(seed,), sampling=SamplingParams.sampled(n=n_samples, seed=seed)))
    finally:
        ws.release_adapter()

    spread = variant_spread([r.metrics["macro_f1"] for r in variant_results])
    table = pass_at_k_table(sampled.extra["correct_counts"], n_samples, ks=(1, n_samples))
    report = StabilityReport(spread, table, [r.cell_key for r in variant_results], sampled.cell_key)

    summary_spec = RunSpec(model=model, dataset=dataset_id, modality=modality, method="stability", seeds=(seed,),
                           variant_set=f"{tag}:all", sampling=SamplingParams.sampled(n=n_samples, seed=seed)).normalized()
    key = ws.cell_key(summary_spec)
    if key not in ws.store.completed_keys():
        result = RunResult(cell_key=key, spec=summary_spec.to_dict(), status="ok", n_classes=sampled.n_classes)
        result.versions = {**ws.versions(summary_spec), "host": host_stamp()}
        result.metrics = {
            "min": spread.min, "max": spread.max, "mean": spread.mean, "median": spread.median,
            "delta": spread.delta, "pass@1": table.estimates[1],
            f"pass@{n_samples}": table.estimates[n_samples], "delta_pass": table.delta,
        }
        result.extra = report.to_dict()
        ws.store.append(result)
    logger.info(f"Stability {dataset_id}/{model}/{modality}/{target}: delta={spread.delta:.3f} "
                f"P@1={table.estimates[1]:.3f} P@{n_samples}={table.estimates[n_samples]:.3f}")
    return report


# --- audit ------------------------------------------------------------------------------------


def audit_result(result: RunResult) -> List[str]:
    """Recompute stored metrics from stored predictions; returns mismatch descriptions."""
    if not result.ok:
        return []
    method = result.spec["method"]
    problems = []

    def check(name, value):
        if result.metrics.get(name) != value:
            problems.append(f"{name}: stored {result.metrics.get(name)!r} != recomputed {value!r}")

    if method in ("prompt", "probe", "random_probe"):
        check("macro_f1", macro_f1(result.labels, result.predictions, result.n_classes).macro_f1)
        if "correct_counts" in result.extra:
            n = result.spec["sampling"]["n"]
            check("pass@1", dataset_pass_at_k(result.extra["correct_counts"], n, 1))
            check(f"pass@{n}", dataset_pass_at_k(result.extra["correct_counts"], n, n))
    elif method == "heuristic":
        scores = [macro_f1(result.labels, preds, result.n_classes).macro_f1
                  for preds in result.extra["predictions_by_seed"].values()]
        check("macro_f1", float(np.mean(scores)))
    elif method == "stability":
        spread = variant_spread(result.extra["spread"]["f1s"])
        check("delta", spread.delta)
        check("mean", spread.mean)
    return problems


def probe_embeddings(ws: Workspace, result: RunResult):
    """Best-layer test activations behind a probe result, with their true labels."""
    spec = result.run_spec
    cfg = ws.adapter_config(spec.model)
    if spec.method == "random_probe":
        cfg = replace(cfg, name=f"{cfg.name}-random", pretrained=False, seed=spec.seeds[0])
    template = ws.template(spec.dataset).with_style(spec.style, spec.shots)
    key = StoreKey(
        model=cfg.name,
        dataset=spec.dataset,
        split="test",
        modality=spec.modality,
        style=template.style,
        extraction_style=spec.extraction_style,
        shots=template.shots_per_class,
        template_hash=template.template_hash(),
        adapter_version=adapter_version(cfg),
        representation=representation_digest(spec.modality, ws.serial_config(spec.dataset), ws.render_config(spec.dataset)),
    )
    store = ActivationStore(ws.out_dir, key)
    layer = int(result.metrics["best_layer"])
    return store.features(result.sample_ids)[:, layer, :], np.asarray(result.labels)
