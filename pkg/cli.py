"""Command-line entry point: `python cli.py --config experiment.toml <command> ...`.

Exit codes: 0 success, 2 when some matrix cells failed, 1 on fatal errors.
"""
import argparse
import sys
from pathlib import Path

from config import config, load_experiment
from dataset import DatasetMeta, NanPolicy, describe, ingest, load_split, read_source_table, series_for_representation
from errors import ConfigError, HarnessError
from harness import (
    RunSpec,
    Workspace,
    audit_result,
    ensure_variants,
    expand_matrix,
    extract_stores,
    probe_embeddings,
    run_matrix,
    stability_run,
)
from logging_setup import logger
from model_bridge import ExtractionStyle, SamplingParams
from probes import ProbeConfig
from prompting import TARGETS
from report import LAYOUTS, emit_figures, emit_metric_rows, emit_tables
from represent import RENDERER_VERSION, Modality, render_line_plot, render_spectrogram, serialize_digits

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


def _workspace(args) -> Workspace:
    if not args.config:
        raise ConfigError(f"`{args.command}` needs --config <experiment.toml>")
    return Workspace(load_experiment(args.config, args.out_dir))


def _cell_spec(args, method: str, probe: ProbeConfig = None) -> RunSpec:
    extraction = ExtractionStyle.POST_COT if args.style == "cot" else ExtractionStyle.PREFILL
    return RunSpec(
        model=args.model,
        dataset=args.dataset,
        modality=args.modality,
        method=method,
        style=args.style,
        shots=args.shots,
        seeds=(args.seed,),
        extraction_style=extraction.value,
        probe=probe,
        sampling=SamplingParams.sampled(n=args.samples, seed=args.seed) if getattr(args, "samples", 1) > 1 else None,
    )


def cmd_ingest(args) -> int:
    meta = DatasetMeta(
        id=args.id,
        class_names=[name.strip() for name in args.classes.split(",")],
        length=args.length,
        channel_names=args.channels.split(",") if args.channels else None,
        render_style=args.render_style,
        sample_rate=args.sample_rate,
        nan_policy=NanPolicy(args.nan_policy),
        normalize=args.normalize,
        provenance=str(args.source),
    )
    root = Path(args.data_root or config.DATA_DIR)
    ingest(read_source_table(args.source), meta, root)
    info = describe(args.id, root)
    logger.info(f"Ingested {args.id}: V={info['V']} T={info['T']} C={info['C']} "
                f"train={info['splits']['train']['N']} test={info['splits']['test']['N']}")
    return EXIT_OK


def _sample(args):
    ws = _workspace(args)
    ds = load_split(args.dataset, args.split, ws.exp.data_root)
    index = ds.sample_ids.index(args.sample) if args.sample else args.index
    return ws, ds, index


def cmd_render(args) -> int:
    ws, ds, index = _sample(args)
    render = ws.render_config(args.dataset)
    sample = series_for_representation(ds, index)
    draw = render_spectrogram if ds.render_style == "spectrogram" else render_line_plot
    png = draw(sample, render, ds.channel_names)
    out = Path(args.out or ws.out_dir / "renders" / f"{ds.id}_{ds.sample_ids[index]}.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(png)
    logger.info(f"Rendered {ds.id}/{ds.sample_ids[index]} with {RENDERER_VERSION} to {out}")
    return EXIT_OK


def cmd_serialize(args) -> int:
    ws, ds, index = _sample(args)
    print(serialize_digits(series_for_representation(ds, index), ws.serial_config(args.dataset), ds.channel_names))
    return EXIT_OK


def cmd_variants(args) -> int:
    ws = _workspace(args)
    variant_set = ensure_variants(ws, args.dataset, args.target, args.n, args.batch)
    logger.info(f"Variant set {variant_set.set_id}: {len(variant_set.variants)} validated variants")
    return EXIT_OK


def cmd_extract(args) -> int:
    ws = _workspace(args)
    spec = _cell_spec(args, "probe").normalized()
    train, test = ws.splits_for(spec)
    try:
        stores = extract_stores(ws, spec, ws.adapter(spec.model), train, test)
    finally:
        ws.release_adapter()
    for split, store in stores.items():
        logger.info(f"{split}: {len(store)} records, {len(store.skips)} skipped, shape {store.shape} at {store.path}")
    return EXIT_OK


def _run_cells(ws: Workspace, specs, dispatch: str = "local") -> int:
    summary = run_matrix(ws, specs, dispatch=dispatch)
    for result in summary.results:
        if result.ok:
            logger.info(f"{result.cell_key[:12]}: {result.metrics}")
    return summary.exit_code


def cmd_probe(args) -> int:
    ws = _workspace(args)
    probe = ProbeConfig.from_dict({**ws.exp.probe, "seed": args.seed})
    method = "random_probe" if args.random_control else "probe"
    return _run_cells(ws, [_cell_spec(args, method, probe)])


def cmd_prompt_eval(args) -> int:
    ws = _workspace(args)
    return _run_cells(ws, [_cell_spec(args, "prompt")])


def cmd_stability(args) -> int:
    ws = _workspace(args)
    settings = ws.exp.stability
    report = stability_run(
        ws, args.dataset, args.model, args.modality,
        target=args.target,
        n_samples=args.samples or int(settings.get("n_samples", 20)),
        total_n=int(settings.get("variants", 10)),
        batch_b=int(settings.get("batch_size", 5)),
        seed=args.seed,
    )
    spread, table = report.spread, report.pass_at_k
    print(f"delta={spread.delta:.3f} mean={spread.mean:.3f} "
          f"P@1={table.estimates[1]:.3f} P@{table.n}={table.estimates[table.n]:.3f} dP={table.delta:.3f}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    ws = _workspace(args)
    return _run_cells(ws, expand_matrix(ws.exp), args.dispatch)


def cmd_report(args) -> int:
    ws = _workspace(args)
    results = list(ws.store.latest().values())
    problems = {r.cell_key: audit_result(r) for r in results}
    for key, issues in problems.items():
        for issue in issues:
            logger.warning(f"Audit {key[:12]}: {issue}")

    out_dir = ws.out_dir / "report"
    emit_metric_rows(results, out_dir / "metrics.csv")
    layouts = LAYOUTS if args.layout == "all" else (args.layout,)
    for layout in layouts:
        try:
            emit_tables(results, layout, out_dir, ws.exp.grid.datasets or None, ws.exp.reference_csv)
        except ConfigError as e:
            logger.warning(f"Skipping table {layout}: {e}")

    embeddings = {}
    for result in results:
        spec = result.spec
        if result.ok and spec["method"] in ("probe", "random_probe") and spec["dataset"] == args.projection_dataset:
            source = f"{spec['model']}{'-random' if spec['method'] == 'random_probe' else ''} ({spec['modality']})"
            embeddings[source] = probe_embeddings(ws, result)
    emit_figures(results, out_dir / "figures", embeddings, seed=args.seed)
    return EXIT_PARTIAL if any(problems.values()) else EXIT_OK


def _add_cell_arguments(parser, samples: bool = False):
    parser.add_argument("--model", required=True, help="Adapter name from the experiment file")
    parser.add_argument("--dataset", required=True)
    parser.add_argument("--modality", default="d", choices=[m.value for m in Modality])
    parser.add_argument("--style", default="direct", choices=["direct", "cot"])
    parser.add_argument("--shots", type=int, default=0, help="In-context examples per class")
    if samples:
        parser.add_argument("--samples", type=int, default=1, help="Sampled completions per item (pass@n)")


def _add_sample_arguments(parser):
    parser.add_argument("--dataset", required=True)
    parser.add_argument("--split", default="test", choices=["train", "test"])
    parser.add_argument("--index", type=int, default=0)
    parser.add_argument("--sample", default=None, help="Sample id (overrides --index)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Prompting versus probing diagnostics for time-series classification")
    parser.add_argument("--config", type=Path, default=None, help="Experiment TOML file")
    parser.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    parser.add_argument("--out-dir", type=Path, default=None, help="Overrides [paths].out_dir")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="Validate a long-format CSV and write the canonical dataset store")
    p.add_argument("--source", type=Path, required=True, help="CSV with sample_id,split,label,channel,t,value")
    p.add_argument("--id", required=True)
    p.add_argument("--classes", required=True, help="Comma-separated class names in label order")
    p.add_argument("--length", type=int, required=True, help="Declared series length T")
    p.add_argument("--channels", default=None, help="Comma-separated channel names")
    p.add_argument("--render-style", default="line", choices=["line", "spectrogram"])
    p.add_argument("--sample-rate", type=float, default=None)
    p.add_argument("--nan-policy", default=NanPolicy.REJECT.value, choices=[n.value for n in NanPolicy])
    p.add_argument("--normalize", action="store_true", help="z-score each channel before representation")
    p.add_argument("--data-root", type=Path, default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("render", help="Render one sample to PNG")
    _add_sample_arguments(p)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("serialize", help="Print the digit serialization of one sample")
    _add_sample_arguments(p)
    p.set_defaults(func=cmd_serialize)

    p = sub.add_parser("variants", help="Generate or load the validated prompt variants of a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--target", default="system", choices=list(TARGETS))
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--batch", type=int, default=5)
    p.set_defaults(func=cmd_variants)

    p = sub.add_parser("extract", help="Extract hidden states for the train and test splits")
    _add_cell_arguments(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("probe", help="Layer-wise probes for one model, dataset and modality")
    _add_cell_arguments(p)
    p.add_argument("--random-control", action="store_true", help="Probe a randomly initialized copy instead")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("prompt-eval", help="Zero- or few-shot prompting for one cell")
    _add_cell_arguments(p, samples=True)
    p.set_defaults(func=cmd_prompt_eval)

    p = sub.add_parser("stability", help="Prompt-variant spread and pass@K for one cell")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--modality", default="d", choices=[m.value for m in Modality])
    p.add_argument("--target", default="system", choices=list(TARGETS))
    p.add_argument("--samples", type=int, default=None, help="Completions per item for pass@K (default 20)")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("matrix", help="Run every cell of the experiment grid")
    p.add_argument("--dispatch", default="local", choices=["local", "celery"])
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("report", help="Emit tables and figures from the result store")
    p.add_argument("--layout", default="all", choices=("all",) + LAYOUTS)
    p.add_argument("--projection-dataset", default=None, help="Dataset whose probe embeddings are projected")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except HarnessError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FATAL
    except Exception as e:
        logger.critical(f"Fatal error in {args.command}: {e}", exc_info=True)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
