"""Tables and figures from the matrix result store.

Every table comes as a wide CSV, a Markdown copy and a long provenance CSV
in which each numeric cell names the RunResult it was read from. Figures are
plotly HTML files, each backed by a CSV of the plotted points.
"""
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
from sklearn.manifold import TSNE

from baselines import load_reference_rows
from errors import ConfigError
from logging_setup import get_logger
from metrics import write_metric_rows

logger = get_logger("report")

LAYOUTS = ("main", "modality_split", "ablation", "stability")
STABILITY_COLUMNS = ["min", "max", "mean", "median", "delta", "pass@1", "pass@n", "delta_pass"]
IMPORTED = "imported"
DERIVED = "derived"


# --- rows ---------------------------------------------------------------------------


def _first_seed(result) -> int:
    return int(result.spec["seeds"][0])


def _row(result, **extra) -> dict:
    spec = result.spec
    row = {
        "dataset": spec["dataset"],
        "model": spec["model"] or spec["heuristic"],
        "method": spec["method"],
        "modality": spec["modality"],
        "style": spec["style"],
        "shots": spec["shots"],
        "seed": _first_seed(result),
        "variant_set": spec.get("variant_set"),
        "cell_key": result.cell_key,
    }
    row.update(extra)
    return row


def metric_rows(results) -> List[dict]:
    """One row per (result, metric) in the fixed metric column order plus the cell key."""
    rows = []
    for result in results:
        if not result.ok:
            continue
        for metric, value in sorted(result.metrics.items()):
            rows.append(_row(result, metric=metric, value=value))
    return rows


def results_frame(results) -> pd.DataFrame:
    """Successful results with their headline macro F1, one row per cell."""
    rows = [_row(r, value=r.metrics["macro_f1"]) for r in results if r.ok and "macro_f1" in r.metrics]
    columns = ["dataset", "model", "method", "modality", "style", "shots", "seed", "variant_set", "cell_key", "value"]
    return pd.DataFrame(rows, columns=columns)


# --- tables ---------------------------------------------------------------------------


def _markdown(frame: pd.DataFrame) -> str:
    def cell(value) -> str:
        if value is None or (isinstance(value, float) and np.isnan(value)):
            return ""
        if isinstance(value, float):
            return f"{value:.3f}"
        return str(value)

    header = "| " + " | ".join(str(c) for c in frame.columns) + " |"
    rule = "|" + "|".join("---" for _ in frame.columns) + "|"
    body = ["| " + " | ".join(cell(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join([header, rule] + body) + "\n"


def _pick_one(frame: pd.DataFrame, keys: List[str]) -> pd.DataFrame:
    """Keep the lowest-seed result per table cell so every cell has a single source."""
    if frame.empty:
        return frame
    frame = frame.sort_values(["seed", "cell_key"])
    dupes = frame.duplicated(keys, keep="first")
    if dupes.any():
        logger.debug(f"{int(dupes.sum())} result(s) shadowed by a lower seed")
    return frame[~dupes]


def _pivot(long: pd.DataFrame, keys: List[str], columns: Sequence[str], name: str) -> pd.DataFrame:
    """Wide table over `columns` plus Avg; incomplete rows leave blanks and an empty Avg."""
    if long.empty:
        return pd.DataFrame(columns=keys + list(columns) + ["Avg"])
    wide = long.pivot_table(index=keys, columns="column", values="value", aggfunc="first", sort=False)
    wide = wide.reindex(columns=list(columns))
    missing = int(wide.isna().sum().sum())
    if missing:
        logger.warning(f"Table {name}: {missing} cell(s) missing, rendered blank")
    wide["Avg"] = wide[list(columns)].mean(axis=1, skipna=False)
    return wide.reset_index()


def _write_table(wide: pd.DataFrame, long: pd.DataFrame, out_dir: Path, name: str) -> Dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out_dir / f"{name}.csv",
        "markdown": out_dir / f"{name}.md",
        "provenance": out_dir / f"{name}_provenance.csv",
    }
    wide.to_csv(paths["csv"], index=False)
    paths["markdown"].write_text(_markdown(wide), encoding="utf-8")
    long.to_csv(paths["provenance"], index=False)
    logger.info(f"Wrote table {name} ({len(wide)} rows) to {paths['csv']}")
    return paths


def _default_cells(frame: pd.DataFrame) -> pd.DataFrame:
    return frame[(frame["style"] == "direct") & (frame["shots"] == 0) & frame["variant_set"].isna()]


def _main_long(frame: pd.DataFrame, reference: Optional[pd.DataFrame], modality: str) -> pd.DataFrame:
    parts = []
    if reference is not None and not reference.empty:
        ref = reference.rename(columns={"dataset": "column"})
        ref["group"], ref["cell_key"] = "reference", IMPORTED
        parts.append(ref[["group", "model", "method", "column", "value", "cell_key"]])

    heuristics = frame[frame["method"] == "heuristic"].assign(group="baseline")
    controls = _default_cells(frame[(frame["method"] == "random_probe") & (frame["modality"] == modality)])
    controls = controls.assign(group="baseline", model=controls["model"] + "-random", method="probe")
    models = _default_cells(frame[frame["method"].isin(["prompt", "probe"]) & (frame["modality"] == modality)])
    models = models.assign(group="model")
    for part in (heuristics, controls, models):
        if not part.empty:
            part = _pick_one(part, ["group", "model", "method", "dataset"])
            parts.append(part.rename(columns={"dataset": "column"})[["group", "model", "method", "column", "value", "cell_key"]])
    if not parts:
        return pd.DataFrame(columns=["group", "model", "method", "column", "value", "cell_key"])
    return pd.concat(parts, ignore_index=True)


def _stability_long(results) -> pd.DataFrame:
    rows = []
    for result in results:
        if not result.ok or result.spec["method"] != "stability":
            continue
        n = result.spec["sampling"]["n"]
        metrics = dict(result.metrics)
        metrics["pass@n"] = metrics.get(f"pass@{n}")
        for column in STABILITY_COLUMNS:
            rows.append({
                "model": result.spec["model"], "dataset": result.spec["dataset"], "modality": result.spec["modality"],
                "column": column, "value": metrics.get(column), "cell_key": result.cell_key,
                "seed": _first_seed(result),
            })
    frame = pd.DataFrame(rows, columns=["model", "dataset", "modality", "column", "value", "cell_key", "seed"])
    return _pick_one(frame, ["model", "dataset", "modality", "column"]).drop(columns="seed")


def _stability_table(long: pd.DataFrame) -> pd.DataFrame:
    keys = ["model", "dataset", "modality"]
    if long.empty:
        return pd.DataFrame(columns=keys + STABILITY_COLUMNS)
    wide = long.pivot_table(index=keys, columns="column", values="value", aggfunc="first").reindex(columns=STABILITY_COLUMNS)
    wide = wide.reset_index().sort_values(keys)
    averages = []
    for (model, modality), group in wide.groupby(["model", "modality"]):
        averages.append({"model": model, "dataset": f"Avg ({modality})", "modality": modality,
                         **group[STABILITY_COLUMNS].mean().to_dict()})
    for model, group in wide.groupby("model"):
        averages.append({"model": model, "dataset": "Total Avg", "modality": "-",
                         **group[STABILITY_COLUMNS].mean().to_dict()})
    return pd.concat([wide, pd.DataFrame(averages)], ignore_index=True)


def emit_tables(
    results,
    layout: str,
    out_dir: Path,
    datasets: Optional[Sequence[str]] = None,
    reference_csv: Optional[Path] = None,
    modality: str = "d+v",
) -> Dict[str, Path]:
    """Write one table layout; returns the paths of the CSV, Markdown and provenance files."""
    if layout not in LAYOUTS:
        raise ConfigError(f"unknown table layout {layout!r}; expected one of {LAYOUTS}")
    results = list(results)
    out_dir = Path(out_dir)

    if layout == "stability":
        long = _stability_long(results)
        if long.empty:
            raise ConfigError("no stability results in the store")
        return _write_table(_stability_table(long), long, out_dir, "stability")

    frame = results_frame(results)
    if frame.empty:
        raise ConfigError(f"no successful results to build the {layout} table")
    columns = list(datasets) if datasets else sorted(frame["dataset"].unique())

    if layout == "main":
        reference = load_reference_rows(reference_csv) if reference_csv else None
        long = _main_long(frame, reference, modality)
        keys = ["group", "model", "method"]
    elif layout == "modality_split":
        cells = _default_cells(frame[frame["method"].isin(["prompt", "probe", "random_probe"])])
        keys = ["model", "method", "modality"]
        long = _pick_one(cells, keys + ["dataset"]).rename(columns={"dataset": "column"})[keys + ["column", "value", "cell_key"]]
    else:
        cells = frame[frame["method"].isin(["prompt", "probe"]) & frame["variant_set"].isna()]
        keys = ["method", "model", "modality", "shots", "style"]
        long = _pick_one(cells, keys + ["dataset"]).rename(columns={"dataset": "column"})[keys + ["column", "value", "cell_key"]]

    wide = _pivot(long, keys, columns, layout)
    return _write_table(wide, long, out_dir, layout)


# --- figures -----------------------------------------------------------------------------


def layer_curve_points(results) -> pd.DataFrame:
    """L+1 rows per probe run: macro F1 per layer and the 1/C chance level."""
    rows = []
    for result in results:
        if not result.ok or result.curve is None:
            continue
        spec = result.spec
        model = spec["model"] + ("-random" if spec["method"] == "random_probe" else "")
        for layer, score in enumerate(result.curve["scores"]):
            rows.append({
                "dataset": spec["dataset"], "model": model, "method": spec["method"], "modality": spec["modality"],
                "style": spec["style"], "shots": spec["shots"], "layer": layer, "macro_f1": score,
                "chance": 1.0 / result.n_classes, "cell_key": result.cell_key,
            })
    return pd.DataFrame(rows, columns=["dataset", "model", "method", "modality", "style", "shots", "layer",
                                       "macro_f1", "chance", "cell_key"])


def _layer_curve_figure(points: pd.DataFrame, title: str) -> go.Figure:
    fig = go.Figure()
    for (model, method, style, shots), run in points.groupby(["model", "method", "style", "shots"]):
        control = method == "random_probe"
        fig.add_trace(go.Scatter(
            x=run["layer"],
            y=run["macro_f1"],
            name=f"{model} ({style}, {shots}-shot)",
            mode="lines+markers",
            line=dict(dash="dash" if control else "solid", color="#7f7f7f" if control else None),
        ))
    fig.add_hline(y=float(points["chance"].iloc[0]), line_dash="dot", annotation_text="chance")
    fig.update_layout(title=title, xaxis_title="Layer", yaxis_title="Macro F1", yaxis_range=[0, 1.05])
    return fig


def variant_points(results) -> pd.DataFrame:
    """Per-variant macro F1 from stability summaries."""
    rows = []
    for result in results:
        if not result.ok or result.spec["method"] != "stability":
            continue
        for variant, f1 in enumerate(result.extra["spread"]["f1s"], start=1):
            rows.append({
                "dataset": result.spec["dataset"], "model": result.spec["model"], "modality": result.spec["modality"],
                "variant": variant, "macro_f1": f1, "cell_key": result.cell_key,
            })
    return pd.DataFrame(rows, columns=["dataset", "model", "modality", "variant", "macro_f1", "cell_key"])


def projection_points(features: np.ndarray, labels, source: str, seed: int = 0) -> pd.DataFrame:
    """2D t-SNE of probe features, one row per sample."""
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    if n < 3:
        raise ConfigError(f"projection needs at least 3 samples, got {n}")
    perplexity = float(min(30, max(1, (n - 1) // 3)))
    coords = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(features)
    return pd.DataFrame({
        "x": coords[:, 0],
        "y": coords[:, 1],
        "label": np.asarray(labels, dtype=np.int64),
        "source": source,
        "seed": seed,
    })


def emit_figures(
    results,
    out_dir: Path,
    embeddings: Optional[Dict[str, tuple]] = None,
    seed: int = 0,
) -> Dict[str, Path]:
    """Layer curves, the prompt-variant box plot and the probe-embedding projection.

    `embeddings` maps a source name to (features, labels). Families with no
    data are skipped with a notice.
    """
    results = list(results)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    curves = layer_curve_points(results)
    if curves.empty:
        logger.warning("No probe curves in the store; skipping layer-curve figures")
    else:
        paths["layer_curves_csv"] = out_dir / "layer_curves.csv"
        curves.to_csv(paths["layer_curves_csv"], index=False)
        for (dataset_id, modality), points in curves.groupby(["dataset", "modality"]):
            path = out_dir / f"layer_curve_{dataset_id}_{modality.replace('+', 'p')}.html"
            _layer_curve_figure(points, f"Layer-wise probe macro F1: {dataset_id} ({modality})").write_html(str(path))
            paths[f"layer_curve_{dataset_id}_{modality}"] = path

    variants = variant_points(results)
    if variants.empty:
        logger.warning("No stability results in the store; skipping the variant box plot")
    else:
        paths["variant_box_csv"] = out_dir / "variant_f1.csv"
        variants.to_csv(paths["variant_box_csv"], index=False)
        fig = px.box(
            variants,
            x="modality",
            y="macro_f1",
            color="model",
            points="all",
            title="Prompt macro F1 across prompt variants",
            labels={"macro_f1": "Macro F1", "modality": "Modality"},
        )
        paths["variant_box"] = out_dir / "variant_f1.html"
        fig.write_html(str(paths["variant_box"]))

    if not embeddings:
        logger.warning("No embeddings supplied; skipping the projection figure")
    else:
        frames = [projection_points(features, labels, source, seed) for source, (features, labels) in embeddings.items()]
        projection = pd.concat(frames, ignore_index=True)
        paths["projection_csv"] = out_dir / "projection.csv"
        projection.to_csv(paths["projection_csv"], index=False)
        fig = px.scatter(
            projection.assign(label=projection["label"].astype(str)),
            x="x",
            y="y",
            color="label",
            facet_col="source",
            title=f"t-SNE of probe embeddings (seed {seed})",
        )
        paths["projection"] = out_dir / "projection.html"
        fig.write_html(str(paths["projection"]))

    logger.info(f"Wrote {len(paths)} figure file(s) to {out_dir}")
    return paths


def emit_metric_rows(results, path: Path) -> Path:
    return write_metric_rows(metric_rows(results), path)
