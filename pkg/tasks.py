from dataclasses import asdict

from celery_app import app
from config import load_experiment
from harness import RunSpec, Workspace, run_cell
from logging_setup import get_logger

logger = get_logger("tasks")


@app.task(name="tasks.run_cell_task")
def run_cell_task(spec: dict, experiment_path: str, out_dir: str):
    """
    Celery task that executes one matrix cell and returns the serialized RunResult.
    The caller appends it to the result store.
    """
    run_spec = RunSpec.from_dict(spec)
    logger.info(f"Celery task started for cell: {run_spec.label}")
    workspace = Workspace(load_experiment(experiment_path, out_dir))
    try:
        result = run_cell(workspace, run_spec)
    finally:
        workspace.release_adapter()
    if not result.ok:
        logger.error(f"Cell {run_spec.label} failed on the worker: {result.error}")
    return asdict(result)
