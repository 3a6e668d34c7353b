import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

from errors import ConfigError

load_dotenv()


class Config:
    # Paths
    BASE_DIR = Path(os.getenv("PROBE_GAP_HOME", Path(__file__).parent))
    DATA_DIR = Path(os.getenv("DATA_DIR", BASE_DIR / "data"))
    OUT_DIR = Path(os.getenv("OUT_DIR", BASE_DIR / "runs"))
    LOG_DIR = Path(os.getenv("LOG_DIR", BASE_DIR / "logs"))
    PROMPTS_DIR = Path(os.getenv("PROMPTS_DIR", Path(__file__).parent / "prompts"))
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

    # Celery broker / result backend
    REDIS_URL = os.getenv("REDIS_URL", "redis://localhost:6379/0")

    # Variant rewriter (any chat-completions compatible endpoint)
    REWRITER_ENDPOINT = os.getenv("REWRITER_ENDPOINT", "https://api.openai.com/v1")
    REWRITER_MODEL = os.getenv("REWRITER_MODEL", "gpt-4.1-mini")
    REWRITER_API_KEY = os.getenv("REWRITER_API_KEY", None)
    REWRITER_TIMEOUT = int(os.getenv("REWRITER_TIMEOUT", "120"))  # seconds
    REWRITER_MAX_RETRIES = int(os.getenv("REWRITER_MAX_RETRIES", "3"))

    # Model backends
    BACKEND_RETRIES = int(os.getenv("BACKEND_RETRIES", "3"))
    RETRY_DELAY = float(os.getenv("RETRY_DELAY", "5"))  # seconds
    MAX_SKIP_FRACTION = float(os.getenv("MAX_SKIP_FRACTION", "0.1"))

    # Baselines / seeds
    HEURISTIC_SEEDS = int(os.getenv("HEURISTIC_SEEDS", "20"))
    DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "0"))

    # Create required directories
    LOG_DIR.mkdir(parents=True, exist_ok=True)

    @classmethod
    def validate(cls):
        """Validate essential configurations"""
        required = ["DATA_DIR", "OUT_DIR", "LOG_DIR"]
        for var in required:
            if not getattr(cls, var):
                raise ValueError(f"Missing required configuration: {var}")
        if not 0.0 <= cls.MAX_SKIP_FRACTION <= 1.0:
            raise ValueError(f"MAX_SKIP_FRACTION must lie in [0, 1], got {cls.MAX_SKIP_FRACTION}")
        if cls.HEURISTIC_SEEDS < 1:
            raise ValueError("HEURISTIC_SEEDS must be positive")


# Initialize and validate config
config = Config()
config.validate()


# --- experiment file ---------------------------------------------------------


@dataclass(frozen=True)
class DatasetEntry:
    id: str
    template: Path
    serialization: Dict[str, Any] = field(default_factory=dict)
    render: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class AdapterEntry:
    name: str
    backend: str = "hf"
    model_id: Optional[str] = None
    device: str = "auto"
    dtype: str = "bfloat16"
    supports_images: bool = False
    max_context: Optional[int] = None
    options: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class GridEntry:
    models: Tuple[str, ...] = ()
    datasets: Tuple[str, ...] = ()
    modalities: Tuple[str, ...] = ("d", "v", "d+v")
    methods: Tuple[str, ...] = ("prompt", "probe")
    styles: Tuple[str, ...] = ("direct",)
    shots: Tuple[int, ...] = (0,)
    seeds: Tuple[int, ...] = (0,)
    heuristics: Tuple[str, ...] = ()
    random_probe_models: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    data_root: Path
    out_dir: Path
    datasets: Dict[str, DatasetEntry]
    adapters: Dict[str, AdapterEntry]
    grid: GridEntry
    probe: Dict[str, Any] = field(default_factory=dict)
    sampling: Dict[str, Any] = field(default_factory=dict)
    stability: Dict[str, Any] = field(default_factory=dict)
    subsample: Optional[Tuple[int, int]] = None
    reference_csv: Optional[Path] = None
    source_path: Optional[Path] = None


def _tuple(value, cast=str):
    return tuple(cast(v) for v in (value or ()))


def load_experiment(path, out_dir: Optional[Path] = None) -> ExperimentConfig:
    """Parse an experiment TOML file into an ExperimentConfig.

    Relative paths inside the file resolve against the file's directory.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Experiment file not found: {path}")
    with open(path, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Invalid experiment file {path}: {e}") from e

    base = path.parent

    def resolve(p, default: Path) -> Path:
        if p is None:
            return default
        p = Path(p)
        return p if p.is_absolute() else base / p

    paths = raw.get("paths", {})
    datasets = {}
    for entry in raw.get("datasets", []):
        if "id" not in entry:
            raise ConfigError("Every [[datasets]] entry needs an id")
        template = resolve(entry.get("template"), config.PROMPTS_DIR / entry["id"] / "template.toml")
        datasets[entry["id"]] = DatasetEntry(
            id=entry["id"],
            template=template,
            serialization=dict(entry.get("serialization", {})),
            render=dict(entry.get("render", {})),
        )

    adapters = {}
    for entry in raw.get("adapters", []):
        if "name" not in entry:
            raise ConfigError("Every [[adapters]] entry needs a name")
        known = {"name", "backend", "model_id", "device", "dtype", "supports_images", "max_context"}
        adapters[entry["name"]] = AdapterEntry(
            name=entry["name"],
            backend=entry.get("backend", "hf"),
            model_id=entry.get("model_id"),
            device=entry.get("device", "auto"),
            dtype=entry.get("dtype", "bfloat16"),
            supports_images=bool(entry.get("supports_images", False)),
            max_context=entry.get("max_context"),
            options={k: v for k, v in entry.items() if k not in known},
        )

    g = raw.get("grid", {})
    grid = GridEntry(
        models=_tuple(g.get("models")),
        datasets=_tuple(g.get("datasets")),
        modalities=_tuple(g.get("modalities", ("d", "v", "d+v"))),
        methods=_tuple(g.get("methods", ("prompt", "probe"))),
        styles=_tuple(g.get("styles", ("direct",))),
        shots=_tuple(g.get("shots", (0,)), int),
        seeds=_tuple(g.get("seeds", (config.DEFAULT_SEED,)), int),
        heuristics=_tuple(g.get("heuristics")),
        random_probe_models=_tuple(g.get("random_probe_models")),
    )
    for model in grid.models + grid.random_probe_models:
        if model not in adapters:
            raise ConfigError(f"Grid references unknown adapter: {model}")
    for dataset_id in grid.datasets:
        if dataset_id not in datasets:
            raise ConfigError(f"Grid references unknown dataset: {dataset_id}")

    ablation = raw.get("ablation", {})
    subsample = None
    if "train_rows" in ablation or "test_rows" in ablation:
        subsample = (int(ablation.get("train_rows", 500)), int(ablation.get("test_rows", 100)))

    report = raw.get("report", {})
    return ExperimentConfig(
        name=raw.get("name", path.stem),
        data_root=resolve(paths.get("data_root"), config.DATA_DIR),
        out_dir=Path(out_dir) if out_dir else resolve(paths.get("out_dir"), config.OUT_DIR),
        datasets=datasets,
        adapters=adapters,
        grid=grid,
        probe=dict(raw.get("probe", {})),
        sampling=dict(raw.get("sampling", {})),
        stability=dict(raw.get("stability", {})),
        subsample=subsample,
        reference_csv=resolve(report["reference_csv"], None) if "reference_csv" in report else None,
        source_path=path,
    )
