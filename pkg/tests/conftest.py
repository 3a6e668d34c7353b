import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))
# config reads these at import time
os.environ.setdefault("PROBE_GAP_HOME", tempfile.mkdtemp(prefix="probe_gap_tests_"))
os.environ.setdefault("LOG_LEVEL", "WARNING")
os.environ.setdefault("RETRY_DELAY", "0")

from config import load_experiment  # noqa: E402
from dataset import DatasetMeta, LabeledSequence, ingest  # noqa: E402
from metrics import macro_f1  # noqa: E402
from model_bridge import AdapterConfig, StubAdapter  # noqa: E402
from prompting import FORMAT_REQUIREMENT, PromptTemplate  # noqa: E402

TOY_CLASSES = ["low", "high"]
TOY_LEVELS = {"low": 0.2, "high": 9.8}


def toy_records(n_train: int = 10, n_test: int = 5, length: int = 8, seed: int = 0):
    """Univariate series whose level gives away the class."""
    rng = np.random.default_rng(seed)
    records = []
    for split, n in (("train", n_train), ("test", n_test)):
        for label in TOY_CLASSES:
            for i in range(n):
                values = np.round(TOY_LEVELS[label] + rng.uniform(-0.09, 0.09, size=length), 2)
                records.append(LabeledSequence(f"{split}-{label}-{i}", split, label, values[np.newaxis, :]))
    return records


def toy_template(**overrides) -> PromptTemplate:
    fields = dict(
        dataset="TOY",
        task_description="Decide whether the series sits at a low or a high level.",
        question="is the level of this series low or high?",
        class_names=tuple(TOY_CLASSES),
        hints=("Low series stay below 1.",),
    )
    fields.update(overrides)
    return PromptTemplate(**fields)


class ScriptedRewriter:
    """In-memory chat client returning queued responses, or valid variants when the queue is empty."""

    model = "scripted-rewriter"

    def __init__(self, responses=None, key="system_prompt"):
        self.responses = list(responses or [])
        self.key = key
        self.calls = []
        self.counter = 0

    def valid_batch(self, b: int) -> str:
        variants = []
        for _ in range(b):
            self.counter += 1
            variants.append({
                "id": self.counter,
                self.key: (
                    f"Variant {self.counter}. Decide whether the series sits at a low or a high level.\n"
                    f"Answer choices: [A] low [B] high\n"
                    f"Reply exactly as: {FORMAT_REQUIREMENT}."
                ),
            })
        return json.dumps({"variants": variants})

    def complete(self, system: str, user: str) -> str:
        self.calls.append((system, user))
        if self.responses:
            return self.responses.pop(0)
        return self.valid_batch(5)


@pytest.fixture
def data_root(tmp_path):
    return tmp_path / "data"


@pytest.fixture
def toy_datasets(data_root):
    meta = DatasetMeta(id="toy", class_names=list(TOY_CLASSES), length=8, provenance="synthetic")
    return ingest(toy_records(), meta, data_root)


@pytest.fixture
def template():
    return toy_template()


@pytest.fixture
def stub_adapter():
    return StubAdapter(AdapterConfig(name="stub", supports_images=True))


@pytest.fixture
def rewriter():
    return ScriptedRewriter()


@pytest.fixture
def experiment_file(tmp_path, toy_datasets, data_root):
    """Experiment over the toy dataset with one image-capable stub and one text-only stub."""
    template_path = tmp_path / "toy_template.toml"
    template_path.write_text(
        'dataset = "TOY"\n'
        'task_description = "Decide whether the series sits at a low or a high level."\n'
        'question = "is the level of this series low or high?"\n'
        'class_names = ["low", "high"]\n'
        'hints = ["Low series stay below 1."]\n',
        encoding="utf-8",
    )
    path = tmp_path / "experiment.toml"
    path.write_text(
        f'name = "toy"\n'
        f'[paths]\ndata_root = "{data_root.as_posix()}"\nout_dir = "{(tmp_path / "runs").as_posix()}"\n'
        f'[[datasets]]\nid = "toy"\ntemplate = "{template_path.as_posix()}"\n'
        f'[[adapters]]\nname = "stub"\nbackend = "stub"\nsupports_images = true\n'
        f'[[adapters]]\nname = "textonly"\nbackend = "stub"\nsupports_images = false\n'
        f'[grid]\nmodels = ["stub"]\ndatasets = ["toy"]\nmodalities = ["d", "v", "d+v"]\n'
        f'methods = ["prompt", "probe"]\nheuristics = []\n'
        f'[probe]\nfolds = 3\nc_grid = [0.1, 1.0, 10.0]\n',
        encoding="utf-8",
    )
    return path


@pytest.fixture
def experiment(experiment_file):
    return load_experiment(experiment_file)


def blobs(n_per_class: int, n_classes: int, dim: int = 8, separation: float = 10.0, seed: int = 0):
    """Gaussian blobs with unit variance, class means `separation` apart along distinct axes."""
    rng = np.random.default_rng(seed)
    features, labels = [], []
    for c in range(n_classes):
        center = np.zeros(dim)
        center[c % dim] = separation
        features.append(rng.standard_normal((n_per_class, dim)) + center)
        labels.extend([c + 1] * n_per_class)
    return np.vstack(features), np.asarray(labels, dtype=np.int64)


def chance_band(labels, n_classes: int, draws: int = 5000, coverage: float = 0.999, seed: int = 0):
    """Macro F1 interval reached by uniformly random guesses on these labels."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    scores = [macro_f1(labels, rng.integers(1, n_classes + 1, labels.size), n_classes).macro_f1 for _ in range(draws)]
    tail = (1 - coverage) / 2
    low, high = np.quantile(scores, [tail, 1 - tail])
    return float(low), float(high)
