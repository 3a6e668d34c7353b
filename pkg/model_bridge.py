"""Model adapters, hidden-state extraction and the on-disk activation store.

Every adapter exposes L+1 probe sites per prompt: index 0 is the embedding
output, 1..L are the transformer block outputs, all taken at the last position.
"""
import hashlib
import json
import os
import re
import time
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from config import AdapterEntry, config
from errors import (
    AdapterPreconditionError,
    BackendError,
    ConfigError,
    ContextLengthError,
    DomainError,
    ExtractionAbortedError,
    NotFoundError,
    StoreMismatchError,
)
from logging_setup import get_logger
from prompting import ANSWER_PATTERN, PromptBundle, PromptTemplate, ShotExample, assemble_prompt
from represent import (
    RENDERER_VERSION,
    SERIALIZER_VERSION,
    Modality,
    RenderConfig,
    SerializationConfig,
    representation_digest,
    representation_for,
)

logger = get_logger("model_bridge")


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.0
    top_p: float = 1.0
    max_new_tokens: int = 64
    seed: int = 0
    n: int = 1

    def __post_init__(self):
        if self.temperature < 0:
            raise DomainError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise DomainError("top_p must lie in (0, 1]")
        if self.n < 1:
            raise DomainError("n must be positive")
        if self.n > 1 and self.temperature == 0:
            raise DomainError("n > 1 samples require temperature > 0")

    @classmethod
    def sampled(cls, n: int = 20, seed: int = 0, max_new_tokens: int = 64) -> "SamplingParams":
        return cls(temperature=0.7, top_p=0.95, max_new_tokens=max_new_tokens, seed=seed, n=n)

    @classmethod
    def from_dict(cls, data: dict) -> "SamplingParams":
        return cls(**dict(data or {}))

    def to_dict(self) -> dict:
        return asdict(self)


class ExtractionStyle(str, Enum):
    PREFILL = "prefill_last_token"
    POST_COT = "post_cot_last_token"


@dataclass
class ActivationRecord:
    sample_id: str
    prompt_hash: str
    matrix: np.ndarray  # (L+1) x D
    extraction_style: ExtractionStyle

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise BackendError(f"hidden-state matrix must be (L+1) x D, got {self.matrix.shape}")
        if not np.isfinite(self.matrix).all():
            raise BackendError(f"non-finite hidden states for sample {self.sample_id}")


@dataclass(frozen=True)
class AdapterConfig:
    name: str
    backend: str = "stub"
    model_id: Optional[str] = None
    device: str = "auto"
    dtype: str = "bfloat16"
    supports_images: bool = False
    max_context: Optional[int] = None
    pretrained: bool = True
    seed: int = 0
    options: Dict = field(default_factory=dict)

    @classmethod
    def from_entry(cls, entry: AdapterEntry) -> "AdapterConfig":
        return cls(
            name=entry.name, backend=entry.backend, model_id=entry.model_id, device=entry.device,
            dtype=entry.dtype, supports_images=entry.supports_images, max_context=entry.max_context,
            options=dict(entry.options),
        )


def adapter_version(cfg: AdapterConfig) -> str:
    kind = "pretrained" if cfg.pretrained else f"random-{cfg.seed}"
    return f"{cfg.backend}:{cfg.model_id or cfg.name}:{kind}"


class ModelAdapter(ABC):
    """Behavioral contract shared by all backends."""

    def __init__(self, cfg: AdapterConfig):
        self.config = cfg
        self.name = cfg.name
        self.supports_images = cfg.supports_images
        self.num_layers = 0
        self.hidden_dim = 0

    @property
    def version(self) -> str:
        return adapter_version(self.config)

    def check_bundle(self, bundle: PromptBundle) -> None:
        if bundle.images and not self.supports_images:
            raise AdapterPreconditionError(f"{self.name} is text-only but the prompt carries {len(bundle.images)} image(s)")

    @abstractmethod
    def generate(self, bundle: PromptBundle, params: SamplingParams = SamplingParams()) -> List[str]:
        ...

    @abstractmethod
    def hidden_states(self, bundle: PromptBundle, style: ExtractionStyle = ExtractionStyle.PREFILL) -> ActivationRecord:
        ...

    def close(self) -> None:
        pass


# --- deterministic stub ----------------------------------------------------------------


def _seed_from(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).hexdigest()
    return int(digest[:16], 16)


def payload_mean(user_text: str) -> float:
    """Mean of the digit tokens in a rendered user text (decimal point ignored)."""
    match = re.search(r"Time series:\n(.*?)\n\nOutput format requirement", user_text, re.S)
    if not match:
        return 0.0
    values = []
    for line in match.group(1).split("\n"):
        line = line.split(":", 1)[1] if re.match(r"^[^\d\s-][^:]*:", line) else line
        for step in line.split(","):
            token = step.replace(" ", "")
            if re.fullmatch(r"-?\d+", token):
                values.append(int(token))
    return float(np.mean(values)) if values else 0.0


def _answer_span(text: str) -> int:
    """Offset of the final answer line in generated text, or len(text) if absent."""
    matches = list(re.finditer(r"the answer is", text, re.IGNORECASE))
    return matches[-1].start() if matches else len(text)


class StubAdapter(ModelAdapter):
    """Hash-based stand-in model.

    Hidden rows are seeded noise; when pretrained, layer 1 additionally carries
    `signal_fn(bundle)` on its first coordinate. Answers default to a letter
    chosen from the prompt hash.
    """

    def __init__(
        self,
        cfg: AdapterConfig,
        num_layers: int = 2,
        hidden_dim: int = 8,
        answer_fn: Optional[Callable[[PromptBundle, SamplingParams, int], str]] = None,
        signal_fn: Optional[Callable[[PromptBundle], float]] = None,
        signal_layer: int = 1,
    ):
        super().__init__(cfg)
        self.num_layers = int(cfg.options.get("num_layers", num_layers))
        self.hidden_dim = int(cfg.options.get("hidden_dim", hidden_dim))
        self.signal_layer = int(cfg.options.get("signal_layer", signal_layer))
        self.answer_fn = answer_fn
        self.signal_fn = signal_fn or (lambda bundle: payload_mean(bundle.user_text))

    def _check_context(self, bundle: PromptBundle) -> None:
        if self.config.max_context is None:
            return
        tokens = sum(len(turn["content"].split()) + 256 * len(turn["images"]) for turn in bundle.messages())
        if tokens > self.config.max_context:
            raise ContextLengthError(f"prompt needs {tokens} tokens, context holds {self.config.max_context}")

    def _default_answer(self, bundle: PromptBundle, params: SamplingParams, draw: int) -> str:
        if params.temperature == 0:
            pick = _seed_from(bundle.prompt_hash()) % len(bundle.answer_schema)
        else:
            pick = _seed_from(bundle.prompt_hash(), params.seed, draw) % len(bundle.answer_schema)
        letter, name = bundle.answer_schema[pick]
        answer = f"The answer is [{letter}] {name}"
        if bundle.style == "cot":
            mean = payload_mean(bundle.user_text)
            answer = f"The series has a mean digit value of {mean:.1f}, which points to {name}.\n{answer}"
        return answer

    def generate(self, bundle: PromptBundle, params: SamplingParams = SamplingParams()) -> List[str]:
        self.check_bundle(bundle)
        self._check_context(bundle)
        answer = self.answer_fn or self._default_answer
        return [answer(bundle, params, draw) for draw in range(params.n)]

    def hidden_states(self, bundle: PromptBundle, style: ExtractionStyle = ExtractionStyle.PREFILL) -> ActivationRecord:
        self.check_bundle(bundle)
        self._check_context(bundle)
        style = ExtractionStyle(style)
        position = "prefill"
        if style == ExtractionStyle.POST_COT:
            generated = self.generate(bundle)[0]
            reasoning = generated[: _answer_span(generated)]
            position = f"cot:{len(reasoning)}:{reasoning}"

        tag = f"{self.config.pretrained}:{self.config.seed}:{self.config.model_id or 'stub'}"
        rng = np.random.default_rng(_seed_from(tag, bundle.prompt_hash(), position))
        matrix = rng.standard_normal((self.num_layers + 1, self.hidden_dim))
        if self.config.pretrained:
            matrix[self.signal_layer, 0] += float(self.signal_fn(bundle))
        return ActivationRecord(
            sample_id=bundle.provenance.get("sample_id", ""),
            prompt_hash=bundle.prompt_hash(),
            matrix=matrix,
            extraction_style=style,
        )


# --- Hugging Face backend ----------------------------------------------------------------


def select_device(device: str = "auto") -> str:
    """Least-loaded available GPU for "auto", else CPU."""
    if device != "auto":
        return device
    import torch

    if not torch.cuda.is_available():
        return "cpu"
    try:
        import GPUtil

        available = GPUtil.getAvailable(order="load", limit=1, maxLoad=0.9, maxMemory=0.9)
        if available:
            return f"cuda:{available[0]}"
    except Exception as e:
        logger.warning(f"GPUtil device query failed: {e}")
    return "cuda:0"


class HFAdapter(ModelAdapter):
    """Open-weights chat model loaded with transformers (text-only or vision-language)."""

    def __init__(self, cfg: AdapterConfig):
        super().__init__(cfg)
        if not cfg.model_id:
            raise ConfigError(f"Adapter {cfg.name} needs a model_id")
        try:
            import torch
            from transformers import (
                AutoConfig,
                AutoModelForCausalLM,
                AutoModelForImageTextToText,
                AutoProcessor,
                AutoTokenizer,
            )
        except ImportError as e:
            raise BackendError(f"transformers backend unavailable: {e}") from e

        self._torch = torch
        self.device = select_device(cfg.device)
        dtype = getattr(torch, cfg.dtype, torch.float32)
        model_cls = AutoModelForImageTextToText if cfg.supports_images else AutoModelForCausalLM
        try:
            if cfg.supports_images:
                self.processor = AutoProcessor.from_pretrained(cfg.model_id)
                self.tokenizer = self.processor.tokenizer
            else:
                self.processor = None
                self.tokenizer = AutoTokenizer.from_pretrained(cfg.model_id)
            if cfg.pretrained:
                model = model_cls.from_pretrained(cfg.model_id, torch_dtype=dtype)
            else:
                # architecture only; parameters come from the default initializer under seed
                torch.manual_seed(cfg.seed)
                model = model_cls.from_config(AutoConfig.from_pretrained(cfg.model_id), torch_dtype=dtype)
        except Exception as e:
            raise BackendError(f"could not instantiate {cfg.model_id}: {e}") from e

        self.model = model.to(self.device).eval()
        text_config = model.config.get_text_config() if hasattr(model.config, "get_text_config") else model.config
        self.num_layers = int(text_config.num_hidden_layers)
        self.hidden_dim = int(text_config.hidden_size)
        self.max_context = cfg.max_context or getattr(text_config, "max_position_embeddings", None)
        logger.info(f"Loaded {self.version} on {self.device}: L={self.num_layers} D={self.hidden_dim}")

    def _encode(self, bundle: PromptBundle):
        from io import BytesIO

        from PIL import Image

        if self.processor is not None:
            messages = []
            for turn in bundle.messages():
                content = [{"type": "image", "image": Image.open(BytesIO(img)).convert("RGB")} for img in turn["images"]]
                content.append({"type": "text", "text": turn["content"]})
                messages.append({"role": turn["role"], "content": content})
            inputs = self.processor.apply_chat_template(
                messages, add_generation_prompt=True, tokenize=True, return_dict=True, return_tensors="pt",
            )
        else:
            messages = [{"role": t["role"], "content": t["content"]} for t in bundle.messages()]
            inputs = self.tokenizer.apply_chat_template(
                messages, add_generation_prompt=True, tokenize=True, return_dict=True, return_tensors="pt",
            )
        length = inputs["input_ids"].shape[1]
        if self.max_context and length > self.max_context:
            raise ContextLengthError(f"prompt has {length} tokens, context holds {self.max_context}")
        return inputs.to(self.device)

    def _with_retries(self, what: str, fn):
        for attempt in range(config.BACKEND_RETRIES):
            try:
                return fn()
            except ContextLengthError:
                raise
            except Exception as e:
                logger.warning(f"Attempt {attempt + 1} of {what} failed on {self.name}: {e}")
                if attempt < config.BACKEND_RETRIES - 1:
                    time.sleep(config.RETRY_DELAY)
        logger.error(f"{what} failed on {self.name} after multiple attempts")
        raise BackendError(f"{what} failed on {self.name} after {config.BACKEND_RETRIES} attempts")

    def _generate_ids(self, inputs, params: SamplingParams):
        torch = self._torch
        torch.manual_seed(params.seed)
        kwargs = {"max_new_tokens": params.max_new_tokens, "num_return_sequences": params.n}
        if params.temperature > 0:
            kwargs.update(do_sample=True, temperature=params.temperature, top_p=params.top_p)
        else:
            kwargs.update(do_sample=False)
        with torch.no_grad():
            out = self.model.generate(**inputs, **kwargs)
        return out[:, inputs["input_ids"].shape[1]:]

    def generate(self, bundle: PromptBundle, params: SamplingParams = SamplingParams()) -> List[str]:
        self.check_bundle(bundle)
        inputs = self._encode(bundle)

        def run():
            ids = self._generate_ids(inputs, params)
            return [self.tokenizer.decode(row, skip_special_tokens=True) for row in ids]

        return self._with_retries("generation", run)

    def _last_position_states(self, inputs) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            out = self.model(**inputs, output_hidden_states=True)
        states = out.hidden_states
        if len(states) != self.num_layers + 1:
            raise BackendError(f"expected {self.num_layers + 1} hidden-state tensors, got {len(states)}")
        return torch.stack([h[0, -1] for h in states]).float().cpu().numpy()

    def _reasoning_tokens(self, generated) -> int:
        """Tokens that decode entirely before the answer line."""
        text = self.tokenizer.decode(generated, skip_special_tokens=True)
        cut = _answer_span(text)
        if cut >= len(text):
            return len(generated)
        for k in range(len(generated)):
            if len(self.tokenizer.decode(generated[: k + 1], skip_special_tokens=True)) > cut:
                return k if k > 0 else len(generated)
        return len(generated)

    def hidden_states(self, bundle: PromptBundle, style: ExtractionStyle = ExtractionStyle.PREFILL) -> ActivationRecord:
        self.check_bundle(bundle)
        style = ExtractionStyle(style)
        inputs = self._encode(bundle)

        def run():
            if style == ExtractionStyle.PREFILL:
                return self._last_position_states(inputs)
            torch = self._torch
            max_new = int(self.config.options.get("cot_max_new_tokens", 512))
            generated = self._generate_ids(inputs, SamplingParams(max_new_tokens=max_new))[0]
            keep = generated[: self._reasoning_tokens(generated)].unsqueeze(0)
            extended = dict(inputs)
            extended["input_ids"] = torch.cat([inputs["input_ids"], keep], dim=1)
            if "attention_mask" in inputs:
                extended["attention_mask"] = torch.cat([inputs["attention_mask"], torch.ones_like(keep)], dim=1)
            return self._last_position_states(extended)

        matrix = self._with_retries("hidden-state extraction", run)
        return ActivationRecord(
            sample_id=bundle.provenance.get("sample_id", ""),
            prompt_hash=bundle.prompt_hash(),
            matrix=matrix,
            extraction_style=style,
        )

    def close(self) -> None:
        del self.model
        if self._torch.cuda.is_available():
            self._torch.cuda.empty_cache()


def load_adapter(cfg: AdapterConfig, **stub_kwargs) -> ModelAdapter:
    if cfg.backend == "stub":
        return StubAdapter(cfg, **stub_kwargs)
    if cfg.backend == "hf":
        return HFAdapter(cfg)
    raise ConfigError(f"Unknown adapter backend {cfg.backend!r}")


def make_random_control(reference, seed: int, factory=None, **stub_kwargs) -> ModelAdapter:
    """Same architecture as `reference` with freshly initialized weights under `seed`.

    `reference` may be a loaded adapter or its AdapterConfig.
    """
    cfg = reference.config if isinstance(reference, ModelAdapter) else reference
    control = replace(cfg, name=f"{cfg.name}-random", pretrained=False, seed=seed)
    adapter = factory(control) if factory else load_adapter(control, **stub_kwargs)
    logger.info(f"Random control {adapter.version}: L={adapter.num_layers} D={adapter.hidden_dim}")
    return adapter


# --- activation store -------------------------------------------------------------------------


@dataclass(frozen=True)
class StoreKey:
    model: str
    dataset: str
    split: str
    modality: str
    style: str
    extraction_style: str
    shots: int = 0
    template_hash: str = ""
    adapter_version: str = ""
    serializer_version: str = SERIALIZER_VERSION
    renderer_version: str = RENDERER_VERSION
    representation: str = ""  # representation_digest of the serialization and render settings

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode("utf-8")).hexdigest()[:16]

    def lineage(self) -> dict:
        """Everything but the split; train and test stores of one probe must agree on it."""
        data = asdict(self)
        data.pop("split")
        return data


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class ActivationStore:
    """`acts/<key-hash>/meta.json` plus one `<sample_id>.f32` blob per sample. Append-only."""

    def __init__(self, root, key: StoreKey):
        self.key = key
        self.path = Path(root) / "acts" / key.digest()
        self.path.mkdir(parents=True, exist_ok=True)
        meta_path = self.path / "meta.json"
        if meta_path.exists():
            with open(meta_path, "r", encoding="utf-8") as f:
                self.meta = json.load(f)
            if self.meta["key"] != asdict(key):
                raise StoreMismatchError(f"store {self.path} belongs to a different key")
        else:
            self.meta = {"key": asdict(key), "L": None, "D": None, "records": {}, "styles": {}, "skips": {}}

    def _flush(self) -> None:
        _atomic_write(self.path / "meta.json", json.dumps(self.meta, indent=2, sort_keys=True).encode("utf-8"))

    @staticmethod
    def _blob_name(sample_id: str) -> str:
        return re.sub(r"[^A-Za-z0-9._-]", "_", sample_id) + ".f32"

    @property
    def shape(self):
        if self.meta["L"] is None:
            return None
        return (self.meta["L"] + 1, self.meta["D"])

    @property
    def sample_ids(self) -> List[str]:
        return list(self.meta["records"])

    @property
    def skips(self) -> Dict[str, str]:
        return dict(self.meta["skips"])

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self.meta["records"]

    def __len__(self) -> int:
        return len(self.meta["records"])

    def put(self, record: ActivationRecord) -> bool:
        """Store a record; returns False when the sample is already present."""
        if record.sample_id in self:
            return False
        rows, dim = record.matrix.shape
        if self.meta["L"] is None:
            self.meta["L"], self.meta["D"] = rows - 1, dim
        elif (rows, dim) != self.shape:
            raise StoreMismatchError(f"record {record.sample_id} has shape {(rows, dim)}, store holds {self.shape}")
        _atomic_write(self.path / self._blob_name(record.sample_id), record.matrix.astype("<f4").tobytes())
        self.meta["records"][record.sample_id] = record.prompt_hash
        self.meta["styles"][record.sample_id] = ExtractionStyle(record.extraction_style).value
        self.meta["skips"].pop(record.sample_id, None)
        self._flush()
        return True

    def record_skip(self, sample_id: str, reason: str) -> None:
        self.meta["skips"][sample_id] = reason
        self._flush()

    def get(self, sample_id: str) -> ActivationRecord:
        if sample_id not in self:
            raise NotFoundError(f"no activations for {sample_id} in {self.path}")
        matrix = np.frombuffer((self.path / self._blob_name(sample_id)).read_bytes(), dtype="<f4")
        return ActivationRecord(
            sample_id=sample_id,
            prompt_hash=self.meta["records"][sample_id],
            matrix=matrix.reshape(self.shape).copy(),
            extraction_style=ExtractionStyle(self.meta["styles"][sample_id]),
        )

    def features(self, sample_ids: List[str]) -> np.ndarray:
        """N x (L+1) x D tensor in the given order."""
        if not sample_ids:
            rows, dim = self.shape or (0, 0)
            return np.zeros((0, rows, dim), dtype=np.float32)
        return np.stack([self.get(sid).matrix for sid in sample_ids])


def store_key_for(
    adapter: ModelAdapter,
    ds,
    modality,
    template: PromptTemplate,
    style: ExtractionStyle,
    serial_config: SerializationConfig = SerializationConfig(),
    render_config: RenderConfig = RenderConfig(),
) -> StoreKey:
    return StoreKey(
        model=adapter.name,
        dataset=ds.id,
        split=ds.split,
        modality=Modality(modality).value,
        style=template.style,
        extraction_style=ExtractionStyle(style).value,
        shots=template.shots_per_class,
        template_hash=template.template_hash(),
        adapter_version=adapter.version,
        representation=representation_digest(modality, serial_config, render_config),
    )


def extract_dataset(
    ds,
    modality,
    template: PromptTemplate,
    adapter: ModelAdapter,
    store: ActivationStore,
    serial_config: SerializationConfig = SerializationConfig(),
    render_config: RenderConfig = RenderConfig(),
    style: ExtractionStyle = ExtractionStyle.PREFILL,
    shots: Optional[List[ShotExample]] = None,
    max_skip_fraction: Optional[float] = None,
) -> ActivationStore:
    """Fill `store` with one record per sample; present and skipped ids are not recomputed."""
    expected = store_key_for(adapter, ds, modality, template, style, serial_config, render_config)
    if expected != store.key:
        raise StoreMismatchError(f"store key {store.key} does not match the extraction arguments {expected}")
    max_skip_fraction = config.MAX_SKIP_FRACTION if max_skip_fraction is None else max_skip_fraction
    budget = max_skip_fraction * len(ds)

    def check_budget():
        skipped = len(store.meta["skips"])
        if skipped > budget:
            raise ExtractionAbortedError(
                f"{skipped} of {len(ds)} samples skipped, above the {max_skip_fraction:.0%} limit"
            )

    # skips recorded by an earlier aborted run still count against this one
    check_budget()
    todo = [i for i, sid in enumerate(ds.sample_ids) if sid not in store and sid not in store.meta["skips"]]
    logger.info(f"Extracting {len(todo)}/{len(ds)} samples of {ds.id}/{ds.split} ({Modality(modality).value}) with {adapter.name}")
    for done, i in enumerate(todo, start=1):
        sid = ds.sample_ids[i]
        rep = representation_for(ds, i, modality, serial_config, render_config)
        bundle = assemble_prompt(rep, template, shots, sample_id=sid)
        try:
            store.put(adapter.hidden_states(bundle, style))
        except (ContextLengthError, BackendError) as e:
            logger.warning(f"Skipping {sid}: {e}")
            store.record_skip(sid, f"{type(e).__name__}: {e}")
            check_budget()
        if done % 50 == 0:
            logger.info(f"{done}/{len(todo)} samples extracted")
    return store
