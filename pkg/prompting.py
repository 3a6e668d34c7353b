"""Prompt assembly, answer parsing and validated prompt variants."""
import hashlib
import json
import re
import time
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple

import requests

from config import config
from dataset import TimeSeriesDataset, option_letters
from errors import (
    AssemblyError,
    BackendError,
    ConfigError,
    DomainError,
    LeakageError,
    NotFoundError,
    RewriterFormatError,
    VariantRejectedError,
)
from logging_setup import get_logger
from metrics import FAILURE
from represent import Modality, RenderConfig, Representation, SerializationConfig, representation_for

logger = get_logger("prompting")

FORMAT_REQUIREMENT = "The answer is [X] CLASS_NAME"
FORMAT_EXAMPLE = "The answer is [D] CABBAGE"
STANDARD_INSTRUCTIONS = (
    "You will be given a multiple choice question and a time series. "
    "Your job is to use the time series to answer the question."
)
NO_REASONING = "Do not explain your reasoning."
COT_INSTRUCTION = (
    "Think step by step: briefly describe the patterns in the time series that matter "
    "for the question, then give your final answer on its own line."
)
HINTS_HEADER = "Additional information that may help:"
IMAGE_NOTE = "(The time series is shown in the attached image.)"
STYLES = ("direct", "cot")
TARGETS = ("system", "question")

ANSWER_PATTERN = re.compile(r"answer is\s*\[([A-Za-z])\]", re.IGNORECASE)
BRACKET_LETTER = re.compile(r"\[([A-Z])\]")
OPTION_LINE = re.compile(r"^\[([A-Z])\] (.+)$")

# Variant rewriter prompts. {n} and {b} are filled with the batch size.
SYSTEM_REWRITER_PROMPT = """You are a prompt rewriter.

Rewrite the provided SYSTEM PROMPT into {n} distinct SYSTEM PROMPT variants that
preserve meaning, constraints, and all factual task content, while changing
phrasing, structure, and formatting.

Hard constraints (must obey):
- Do NOT add, remove, rename, or reorder any class names.
- Do NOT alter the semantic meaning of any class description.
- Preserve answer-choice letters (e.g., [A], [B]) exactly and in order.
- Preserve required output format strings exactly (punctuation/casing),
  e.g., "The answer is [X] CLASS_NAME".
- Do NOT introduce new task instructions (e.g., reasoning, confidence).
- Maintain an academically appropriate tone.

Diversity requirements:
- Each variant must differ meaningfully in organization and wording.
- Use multiple presentation styles (headings, bullets, numbered steps, etc.).
- Avoid trivial paraphrases.

Output format (strict): return valid JSON only:
{{
  "variants": [
    {{"id": 1, "system_prompt": "..."}},
    {{"id": 2, "system_prompt": "..."}}
  ]
}}
No extra keys. No markdown. No commentary."""

SYSTEM_REWRITER_REQUEST = """Generate {b} rewritten variants of the following.

IMPORTANT:
- Do NOT change class names.
- Do NOT change answer letters or their order.
- Do NOT change the required answer format.
- Output must be valid JSON only.

{base}"""

QUESTION_REWRITER_PROMPT = """You are a question rewriter.

Your task is to rewrite a GENERAL QUESTION into {n} distinct variants that preserve
the task, label space, and decision criteria, while changing wording, structure,
and phrasing.

Hard constraints (must obey):
- Do NOT change, rename, remove, or reorder answer choices.
- Preserve answer-choice letters exactly (e.g., [A], [B]) and their order.
- Do NOT introduce new labels, hints, or constraints.
- Do NOT add explanations, reasoning instructions, or output formatting rules.
- The rewritten question must ask the same classification decision.

Diversity requirements:
- Each variant must differ meaningfully in wording and structure.
- Vary tone (instructional vs. role-based), sentence structure, and framing.
- Avoid trivial paraphrases.

Output format (strict): return valid JSON only:
{{
  "variants": [
    {{"id": 1, "question": "..."}},
    {{"id": 2, "question": "..."}}
  ]
}}
No extra keys. No markdown. No commentary."""

QUESTION_REWRITER_REQUEST = """Generate {b} rewritten variants of the following.

IMPORTANT:
- Do NOT change the answer choice letters, names, or their order.
- Do NOT add output formatting rules.
- Do NOT add reasoning/explanation instructions.
- Output must be valid JSON only.

{base}"""


# --- templates ---------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    dataset: str
    task_description: str
    question: str
    class_names: Tuple[str, ...]
    hints: Tuple[str, ...] = ()
    style: str = "direct"
    shots_per_class: int = 0
    system_override: Optional[str] = None

    def __post_init__(self):
        if self.style not in STYLES:
            raise ConfigError(f"unknown prompt style {self.style!r}")
        if self.shots_per_class < 0:
            raise ConfigError("shots_per_class must be >= 0")
        if len(set(self.class_names)) != len(self.class_names) or not self.class_names:
            raise ConfigError(f"class names must be unique and non-empty: {self.class_names}")

    @property
    def letters(self) -> List[str]:
        return option_letters(len(self.class_names))

    @property
    def options(self) -> List[Tuple[str, str]]:
        return list(zip(self.letters, self.class_names))

    @property
    def choice_line(self) -> str:
        return " ".join(f"[{letter}] {name}" for letter, name in self.options)

    def template_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def with_style(self, style: str, shots_per_class: int) -> "PromptTemplate":
        return replace(self, style=style, shots_per_class=shots_per_class)


def load_template(path) -> PromptTemplate:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"Prompt template not found: {path}")
    with open(path, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Invalid prompt template {path}: {e}") from e
    missing = {"dataset", "task_description", "question", "class_names"} - set(raw)
    if missing:
        raise ConfigError(f"Prompt template {path} lacks: {sorted(missing)}")
    return PromptTemplate(
        dataset=raw["dataset"],
        task_description=raw["task_description"].strip(),
        question=raw["question"].strip(),
        class_names=tuple(raw["class_names"]),
        hints=tuple(raw.get("hints", ())),
        style=raw.get("style", "direct"),
        shots_per_class=int(raw.get("shots_per_class", 0)),
    )


def check_template_matches(template: PromptTemplate, ds: TimeSeriesDataset) -> None:
    if list(template.class_names) != list(ds.class_names):
        raise AssemblyError(
            f"Template classes {list(template.class_names)} differ from dataset {ds.id} classes {ds.class_names}"
        )


# --- bundles -----------------------------------------------------------------------


@dataclass(frozen=True)
class ShotExample:
    representation: Representation
    label: int  # 1-based
    split: str
    sample_id: str = ""


@dataclass(frozen=True)
class ShotTurn:
    user_text: str
    images: Tuple[bytes, ...]
    answer_text: str


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    images: Tuple[bytes, ...]
    answer_schema: Tuple[Tuple[str, str], ...]
    provenance: dict
    shots: Tuple[ShotTurn, ...] = ()
    query_images: Tuple[bytes, ...] = ()
    style: str = "direct"

    def messages(self) -> List[dict]:
        """Chat turns: system, alternating example/answer turns, then the query."""
        turns = [{"role": "system", "content": self.system_text, "images": []}]
        for shot in self.shots:
            turns.append({"role": "user", "content": shot.user_text, "images": list(shot.images)})
            turns.append({"role": "assistant", "content": shot.answer_text, "images": []})
        turns.append({"role": "user", "content": self.user_text, "images": list(self.query_images)})
        return turns

    def prompt_hash(self) -> str:
        h = hashlib.sha256()
        for turn in self.messages():
            h.update(turn["role"].encode())
            h.update(turn["content"].encode("utf-8"))
            for image in turn["images"]:
                h.update(hashlib.sha256(image).digest())
        return h.hexdigest()

    @property
    def letters(self) -> List[str]:
        return [letter for letter, _ in self.answer_schema]


def _insert_before_format(text: str, sentence: str) -> str:
    lines = text.split("\n")
    for i, line in enumerate(lines):
        if FORMAT_REQUIREMENT in line:
            return "\n".join(lines[:i] + [sentence] + lines[i:])
    return f"{text}\n{sentence}"


def system_text(template: PromptTemplate) -> str:
    if template.system_override is not None:
        text = template.system_override
    else:
        instructions = STANDARD_INSTRUCTIONS if template.style == "cot" else f"{STANDARD_INSTRUCTIONS} {NO_REASONING}"
        lines = [
            template.task_description,
            "",
            instructions,
            f"Answer choices: {template.choice_line}",
            f"Use exactly this format: {FORMAT_REQUIREMENT}.",
            f"Example: {FORMAT_EXAMPLE}.",
        ]
        if template.hints:
            lines += ["", HINTS_HEADER] + [f"- {hint}" for hint in template.hints]
        text = "\n".join(lines)
    if template.style == "cot":
        text = _insert_before_format(text, COT_INSTRUCTION)
    return text


def _payload(rep: Representation) -> str:
    if rep.modality == Modality.D:
        return rep.text
    if rep.modality == Modality.V:
        return IMAGE_NOTE
    return f"{rep.text}\n{IMAGE_NOTE}"


def user_text(template: PromptTemplate, rep: Representation) -> str:
    options = "\n".join(f"[{letter}] {name}" for letter, name in template.options)
    return (
        f"Dataset: {template.dataset}\n\n"
        f"Question: {template.question}\n\n"
        f"Options:\n{options}\n\n"
        f"Time series:\n{_payload(rep)}\n\n"
        f"Output format requirement: {FORMAT_REQUIREMENT}"
    )


def answer_text(template: PromptTemplate, label: int) -> str:
    letter, name = template.options[label - 1]
    return f"The answer is [{letter}] {name}"


def assemble_prompt(
    representation: Representation,
    template: PromptTemplate,
    shot_examples: Optional[Sequence[ShotExample]] = None,
    sample_id: str = "",
) -> PromptBundle:
    shot_examples = list(shot_examples or [])
    expected = template.shots_per_class * len(template.class_names)
    if len(shot_examples) != expected:
        raise AssemblyError(f"expected {expected} shot examples, got {len(shot_examples)}")

    shots = []
    for shot in shot_examples:
        if shot.split != "train":
            raise LeakageError(f"shot example {shot.sample_id!r} comes from the {shot.split} split")
        if shot.representation.modality != representation.modality:
            raise AssemblyError(
                f"shot modality {shot.representation.modality.value} differs from query modality "
                f"{representation.modality.value}"
            )
        shots.append(ShotTurn(
            user_text=user_text(template, shot.representation),
            images=tuple(shot.representation.images),
            answer_text=answer_text(template, shot.label),
        ))

    images = tuple(img for shot in shots for img in shot.images) + tuple(representation.images)
    return PromptBundle(
        system_text=system_text(template),
        user_text=user_text(template, representation),
        images=images,
        answer_schema=tuple(template.options),
        provenance={
            "dataset": template.dataset,
            "sample_id": sample_id,
            "modality": representation.modality.value,
            "template_hash": template.template_hash(),
            "shot_ids": [shot.sample_id for shot in shot_examples],
        },
        shots=tuple(shots),
        query_images=tuple(representation.images),
        style=template.style,
    )


def select_shots(
    train_ds: TimeSeriesDataset,
    shots_per_class: int,
    modality,
    serial_config: SerializationConfig = SerializationConfig(),
    render_config: RenderConfig = RenderConfig(),
) -> List[ShotExample]:
    """First `shots_per_class` training samples of each class, in label order."""
    if train_ds.split != "train":
        raise LeakageError(f"shots must come from the train split, got {train_ds.split}")
    shots = []
    for label in range(1, train_ds.n_classes + 1):
        members = [i for i, y in enumerate(train_ds.y) if int(y) == label][:shots_per_class]
        if len(members) < shots_per_class:
            raise AssemblyError(f"class {label} has only {len(members)} training samples for {shots_per_class} shots")
        for i in members:
            shots.append(ShotExample(
                representation=representation_for(train_ds, i, modality, serial_config, render_config),
                label=label,
                split=train_ds.split,
                sample_id=train_ds.sample_ids[i],
            ))
    return shots


def extract_options(text: str) -> List[Tuple[str, str]]:
    """Re-read the enumerated options from a rendered user text."""
    options, inside = [], False
    for line in text.split("\n"):
        if line.strip() == "Options:":
            inside = True
            continue
        if inside:
            match = OPTION_LINE.match(line.strip())
            if not match:
                break
            options.append((match.group(1), match.group(2)))
    return options


# --- answers -------------------------------------------------------------------------


@dataclass(frozen=True)
class ParsedAnswer:
    letter: Optional[str]
    raw_text: str
    label: int = FAILURE

    @property
    def failed(self) -> bool:
        return self.letter is None


def parse_answer(raw, letters: Sequence[str]) -> ParsedAnswer:
    """Last `answer is [<letter>]` match, case-insensitive; anything else is FAILURE."""
    text = raw if isinstance(raw, str) else ""
    matches = ANSWER_PATTERN.findall(text)
    if not matches:
        return ParsedAnswer(letter=None, raw_text=text)
    letter = matches[-1].upper()
    letters = [str(l).upper() for l in letters]
    if letter not in letters:
        return ParsedAnswer(letter=None, raw_text=text)
    return ParsedAnswer(letter=letter, raw_text=text, label=letters.index(letter) + 1)


# --- variants --------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    rule: int
    message: str


@dataclass
class Variant:
    id: int
    text: str


@dataclass
class VariantSet:
    dataset: str
    target: str
    base_hash: str
    base_text: str
    variants: List[Variant] = field(default_factory=list)
    rewriter_model: str = ""

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "target": self.target,
            "base_hash": self.base_hash,
            "base_text": self.base_text,
            "rewriter_model": self.rewriter_model,
            "variants": [{"id": v.id, "text": v.text} for v in self.variants],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VariantSet":
        return cls(
            dataset=data["dataset"],
            target=data["target"],
            base_hash=data["base_hash"],
            base_text=data["base_text"],
            rewriter_model=data.get("rewriter_model", ""),
            variants=[Variant(id=v["id"], text=v["text"]) for v in data["variants"]],
        )

    @property
    def set_id(self) -> str:
        return f"{self.dataset}/{self.target}-{self.base_hash[:12]}"


def base_text(template: PromptTemplate, target: str) -> str:
    if target == "system":
        return system_text(replace(template, style="direct", system_override=None))
    if target == "question":
        return f"{template.question}\n{template.choice_line}"
    raise DomainError(f"unknown variant target {target!r}")


def apply_variant(template: PromptTemplate, target: str, text: str) -> PromptTemplate:
    if target == "system":
        return replace(template, system_override=text)
    if target == "question":
        return replace(template, question=text)
    raise DomainError(f"unknown variant target {target!r}")


def _strip_format_strings(text: str) -> str:
    text = text.replace(FORMAT_REQUIREMENT, " ")
    return re.sub(r"\[[A-Z]\]\s*CABBAGE", " ", text)


def validate_variant(variant_text: str, template: PromptTemplate, target: str = "system") -> List[Violation]:
    """Hard constraints, checked in order; an empty list means the variant passes."""
    violations = []
    for name in template.class_names:
        if not re.search(rf"(?<!\w){re.escape(name)}(?!\w)", variant_text):
            violations.append(Violation(1, f"class name {name!r} missing"))

    stripped = _strip_format_strings(variant_text)
    positions = []
    for letter in template.letters:
        at = stripped.find(f"[{letter}]")
        if at < 0:
            violations.append(Violation(2, f"option letter [{letter}] missing"))
        positions.append(at)
    present = [p for p in positions if p >= 0]
    if present != sorted(present):
        violations.append(Violation(2, "option letters out of order"))

    if target == "system" and FORMAT_REQUIREMENT not in variant_text:
        violations.append(Violation(3, f"format requirement {FORMAT_REQUIREMENT!r} missing"))

    extra = sorted(set(BRACKET_LETTER.findall(stripped)) - set(template.letters))
    if extra:
        violations.append(Violation(4, f"new option letters introduced: {extra}"))
    return violations


class ChatClient(Protocol):
    model: str

    def complete(self, system: str, user: str) -> str:
        ...


class OpenAICompatibleClient:
    """Chat-completions client for any compatible endpoint."""

    def __init__(self, endpoint: str = None, model: str = None, api_key: str = None, timeout: int = None):
        self.endpoint = (endpoint or config.REWRITER_ENDPOINT).rstrip("/")
        self.model = model or config.REWRITER_MODEL
        self.api_key = api_key or config.REWRITER_API_KEY
        self.timeout = timeout or config.REWRITER_TIMEOUT

    def complete(self, system: str, user: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.model,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
        }
        for attempt in range(config.BACKEND_RETRIES):
            try:
                response = requests.post(f"{self.endpoint}/chat/completions", json=body, headers=headers, timeout=self.timeout)
                response.raise_for_status()
                return response.json()["choices"][0]["message"]["content"]
            except (requests.RequestException, KeyError, IndexError, ValueError) as e:
                logger.warning(f"Attempt {attempt + 1} rewriter request failed: {e}")
                if attempt < config.BACKEND_RETRIES - 1:
                    time.sleep(config.RETRY_DELAY)
        logger.error("Rewriter unreachable after multiple attempts")
        raise BackendError(f"Rewriter endpoint {self.endpoint} failed after {config.BACKEND_RETRIES} attempts")


def parse_envelope(raw: str, key: str, expected: int) -> List[str]:
    """Strict `{"variants": [{"id": .., key: ..}]}` parsing; no fences, no extra keys."""
    try:
        data = json.loads(raw)
    except (TypeError, json.JSONDecodeError) as e:
        raise RewriterFormatError(f"rewriter response is not valid JSON: {e}") from e
    if not isinstance(data, dict) or set(data) != {"variants"} or not isinstance(data["variants"], list):
        raise RewriterFormatError('response must be an object with the single key "variants"')
    texts = []
    for item in data["variants"]:
        if not isinstance(item, dict) or set(item) != {"id", key}:
            raise RewriterFormatError(f'each variant needs exactly the keys "id" and "{key}"')
        if not isinstance(item[key], str) or not item[key].strip():
            raise RewriterFormatError(f"variant {item.get('id')} has an empty {key}")
        texts.append(item[key])
    if len(texts) != expected:
        raise RewriterFormatError(f"expected {expected} variants, got {len(texts)}")
    return texts


def generate_variants(
    template: PromptTemplate,
    target: str,
    rewriter: ChatClient,
    total_n: int = 10,
    batch_b: int = 5,
    max_retries: Optional[int] = None,
) -> VariantSet:
    if target not in TARGETS:
        raise DomainError(f"unknown variant target {target!r}")
    if batch_b < 1 or total_n % batch_b:
        raise DomainError(f"total_n={total_n} must be a positive multiple of batch_b={batch_b}")
    max_retries = config.REWRITER_MAX_RETRIES if max_retries is None else max_retries

    base = base_text(template, target)
    if target == "system":
        system, request, key = SYSTEM_REWRITER_PROMPT, SYSTEM_REWRITER_REQUEST, "system_prompt"
    else:
        system, request, key = QUESTION_REWRITER_PROMPT, QUESTION_REWRITER_REQUEST, "question"
    system = system.format(n=batch_b)
    user = request.format(b=batch_b, base=base)

    variants: List[Variant] = []
    for batch in range(total_n // batch_b):
        for attempt in range(max_retries + 1):
            try:
                texts = parse_envelope(rewriter.complete(system, user), key, batch_b)
                break
            except RewriterFormatError as e:
                logger.warning(f"Batch {batch + 1} attempt {attempt + 1}: {e}")
                if attempt == max_retries:
                    logger.error(f"Rewriter kept returning malformed output for {template.dataset}/{target}")
                    raise
        for text in texts:
            variant = Variant(id=len(variants) + 1, text=text)
            violations = validate_variant(text, template, target)
            if violations:
                raise VariantRejectedError(variant.id, violations)
            variants.append(variant)
        logger.info(f"Variant batch {batch + 1}/{total_n // batch_b} accepted for {template.dataset}/{target}")

    return VariantSet(
        dataset=template.dataset,
        target=target,
        base_hash=hashlib.sha256(base.encode("utf-8")).hexdigest(),
        base_text=base,
        variants=variants,
        rewriter_model=getattr(rewriter, "model", ""),
    )


def variant_set_path(dataset: str, target: str, base_hash: str, root: Optional[Path] = None) -> Path:
    return Path(root or config.PROMPTS_DIR) / dataset / "variants" / f"{target}-{base_hash[:12]}.json"


def save_variant_set(variant_set: VariantSet, root: Optional[Path] = None) -> Path:
    path = variant_set_path(variant_set.dataset, variant_set.target, variant_set.base_hash, root)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(variant_set.to_dict(), f, indent=2, sort_keys=True)
    logger.info(f"Saved {len(variant_set.variants)} variants to {path}")
    return path


def load_variant_set(template: PromptTemplate, target: str, root: Optional[Path] = None) -> Optional[VariantSet]:
    """Persisted variant set for this template and target, validated again on load."""
    base_hash = hashlib.sha256(base_text(template, target).encode("utf-8")).hexdigest()
    path = variant_set_path(template.dataset, target, base_hash, root)
    if not path.exists():
        return None
    with open(path, "r", encoding="utf-8") as f:
        variant_set = VariantSet.from_dict(json.load(f))
    for variant in variant_set.variants:
        violations = validate_variant(variant.text, template, target)
        if violations:
            raise VariantRejectedError(variant.id, violations)
    return variant_set
