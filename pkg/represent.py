"""Turn one sample into digit text (d), a rendered image (v), or both (d+v)."""
import hashlib
import json
import io
import math
from dataclasses import asdict, dataclass, field, replace
from decimal import ROUND_DOWN, Decimal
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402
from scipy import signal  # noqa: E402

from dataset import series_for_representation  # noqa: E402
from errors import AssemblyError, RenderError, SerializeValueError  # noqa: E402
from logging_setup import get_logger  # noqa: E402

logger = get_logger("represent")

SERIALIZER_VERSION = "digits-v1"
RENDERER_VERSION = f"mpl-{matplotlib.__version__}+r1"
MAX_MAGNITUDE = 1e12


class Modality(str, Enum):
    D = "d"
    V = "v"
    D_PLUS_V = "d+v"

    @property
    def has_text(self) -> bool:
        return self in (Modality.D, Modality.D_PLUS_V)

    @property
    def has_images(self) -> bool:
        return self in (Modality.V, Modality.D_PLUS_V)


@dataclass(frozen=True)
class SerializationConfig:
    precision: int = 2
    digit_separator: str = " "
    timestep_separator: str = " , "
    sign_token: str = "-"
    prescale: Optional[Tuple[float, float]] = None  # (scale, offset): v * scale + offset
    stride: int = 1

    def __post_init__(self):
        if self.precision < 0:
            raise SerializeValueError(f"precision must be >= 0, got {self.precision}")
        if not self.digit_separator or not self.timestep_separator or not self.sign_token:
            raise SerializeValueError("separators and sign token must be non-empty")
        if self.prescale is not None and self.prescale[0] == 0:
            raise SerializeValueError("prescale must be invertible (scale != 0)")
        if self.stride < 1:
            raise SerializeValueError(f"stride must be >= 1, got {self.stride}")

    @classmethod
    def from_dict(cls, data: dict) -> "SerializationConfig":
        data = dict(data or {})
        if data.get("prescale") is not None:
            data["prescale"] = tuple(float(v) for v in data["prescale"])
        return cls(**data)


@dataclass(frozen=True)
class RenderConfig:
    width_px: int = 640
    height_px: int = 480
    dpi: int = 100
    style: str = "line"
    subplot_threshold: int = 3
    legend: bool = True
    title: str = "Time series"
    xlabel: str = "Time step"
    ylabel: str = "Value"
    window: int = 256
    overlap: float = 0.5
    magnitude_scale: str = "log"
    sample_rate: Optional[float] = None

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0 or self.dpi <= 0:
            raise RenderError("image size and dpi must be positive")
        if self.style not in ("line", "spectrogram"):
            raise RenderError(f"unknown render style {self.style!r}")
        if self.subplot_threshold < 1:
            raise RenderError("subplot_threshold must be >= 1")
        if not 0.0 <= self.overlap < 1.0:
            raise RenderError(f"overlap fraction must lie in [0, 1), got {self.overlap}")
        if self.window < 1:
            raise RenderError("spectrogram window must be positive")
        if self.magnitude_scale not in ("log", "linear"):
            raise RenderError(f"unknown magnitude scale {self.magnitude_scale!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "RenderConfig":
        return cls(**dict(data or {}))

    @property
    def noverlap(self) -> int:
        return int(self.window * self.overlap)


@dataclass(frozen=True)
class Representation:
    modality: Modality
    text: Optional[str] = None
    images: Tuple[bytes, ...] = field(default_factory=tuple)

    def __post_init__(self):
        has_text, has_images = bool(self.text), len(self.images) > 0
        if has_text != self.modality.has_text or has_images != self.modality.has_images:
            raise AssemblyError(
                f"modality {self.modality.value} requires text={self.modality.has_text} "
                f"images={self.modality.has_images}, got text={has_text} images={has_images}"
            )

    def digest(self) -> str:
        h = hashlib.sha256(self.modality.value.encode())
        h.update((self.text or "").encode("utf-8"))
        for image in self.images:
            h.update(hashlib.sha256(image).digest())
        return h.hexdigest()


def representation_digest(modality, serial_config: SerializationConfig, render_config: RenderConfig) -> str:
    """Hash of every setting that shapes a representation of the given modality."""
    modality = Modality(modality)
    payload = {"modality": modality.value}
    if modality.has_text:
        payload.update(serializer=SERIALIZER_VERSION, serialization=asdict(serial_config))
    if modality.has_images:
        payload.update(renderer=RENDERER_VERSION, render=asdict(render_config))
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=list).encode("utf-8")).hexdigest()[:16]


# --- digits ---------------------------------------------------------------------


def _shortest_decimal(value) -> Decimal:
    # shortest repr at the stored precision, so float32 0.33 stays "0.33"
    if isinstance(value, np.floating):
        text = np.format_float_positional(value, unique=True, trim="-")
    else:
        text = repr(float(value))
    return Decimal(text)


def format_value(value, config: SerializationConfig = SerializationConfig()) -> str:
    """Digits of one value: p fixed decimals, point removed, digits separated."""
    if config.prescale is not None:
        scale, offset = config.prescale
        value = float(value) * scale + offset
    if not math.isfinite(float(value)):
        raise SerializeValueError(f"cannot serialize non-finite value {value!r}")
    if abs(float(value)) >= MAX_MAGNITUDE:
        raise SerializeValueError(f"|{value}| exceeds 1e12")

    quantum = Decimal(1).scaleb(-config.precision)
    fixed = _shortest_decimal(value).quantize(quantum, rounding=ROUND_DOWN)
    digits = f"{abs(fixed):f}".replace(".", "")
    tokens = list(digits)
    if fixed.is_signed() and any(d != "0" for d in digits):
        tokens.insert(0, config.sign_token)
    return config.digit_separator.join(tokens)


def serialize_digits(series, config: SerializationConfig = SerializationConfig(), channel_names: Optional[Sequence[str]] = None) -> str:
    """Serialize a [T] vector or a [V x T] tensor.

    Multivariate input yields one `<channel>: <digits>` line per channel.
    """
    arr = np.asarray(series)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    if arr.ndim != 2:
        raise SerializeValueError(f"expected a [T] or [V x T] series, got shape {arr.shape}")
    arr = arr[:, :: config.stride]

    def row_text(row) -> str:
        return config.timestep_separator.join(format_value(v, config) for v in row)

    if arr.shape[0] == 1:
        return row_text(arr[0])
    names = list(channel_names) if channel_names is not None else [f"ch{i}" for i in range(arr.shape[0])]
    if len(names) != arr.shape[0]:
        raise SerializeValueError(f"{len(names)} channel names for V={arr.shape[0]}")
    return "\n".join(f"{name}: {row_text(row)}" for name, row in zip(names, arr))


# --- images ---------------------------------------------------------------------


def panel_layout(n_channels: int, threshold: int) -> List[List[int]]:
    """Channel indices per stacked panel; one panel when V <= threshold."""
    if n_channels <= threshold:
        return [list(range(n_channels))]
    return [list(range(start, min(start + threshold, n_channels))) for start in range(0, n_channels, threshold)]


def _figure(config: RenderConfig, n_panels: int):
    return plt.subplots(
        n_panels, 1, squeeze=False, sharex=True,
        figsize=(config.width_px / config.dpi, config.height_px / config.dpi), dpi=config.dpi,
    )


def _to_png(fig, config: RenderConfig) -> bytes:
    buf = io.BytesIO()
    try:
        fig.savefig(buf, format="png", dpi=config.dpi, metadata={"Software": None})
    finally:
        plt.close(fig)
    buf.seek(0)
    img = Image.open(buf).convert("RGB")
    out = io.BytesIO()
    img.save(out, format="PNG")
    return out.getvalue()


def _as_channels(sample) -> np.ndarray:
    arr = np.asarray(sample, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise RenderError(f"expected a [T] or [V x T] sample, got shape {arr.shape}")
    if arr.shape[1] == 0:
        raise RenderError("cannot render an empty series")
    if not np.isfinite(arr).all():
        raise RenderError("cannot render non-finite values")
    return arr


def render_line_plot(sample, config: RenderConfig = RenderConfig(), channel_names: Optional[Sequence[str]] = None) -> bytes:
    arr = _as_channels(sample)
    n_channels, length = arr.shape
    names = list(channel_names) if channel_names is not None else [f"ch{i}" for i in range(n_channels)]
    panels = panel_layout(n_channels, config.subplot_threshold)
    fig, axes = _figure(config, len(panels))
    steps = np.arange(length)
    for ax, members in zip(axes[:, 0], panels):
        for i in members:
            ax.plot(steps, arr[i], linewidth=1.0, label=names[i])
        ax.set_ylabel(config.ylabel)
        ax.grid(True, linewidth=0.3)
        if config.legend and n_channels > 1:
            ax.legend(loc="upper right", fontsize="small")
    axes[0, 0].set_title(config.title)
    axes[-1, 0].set_xlabel(config.xlabel)
    fig.tight_layout()
    logger.debug(f"Rendered line plot V={n_channels} T={length} panels={len(panels)}")
    return _to_png(fig, config)


def spectrogram_frames(length: int, window: int, noverlap: int) -> int:
    return 1 + (length - window) // (window - noverlap)


def stft_magnitude(series, config: RenderConfig = RenderConfig()):
    """(frequencies, times, magnitude) of one channel; log scale in dB when configured."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise RenderError(f"spectrogram needs a non-empty [T] vector, got shape {x.shape}")
    if config.window > x.size:
        raise RenderError(f"spectrogram window {config.window} exceeds series length {x.size}")
    freqs, times, mag = signal.spectrogram(
        x, fs=config.sample_rate or 1.0, window="hann",
        nperseg=config.window, noverlap=config.noverlap, mode="magnitude",
    )
    if config.magnitude_scale == "log":
        mag = 20 * np.log10(mag + np.finfo(np.float64).eps)
    return freqs, times, mag


def render_spectrogram(sample, config: RenderConfig = RenderConfig(), channel_names: Optional[Sequence[str]] = None) -> bytes:
    arr = _as_channels(sample)
    names = list(channel_names) if channel_names is not None else [f"ch{i}" for i in range(arr.shape[0])]
    fig, axes = _figure(config, arr.shape[0])
    fs = config.sample_rate or 1.0
    for ax, row, name in zip(axes[:, 0], arr, names):
        freqs, times, mag = stft_magnitude(row, config)
        half = config.window / (2 * fs)
        ax.imshow(
            mag, origin="lower", aspect="auto", interpolation="nearest",
            extent=(times[0] - half, times[-1] + half, freqs[0], freqs[-1]),
        )
        ax.set_ylabel("Frequency (Hz)" if config.sample_rate else "Frequency")
        if arr.shape[0] > 1:
            ax.set_title(name, fontsize="small")
    axes[0, 0].set_title(config.title if arr.shape[0] == 1 else f"{config.title}\n{names[0]}")
    axes[-1, 0].set_xlabel("Time (s)" if config.sample_rate else config.xlabel)
    fig.tight_layout()
    return _to_png(fig, config)


# --- composition ------------------------------------------------------------------


def build_representation(
    sample,
    modality,
    serial_config: SerializationConfig = SerializationConfig(),
    render_config: RenderConfig = RenderConfig(),
    channel_names: Optional[Sequence[str]] = None,
) -> Representation:
    modality = Modality(modality)
    text = serialize_digits(sample, serial_config, channel_names) if modality.has_text else None
    images: Tuple[bytes, ...] = ()
    if modality.has_images:
        render = render_spectrogram if render_config.style == "spectrogram" else render_line_plot
        images = (render(sample, render_config, channel_names),)
    return Representation(modality=modality, text=text, images=images)


def representation_for(ds, index: int, modality, serial_config: SerializationConfig, render_config: RenderConfig) -> Representation:
    """Representation of sample `index` of a dataset, honoring its render style and rate."""
    render_config = replace(
        render_config,
        style=ds.render_style,
        sample_rate=render_config.sample_rate or ds.sample_rate,
    )
    sample = series_for_representation(ds, index)
    return build_representation(sample, modality, serial_config, render_config, ds.channel_names)
