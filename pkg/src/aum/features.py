"""Waveform -> log-mel spectrogram -> normalized patches -> embeddings.

Frontend constants follow the AST recipe: 25 ms Hann window, 128 mel bins,
and a hop of 156 samples so a 10 s clip at 16 kHz yields exactly 1024
frames. Patches are square, non-overlapping, and ordered time-major: all
frequency rows of one time column come before the next column.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .numerics import Tensor, linear

log = logging.getLogger(__name__)

CACHE_MAGIC = b"AUMF"
CACHE_VERSION = 1


class AudioFormatError(ValueError):
    """Readable file in an encoding this frontend does not handle."""


class NormalizationError(RuntimeError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size == 0:
            raise ValueError("waveform has no samples")


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    n_mels: int = 128
    target_frames: int = 1024
    win_length: int = 400
    hop_length: int = 156
    n_fft: int = 512
    f_min: float = 20.0
    f_max: float | None = None
    floor: float = 1e-6
    dataset_mean: float = -4.268
    dataset_std: float = 4.569
    patch_size: int = 16
    patch_stride: int = 16

    def __post_init__(self) -> None:
        p = self.patch_size
        if self.patch_stride != p:
            raise ValueError(f"patch stride {self.patch_stride} must equal patch size {p}")
        if self.n_mels % p or self.target_frames % p:
            raise ValueError(
                f"spectrogram {self.n_mels}x{self.target_frames} not divisible by patch size {p}"
            )
        if self.win_length > self.n_fft:
            raise ValueError("win_length must not exceed n_fft")

    @property
    def fmax(self) -> float:
        return self.f_max if self.f_max is not None else self.sample_rate / 2


@dataclass
class Spectrogram:
    values: np.ndarray  # (F, T)
    normalized: bool = False
    norm_mean: float | None = None
    norm_std: float | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError(f"spectrogram must be a non-empty F x T array, got {self.values.shape}")

    @property
    def F(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]


@dataclass
class PatchSequence:
    patches: np.ndarray  # (num_patches, p*p)
    grid: tuple[int, int]  # (F // p, T // p)
    p: int
    ordering: str = field(default="time-major")

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]


# ------------------------------------------------------------------- audio io

def load_waveform(path) -> Waveform:
    """Read PCM16 / PCM32 / float32 WAV, scale to [-1, 1], downmix to mono."""
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise OSError(f"{path}: malformed WAV ({exc})") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        samples = (data.astype(np.float64) / 2147483648.0).astype(np.float32)
    elif data.dtype == np.float32:
        samples = data
    else:
        raise AudioFormatError(f"{path}: unsupported sample type {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1, dtype=np.float32)
    return Waveform(samples, int(rate))


def save_waveform(path, w: Waveform, pcm16: bool = True) -> None:
    data = w.samples
    if pcm16:
        data = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), w.sample_rate, data)


# ---------------------------------------------------------------- log-mel

def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def mel_band_centers(cfg: FeatureConfig) -> np.ndarray:
    """Centre frequency (Hz) of each mel band, lowest band first."""
    pts = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(pts[1:-1])


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular filters on the mel axis, shape (n_mels, n_fft // 2 + 1)."""
    pts = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    bins = hz_to_mel(np.fft.rfftfreq(cfg.n_fft, 1.0 / cfg.sample_rate))
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (bins[None] - lo) / (mid - lo)
    down = (hi - bins[None]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def log_mel_spectrogram(w: Waveform, cfg: FeatureConfig) -> Spectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"expected {cfg.sample_rate} Hz audio, got {w.sample_rate} Hz")
    T = cfg.target_frames
    needed = cfg.win_length + (T - 1) * cfg.hop_length
    x = w.samples.astype(np.float64)
    if x.size < needed:
        x = np.pad(x, (0, needed - x.size))
    else:
        x = x[:needed]
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win_length)[:: cfg.hop_length][:T]
    window = np.hanning(cfg.win_length)
    power = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft)) ** 2
    mel = power @ mel_filterbank(cfg).T  # (T, F)
    return Spectrogram(np.log(mel + cfg.floor).T.astype(np.float32))


def normalize(s: Spectrogram, mean: float, std: float) -> Spectrogram:
    """``(values - mean) / (2 * std)``; refuses to run twice."""
    if s.normalized:
        raise NormalizationError("spectrogram is already normalized")
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    values = (s.values - np.float32(mean)) / np.float32(2.0 * std)
    return replace(s, values=values, normalized=True, norm_mean=mean, norm_std=std)


# ----------------------------------------------------------------- patches

def patchify(s: Spectrogram | np.ndarray, p: int) -> PatchSequence:
    values = s.values if isinstance(s, Spectrogram) else np.asarray(s)
    F, T = values.shape
    if F % p or T % p:
        raise ValueError(f"spectrogram F={F}, T={T} not divisible by patch size p={p}")
    rows, cols = F // p, T // p
    # (rows, p, cols, p) -> (cols, rows, p, p): time-major sequence order
    patches = values.reshape(rows, p, cols, p).transpose(2, 0, 1, 3).reshape(rows * cols, p * p)
    return PatchSequence(np.ascontiguousarray(patches), (rows, cols), p)


def unpatchify(ps: PatchSequence) -> np.ndarray:
    rows, cols = ps.grid
    p = ps.p
    return ps.patches.reshape(cols, rows, p, p).transpose(1, 2, 0, 3).reshape(rows * p, cols * p)


def patch_index(row: int, col: int, grid: tuple[int, int]) -> int:
    """Sequence index of grid cell (row, col) under time-major ordering."""
    return col * grid[0] + row


def embed_patches(ps: PatchSequence, W: Tensor, b: Tensor) -> Tensor:
    if W.shape[0] != ps.p * ps.p:
        raise ValueError(f"embedding weight {W.shape} expects patches of length {W.shape[0]}, got {ps.p ** 2}")
    return linear(Tensor(ps.patches.astype(W.dtype)), W, b)


# ------------------------------------------------------------ feature cache

def write_feature_record(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    F, T = values.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, F, T))
        fh.write(np.ascontiguousarray(values).tobytes())


def read_feature_record(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != CACHE_MAGIC:
            raise OSError(f"{path}: not a feature record")
        version, F, T = struct.unpack("<III", head[4:])
        if version != CACHE_VERSION:
            raise OSError(f"{path}: unsupported feature record version {version}")
        body = fh.read()
    if len(body) != 4 * F * T:
        raise OSError(f"{path}: truncated record ({len(body)} bytes for {F}x{T})")
    return np.frombuffer(body, dtype="<f4").reshape(F, T).astype(np.float32)


# ---------------------------------------------------------------- manifest

@dataclass
class ManifestEntry:
    path: str
    labels: list[int]


def read_manifest(path) -> tuple[list[ManifestEntry], bool]:
    """Parse a ``path,label`` or ``path,label_ids`` CSV.

    Returns the entries and whether the file is multi-label.
    """
    base = Path(path).parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if "path" not in cols or not ({"label", "label_ids"} & set(cols)):
            raise ValueError(f"{path}: expected columns path,label or path,label_ids; got {cols}")
        multi = "label_ids" in cols
        entries = []
        for i, row in enumerate(reader):
            raw = row["label_ids" if multi else "label"].strip()
            try:
                labels = [int(v) for v in raw.split(";") if v != ""] if multi else [int(raw)]
            except ValueError:
                raise ValueError(f"{path}:{i + 2}: labels must be integer ids, got {raw!r}")
            p = Path(row["path"])
            entries.append(ManifestEntry(str(p if p.is_absolute() else base / p), labels))
    return entries, multi


def write_manifest(path, entries: list[ManifestEntry], multilabel: bool, relative_to=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label_ids" if multilabel else "label"])
        for e in entries:
            p = Path(e.path)
            if relative_to is not None:
                p = p.relative_to(relative_to)
            labels = ";".join(str(v) for v in e.labels) if multilabel else str(e.labels[0])
            writer.writerow([str(p), labels])
