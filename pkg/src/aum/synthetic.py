"""Synthetic two-class audio: tone bursts (class 0) vs noise bursts (class 1).

Each clip is faint background noise plus one event occupying a random
25-50% stretch of the clip, so the evidence can sit anywhere in time. A
model whose class token cannot see later tokens has to guess whenever the
event lies after it.
"""

from __future__ import annotations

import numpy as np

from .features import FeatureConfig, Waveform, log_mel_spectrogram, normalize
from .training import Dataset

TOY_FEATURES = FeatureConfig(
    n_mels=32, target_frames=32, hop_length=160, patch_size=16, patch_stride=16,
    dataset_mean=0.0, dataset_std=1.0,
)


def clip_samples(cfg: FeatureConfig) -> int:
    return cfg.win_length + (cfg.target_frames - 1) * cfg.hop_length


def synth_clip(label: int, cfg: FeatureConfig, rng: np.random.Generator) -> Waveform:
    n = clip_samples(cfg)
    x = 0.005 * rng.standard_normal(n)
    width = int(rng.uniform(0.25, 0.5) * n)
    start = int(rng.integers(0, n - width + 1))
    t = np.arange(width) / cfg.sample_rate
    if label == 0:
        freq = rng.uniform(500.0, 4000.0)
        event = rng.uniform(0.1, 0.5) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    else:
        event = rng.uniform(0.05, 0.2) * rng.standard_normal(width)
    x[start : start + width] += event
    return Waveform(x.astype(np.float32), cfg.sample_rate)


def tone_noise_spectrograms(n: int, seed: int, cfg: FeatureConfig = TOY_FEATURES):
    """Raw log-mel spectrograms ``(n, F, T)`` and labels, exactly balanced."""
    if n % 2:
        raise ValueError("n must be even for a balanced set")
    rng = np.random.default_rng(seed)
    labels = np.array([0, 1] * (n // 2))
    rng.shuffle(labels)
    specs = np.stack([log_mel_spectrogram(synth_clip(int(y), cfg, rng), cfg).values for y in labels])
    return specs, labels


def tone_noise_dataset(
    n: int = 64,
    seed: int = 0,
    cfg: FeatureConfig = TOY_FEATURES,
    stats: tuple[float, float] | None = None,
) -> tuple[Dataset, tuple[float, float]]:
    """Normalized toy dataset plus the ``(mean, std)`` used.

    Statistics default to those of the generated set itself; pass the
    training statistics when building a held-out split.
    """
    specs, labels = tone_noise_spectrograms(n, seed, cfg)
    mean, std = stats if stats is not None else (float(specs.mean()), float(specs.std()))
    from .features import Spectrogram

    normed = np.stack([normalize(Spectrogram(s), mean, std).values for s in specs])
    return Dataset.from_labels(normed, [[int(y)] for y in labels], 2), (mean, std)
