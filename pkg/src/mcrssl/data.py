"""Data sources: a seeded synthetic tone corpus and a minimal PCM16 WAV reader.

Synthetic clips are harmonic tones whose fundamental lies in one of
``n_classes`` log-spaced frequency bands (the clip's class), interrupted by
near-silent "unvoiced" stretches. Every clip is a pure function of
``(seed, clip index)``.
"""
from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import RngStream


@dataclass
class SyntheticSpec:
    n_clips: int = 256
    clip_len_samples: int = 4800
    sample_rate: int = 16000
    seed: int = 1234
    n_classes: int = 4
    f0_min: float = 100.0
    f0_max: float = 400.0
    voiced_prob: float = 0.7
    segment_min: int = 480
    segment_max: int = 1600


@dataclass
class DataSource:
    kind: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    path: str | None = None
    files: list | None = None

    def validate(self) -> "DataSource":
        if self.kind not in ("synthetic", "wav-dir"):
            raise ValueError(f"data.kind must be 'synthetic' or 'wav-dir', got {self.kind!r}")
        if self.kind == "wav-dir" and not self.path:
            raise KeyError("data.path")
        s = self.synthetic
        if s.n_clips < 1 or s.clip_len_samples < 1 or s.n_classes < 1:
            raise ValueError("synthetic n_clips, clip_len_samples and n_classes must be >= 1")
        return self


@dataclass
class Clip:
    waveform: np.ndarray  # float32, (n_samples,)
    label: int
    voiced: np.ndarray  # bool per sample


class Corpus:
    def __init__(self, clips: list[Clip], sample_rate: int):
        if not clips:
            raise ValueError("corpus is empty")
        self.clips = clips
        self.sample_rate = sample_rate

    def __len__(self) -> int:
        return len(self.clips)

    def __getitem__(self, i: int) -> Clip:
        return self.clips[i]


def class_bands(spec: SyntheticSpec) -> np.ndarray:
    return np.geomspace(spec.f0_min, spec.f0_max, spec.n_classes + 1)


def synth_clip(spec: SyntheticSpec, index: int, label: int | None = None) -> Clip:
    rng = RngStream(spec.seed).split("clip", index)
    if label is None:
        label = index % spec.n_classes
    lo, hi = class_bands(spec)[label], class_bands(spec)[label + 1]
    n = spec.clip_len_samples
    t = np.arange(n) / spec.sample_rate
    f0 = math.exp(math.log(lo) + (math.log(hi) - math.log(lo)) * float(rng.uniform()))
    phases = rng.uniform(4) * 2.0 * np.pi
    tone = sum(np.sin(2 * np.pi * f0 * (h + 1) * t + phases[h]) / (h + 1) for h in range(4))
    voiced = np.zeros(n, dtype=bool)
    env = np.zeros(n)
    pos = 0
    while pos < n:
        seg = int(rng.integers(spec.segment_min, spec.segment_max + 1))
        if rng.uniform() < spec.voiced_prob:
            voiced[pos:pos + seg] = True
            env[pos:pos + seg] = 0.3 + 0.7 * float(rng.uniform())
        pos += seg
    wav = env * tone + 0.01 * rng.normal(n)
    return Clip(wav.astype(np.float32), int(label), voiced)


def synthetic_corpus(spec: SyntheticSpec) -> Corpus:
    return Corpus([synth_clip(spec, i) for i in range(spec.n_clips)], spec.sample_rate)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """PCM16 mono only; returns float32 samples in [-1, 1) and the sample rate."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    return (np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0), rate


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def wav_corpus(path: str | Path, files: list | None = None) -> Corpus:
    root = Path(path)
    names = files if files is not None else sorted(p.name for p in root.glob("*.wav"))
    clips, rates = [], set()
    for name in names:
        samples, rate = read_wav(root / name)
        if rate not in (8000, 16000):
            raise ValueError(f"{name}: unsupported sample rate {rate}")
        rates.add(rate)
        clips.append(Clip(samples, -1, np.ones(samples.size, dtype=bool)))
    if len(rates) > 1:
        raise ValueError(f"mixed sample rates in {root}: {sorted(rates)}")
    return Corpus(clips, rates.pop() if rates else 16000)


def load_corpus(source: DataSource) -> Corpus:
    source.validate()
    if source.kind == "synthetic":
        return synthetic_corpus(source.synthetic)
    return wav_corpus(source.path, source.files)
