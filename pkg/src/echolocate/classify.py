"""Nearest-centroid classifier on time-averaged log-Mel vectors.

Each clip is summarised by its mean log-Mel vector with the across-band
mean removed, so only spectral shape matters. Distances are cosine
distances to per-label centroids.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .audio import DEFAULT_SAMPLE_RATE, AudioBuffer, MelSpectrogram, mel_features
from .transformer import MAGIC, AstConfig, AstWeights, ClassScores, ast_forward, patchify

TEMPERATURE = 0.05
SCORE_EPS = 1e-6
CENTROID_MELS = 64
FIXTURE_CLASSES = ("noise", "tone_2000hz", "tone_440hz")


def mel_vector(mel: MelSpectrogram) -> np.ndarray:
    v = mel.values.mean(axis=1)
    return v - v.mean()


@dataclass
class CentroidModel:
    labels: tuple[str, ...]
    centroids: np.ndarray       # (labels, n_mels)
    temperature: float = TEMPERATURE

    def to_dict(self) -> dict:
        return {"kind": "centroid", "labels": list(self.labels),
                "centroids": self.centroids.tolist(), "temperature": self.temperature}

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CentroidModel":
        with open(path) as fh:
            d = json.load(fh)
        return cls(tuple(d["labels"]), np.asarray(d["centroids"], dtype=float),
                   float(d.get("temperature", TEMPERATURE)))


def centroid_train(features: Iterable[tuple[MelSpectrogram, str]],
                   temperature: float = TEMPERATURE) -> CentroidModel:
    """Average the shape vectors of each label. Labels are kept in sorted order."""
    groups: dict[str, list[np.ndarray]] = {}
    for mel, label in features:
        groups.setdefault(label, []).append(mel_vector(mel))
    if not groups:
        raise ValueError("no training examples")
    empty = [k for k, v in groups.items() if not v]
    if empty:
        raise ValueError(f"labels without examples: {empty}")
    sizes = {v[0].size for v in groups.values()}
    if len(sizes) != 1:
        raise ValueError("training spectrograms have different band counts")
    labels = tuple(sorted(groups))
    return CentroidModel(labels, np.stack([np.mean(groups[k], axis=0) for k in labels]), temperature)


def cosine_distances(v: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(centroids, axis=1) * np.linalg.norm(v)
    sims = np.divide(centroids @ v, norms, out=np.zeros(len(centroids)), where=norms > 0)
    return 1.0 - sims


def centroid_classify(mel: MelSpectrogram, model: CentroidModel, timestamp: float | None = None) -> ClassScores:
    """Softmax over negative cosine distances, squeezed into (0, 1).

    Equal distances resolve to the earliest label in the model's order.
    """
    v = mel_vector(mel)
    if v.size != model.centroids.shape[1]:
        raise ValueError(f"model expects {model.centroids.shape[1]} mel bands, got {v.size}")
    d = cosine_distances(v, model.centroids)
    z = -d / model.temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    scores = SCORE_EPS + (1.0 - 2.0 * SCORE_EPS) * p
    return ClassScores(model.labels, scores, model.labels[int(np.argmin(d))], timestamp)


def synthetic_clip(label: str, rng: np.random.Generator, duration: float = 0.5,
                   sample_rate: int = DEFAULT_SAMPLE_RATE, snr_db: tuple[float, float] = (10.0, 30.0)) -> AudioBuffer:
    """One clip of a fixture class: a tone at random phase and level plus white noise, or noise alone."""
    n = int(round(duration * sample_rate))
    level = rng.uniform(0.05, 0.5)
    if label == "noise":
        return AudioBuffer(level * rng.standard_normal(n), sample_rate)
    freq = {"tone_440hz": 440.0, "tone_2000hz": 2000.0}[label]
    t = np.arange(n) / sample_rate
    x = level * np.sqrt(2.0) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    sigma = level / 10 ** (rng.uniform(*snr_db) / 20)
    return AudioBuffer(x + sigma * rng.standard_normal(n), sample_rate)


def synthetic_fixture(n_per_class: int, seed: int = 0, n_mels: int = CENTROID_MELS,
                      duration: float = 0.5) -> list[tuple[MelSpectrogram, str]]:
    """Labelled log-Mel clips for the three fixture classes, interleaved by class."""
    rng = np.random.default_rng(seed)
    return [(mel_features(synthetic_clip(lab, rng, duration), n_mels), lab)
            for _ in range(n_per_class) for lab in FIXTURE_CLASSES]


class CentroidClassifier:
    """Wraps a :class:`CentroidModel` to classify raw mono audio."""

    def __init__(self, model: CentroidModel):
        self.model = model
        self.n_mels = model.centroids.shape[1]

    def __call__(self, audio: AudioBuffer, timestamp: float | None = None) -> ClassScores:
        return centroid_classify(mel_features(audio, self.n_mels), self.model, timestamp)


class TransformerClassifier:
    """Wraps spectrogram-transformer weights to classify raw mono audio."""

    def __init__(self, weights: AstWeights, cfg: AstConfig):
        weights.validate(cfg)
        self.weights, self.cfg = weights, cfg

    def __call__(self, audio: AudioBuffer, timestamp: float | None = None) -> ClassScores:
        mel = mel_features(audio, self.cfg.n_mels)
        return ast_forward(patchify(mel, self.cfg), self.weights, self.cfg, timestamp)


def load_classifier(path: str | os.PathLike):
    """Pick the classifier type from the file: transformer weights or a JSON centroid model."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return TransformerClassifier(*AstWeights.load(path))
    return CentroidClassifier(CentroidModel.load(path))
