"""Free-field multi-microphone scene rendering with exact ground truth.

Each source reaches microphone ``m`` delayed by ``|x_s - p_m| / c`` and
attenuated by ``1 / |x_s - p_m|``. Delays are applied as a linear phase in
the frequency domain, so fractional delays are exact for band-limited
content. The source is tapered inside padding that is cropped away, which
keeps the circular wrap of the FFT out of the rendered clip.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .audio import DEFAULT_SAMPLE_RATE, AudioBuffer, read_wav
from .localize import MicArrayGeometry

SEED_ENV = "ECHOLOCATE_SEED"
_TAPER = 256


def resolve_seed(seed: int | None) -> int | None:
    """``ECHOLOCATE_SEED`` in the environment overrides any fixture seed."""
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        return int(env)
    return seed


@dataclass
class SourceSpec:
    position: tuple[float, float]
    kind: str = "noise"            # "tone" | "noise" | "wav"
    frequency: float = 440.0
    path: str | None = None
    level: float = 0.1             # RMS amplitude at 1 m

    def __post_init__(self):
        if self.kind not in ("tone", "noise", "wav"):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.kind == "wav" and not self.path:
            raise ValueError("wav sources need a path")
        self.position = tuple(float(v) for v in self.position[:2])


@dataclass
class SceneSpec:
    geometry: MicArrayGeometry
    sources: list[SourceSpec]
    duration: float = 1.0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    noise_snr_db: float | None = None
    seed: int | None = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not self.sources:
            raise ValueError("scene needs at least one source")
        for s in self.sources:
            d = np.linalg.norm(self.geometry.xy - np.asarray(s.position), axis=1)
            if np.min(d) < 1e-6:
                raise ValueError(f"source at {s.position} coincides with a microphone")

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | os.PathLike = ".") -> "SceneSpec":
        geom = d["geometry"]
        if isinstance(geom, str):
            geom = MicArrayGeometry.load(os.path.join(base_dir, geom))
        else:
            geom = MicArrayGeometry.from_dict(geom)
        sources = []
        for s in d["sources"]:
            s = dict(s)
            if "azimuth_deg" in s:
                az, r = math.radians(s.pop("azimuth_deg")), s.pop("distance_m")
                c = geom.center
                s["position"] = (c[0] + r * math.cos(az), c[1] + r * math.sin(az))
            if s.get("path"):
                s["path"] = os.path.join(base_dir, s["path"])
            sources.append(SourceSpec(**s))
        return cls(geom, sources, float(d.get("duration", 1.0)), int(d.get("sample_rate", DEFAULT_SAMPLE_RATE)),
                   d.get("noise_snr_db"), d.get("seed", 0))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SceneSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), os.path.dirname(os.path.abspath(path)))


@dataclass
class GroundTruth:
    """Per-source geometry; ``delays[s][m]`` is the absolute travel time in seconds."""

    azimuths: list[float]
    distances: list[float]
    delays: list[np.ndarray]
    gains: list[np.ndarray]
    positions: list[tuple[float, float]] = field(default_factory=list)

    def tdoa(self, source: int, i: int, j: int) -> float:
        return float(self.delays[source][j] - self.delays[source][i])

    def nearest_mic(self, source: int) -> int:
        return int(np.argmin(self.delays[source]))

    def to_dict(self) -> dict:
        return {
            "sources": [
                {"azimuth_deg": a, "distance_m": r, "position": list(p),
                 "delays_s": d.tolist(), "gains": g.tolist()}
                for a, r, p, d, g in zip(self.azimuths, self.distances, self.positions, self.delays, self.gains)
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        src = d["sources"]
        return cls([s["azimuth_deg"] for s in src], [s["distance_m"] for s in src],
                   [np.asarray(s["delays_s"]) for s in src], [np.asarray(s["gains"]) for s in src],
                   [tuple(s["position"]) for s in src])


def _source_signal(src: SourceSpec, length: int, fs: int, offset: int, rng: np.random.Generator) -> np.ndarray:
    if src.kind == "tone":
        t = (np.arange(length) - offset) / fs
        return src.level * math.sqrt(2.0) * np.sin(2 * np.pi * src.frequency * t)
    if src.kind == "noise":
        return src.level * rng.standard_normal(length)
    buf = read_wav(src.path)
    if buf.sample_rate != fs:
        raise ValueError(f"{src.path}: sample rate {buf.sample_rate} differs from scene rate {fs}")
    x = np.resize(buf.samples[0], length)
    rms = math.sqrt(float(np.mean(x * x)))
    return x * (src.level / rms) if rms > 0 else x


def fractional_delay(x: np.ndarray, delay_samples: float) -> np.ndarray:
    """Circularly delay ``x`` by a possibly fractional number of samples."""
    n = x.size
    spec = np.fft.rfft(x)
    k = np.arange(spec.size)
    spec *= np.exp(-2j * np.pi * k * delay_samples / n)
    return np.fft.irfft(spec, n)


def render_scene(spec: SceneSpec) -> tuple[AudioBuffer, GroundTruth]:
    geom = spec.geometry
    fs = spec.sample_rate
    c = geom.speed_of_sound
    rng = np.random.default_rng(resolve_seed(spec.seed))
    n = int(round(spec.duration * fs))
    center = geom.center

    dists = [np.linalg.norm(geom.xy - np.asarray(s.position), axis=1) for s in spec.sources]
    max_delay = max(float(d.max()) for d in dists) / c * fs
    lead = int(math.ceil(max_delay)) + 2 * _TAPER
    length = lead + n + _TAPER
    length += 1 - length % 2  # odd length: no Nyquist bin, so the phase shift stays exact
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(_TAPER) / _TAPER)

    out = np.zeros((geom.n_mics, n))
    truth = GroundTruth([], [], [], [], [])
    for src, d in zip(spec.sources, dists):
        s = _source_signal(src, length, fs, lead, rng)
        s[:_TAPER] *= ramp
        s[-_TAPER:] *= ramp[::-1]
        for m in range(geom.n_mics):
            delayed = fractional_delay(s, d[m] / c * fs)
            out[m] += delayed[lead:lead + n] / d[m]
        rel = np.asarray(src.position) - center
        truth.azimuths.append(math.degrees(math.atan2(rel[1], rel[0])) % 360.0)
        truth.distances.append(float(np.hypot(rel[0], rel[1])))
        truth.delays.append(d / c)
        truth.gains.append(1.0 / d)
        truth.positions.append(tuple(src.position))

    if spec.noise_snr_db is not None:
        for m in range(geom.n_mics):
            p_sig = float(np.mean(out[m] ** 2))
            sigma = math.sqrt(p_sig / 10 ** (spec.noise_snr_db / 10))
            out[m] += sigma * rng.standard_normal(n)
    return AudioBuffer(out, fs), truth


def save_scene_outputs(buf: AudioBuffer, truth: GroundTruth, wav_path: str | os.PathLike) -> str:
    """Write the capture as float WAV plus ``<stem>.truth.json``; returns the sidecar path."""
    from .audio import write_wav

    write_wav(wav_path, buf)
    sidecar = os.path.splitext(os.fspath(wav_path))[0] + ".truth.json"
    with open(sidecar, "w") as fh:
        json.dump(truth.to_dict(), fh, indent=2)
    return sidecar
