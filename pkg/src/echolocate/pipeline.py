"""Block-wise processing of a multi-channel capture.

Each block is handled on its own, with no state carried between blocks:

1. localize from the raw channels,
2. separate sources when more than one is configured,
3. denoise the dominant source (or the channel mix) for classification,
4. classify it,
5. emit a pad command.

A stage that fails is recorded in that block's report and the stream
continues.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .actuate import PadCommand, PadEventLog, PadLayout, REFERENCE_DISTANCE, command_for
from .audio import AudioBuffer
from .bss import separate
from .classify import load_classifier
from .denoise import METHODS, denoise_signal
from .localize import (
    PHAT_REL_FLOOR,
    IndeterminateDirectionError,
    MicArrayGeometry,
    SourceEstimate,
    UndefinedCorrelationError,
    localize,
)
from .transformer import ClassScores

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
BLOCK_SECONDS = 0.205
STAGES = ("denoise", "localize", "separate", "classify", "actuate")


@dataclass
class PipelineConfig:
    geometry: MicArrayGeometry
    block_s: float = BLOCK_SECONDS
    layout: PadLayout = field(default_factory=PadLayout)
    denoiser: str | None = "otsu"
    classifier: str | None = None        # path to transformer weights or a centroid model
    n_sources: int = 1
    search: tuple[float, float] = (0.3, 20.0)
    phat_floor: float = PHAT_REL_FLOOR
    ref_distance: float = REFERENCE_DISTANCE
    emit_low_confidence: bool = False
    report: str | None = None

    def __post_init__(self):
        if not self.block_s > 0:
            raise ValueError("block length must be positive")
        if self.denoiser is not None and self.denoiser not in METHODS:
            raise ValueError(f"unknown denoiser {self.denoiser!r}")
        if self.classifier is not None and not os.path.exists(self.classifier):
            raise FileNotFoundError(f"classifier file {self.classifier} does not exist")
        if self.n_sources < 1:
            raise ValueError("n_sources must be at least 1")
        self.search = tuple(float(v) for v in self.search)

    @classmethod
    def from_dict(cls, d: dict, geometry: MicArrayGeometry | None = None,
                  base_dir: str | os.PathLike = ".") -> "PipelineConfig":
        d = dict(d)
        geom = geometry
        g = d.pop("geometry", None)
        if geom is None:
            if g is None:
                raise ValueError("a geometry is required")
            geom = (MicArrayGeometry.load(os.path.join(base_dir, g)) if isinstance(g, str)
                    else MicArrayGeometry.from_dict(g))
        if "layout" in d:
            d["layout"] = PadLayout(**d["layout"])
        for key in ("classifier", "report"):
            if d.get(key):
                d[key] = os.path.join(base_dir, d[key])
        return cls(geom, **d)

    @classmethod
    def load(cls, path: str | os.PathLike, geometry: MicArrayGeometry | None = None) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), geometry, os.path.dirname(os.path.abspath(path)))


@dataclass
class BlockReport:
    index: int
    timestamp: float
    estimate: SourceEstimate | None = None
    scores: ClassScores | None = None
    commands: list[PadCommand] = field(default_factory=list)
    separation: dict | None = None
    timings_ms: dict[str, float] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def total_ms(self) -> float:
        return sum(self.timings_ms.values())

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "timestamp_s": self.timestamp,
            "source": None if self.estimate is None else self.estimate.to_dict(),
            "classification": None if self.scores is None else self.scores.to_dict(),
            "pad_commands": [c.to_dict() for c in self.commands],
            "separation": self.separation,
            "timings_ms": self.timings_ms,
            "flags": list(self.flags),
            "errors": self.errors,
        }


@dataclass
class PipelineReport:
    config: PipelineConfig
    sample_rate: int
    blocks: list[BlockReport]

    @property
    def mean_block_ms(self) -> float:
        return float(np.mean([b.total_ms for b in self.blocks])) if self.blocks else 0.0

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "schema_version": SCHEMA_VERSION,
            "sample_rate": self.sample_rate,
            "block_s": cfg.block_s,
            "n_blocks": len(self.blocks),
            "geometry": cfg.geometry.to_dict(),
            "layout": cfg.layout.to_dict(),
            "denoiser": cfg.denoiser,
            "classifier": cfg.classifier,
            "mean_block_ms": self.mean_block_ms,
            "blocks": [b.to_dict() for b in self.blocks],
        }

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def block_count(n_samples: int, sample_rate: int, block_s: float) -> int:
    return int(n_samples // block_samples(sample_rate, block_s))


def block_samples(sample_rate: int, block_s: float) -> int:
    n = int(round(block_s * sample_rate))
    if n < 1:
        raise ValueError("block is shorter than one sample")
    return n


class _Timer:
    def __init__(self, report: BlockReport, stage: str):
        self.report, self.stage = report, stage

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.report.timings_ms[self.stage] = (time.perf_counter() - self.t0) * 1e3
        if exc is not None:
            self.report.errors[self.stage] = f"{exc_type.__name__}: {exc}"
            log.debug("block %d: %s failed: %s", self.report.index, self.stage, exc)
        return True  # swallow: a failed stage never aborts the stream


def _dominant_source(block: AudioBuffer, cfg: PipelineConfig, estimate, report: BlockReport) -> AudioBuffer:
    """Audio to classify: the loudest separated source, or the channel mix."""
    if cfg.n_sources < 2 or estimate is None:
        return AudioBuffer(block.samples.mean(axis=0), block.sample_rate)
    with _Timer(report, "separate"):
        sep = separate(block, estimate.tdoa, cfg.n_sources)
        report.separation = sep.to_dict()
        mixing = np.linalg.pinv(sep.unmixing)
        k = int(np.argmax(np.sum(mixing ** 2, axis=0)))
        report.separation["dominant"] = k
        return AudioBuffer(sep.sources[k], block.sample_rate)
    return AudioBuffer(block.samples.mean(axis=0), block.sample_rate)


def process_block(block: AudioBuffer, index: int, timestamp: float, cfg: PipelineConfig,
                  classifier=None) -> BlockReport:
    report = BlockReport(index, timestamp)

    estimate = None
    with _Timer(report, "localize"):
        try:
            estimate = localize(block, cfg.geometry, cfg.search, cfg.phat_floor)
        except (UndefinedCorrelationError, IndeterminateDirectionError) as exc:
            report.flags.append("indeterminate-direction")
            log.debug("block %d: %s", index, exc)
    if estimate is not None:
        report.estimate = estimate
        report.flags.extend(estimate.flags)

    if classifier is not None and estimate is not None:
        target = _dominant_source(block, cfg, estimate, report)
        with _Timer(report, "denoise"):
            if cfg.denoiser is not None:
                target = denoise_signal(target, cfg.denoiser)
        with _Timer(report, "classify"):
            if np.any(target.samples):
                report.scores = classifier(target, timestamp)
            else:
                report.flags.append("silent-after-denoise")

    with _Timer(report, "actuate"):
        if estimate is not None:
            if estimate.low_confidence and not cfg.emit_low_confidence:
                report.flags.append("pad-suppressed")
            else:
                label = report.scores.label if report.scores is not None else None
                report.commands.append(command_for(estimate.azimuth, estimate.distance, timestamp,
                                                   cfg.layout, cfg.ref_distance, label))
    return report


def run_pipeline(buf: AudioBuffer, cfg: PipelineConfig, classifier=None,
                 events: PadEventLog | None = None) -> PipelineReport:
    """Process ``floor(duration / block)`` whole blocks in order.

    ``classifier`` overrides ``cfg.classifier``; it is any callable taking
    a mono :class:`AudioBuffer` and a timestamp and returning ClassScores.
    """
    if buf.n_channels != cfg.geometry.n_mics:
        raise ValueError(f"input has {buf.n_channels} channels but the geometry has {cfg.geometry.n_mics} mics")
    if classifier is None and cfg.classifier is not None:
        classifier = load_classifier(cfg.classifier)
    fs = buf.sample_rate
    step = block_samples(fs, cfg.block_s)
    blocks = []
    for i in range(block_count(buf.n_frames, fs, cfg.block_s)):
        rep = process_block(buf.slice(i * step, (i + 1) * step), i, i * cfg.block_s, cfg, classifier)
        if events is not None:
            for cmd in rep.commands:
                events.emit(cmd)
        blocks.append(rep)
    report = PipelineReport(cfg, fs, blocks)
    if cfg.report:
        report.save(cfg.report)
    return report


def summarize(report: PipelineReport) -> dict:
    """Per-run aggregates: circular mean azimuth, median distance and label counts."""
    az = [b.estimate.azimuth for b in report.blocks if b.estimate is not None]
    dist = [b.estimate.distance for b in report.blocks
            if b.estimate is not None and b.estimate.distance is not None]
    labels: dict[str, int] = {}
    for b in report.blocks:
        if b.scores is not None:
            labels[b.scores.label] = labels.get(b.scores.label, 0) + 1
    mean_az = None
    if az:
        rad = np.radians(az)
        mean_az = math.degrees(math.atan2(np.mean(np.sin(rad)), np.mean(np.cos(rad)))) % 360.0
    return {
        "n_blocks": len(report.blocks),
        "localized_blocks": len(az),
        "mean_azimuth_deg": mean_az,
        "median_distance_m": float(np.median(dist)) if dist else None,
        "labels": labels,
        "pad_commands": sum(len(b.commands) for b in report.blocks),
        "blocks_with_errors": sum(1 for b in report.blocks if b.errors),
        "mean_block_ms": report.mean_block_ms,
    }
