"""Pad selection and stimulation intensity for the vest.

Intensities are in mA-equivalent units and can never exceed
``MAX_INTENSITY``: every path that builds a :class:`PadCommand` goes
through :func:`clamp_intensity`, and the command itself re-checks.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import IO

import numpy as np

MAX_INTENSITY = 12.5
FAR_FIELD_INTENSITY = 6.0
REFERENCE_DISTANCE = 2.0
LEVELS = (0.0, 6.0, 12.5)

# Volunteer stimulation ratings (0-10) at 0, 6 and 12.5 mA; one row per
# volunteer, one block of three columns per environment:
# indoors 68F, outdoors 68F, outdoors 32F.
STIMULATION_CURRENTS = (0.0, 6.0, 12.5)
STIMULATION_RATINGS = np.array([
    [0, 5, 10, 0, 6, 10, 0, 5, 10],
    [0, 6, 10, 1, 6, 10, 1, 6, 10],
    [0, 5, 10, 0, 5, 10, 1, 5, 10],
    [0, 5, 10, 0, 5, 10, 0, 5, 10],
    [0, 6, 10, 0, 5, 10, 1, 5, 10],
    [0, 5, 10, 0, 5, 9, 0, 6, 10],
    [0, 6, 10, 0, 5, 10, 0, 5, 10],
    [0, 6, 10, 0, 5, 10, 0, 6, 9],
    [0, 6, 10, 0, 5, 10, 0, 6, 10],
    [0, 6, 10, 0, 5, 10, 0, 6, 10],
])


def stimulation_medians() -> tuple[float, ...]:
    """Median rating at each current, pooled over volunteers and environments."""
    by_current = STIMULATION_RATINGS.reshape(-1, 3, 3).transpose(2, 0, 1).reshape(3, -1)
    return tuple(float(v) for v in np.median(by_current, axis=1))


_MEDIANS = stimulation_medians()


@dataclass(frozen=True)
class PadLayout:
    n_pads: int = 8
    offset: float = 0.0
    discrete: bool = False     # snap intensities to LEVELS instead of a continuous range

    def __post_init__(self):
        if int(self.n_pads) != self.n_pads or self.n_pads < 2:
            raise ValueError("a layout needs at least two pads")
        if not 0.0 <= self.offset < 360.0:
            raise ValueError("offset must be in [0, 360)")

    @property
    def sector(self) -> float:
        return 360.0 / self.n_pads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PadCommand:
    pad: int
    intensity: float
    timestamp: float
    source_azimuth: float | None = None
    source_distance: float | None = None
    label: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.intensity <= MAX_INTENSITY:
            raise ValueError(f"intensity {self.intensity} outside [0, {MAX_INTENSITY}]")
        if self.pad < 0:
            raise ValueError("pad index must be non-negative")

    def to_dict(self) -> dict:
        return {
            "timestamp_s": self.timestamp,
            "pad": self.pad,
            "intensity": self.intensity,
            "source_azimuth": self.source_azimuth,
            "source_distance": self.source_distance,
            "label": self.label,
        }


def select_pad(azimuth: float, layout: PadLayout = PadLayout()) -> int:
    """Sector index; a sector boundary belongs to the sector above it."""
    if not math.isfinite(azimuth):
        raise ValueError("azimuth must be finite")
    a = (azimuth + layout.offset) % 360.0
    return min(int(a // layout.sector), layout.n_pads - 1)


def clamp_intensity(value: float) -> float:
    """Force a value into ``[0, MAX_INTENSITY]``; NaN becomes 0."""
    if math.isnan(value):
        return 0.0
    return float(min(max(value, 0.0), MAX_INTENSITY))


def intensity_from_distance(distance: float | None, ref: float = REFERENCE_DISTANCE) -> float:
    """Inverse-square level, full scale at ``ref`` metres and closer.

    ``None`` is the far-field marker and maps to ``FAR_FIELD_INTENSITY``.
    """
    if distance is None:
        return FAR_FIELD_INTENSITY
    if math.isnan(distance) or distance <= 0:
        raise ValueError(f"distance must be positive, got {distance}")
    if not ref > 0:
        raise ValueError("reference distance must be positive")
    if math.isinf(distance):
        return 0.0
    if distance <= ref:
        return MAX_INTENSITY
    return clamp_intensity(MAX_INTENSITY * (ref / distance) ** 2)


def snap_level(intensity: float) -> float:
    """Nearest allowed discrete level (ties go to the lower level)."""
    levels = np.asarray(LEVELS)
    return float(levels[int(np.argmin(np.abs(levels - intensity)))])


def perceived_stimulation(current: float) -> float:
    """Expected 0-10 rating, linearly interpolated through the volunteer medians."""
    if not 0.0 <= current <= MAX_INTENSITY:
        raise ValueError(f"current {current} outside [0, {MAX_INTENSITY}]")
    return float(np.interp(current, STIMULATION_CURRENTS, _MEDIANS))


def command_for(azimuth: float, distance: float | None, timestamp: float,
                layout: PadLayout = PadLayout(), ref: float = REFERENCE_DISTANCE,
                label: str | None = None) -> PadCommand:
    level = intensity_from_distance(distance, ref)
    if layout.discrete:
        level = snap_level(level)
    return PadCommand(select_pad(azimuth, layout), clamp_intensity(level), timestamp,
                      azimuth, distance, label)


class PadEventLog:
    """Ordered sink writing one JSON object per command."""

    def __init__(self, stream: IO[str] | None = None):
        self.stream = stream
        self.commands: list[PadCommand] = []

    def emit(self, cmd: PadCommand) -> None:
        if self.commands and cmd.timestamp < self.commands[-1].timestamp:
            raise ValueError("pad commands must be emitted in time order")
        self.commands.append(cmd)
        if self.stream is not None:
            self.stream.write(json.dumps(cmd.to_dict()) + "\n")

    @staticmethod
    def read(path: str | os.PathLike) -> list[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
