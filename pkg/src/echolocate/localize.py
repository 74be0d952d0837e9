"""GCC-PHAT delay estimation, far-field direction and near-field multilateration.

Sign convention: a positive delay for pair ``(i, j)`` means channel ``j``
hears the source after channel ``i``, i.e. ``tau_ij = (|x - p_j| - |x - p_i|) / c``.
Localisation is confined to the horizontal plane of the array.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .audio import AudioBuffer

SPEED_OF_SOUND = 343.0
PHAT_EPS = 1e-12
PHAT_REL_FLOOR = 1e-2          # fraction of the strongest cross-power bin; 0 gives plain PHAT
UPSAMPLE = 16
GRID_AZIMUTHS = 36
GRID_RADII = 20
FAR_FIELD_GAIN = 0.10          # finite fit must cut RMS residual by at least this fraction
FAR_FIELD_MIN_GAIN = 0.02      # ... and by at least this many sample periods
REJECT_RESIDUAL = 0.5          # sample periods RMS; above this the estimate is low-confidence


class UndefinedCorrelationError(ValueError):
    """A channel is silent, so the cross-correlation carries no information."""


class IndeterminateDirectionError(ValueError):
    """All delays vanish; the source is equidistant from every microphone."""


@dataclass(frozen=True, eq=False)
class MicArrayGeometry:
    """Microphone positions in metres, shape ``(n_mics, 2)`` or ``(n_mics, 3)``."""

    positions: np.ndarray
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        if p.shape[0] < 2 or p.shape[1] not in (2, 3):
            raise ValueError(f"need >= 2 microphones with 2-D or 3-D coordinates, got shape {p.shape}")
        if self.speed_of_sound <= 0:
            raise ValueError("speed_of_sound must be positive")
        for i, j in itertools.combinations(range(len(p)), 2):
            if np.allclose(p[i], p[j], rtol=0, atol=1e-9):
                raise ValueError(f"microphones {i} and {j} share a position")
        p.setflags(write=False)
        object.__setattr__(self, "positions", p)

    @property
    def n_mics(self) -> int:
        return self.positions.shape[0]

    @property
    def xy(self) -> np.ndarray:
        return self.positions[:, :2]

    @property
    def center(self) -> np.ndarray:
        return self.xy.mean(axis=0)

    def pairs(self) -> list[tuple[int, int]]:
        return list(itertools.combinations(range(self.n_mics), 2))

    def baseline(self, i: int, j: int) -> float:
        return float(np.linalg.norm(self.positions[i] - self.positions[j]))

    def aperture(self) -> float:
        return max(self.baseline(i, j) for i, j in self.pairs())

    def to_dict(self) -> dict:
        return {"positions": self.positions.tolist(), "speed_of_sound": self.speed_of_sound}

    @classmethod
    def from_dict(cls, d: dict) -> "MicArrayGeometry":
        if "preset" in d:
            geom = PRESETS[d["preset"]]()
            return cls(geom.positions, d.get("speed_of_sound", geom.speed_of_sound))
        return cls(np.asarray(d["positions"], dtype=float), float(d.get("speed_of_sound", SPEED_OF_SOUND)))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MicArrayGeometry":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def square_array(side: float = 0.0457, speed_of_sound: float = SPEED_OF_SOUND) -> MicArrayGeometry:
    """Four microphones on the corners of a square centred on the origin."""
    h = side / 2
    return MicArrayGeometry([[h, h], [-h, h], [-h, -h], [h, -h]], speed_of_sound)


def circular_array(n: int = 6, radius: float = 0.15, speed_of_sound: float = SPEED_OF_SOUND) -> MicArrayGeometry:
    ang = 2 * np.pi * np.arange(n) / n
    return MicArrayGeometry(np.column_stack([radius * np.cos(ang), radius * np.sin(ang)]), speed_of_sound)


PRESETS = {
    "respeaker4": square_array,
    "vest6": circular_array,
}


@dataclass(frozen=True, eq=False)
class TdoaSet:
    """Pairwise delays (seconds) and correlation peaks for pairs ``i < j``."""

    pairs: tuple[tuple[int, int], ...]
    delays: np.ndarray
    peaks: np.ndarray
    sample_rate: int

    def delay(self, i: int, j: int) -> float:
        if i == j:
            return 0.0
        if i > j:
            return -self.delay(j, i)
        return float(self.delays[self.pairs.index((i, j))])

    def as_dict(self) -> dict[tuple[int, int], float]:
        out = {}
        for (i, j), d in zip(self.pairs, self.delays):
            out[(i, j)] = float(d)
            out[(j, i)] = -float(d)
        return out

    def to_dict(self) -> dict:
        return {
            "pairs": [list(p) for p in self.pairs],
            "delays_s": self.delays.tolist(),
            "peaks": self.peaks.tolist(),
        }


@dataclass
class DoaEstimate:
    azimuth: float
    residual: float
    ambiguous: bool = False
    candidates: tuple[float, ...] = ()


@dataclass
class SourceEstimate:
    """Localisation result. ``distance`` is None for the far-field marker."""

    azimuth: float
    distance: float | None
    tdoa: TdoaSet
    residual: float
    position: np.ndarray | None = None
    low_confidence: bool = False
    flags: list[str] = field(default_factory=list)

    @property
    def far_field(self) -> bool:
        return self.distance is None

    def to_dict(self) -> dict:
        return {
            "azimuth_deg": self.azimuth,
            "distance_m": self.distance,
            "far_field": self.far_field,
            "residual_s": self.residual,
            "low_confidence": self.low_confidence,
            "flags": list(self.flags),
            "tdoa": self.tdoa.to_dict(),
        }


def _as_array(x) -> tuple[np.ndarray, int | None]:
    if isinstance(x, AudioBuffer):
        return x.mono(), x.sample_rate
    return np.asarray(x, dtype=np.float64), None


def gcc_phat(a, b, max_lag: float, sample_rate: int | None = None,
             upsample: int = UPSAMPLE, rel_floor: float = PHAT_REL_FLOOR) -> tuple[float, float]:
    """Delay of ``b`` relative to ``a`` in seconds, plus the PHAT peak height.

    The cross spectrum is divided by its magnitude, floored at ``PHAT_EPS``
    and at ``rel_floor`` times its largest value. Without the relative floor
    a stationary tone's leakage bins (which all carry the tone's phase, not
    a linear phase) dominate and pull the peak to lag zero.

    The weighted spectrum is inverse-transformed at ``upsample`` times the
    sample rate; the argmax inside ``+/-max_lag`` is refined with a
    three-point parabola. Swapping the arguments negates the delay exactly.
    """
    xa, fs_a = _as_array(a)
    xb, fs_b = _as_array(b)
    fs = sample_rate or fs_a or fs_b
    if fs is None:
        raise ValueError("sample_rate is required for raw arrays")
    if fs_a and fs_b and fs_a != fs_b:
        raise ValueError("channels have different sample rates")
    if xa.shape != xb.shape or xa.ndim != 1:
        raise ValueError("gcc_phat needs two 1-D signals of equal length")
    if max_lag <= 0 or max_lag >= xa.size / fs / 2:
        raise ValueError(f"max_lag {max_lag} s must be in (0, duration/2)")
    if not np.any(xa) or not np.any(xb):
        raise UndefinedCorrelationError("an input channel is all zeros")

    ka, kb = xa.tobytes(), xb.tobytes()
    if ka == kb:
        _, peak = _gcc_core(xa, xb, max_lag, fs, upsample, rel_floor)
        return 0.0, peak
    if ka > kb:
        d, peak = _gcc_core(xb, xa, max_lag, fs, upsample, rel_floor)
        return -d, peak
    return _gcc_core(xa, xb, max_lag, fs, upsample, rel_floor)


def _gcc_core(xa, xb, max_lag, fs, upsample, rel_floor):
    n = xa.size
    nfft = 1 << (2 * n - 1).bit_length()
    cross = np.conj(np.fft.rfft(xa, nfft)) * np.fft.rfft(xb, nfft)
    mag = np.abs(cross)
    weighted = cross / np.maximum(mag, max(PHAT_EPS, rel_floor * float(mag.max())))
    weighted[-1] *= 0.5  # Nyquist bin appears once in the un-padded spectrum
    length = nfft * upsample
    cc = np.fft.irfft(weighted, n=length) * upsample

    m = int(math.floor(max_lag * fs * upsample))
    window = np.concatenate((cc[length - m:], cc[:m + 1]))
    k = int(np.argmax(window))
    shift = 0.0
    if 0 < k < window.size - 1:
        y0, y1, y2 = window[k - 1], window[k], window[k + 1]
        den = (y0 + y2) - 2.0 * y1
        if den < 0:
            shift = 0.5 * (y0 - y2) / den
    return (k - m + shift) / (fs * upsample), float(window[k])


def estimate_tdoa(buf: AudioBuffer, geom: MicArrayGeometry, upsample: int = UPSAMPLE,
                  rel_floor: float = PHAT_REL_FLOOR) -> TdoaSet:
    """GCC-PHAT for every microphone pair ``i < j``.

    Each search is limited to the pair's physical bound plus one sample.
    """
    if buf.n_channels != geom.n_mics:
        raise ValueError(f"buffer has {buf.n_channels} channels but geometry has {geom.n_mics} mics")
    fs = buf.sample_rate
    pairs = tuple(geom.pairs())
    delays = np.empty(len(pairs))
    peaks = np.empty(len(pairs))
    for k, (i, j) in enumerate(pairs):
        max_lag = geom.baseline(i, j) / geom.speed_of_sound + 1.0 / fs
        delays[k], peaks[k] = gcc_phat(buf.samples[i], buf.samples[j], max_lag, fs, upsample, rel_floor)
    return TdoaSet(pairs, delays, peaks, fs)


def _pair_matrix(tdoa: TdoaSet, geom: MicArrayGeometry) -> np.ndarray:
    p = geom.xy
    return np.array([p[i] - p[j] for i, j in tdoa.pairs])


def _azimuth(vec) -> float:
    return math.degrees(math.atan2(vec[1], vec[0])) % 360.0


def _rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def doa_far_field(tdoa: TdoaSet, geom: MicArrayGeometry) -> DoaEstimate:
    """Plane-wave direction by least squares on ``tau_ij = (p_i - p_j) . u / c``.

    A collinear array leaves the side of the line unresolved; both mirror
    azimuths are returned and the estimate is flagged ambiguous.
    """
    if np.max(np.abs(tdoa.delays)) < 1e-3 / tdoa.sample_rate:
        raise IndeterminateDirectionError("all pairwise delays are zero")
    c = geom.speed_of_sound
    D = _pair_matrix(tdoa, geom)
    v, _, rank, _ = np.linalg.lstsq(D, tdoa.delays * c, rcond=1e-9)
    if rank >= 2:
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            raise IndeterminateDirectionError("delay vector is inconsistent with any direction")
        u = v / norm
        return DoaEstimate(_azimuth(u), _rms(tdoa.delays - D @ u / c))
    # collinear: only the component along the array line is observable
    axis = D[np.argmax(np.linalg.norm(D, axis=1))]
    axis = axis / np.linalg.norm(axis)
    along = float(np.clip(v @ axis, -1.0, 1.0))
    normal = np.array([-axis[1], axis[0]])
    across = math.sqrt(max(0.0, 1.0 - along * along))
    cands = [along * axis + s * across * normal for s in (1.0, -1.0)]
    az = tuple(_azimuth(u) for u in cands)
    return DoaEstimate(az[0], _rms(tdoa.delays - D @ cands[0] / c), True, az)


def plane_wave_fit(tdoa: TdoaSet, geom: MicArrayGeometry) -> tuple[float, float]:
    """Best unit-direction fit: ``(azimuth_deg, rms_residual_s)``."""
    c = geom.speed_of_sound
    D = _pair_matrix(tdoa, geom)

    def cost(theta):
        u = np.array([math.cos(theta), math.sin(theta)])
        return _rms(tdoa.delays - D @ u / c)

    grid = np.linspace(0, 2 * np.pi, 720, endpoint=False)
    U = np.stack([np.cos(grid), np.sin(grid)])
    res = np.sqrt(np.mean((tdoa.delays[:, None] - (D @ U) / c) ** 2, axis=0))
    t0 = grid[int(np.argmin(res))]
    step = grid[1] - grid[0]
    opt = minimize_scalar(cost, bounds=(t0 - step, t0 + step), method="bounded",
                          options={"xatol": 1e-9})
    return math.degrees(opt.x) % 360.0, float(opt.fun)


def predicted_tdoa(points: np.ndarray, tdoa: TdoaSet, geom: MicArrayGeometry) -> np.ndarray:
    """Delays a point source at each of ``points`` (shape (k, 2)) would produce."""
    pts = np.atleast_2d(points)
    dist = np.linalg.norm(pts[:, None, :] - geom.xy[None, :, :], axis=2)
    i = np.array([p[0] for p in tdoa.pairs])
    j = np.array([p[1] for p in tdoa.pairs])
    return (dist[:, j] - dist[:, i]) / geom.speed_of_sound


def tdoa_residual(points, tdoa: TdoaSet, geom: MicArrayGeometry) -> np.ndarray:
    """RMS mismatch (seconds) between measured delays and a source at each point."""
    pred = predicted_tdoa(points, tdoa, geom)
    return np.sqrt(np.mean((pred - tdoa.delays[None, :]) ** 2, axis=1))


def distance_multilateration(tdoa: TdoaSet, geom: MicArrayGeometry,
                             search: tuple[float, float] = (0.3, 20.0)) -> SourceEstimate:
    """Near-field source position from pairwise delays.

    Coarse polar grid (36 azimuths x 20 log-spaced radii around the array
    centre) followed by Nelder-Mead refinement. If the finite-distance fit
    does not beat the best plane-wave fit by 10% (and by a resolvable
    margin), the far-field marker is returned instead of a distance.
    """
    if geom.n_mics < 3:
        raise ValueError("multilateration needs at least three microphones")
    rmin, rmax = search
    if not 0 < rmin < rmax:
        raise ValueError(f"invalid search bounds {search}")
    fs = tdoa.sample_rate
    center = geom.center
    flags: list[str] = []

    az = np.linspace(0, 2 * np.pi, GRID_AZIMUTHS, endpoint=False)
    radii = np.geomspace(rmin, rmax, GRID_RADII)
    A, R = np.meshgrid(az, radii)
    grid = center + np.column_stack([(R * np.cos(A)).ravel(), (R * np.sin(A)).ravel()])
    res = tdoa_residual(grid, tdoa, geom)

    def cost(x):
        return float(tdoa_residual(x[None, :], tdoa, geom)[0])

    best_x, best_f = None, math.inf
    for k in np.argsort(res, kind="stable")[:3]:
        opt = minimize(cost, grid[k], method="Nelder-Mead",
                       options={"xatol": 1e-6, "fatol": 1e-14, "maxiter": 2000})
        if opt.fun < best_f:
            best_x, best_f = opt.x, float(opt.fun)

    plane_az, plane_res = plane_wave_fit(tdoa, geom)
    offset = best_x - center
    r = float(np.linalg.norm(offset))
    gain = plane_res - best_f
    finite = gain >= FAR_FIELD_GAIN * plane_res and gain >= FAR_FIELD_MIN_GAIN / fs and r <= rmax
    if finite:
        azimuth, distance, residual, position = _azimuth(offset), r, best_f, best_x
    else:
        azimuth, distance, residual, position = plane_az, None, plane_res, None
        flags.append("far-field")

    low = False
    if residual > REJECT_RESIDUAL / fs:
        low = True
        flags.append("high-residual")
    min_sep = min(geom.baseline(i, j) for i, j in geom.pairs())
    if np.min(np.linalg.norm(geom.xy - best_x, axis=1)) < 0.25 * min_sep:
        low = True
        flags.append("at-microphone")
    return SourceEstimate(azimuth, distance, tdoa, residual, position, low, flags)


def localize(buf: AudioBuffer, geom: MicArrayGeometry, search: tuple[float, float] = (0.3, 20.0),
             rel_floor: float = PHAT_REL_FLOOR) -> SourceEstimate:
    """TDoA estimation followed by multilateration."""
    return distance_multilateration(estimate_tdoa(buf, geom, rel_floor=rel_floor), geom, search)
