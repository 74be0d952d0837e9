"""Small signal builders shared by the test modules."""

import numpy as np

from echolocate.audio import AudioBuffer

FS = 16000


def tone(freq, duration=1.0, fs=FS, amp=1.0, phase=0.0):
    t = np.arange(int(round(duration * fs))) / fs
    return amp * np.sin(2 * np.pi * freq * t + phase)


def mono(x, fs=FS):
    return AudioBuffer(np.asarray(x, dtype=float), fs)


def tone_noise_fixture(snr_db, seed, lead=0.2, duration=1.0, fs=FS):
    """Sine at a random frequency after a noise-only lead-in, plus white noise at ``snr_db``.

    Returns ``(clean, noisy)`` buffers. The lead-in gives the baseline
    denoisers a noise-only stretch for their default profile estimate.
    """
    rng = np.random.default_rng(seed)
    n = int(duration * fs)
    t = np.arange(n) / fs
    clean = 0.5 * np.sin(2 * np.pi * rng.uniform(300, 3000) * t)
    clean[:int(lead * fs)] = 0.0
    p_sig = np.mean(clean[int(lead * fs):] ** 2)
    noise = rng.standard_normal(n) * np.sqrt(p_sig / 10 ** (snr_db / 10))
    return AudioBuffer(clean, fs), AudioBuffer(clean + noise, fs)


def angle_error(a, b):
    """Absolute circular difference in degrees."""
    return abs((a - b + 180.0) % 360.0 - 180.0)


def plane_wave_tdoa(geom, azimuth_deg, fs=FS):
    """Oracle delays ``tau_ij = (p_i - p_j) . u / c`` for a distant source, as a TdoaSet."""
    from echolocate.localize import TdoaSet

    u = np.array([np.cos(np.radians(azimuth_deg)), np.sin(np.radians(azimuth_deg))])
    pairs = tuple(geom.pairs())
    p = geom.xy
    delays = np.array([(p[i] - p[j]) @ u / geom.speed_of_sound for i, j in pairs])
    return TdoaSet(pairs, delays, np.ones(len(pairs)), fs)


def point_source_tdoa(geom, position, fs=FS):
    """Oracle delays ``(|x - p_j| - |x - p_i|) / c`` for a point source, as a TdoaSet."""
    from echolocate.localize import TdoaSet

    x = np.asarray(position, dtype=float)
    d = np.linalg.norm(geom.xy - x, axis=1)
    pairs = tuple(geom.pairs())
    delays = np.array([(d[j] - d[i]) / geom.speed_of_sound for i, j in pairs])
    return TdoaSet(pairs, delays, np.ones(len(pairs)), fs)


def polar_scene(geom, azimuth_deg, distance_m, kind="noise", duration=0.5, snr_db=None, seed=0, **extra):
    from echolocate.scene import SceneSpec

    src = {"azimuth_deg": azimuth_deg, "distance_m": distance_m, "kind": kind, **extra}
    return SceneSpec.from_dict({"geometry": geom.to_dict(), "sources": [src], "duration": duration,
                                "noise_snr_db": snr_db, "seed": seed})


def ica_mixture(seed, n=10000):
    """Unit-variance uniform and Laplacian sources and a random 2x2 mixture of them."""
    r = np.random.default_rng(seed)
    S = np.vstack([r.uniform(-1, 1, n) * np.sqrt(3.0), r.laplace(0, 1 / np.sqrt(2.0), n)])
    A = r.standard_normal((2, 2))
    return S, A @ S


def matched_correlation(estimated, truth):
    """Smallest per-source |r| under the best permutation of two sources."""
    C = np.abs(np.corrcoef(np.vstack([estimated, truth]))[:2, 2:])
    return max(min(C[0, 0], C[1, 1]), min(C[0, 1], C[1, 0]))
