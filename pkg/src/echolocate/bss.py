"""Blind source separation: PCA whitening, NMF, FastICA and mic assignment.

PCA whitening and FastICA run on time-domain channels; NMF factorises a
non-negative (magnitude spectrogram) matrix. Separated sources are tied
back to microphones by normalised cross-correlation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .audio import AudioBuffer
from .localize import TdoaSet

log = logging.getLogger(__name__)

RANK_TOL = 1e-10
NMF_EPS = 1e-12
ASSIGN_MARGIN = 0.2
NONGAUSS_MIN = 0.01


def logcosh(x):
    """Overflow-free ``log(cosh(x))``."""
    a = np.abs(x)
    return a + np.log1p(np.exp(-2.0 * a)) - math.log(2.0)


# E[log cosh(v)] for v ~ N(0, 1); reference level for the negentropy proxy.
GAUSS_LOGCOSH = integrate.quad(
    lambda v: logcosh(v) * math.exp(-v * v / 2) / math.sqrt(2 * math.pi), -40.0, 40.0, epsabs=1e-13
)[0]


@dataclass(frozen=True, eq=False)
class WhitenedData:
    data: np.ndarray            # (components, frames)
    whitening: np.ndarray       # (components, channels)
    dewhitening: np.ndarray     # (channels, components)
    mean: np.ndarray            # (channels,)
    explained: np.ndarray       # variance fraction of each retained component
    warnings: tuple[str, ...] = ()

    @property
    def n_components(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class NmfFactors:
    W: np.ndarray
    H: np.ndarray
    objective: list[float]


@dataclass(eq=False)
class SeparatedSources:
    sources: np.ndarray                 # (sources, frames), unit variance
    unmixing: np.ndarray                # (sources, channels), applied to centred channels
    converged: bool
    iterations: int
    nongaussianity: np.ndarray
    assignment: list[int | None] = field(default_factory=list)
    scores: np.ndarray | None = None    # (sources, mics) normalised correlation peaks
    flags: list[str] = field(default_factory=list)

    @property
    def n_sources(self) -> int:
        return self.sources.shape[0]

    @property
    def low_confidence(self) -> bool:
        return bool(np.any(self.nongaussianity < NONGAUSS_MIN))

    def to_dict(self) -> dict:
        return {
            "n_sources": self.n_sources,
            "converged": self.converged,
            "iterations": self.iterations,
            "nongaussianity": self.nongaussianity.tolist(),
            "low_confidence": self.low_confidence,
            "assignment": self.assignment,
            "scores": None if self.scores is None else self.scores.tolist(),
            "flags": list(self.flags),
        }


def _channels(x) -> np.ndarray:
    if isinstance(x, AudioBuffer):
        return x.samples
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def pca_whiten(buf, retain: int | float | None = None) -> WhitenedData:
    """Project centred channels on the top principal axes and scale to unit variance.

    ``retain`` is a component count (int), a variance fraction in (0, 1]
    (float), or None for every non-degenerate component. Eigenvectors are
    sign-normalised (largest entry positive), so permuting input channels
    permutes nothing in the output.
    """
    X = _channels(buf)
    n_ch, n = X.shape
    if n_ch < 2:
        raise ValueError("PCA whitening needs at least two channels")
    if n <= n_ch:
        raise ValueError("need more frames than channels")
    mean = X.mean(axis=1)
    Xc = X - mean[:, None]
    cov = Xc @ Xc.T / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    pivot = np.argmax(np.abs(evecs), axis=0)
    evecs = evecs * np.sign(evecs[pivot, np.arange(n_ch)])

    total = float(np.sum(np.clip(evals, 0, None)))
    if total <= 0:
        raise ValueError("all channels are constant")
    rank = int(np.sum(evals > RANK_TOL * evals[0]))
    fractions = np.clip(evals, 0, None) / total
    if retain is None:
        k = rank
    elif isinstance(retain, (int, np.integer)) and not isinstance(retain, bool):
        if retain < 1:
            raise ValueError("retain count must be >= 1")
        k = int(retain)
    else:
        if not 0 < retain <= 1:
            raise ValueError("retain fraction must be in (0, 1]")
        k = int(np.searchsorted(np.cumsum(fractions), retain - 1e-12) + 1)
    warnings = []
    if k > rank:
        msg = f"covariance has rank {rank}; retaining {rank} of {k} requested components"
        log.warning(msg)
        warnings.append(msg)
        k = rank
    k = min(k, n_ch)
    lam = evals[:k]
    E = evecs[:, :k]
    whitening = (E / np.sqrt(lam)).T
    dewhitening = E * np.sqrt(lam)
    return WhitenedData(whitening @ Xc, whitening, dewhitening, mean, fractions[:k], tuple(warnings))


def nmf(V, rank: int, iters: int = 200, seed: int | None = 0,
        init: tuple[np.ndarray, np.ndarray] | None = None, eps: float = NMF_EPS) -> NmfFactors:
    """Lee-Seung multiplicative updates for ``min ||V - W H||_F^2``, W, H >= 0.

    Each iteration updates H then W. ``objective[0]`` is the initial error;
    the sequence is non-increasing.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2:
        raise ValueError("V must be a matrix")
    if np.any(V < 0):
        raise ValueError("V must be non-negative")
    m, n = V.shape
    if not 1 <= rank < min(m, n):
        raise ValueError(f"rank must be in [1, {min(m, n)})")
    if not np.any(V):
        return NmfFactors(np.zeros((m, rank)), np.zeros((rank, n)), [0.0])
    if init is not None:
        W, H = (np.array(a, dtype=np.float64) for a in init)
        if W.shape != (m, rank) or H.shape != (rank, n):
            raise ValueError("initial factors have the wrong shape")
    else:
        rng = np.random.default_rng(seed)
        scale = math.sqrt(V.mean() / rank)
        W = rng.random((m, rank)) * scale
        H = rng.random((rank, n)) * scale

    history = [float(np.sum((V - W @ H) ** 2))]
    for _ in range(iters):
        H *= (W.T @ V) / (W.T @ W @ H + eps)
        W *= (V @ H.T) / (W @ (H @ H.T) + eps)
        history.append(float(np.sum((V - W @ H) ** 2)))
    return NmfFactors(W, H, history)


def _sym_decorrelate(W: np.ndarray) -> np.ndarray:
    s, u = np.linalg.eigh(W @ W.T)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ W


def fast_ica(white: WhitenedData, iters: int = 200, tol: float = 1e-6, seed: int | None = 0) -> SeparatedSources:
    """Symmetric FastICA with the tanh contrast.

    Starts from a seeded random orthogonal matrix. Convergence means every
    row of the unmixing rotation changed direction by less than ``tol``.
    If ``iters`` runs out, the last iterate is returned with
    ``converged=False``. Sources whose log-cosh negentropy proxy is below
    ``NONGAUSS_MIN`` mark the result low-confidence.
    """
    Z = white.data
    k, n = Z.shape
    if k < 2:
        raise ValueError("FastICA needs at least two whitened components")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    W = q * np.sign(np.diag(r))

    converged = False
    it = 0
    for it in range(1, iters + 1):
        Y = W @ Z
        G = np.tanh(Y)
        W_new = G @ Z.T / n - np.diag(np.mean(1.0 - G * G, axis=1)) @ W
        W_new = _sym_decorrelate(W_new)
        change = float(np.max(np.abs(np.abs(np.einsum("ij,ij->i", W_new, W)) - 1.0)))
        W = W_new
        if change < tol:
            converged = True
            break
    S = W @ Z
    ng = np.abs(np.mean(logcosh(S), axis=1) - GAUSS_LOGCOSH)
    flags = []
    if not converged:
        flags.append("unconverged")
    if np.any(ng < NONGAUSS_MIN):
        flags.append("near-gaussian")
    return SeparatedSources(S, W @ white.whitening, converged, it, ng, flags=flags)


def _xcorr_peak(s: np.ndarray, x: np.ndarray, max_lag: int) -> float:
    n = s.size
    nfft = 1 << (2 * n - 1).bit_length()
    cc = np.fft.irfft(np.conj(np.fft.rfft(s, nfft)) * np.fft.rfft(x, nfft), nfft)
    window = np.concatenate((cc[nfft - max_lag:], cc[:max_lag + 1])) if max_lag else cc[:1]
    denom = np.linalg.norm(s) * np.linalg.norm(x)
    return float(np.max(np.abs(window)) / denom) if denom > 0 else 0.0


def assign_sources(sep: SeparatedSources, buf: AudioBuffer, tdoa: TdoaSet,
                   margin: float = ASSIGN_MARGIN) -> SeparatedSources:
    """Tie each separated source to the microphone it correlates with best.

    Scores are normalised cross-correlation peaks, searched over lags up to
    the largest measured inter-mic delay plus one sample. Pairs are taken
    greedily best-first; a source is only assigned if its best score beats
    its second best by ``margin`` and the microphone is still free.
    """
    X = buf.samples - buf.samples.mean(axis=1, keepdims=True)
    if X.shape[1] != sep.sources.shape[1]:
        raise ValueError("separated sources and capture have different lengths")
    lag = int(math.ceil(float(np.max(np.abs(tdoa.delays), initial=0.0)) * tdoa.sample_rate)) + 1
    n_src, n_mic = sep.n_sources, X.shape[0]
    scores = np.array([[_xcorr_peak(sep.sources[s], X[m], lag) for m in range(n_mic)]
                       for s in range(n_src)])
    assignment: list[int | None] = [None] * n_src
    used: set[int] = set()
    order = sorted(((scores[s, m], s, m) for s in range(n_src) for m in range(n_mic)), reverse=True)
    for score, s, m in order:
        if assignment[s] is not None or m in used:
            continue
        others = np.delete(scores[s], m)
        if others.size and score - others.max() < margin:
            continue
        assignment[s] = m
        used.add(m)
    flags = list(sep.flags)
    if all(a is None for a in assignment):
        flags.append("unassigned")
    return SeparatedSources(sep.sources, sep.unmixing, sep.converged, sep.iterations, sep.nongaussianity,
                            assignment, scores, flags)


def separate(buf: AudioBuffer, tdoa: TdoaSet, n_sources: int, iters: int = 200,
             seed: int | None = 0) -> SeparatedSources:
    """PCA whitening to ``n_sources`` components, FastICA, then mic assignment."""
    white = pca_whiten(buf, retain=n_sources)
    return assign_sources(fast_ica(white, iters=iters, seed=seed), buf, tdoa)
