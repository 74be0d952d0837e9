"""Spectrogram transformer (inference only) and its binary weight format.

A log-Mel spectrogram is cut into non-overlapping 16x16 patches, linearly
embedded, prefixed with a [CLS] token, given learned positional
embeddings and passed through pre-norm transformer blocks. The final
[CLS] vector goes through a linear head with element-wise sigmoid.

Weight file layout::

    b"ECHW"  u32 version  u32 header_len  header (UTF-8 JSON)  tensor data

The JSON header holds the config and an ordered list of ``{name, shape}``;
tensor data follows as little-endian float32 in the same order.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
from scipy.special import erf

from .audio import MelSpectrogram

MAGIC = b"ECHW"
VERSION = 1
LN_EPS = 1e-6
LOGIT_CLIP = 30.0


def default_labels() -> tuple[str, ...]:
    """The 50 ESC-50 class names shipped with the package."""
    text = resources.files("echolocate").joinpath("data/esc50_labels.txt").read_text()
    return tuple(load_labels_text(text))


def load_labels_text(text: str) -> list[str]:
    return [ln.strip() for ln in text.splitlines() if ln.strip()]


def load_labels(path: str | os.PathLike) -> tuple[str, ...]:
    with open(path) as fh:
        return tuple(load_labels_text(fh.read()))


@dataclass(frozen=True)
class AstConfig:
    n_mels: int = 128
    patch_freq: int = 16
    patch_time: int = 16
    embed_dim: int = 192
    layers: int = 2
    heads: int = 3
    mlp_ratio: int = 4
    max_time_patches: int = 64
    labels: tuple[str, ...] = field(default_factory=default_labels)

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.n_mels % self.patch_freq:
            raise ValueError("n_mels must be a multiple of patch_freq")
        if not self.labels:
            raise ValueError("at least one label is required")

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    @property
    def freq_patches(self) -> int:
        return self.n_mels // self.patch_freq

    @property
    def patch_dim(self) -> int:
        return self.patch_freq * self.patch_time

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Every tensor name and shape, in file order."""
        d, h = self.embed_dim, self.embed_dim * self.mlp_ratio
        out = {
            "patch.weight": (self.patch_dim, d),
            "patch.bias": (d,),
            "cls": (d,),
            "pos": (1 + self.freq_patches * self.max_time_patches, d),
        }
        for i in range(self.layers):
            p = f"layers.{i}."
            out.update({
                p + "ln1.weight": (d,), p + "ln1.bias": (d,),
                p + "attn.qkv.weight": (d, 3 * d), p + "attn.qkv.bias": (3 * d,),
                p + "attn.proj.weight": (d, d), p + "attn.proj.bias": (d,),
                p + "ln2.weight": (d,), p + "ln2.bias": (d,),
                p + "mlp.fc1.weight": (d, h), p + "mlp.fc1.bias": (h,),
                p + "mlp.fc2.weight": (h, d), p + "mlp.fc2.bias": (d,),
            })
        out.update({
            "norm.weight": (d,), "norm.bias": (d,),
            "head.weight": (d, self.n_classes), "head.bias": (self.n_classes,),
        })
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels)
        return d


class AstWeights(dict):
    """Name -> float64 array store, validated against an :class:`AstConfig`."""

    def validate(self, cfg: AstConfig) -> None:
        expected = cfg.shapes()
        missing = set(expected) - set(self)
        extra = set(self) - set(expected)
        if missing or extra:
            raise ValueError(f"weights do not match config: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expected.items():
            if self[name].shape != shape:
                raise ValueError(f"{name}: shape {self[name].shape}, config expects {shape}")
            if not np.all(np.isfinite(self[name])):
                raise ValueError(f"{name}: non-finite values")

    @classmethod
    def zeros(cls, cfg: AstConfig) -> "AstWeights":
        return cls({k: np.zeros(s) for k, s in cfg.shapes().items()})

    @classmethod
    def random(cls, cfg: AstConfig, seed: int | None = 0, scale: float = 0.02) -> "AstWeights":
        """Small Gaussian weights, unit LayerNorm gains, zero biases."""
        rng = np.random.default_rng(seed)
        w = cls()
        for name, shape in cfg.shapes().items():
            if name.endswith(("ln1.weight", "ln2.weight")) or name == "norm.weight":
                w[name] = np.ones(shape)
            elif name.endswith("bias"):
                w[name] = np.zeros(shape)
            else:
                w[name] = rng.normal(0.0, scale, shape)
        return w

    def save(self, path: str | os.PathLike, cfg: AstConfig) -> None:
        self.validate(cfg)
        shapes = cfg.shapes()
        header = json.dumps({
            "config": cfg.to_dict(),
            "tensors": [{"name": k, "shape": list(s)} for k, s in shapes.items()],
        }).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
            for name in shapes:
                fh.write(np.ascontiguousarray(self[name], dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> tuple["AstWeights", AstConfig]:
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != MAGIC:
            raise ValueError(f"{path}: not an echolocate weight file")
        version, hlen = struct.unpack("<II", blob[4:12])
        if version != VERSION:
            raise ValueError(f"{path}: unsupported weight file version {version}")
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
        cfg = AstConfig(**header["config"])
        offset = 12 + hlen
        w = cls()
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = offset + 4 * count
            if end > len(blob):
                raise ValueError(f"{path}: truncated at tensor {entry['name']}")
            w[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f4").astype(np.float64).reshape(shape)
            offset = end
        if offset != len(blob):
            raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
        w.validate(cfg)
        return w, cfg


@dataclass(frozen=True, eq=False)
class PatchSequence:
    """Flattened patches in freq-major order plus their grid coordinates."""

    patches: np.ndarray     # (n, patch_freq * patch_time)
    rows: np.ndarray        # frequency-patch index of each patch
    cols: np.ndarray        # time-patch index of each patch

    def __len__(self) -> int:
        return self.patches.shape[0]

    def permuted(self, order) -> "PatchSequence":
        order = np.asarray(order)
        return PatchSequence(self.patches[order], self.rows[order], self.cols[order])


@dataclass
class ClassScores:
    labels: tuple[str, ...]
    values: np.ndarray
    label: str
    timestamp: float | None = None

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.labels, self.values.tolist()))

    def to_dict(self, top: int = 5) -> dict:
        order = np.argsort(-self.values, kind="stable")[:top]
        return {
            "label": self.label,
            "score": float(self.values[self.labels.index(self.label)]),
            "timestamp_s": self.timestamp,
            "top": [{"label": self.labels[i], "score": float(self.values[i])} for i in order],
        }


def patchify(mel: MelSpectrogram, cfg: AstConfig = None) -> PatchSequence:
    """Tile the spectrogram into 16x16 patches, zero-padding the last time column."""
    cfg = cfg or AstConfig()
    x = mel.values
    if x.shape[0] != cfg.n_mels:
        raise ValueError(f"expected {cfg.n_mels} mel bands, got {x.shape[0]}")
    pf, pt = cfg.patch_freq, cfg.patch_time
    n_time = max(1, math.ceil(x.shape[1] / pt))
    padded = np.zeros((cfg.n_mels, n_time * pt))
    padded[:, :x.shape[1]] = x
    grid = padded.reshape(cfg.freq_patches, pf, n_time, pt).transpose(0, 2, 1, 3)
    rows, cols = np.meshgrid(np.arange(cfg.freq_patches), np.arange(n_time), indexing="ij")
    return PatchSequence(grid.reshape(-1, pf * pt), rows.ravel(), cols.ravel())


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain + bias


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def encode(seq: PatchSequence, weights: AstWeights, cfg: AstConfig,
           attention: list | None = None) -> np.ndarray:
    """Run the encoder; returns the normalised [CLS] vector.

    If ``attention`` is a list, each layer's attention probabilities
    ``(heads, tokens, tokens)`` are appended to it.
    """
    if np.any(seq.cols >= cfg.max_time_patches):
        raise ValueError(f"input spans more than {cfg.max_time_patches} time patches")
    d, nh = cfg.embed_dim, cfg.heads
    hd = d // nh
    tokens = seq.patches @ weights["patch.weight"] + weights["patch.bias"]
    pos_idx = 1 + seq.rows * cfg.max_time_patches + seq.cols
    x = np.vstack([weights["cls"] + weights["pos"][0], tokens + weights["pos"][pos_idx]])
    n = x.shape[0]
    for i in range(cfg.layers):
        p = f"layers.{i}."
        h = _layer_norm(x, weights[p + "ln1.weight"], weights[p + "ln1.bias"])
        qkv = h @ weights[p + "attn.qkv.weight"] + weights[p + "attn.qkv.bias"]
        q, k, v = (qkv[:, j * d:(j + 1) * d].reshape(n, nh, hd).transpose(1, 0, 2) for j in range(3))
        probs = _softmax(q @ k.transpose(0, 2, 1) / math.sqrt(hd))
        if attention is not None:
            attention.append(probs)
        ctx = (probs @ v).transpose(1, 0, 2).reshape(n, d)
        x = x + ctx @ weights[p + "attn.proj.weight"] + weights[p + "attn.proj.bias"]
        h = _layer_norm(x, weights[p + "ln2.weight"], weights[p + "ln2.bias"])
        h = _gelu(h @ weights[p + "mlp.fc1.weight"] + weights[p + "mlp.fc1.bias"])
        x = x + h @ weights[p + "mlp.fc2.weight"] + weights[p + "mlp.fc2.bias"]
    return _layer_norm(x[0], weights["norm.weight"], weights["norm.bias"])


def ast_logits(seq: PatchSequence, weights: AstWeights, cfg: AstConfig) -> np.ndarray:
    weights.validate(cfg)
    return encode(seq, weights, cfg) @ weights["head.weight"] + weights["head.bias"]


def ast_forward(seq: PatchSequence, weights: AstWeights, cfg: AstConfig,
                timestamp: float | None = None) -> ClassScores:
    """Sigmoid class scores; logits are clipped to +/-30 so scores stay inside (0, 1)."""
    logits = ast_logits(seq, weights, cfg)
    scores = 1.0 / (1.0 + np.exp(-np.clip(logits, -LOGIT_CLIP, LOGIT_CLIP)))
    return ClassScores(cfg.labels, scores, cfg.labels[int(np.argmax(logits))], timestamp)
