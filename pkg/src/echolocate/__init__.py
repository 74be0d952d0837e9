"""Microphone-array sound localization, denoising, separation and classification."""

__version__ = "0.1.0"

from .audio import AudioBuffer, FrameParams, MelSpectrogram, Spectrogram, mel_features, psnr, read_wav, stft, istft, write_wav
from .denoise import benchmark_denoisers, denoise_signal, otsu_threshold
from .localize import MicArrayGeometry, SourceEstimate, gcc_phat, localize
from .scene import SceneSpec, SourceSpec, render_scene
from .bss import fast_ica, nmf, pca_whiten, separate
from .transformer import AstConfig, AstWeights, ClassScores, ast_forward, patchify
from .classify import CentroidModel, centroid_classify, centroid_train
from .actuate import PadCommand, PadLayout, intensity_from_distance, perceived_stimulation, select_pad
from .pipeline import PipelineConfig, run_pipeline

__all__ = [
    "AudioBuffer", "FrameParams", "MelSpectrogram", "Spectrogram", "mel_features", "psnr", "read_wav",
    "stft", "istft", "write_wav", "benchmark_denoisers", "denoise_signal", "otsu_threshold",
    "MicArrayGeometry", "SourceEstimate", "gcc_phat", "localize", "SceneSpec", "SourceSpec", "render_scene",
    "fast_ica", "nmf", "pca_whiten", "separate", "AstConfig", "AstWeights", "ClassScores", "ast_forward",
    "patchify", "CentroidModel", "centroid_classify", "centroid_train", "PadCommand", "PadLayout",
    "intensity_from_distance", "perceived_stimulation", "select_pad", "PipelineConfig", "run_pipeline",
]
