"""Command-line entry point: ``echolocate <command> ...``.

Results are written as JSON to stdout (or ``--out``). On failure a JSON
error record goes to stderr and the exit status is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .actuate import PadEventLog
from .audio import AudioBuffer, read_wav, write_wav
from .bss import nmf, separate
from .classify import centroid_train, load_classifier, synthetic_fixture
from .denoise import METHODS, benchmark_denoisers, denoise_signal
from .localize import PRESETS, MicArrayGeometry, estimate_tdoa, localize
from .pipeline import PipelineConfig, run_pipeline, summarize
from .scene import SceneSpec, render_scene, save_scene_outputs
from .transformer import AstConfig, AstWeights, load_labels

log = logging.getLogger("echolocate")

EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad arguments that argparse itself cannot detect."""


def _geometry(value: str | None) -> MicArrayGeometry:
    if value is None:
        raise UsageError("--geometry is required (a preset name or a JSON file)")
    if value in PRESETS:
        return PRESETS[value]()
    if not os.path.exists(value):
        raise UsageError(f"geometry {value!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    return MicArrayGeometry.load(value)


def _emit(result: dict, out: str | None) -> None:
    text = json.dumps(result, indent=2)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _figure_path(args, name: str) -> str | None:
    if not getattr(args, "figures", None):
        return None
    os.makedirs(args.figures, exist_ok=True)
    return os.path.join(args.figures, name)


def cmd_process(args) -> dict:
    geom = _geometry(args.geometry)
    overrides = {k: v for k, v in {
        "block_s": args.block, "denoiser": args.denoiser, "classifier": args.classifier,
        "n_sources": args.n_sources, "report": args.report,
    }.items() if v is not None}
    if args.config:
        with open(args.config) as fh:
            d = json.load(fh)
        base = os.path.dirname(os.path.abspath(args.config))
        cfg = PipelineConfig.from_dict({**d, **{k: os.path.abspath(v) if k in ("classifier", "report") else v
                                                 for k, v in overrides.items()}}, geom, base)
    else:
        cfg = PipelineConfig(geom, **overrides)
    buf = read_wav(args.input)
    events = None
    fh = open(args.events, "w") if args.events else None
    try:
        events = PadEventLog(fh)
        report = run_pipeline(buf, cfg, events=events)
    finally:
        if fh:
            fh.close()
    result = {"summary": summarize(report), "report": cfg.report}
    if args.figures:
        from . import plotting

        result["figures"] = [
            plotting.plot_azimuths(report, _figure_path(args, "azimuths.png")),
            plotting.plot_timings(report, _figure_path(args, "timings.png")),
        ]
        if cfg.denoiser:
            clip = buf.slice(0, min(buf.n_frames, 2 * buf.sample_rate))
            result["figures"].append(plotting.plot_denoise(
                clip, denoise_signal(clip.channel(0), cfg.denoiser),
                _figure_path(args, "denoise.png"), title=cfg.denoiser))
    if not cfg.report:
        result["blocks"] = report.to_dict()["blocks"]
    return result


def cmd_bench_denoise(args) -> dict:
    clean, noisy = read_wav(args.clean), read_wav(args.noisy)
    noise = read_wav(args.noise) if args.noise else None
    report = benchmark_denoisers(clean, noisy, noise)
    print(report.table(), file=sys.stderr)
    result = report.to_dict()
    if args.figures:
        from . import plotting

        result["figures"] = [plotting.plot_psnr(report, _figure_path(args, "psnr.png"))]
        best = next((e.algorithm for e in report.ranked() if e.psnr_db is not None), "otsu")
        clip = noisy.slice(0, min(noisy.n_frames, 2 * noisy.sample_rate))
        result["figures"].append(plotting.plot_denoise(
            clip, denoise_signal(clip, best, noise), _figure_path(args, "denoise.png"), title=best))
    return result


def cmd_simulate(args) -> dict:
    spec = SceneSpec.load(args.scene)
    buf, truth = render_scene(spec)
    sidecar = save_scene_outputs(buf, truth, args.out)
    return {"wav": args.out, "truth": sidecar, "channels": buf.n_channels,
            "duration_s": buf.duration, **truth.to_dict()}


def cmd_localize(args) -> dict:
    geom = _geometry(args.geometry)
    buf = read_wav(args.input)
    if args.start or args.duration:
        start = int(round(args.start * buf.sample_rate))
        stop = buf.n_frames if not args.duration else start + int(round(args.duration * buf.sample_rate))
        buf = buf.slice(start, stop)
    return localize(buf, geom).to_dict()


def cmd_classify(args) -> dict:
    clf = load_classifier(args.model)
    buf = read_wav(args.input)
    mono = AudioBuffer(buf.samples.mean(axis=0), buf.sample_rate)
    if args.denoiser:
        mono = denoise_signal(mono, args.denoiser)
    return clf(mono, 0.0).to_dict(top=args.top)


def cmd_separate(args) -> dict:
    geom = _geometry(args.geometry)
    buf = read_wav(args.input)
    tdoa = estimate_tdoa(buf, geom)
    sep = separate(buf, tdoa, args.n_sources, seed=args.seed)
    result = sep.to_dict()
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        paths = []
        for k, s in enumerate(sep.sources):
            p = os.path.join(args.out_dir, f"source_{k}.wav")
            peak = float(np.max(np.abs(s))) or 1.0
            write_wav(p, AudioBuffer(0.9 * s / peak, buf.sample_rate))
            paths.append(p)
        result["wavs"] = paths
    if args.nmf_rank:
        from .audio import FrameParams, stft

        V = stft(AudioBuffer(buf.samples.mean(axis=0), buf.sample_rate), FrameParams()).magnitude().T
        f = nmf(V, args.nmf_rank, iters=args.nmf_iters, seed=args.seed)
        result["nmf"] = {"rank": args.nmf_rank, "objective": f.objective[-1],
                         "W": f.W.tolist(), "H": f.H.tolist()}
    if args.figures:
        from . import plotting

        result["figures"] = [plotting.plot_sources(sep.sources, buf.sample_rate,
                                                   _figure_path(args, "sources.png"))]
    return result


def cmd_train_centroid(args) -> dict:
    if args.manifest:
        with open(args.manifest) as fh:
            items = json.load(fh)
        base = os.path.dirname(os.path.abspath(args.manifest))
        from .audio import mel_features

        feats = []
        for item in items:
            buf = read_wav(os.path.join(base, item["path"]))
            mono = AudioBuffer(buf.samples.mean(axis=0), buf.sample_rate)
            feats.append((mel_features(mono, args.n_mels), item["label"]))
    else:
        feats = synthetic_fixture(args.n_per_class, args.seed, args.n_mels)
    model = centroid_train(feats)
    model.save(args.out)
    return {"model": args.out, "labels": list(model.labels), "examples": len(feats)}


def cmd_init_weights(args) -> dict:
    kwargs = {"embed_dim": args.embed_dim, "layers": args.layers, "heads": args.heads}
    if args.labels:
        kwargs["labels"] = load_labels(args.labels)
    cfg = AstConfig(**kwargs)
    w = AstWeights.zeros(cfg) if args.zeros else AstWeights.random(cfg, args.seed)
    w.save(args.out, cfg)
    return {"weights": args.out, "config": cfg.to_dict(), "tensors": len(w)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="echolocate", description="Sound localization, denoising and classification")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True, figures=False):
        if out:
            sp.add_argument("--out", dest="json_out", help="write the JSON result here instead of stdout")
        if figures:
            sp.add_argument("--figures", metavar="DIR", help="also render PNG figures into DIR")

    sp = sub.add_parser("process", help="run the full block pipeline on a multi-channel WAV")
    sp.add_argument("--input", required=True)
    sp.add_argument("--geometry", required=True, help="preset name or geometry JSON")
    sp.add_argument("--config", help="pipeline JSON config")
    sp.add_argument("--report", help="write the full per-block report here")
    sp.add_argument("--events", help="write pad commands as JSON lines here")
    sp.add_argument("--classifier", help="transformer weights or centroid model file")
    sp.add_argument("--denoiser", choices=METHODS)
    sp.add_argument("--block", type=float, help="block length in seconds")
    sp.add_argument("--n-sources", type=int)
    common(sp, figures=True)
    sp.set_defaults(func=cmd_process)

    sp = sub.add_parser("bench-denoise", help="PSNR of every denoiser on a clean/noisy pair")
    sp.add_argument("--clean", required=True)
    sp.add_argument("--noisy", required=True)
    sp.add_argument("--noise", help="noise-only clip for the baselines' profile")
    common(sp, figures=True)
    sp.set_defaults(func=cmd_bench_denoise)

    sp = sub.add_parser("simulate", help="render a scene JSON to WAV plus ground truth")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True, help="output WAV path")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("localize", help="azimuth and distance of the dominant source")
    sp.add_argument("--input", required=True)
    sp.add_argument("--geometry", required=True)
    sp.add_argument("--start", type=float, default=0.0, help="analysis start (s)")
    sp.add_argument("--duration", type=float, default=0.0, help="analysis length (s); 0 means to the end")
    common(sp)
    sp.set_defaults(func=cmd_localize)

    sp = sub.add_parser("classify", help="label a WAV with a classifier model")
    sp.add_argument("--input", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--denoiser", choices=METHODS)
    sp.add_argument("--top", type=int, default=5)
    common(sp)
    sp.set_defaults(func=cmd_classify)

    sp = sub.add_parser("separate", help="PCA + FastICA separation with mic assignment")
    sp.add_argument("--input", required=True)
    sp.add_argument("--geometry", required=True)
    sp.add_argument("--n-sources", type=int, default=2)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", help="write each source as a WAV here")
    sp.add_argument("--nmf-rank", type=int, help="also factor the mixture's magnitude spectrogram")
    sp.add_argument("--nmf-iters", type=int, default=200)
    common(sp, figures=True)
    sp.set_defaults(func=cmd_separate)

    sp = sub.add_parser("train-centroid", help="fit a nearest-centroid model")
    sp.add_argument("--out", required=True)
    sp.add_argument("--manifest", help="JSON list of {path, label}; default is the synthetic fixture")
    sp.add_argument("--n-per-class", type=int, default=20)
    sp.add_argument("--n-mels", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_train_centroid)

    sp = sub.add_parser("init-weights", help="write a transformer weight file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--zeros", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--labels", help="label list, one per line")
    sp.add_argument("--embed-dim", type=int, default=192)
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--heads", type=int, default=3)
    sp.set_defaults(func=cmd_init_weights)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "command": args.command, "message": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # every failure becomes a structured record
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_FAILURE
    _emit(result, getattr(args, "json_out", None))
    return 0


if __name__ == "__main__":
    sys.exit(main())
