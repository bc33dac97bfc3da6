"""
Interfaz de línea de comandos: `python -m tfmodes <comando>`.

    extract    pipeline completo sobre un manifiesto
    synth      genera un disparo sintético con su verdad
    score      compara una imagen de etiquetas con truth.json
    render     PNG de un contenedor de espectrograma
    stft, baseline, threshold   etapas sueltas para depuración
    serve      API de consulta de regiones
"""
import json
import logging
from argparse import ArgumentParser, Namespace
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from .baseline import estimate_baseline, whiten
from .config import DenoiseMethod, PipelineConfig, load_config, with_overrides
from .container import read_container, write_container
from .errors import InvalidParameterError, TfModesError
from .ingest import decimate, load_channel, require_length
from .pipeline import run_pipeline
from .render import RenderStyle, render
from .segment import read_regions_csv, read_regions_jsonl
from .synth import load_synth_spec, load_truth, score_detection, write_shot
from .tfa import Spectrogram, SpectrogramKind, log_power, require_kind, stft
from .threshold import apply_threshold, knee_threshold

logger = logging.getLogger(__name__)


# --- Parser ---

def _add_config_flags(parser: ArgumentParser) -> None:
    parser.add_argument("--config", metavar="JSON", help="PipelineConfig JSON (or the run metadata of a previous run).")
    parser.add_argument("--target-rate", type=float, dest="target_rate_hz", help="Sample rate after decimation (Hz).")
    parser.add_argument("--window-len", type=int, help="STFT window length N.")
    parser.add_argument("--p", type=float, help="Baseline asymmetry weight.")
    parser.add_argument("--lambda", type=float, dest="lam", help="Baseline smoothness penalty.")
    parser.add_argument("--alpha", type=float, help="Pre-emphasis exponent.")
    parser.add_argument("--guard-khz", type=float, help="Low-frequency guard band (kHz).")
    parser.add_argument("--denoise", choices=[m.value for m in DenoiseMethod], help="Multichannel denoising method.")
    parser.add_argument("--block", type=int, help="Frames per CPS averaging block.")
    parser.add_argument("--grid-points", type=int, help="Knee CDF grid size.")
    parser.add_argument("--connectivity", type=int, choices=[4, 8], help="Region pixel connectivity.")
    parser.add_argument("--min-region-pixels", type=int, help="Smallest region kept.")
    parser.add_argument("--k-mad", type=float, help="Transient score threshold in MAD units.")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="tfmodes", description="Extract coherent and transient mode regions from spectrograms.")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug-level logging.")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only.")
    commands = parser.add_subparsers(dest="command", required=True)

    extract = commands.add_parser("extract", help="Run the full pipeline on a shot manifest.")
    extract.add_argument("manifest", help="Shot manifest JSON.")
    extract.add_argument("-o", "--out", help="Output directory (overrides output.dir).")
    extract.add_argument("--formats", nargs="+", help="Subset of csv, jsonl, images, spectrogram-container, sqlite.")
    extract.add_argument("--db-url", help="Region store URL for the sqlite format.")
    extract.add_argument("--threads", type=int, help="Worker threads (default TFMODES_THREADS or CPU count).")
    _add_config_flags(extract)

    synth = commands.add_parser("synth", help="Generate a synthetic shot with ground truth.")
    synth.add_argument("spec", help="Synthetic shot JSON.")
    synth.add_argument("-o", "--out", required=True, help="Output directory.")
    synth.add_argument("--seed", type=int, help="Overrides the seed in the spec.")
    synth.add_argument("--window-len", type=int, help="STFT window length used for the truth grid.")

    score = commands.add_parser("score", help="Score a label image against ground truth.")
    score.add_argument("truth", help="truth.json written by synth.")
    score.add_argument("container", help="Spectrogram container with a labels plane.")
    score.add_argument("regions", help="Region CSV or JSONL of the same channel.")
    score.add_argument("-o", "--out", help="Write the scores as JSON here.")

    rend = commands.add_parser("render", help="Render a spectrogram container as PNG.")
    rend.add_argument("container", help="Spectrogram container.")
    rend.add_argument("-o", "--out", required=True, help="PNG path.")
    rend.add_argument("--style", choices=[s.value for s in RenderStyle], default=RenderStyle.POWER_DB.value)
    rend.add_argument("--overlay", help="Container whose mask (or mask plane) is overlaid.")

    for name, help_text in (
        ("stft", "Write the complex STFT of one channel."),
        ("baseline", "Write the whitened spectrogram with its baseline plane, from a channel or an stft container."),
        ("threshold", "Write the knee mask, from a channel, an stft container or a baseline container."),
    ):
        stage = commands.add_parser(name, help=help_text)
        stage.add_argument("source", help="float32 samples file, or a .tfs container from the previous stage.")
        stage.add_argument("sidecar", nargs="?", help="Channel metadata JSON (only with a samples file).")
        stage.add_argument("-o", "--out", required=True, help="Container path.")
        _add_config_flags(stage)

    serve = commands.add_parser("serve", help="Serve the region query API.")
    serve.add_argument("--db-url", help="Region store URL (default TFMODES_DB_URL).")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def resolve_config(args: Namespace) -> PipelineConfig:
    """Defaults <- --config <- flags."""
    config = load_config(args.config) if args.config else PipelineConfig()
    overrides = {
        "target_rate_hz": args.target_rate_hz,
        "stft.window_len": args.window_len,
        "baseline.p": args.p,
        "baseline.lambda": args.lam,
        "baseline.alpha": args.alpha,
        "baseline.guard_khz": args.guard_khz,
        "denoise.method": args.denoise,
        "denoise.block": args.block,
        "threshold.grid_points": args.grid_points,
        "segment.connectivity": args.connectivity,
        "segment.min_region_pixels": args.min_region_pixels,
        "segment.k_mad": args.k_mad,
        "output.dir": args.out if args.command == "extract" else None,
        "output.formats": getattr(args, "formats", None),
        "output.db_url": getattr(args, "db_url", None),
    }
    return with_overrides(config, overrides)


# --- Comandos ---

def cmd_extract(args: Namespace) -> int:
    config = resolve_config(args)
    logger.debug(f"Effective configuration: {json.dumps(config.echo(), sort_keys=True)}")
    result = run_pipeline(args.manifest, config, threads=args.threads)
    for outcome in result.outcomes:
        logger.info(f"{outcome.channel_id}: {outcome.status.value}, {len(outcome.records)} regions")
    return result.exit_status


def cmd_synth(args: Namespace) -> int:
    spec = load_synth_spec(args.spec)
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})
    stft_cfg = PipelineConfig().stft
    if args.window_len:
        stft_cfg = stft_cfg.model_validate({**stft_cfg.model_dump(), "window_len": args.window_len})
    manifest = write_shot(spec, args.out, stft_cfg)
    logger.info(f"Synthetic shot written to {manifest}")
    return 0


def _read_regions(path: str):
    return read_regions_jsonl(path) if Path(path).suffix == ".jsonl" else read_regions_csv(path)


def cmd_score(args: Namespace) -> int:
    truth = load_truth(args.truth)
    container = read_container(args.container)
    if container.spectrogram.kind == SpectrogramKind.LABELS:
        labels = container.spectrogram
    elif "labels" in container.planes:
        labels = container.spectrogram.with_values(container.planes["labels"].astype(int), SpectrogramKind.LABELS)
    else:
        raise TfModesError(f"{args.container} has no labels plane")
    scores = score_detection(truth, labels, _read_regions(args.regions))
    report = {name: score.model_dump() for name, score in scores.items()}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    return 0


def cmd_render(args: Namespace) -> int:
    container = read_container(args.container)
    overlay = None
    if args.overlay:
        other = read_container(args.overlay)
        if other.spectrogram.kind == SpectrogramKind.MASK:
            overlay = other.spectrogram
        elif "mask" in other.planes:
            overlay = other.spectrogram.with_values(other.planes["mask"], SpectrogramKind.MASK)
        else:
            raise TfModesError(f"{args.overlay} has no mask to overlay")
    render(container.spectrogram, RenderStyle(args.style), args.out, overlay=overlay)
    return 0


def _stage_input(args: Namespace, config: PipelineConfig) -> Spectrogram:
    """Espectrograma de entrada de una etapa: STFT de un canal crudo o el contenedor de la etapa previa."""
    if args.sidecar is None:
        if args.command == "stft":
            raise InvalidParameterError("stft needs a samples file and its sidecar")
        return read_container(args.source).spectrogram
    series = load_channel(args.source, args.sidecar)
    series = decimate(series, config.target_rate_hz, config.decimation)
    return stft(require_length(series, config.stft.window_len), config.stft)


def cmd_stage(args: Namespace) -> int:
    config = resolve_config(args)
    spec = _stage_input(args, config)
    if args.command == "stft":
        write_container(args.out, spec, meta={"stage": "stft"})
        return 0

    if spec.kind != SpectrogramKind.WHITENED or args.command == "baseline":
        logp = log_power(spec) if spec.kind == SpectrogramKind.COMPLEX else spec
        require_kind(logp, SpectrogramKind.LOG_POWER)
        model = estimate_baseline(logp, config.baseline)
        spec = whiten(logp, model)
        if args.command == "baseline":
            planes = {"baseline": model.baseline, "residual_scale": model.residual_scale, "level": model.level}
            write_container(args.out, spec, planes, meta={"stage": "baseline"})
            return 0

    knee = knee_threshold(spec, config.threshold.grid_points)
    write_container(args.out, apply_threshold(spec, knee), meta={"stage": "threshold", "knee": knee.as_report().model_dump()})
    return 0


def cmd_serve(args: Namespace) -> int:
    import uvicorn

    from . import database
    from .server import app

    database.configure(args.db_url)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


COMMANDS = {
    "extract": cmd_extract,
    "synth": cmd_synth,
    "score": cmd_score,
    "render": cmd_render,
    "stft": cmd_stage,
    "baseline": cmd_stage,
    "threshold": cmd_stage,
    "serve": cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (TfModesError, ValidationError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1
