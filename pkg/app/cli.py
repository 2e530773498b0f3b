# app/cli.py
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import click
import numpy as np
import typer
import uvicorn
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from app.body.model import BodyModel, pose_body
from app.body.params import CameraParams, ModelParams, PoseParams, ShapeParams
from app.core.config import settings
from app.core.errors import (
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    ConfigurationError,
    DatasetIOError,
    DenseFitError,
    DivergenceError,
    FormatError,
    exit_code_for,
)
from app.core.model_loader import model_loader
from app.fitting.correspondence import (
    CorrespondenceSet,
    anchor_landmarks,
    build_iuv_index,
    calibrate_stride,
    load_correspondences,
    match_pixels,
    save_correspondences,
)
from app.fitting.experiments import DEFAULT_LADDER, run_recovery_experiment, save_experiment
from app.fitting.fitter import FitResult, fit, mean_params
from app.fitting.gradcheck import run_gradchecks
from app.metrics.report import aggregate_reports, evaluate_prediction, save_reports
from app.moca.generator import generate as generate_dataset
from app.moca.generator import sample_configuration
from app.moca.manifest import load_manifest, rounded_json, summarize
from app.moca.preprocess import frame_to_canvas
from app.render.camera import project
from app.render.iuv import iuv_to_png, load_iuv, save_iuv
from app.render.raster import rasterize
from app.schemas.body import TemplateConfig
from app.schemas.command import CommandConfig, load_config_file, merge_section
from app.schemas.dataset import SPLITS, GenerateConfig, SampleRecord
from app.schemas.fitting import FitConfig, FitSummary, SupervisionFlags

logger = logging.getLogger(__name__)
console = Console()

LANDMARK_SUFFIX = ".csv"

cli = typer.Typer(
    name="densefit",
    help="Dense render-and-compare body fitting: generate datasets, fit IUV targets, evaluate and check gradients.",
    add_completion=False,
    no_args_is_help=True,
)


@cli.callback()
def main(
    log_level: Optional[str] = typer.Option(None, "--log-level", help="Logging level; defaults to LOG_LEVEL"),
):
    logging.basicConfig(level=(log_level or settings.LOG_LEVEL).upper())


@contextmanager
def command_errors(action: str) -> Iterator[None]:
    """Report pipeline errors and leave with their exit code"""
    try:
        yield
    except DenseFitError as e:
        logger.error(f"Error {action}: {e.message}", exc_info=True)
        console.print(f"[red]Error {action}:[/red] {e.message}")
        raise typer.Exit(code=e.exit_code)


def _seed(seed: Optional[int]) -> int:
    return settings.DENSEFIT_SEED if seed is None else seed


def _template(file_values: dict, parts: Optional[int], resolution: Optional[int],
              rank: Optional[int]) -> TemplateConfig:
    return merge_section(TemplateConfig, file_values.get("template", {}),
                         {"part_count": parts, "resolution": resolution, "shape_rank": rank})


def _image_size(height: Optional[int], width: Optional[int]) -> Optional[Tuple[int, int]]:
    if height is None and width is None:
        return None
    if height is None or width is None:
        raise ConfigurationError("--height and --width must be given together")
    return (height, width)


def _fit_config(file_values: dict, supervision: Optional[str], max_iterations: Optional[int],
                tau: Optional[float], stride: Optional[int], rematch_every: Optional[int]) -> FitConfig:
    return merge_section(FitConfig, file_values.get("fit", {}), {
        "supervision": supervision,
        "max_iterations": max_iterations,
        "tau": tau,
        "stride": stride,
        "rematch_every": rematch_every,
    })


def _model(model_path: Optional[Path], template: TemplateConfig) -> BodyModel:
    if model_path is not None:
        return model_loader.load_file(str(model_path))
    return model_loader.get(settings.DENSEFIT_MODEL_PATH, template)


def _write_text(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"Cannot write {path}: {e}")
    return path


@cli.command("generate")
def generate_command(
    out: Path = typer.Option(..., "--out", help="Dataset directory"),
    sequences: Optional[int] = typer.Option(None, "--sequences", help="Animation sequences"),
    frames: Optional[int] = typer.Option(None, "--frames", help="Frames per sequence"),
    shapes: Optional[int] = typer.Option(None, "--shapes", help="Body shapes rendered per animation"),
    height: Optional[int] = typer.Option(None, "--height"),
    width: Optional[int] = typer.Option(None, "--width"),
    test_ratio: Optional[float] = typer.Option(None, "--test-ratio"),
    occlusion: Optional[bool] = typer.Option(None, "--occlusion/--no-occlusion", help="Occlude training frames"),
    tau: Optional[float] = typer.Option(None, "--tau"),
    stride: Optional[int] = typer.Option(None, "--stride"),
    min_pairs: Optional[int] = typer.Option(None, "--min-pairs"),
    parts: Optional[int] = typer.Option(None, "--parts", help="Body parts: 1, 12 or 24"),
    resolution: Optional[int] = typer.Option(None, "--resolution"),
    rank: Optional[int] = typer.Option(None, "--rank", help="Shape basis modes"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Defaults to DENSEFIT_SEED"),
    jobs: int = typer.Option(settings.DENSEFIT_JOBS, "--jobs", help="Worker processes"),
    config: Optional[Path] = typer.Option(None, "--config", help="YAML file with template/fit/generate sections"),
):
    """Render a paired synthetic dataset with its manifest"""
    with command_errors("generating dataset"):
        file_values = load_config_file(config)
        template = _template(file_values, parts, resolution, rank)
        generate_file = file_values.get("generate", {})
        if seed is None and "seed" not in generate_file:
            seed = settings.DENSEFIT_SEED
        generate_config = merge_section(GenerateConfig, generate_file, {
            "sequences": sequences,
            "frames": frames,
            "shapes_per_sequence": shapes,
            "image_size": _image_size(height, width),
            "test_ratio": test_ratio,
            "occlusion": occlusion,
            "tau": tau,
            "stride": stride,
            "min_pairs": min_pairs,
            "seed": seed,
            "template": template,
        })
        command = CommandConfig(subcommand="generate", inputs={"config": config}, output=out,
                                seed=generate_config.seed, jobs=jobs, template=template, generate=generate_config)
        command.check_paths()

        manifest = generate_dataset(command.generate, out, jobs=command.jobs)
        summary = summarize(manifest)

        table = Table(title=f"Dataset {summary.name} (seed {summary.seed})")
        table.add_column("Split")
        table.add_column("Sequences", justify="right")
        table.add_column("Samples", justify="right")
        for split in SPLITS:
            table.add_row(split, str(summary.sequences.get(split, 0)), str(summary.counts.get(split, 0)))
        console.print(table)
        console.print(f"Dropped {summary.dropped} sample(s); manifest written to {out}")


@cli.command("render")
def render_command(
    out: Path = typer.Option(..., "--out", help="Output .driu file"),
    png: Optional[Path] = typer.Option(None, "--png", help="Also write a PNG preview"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Draw pose, shape and camera; rest pose when omitted"),
    height: int = typer.Option(224, "--height"),
    width: int = typer.Option(224, "--width"),
    parts: Optional[int] = typer.Option(None, "--parts"),
    resolution: Optional[int] = typer.Option(None, "--resolution"),
    rank: Optional[int] = typer.Option(None, "--rank"),
    tau: Optional[float] = typer.Option(None, "--tau", help="Match threshold of the landmark file"),
    stride: Optional[int] = typer.Option(None, "--stride", help="Sampling stride of the landmark file"),
    model_path: Optional[Path] = typer.Option(None, "--model", help="Prebuilt .drbm model"),
    config: Optional[Path] = typer.Option(None, "--config"),
):
    """Render one configuration to an IUV image and its anchored landmarks (same stem, .csv)"""
    with command_errors("rendering"):
        file_values = load_config_file(config)
        template = _template(file_values, parts, resolution, rank)
        command = CommandConfig(subcommand="render", inputs={"config": config, "model": model_path},
                                output=out, seed=_seed(seed), template=template)
        command.check_paths()

        # Step 1: the IUV image of the rest pose or a sampled configuration
        model = _model(model_path, template)
        size = (height, width)
        params = mean_params(model, size) if seed is None else sample_configuration(model, seed, size)
        body = pose_body(model, params.pose, params.shape)
        image, _ = rasterize(body, params.camera, size)
        save_iuv(image, out)
        if png is not None:
            iuv_to_png(image, png, model.part_count)

        # Step 2: landmarks at the exact projections of the matched vertices
        fit_config = _fit_config(file_values, None, None, tau, stride, None)
        pairs = match_pixels(image, build_iuv_index(model), fit_config.tau,
                             fit_config.stride or calibrate_stride(model, fit_config.tau, size))
        pairs = anchor_landmarks(pairs, project(body.posed_vertices, params.camera))
        landmarks = save_correspondences(pairs, out.with_suffix(LANDMARK_SUFFIX))

        console.print(f"Rendered {image.foreground_count} foreground pixels over "
                      f"{len(image.part_counts())} parts to {out}, {len(pairs)} landmarks to {landmarks}")


@dataclass
class FitOutcome:
    sample_id: str
    result: Optional[FitResult] = None
    error: Optional[str] = None
    exit_code: int = EXIT_OK


def _fit_record(task: Tuple[BodyModel, Path, float, SampleRecord, FitConfig, str]) -> FitOutcome:
    model, root, tau, record, config, init = task
    try:
        target = load_iuv(root / record.iuv_path)
        pairs = load_correspondences(root / record.corr_path, tau)
        truth = record.params()
        result = fit(target, model, config, gt_joints=np.asarray(record.joints14), gt_params=truth,
                     initial=truth if init == "gt" else None, pairs=pairs)
        return FitOutcome(record.sample_id, result)
    except DivergenceError as e:
        logger.error(f"Fit of {record.sample_id} diverged: {e.message}", exc_info=True)
        return FitOutcome(record.sample_id, e.partial_result, e.message, e.exit_code)
    except DenseFitError as e:
        logger.error(f"Fit of {record.sample_id} failed: {e.message}", exc_info=True)
        return FitOutcome(record.sample_id, None, e.message, e.exit_code)


def _save_outcome(outcome: FitOutcome, out: Path) -> None:
    if outcome.result is None:
        return
    summary = outcome.result.summary(outcome.sample_id, outcome.error)
    _write_text(out / f"{outcome.sample_id}.json", rounded_json(summary.model_dump(mode="json")))
    outcome.result.save_loss_log(out / f"{outcome.sample_id}_loss.csv")


def _select_records(records: Sequence[SampleRecord], samples: Optional[List[str]],
                    limit: Optional[int]) -> List[SampleRecord]:
    if samples:
        known = {record.sample_id for record in records}
        unknown = [sample for sample in samples if sample not in known]
        if unknown:
            raise ConfigurationError(f"Unknown sample id(s): {unknown}")
        records = [record for record in records if record.sample_id in set(samples)]
    return list(records)[:limit] if limit is not None else list(records)


@cli.command("fit")
def fit_command(
    out: Path = typer.Option(..., "--out", help="Directory for parameter and loss log files"),
    dataset: Optional[Path] = typer.Option(None, "--dataset", help="Dataset directory with a manifest"),
    target: Optional[Path] = typer.Option(None, "--target", help="Single .driu image to fit"),
    split: Optional[str] = typer.Option(None, "--split", help="train or test; every sample when omitted"),
    samples: Optional[List[str]] = typer.Option(None, "--sample", help="Fit only these sample ids"),
    limit: Optional[int] = typer.Option(None, "--limit", min=1),
    supervision: Optional[str] = typer.Option(None, "--supervision", help="Comma list of rpj,msk,adv,rec,rgr"),
    max_iterations: Optional[int] = typer.Option(None, "--max-iterations"),
    tau: Optional[float] = typer.Option(None, "--tau"),
    stride: Optional[int] = typer.Option(None, "--stride"),
    rematch_every: Optional[int] = typer.Option(None, "--rematch-every"),
    init: str = typer.Option("mean", "--init", help="mean, or gt to start at the ground truth"),
    frame: bool = typer.Option(False, "--frame", help="Crop and rescale a single target to the 224 canvas"),
    parts: Optional[int] = typer.Option(None, "--parts"),
    resolution: Optional[int] = typer.Option(None, "--resolution"),
    rank: Optional[int] = typer.Option(None, "--rank"),
    model_path: Optional[Path] = typer.Option(None, "--model", help="Prebuilt .drbm model"),
    jobs: int = typer.Option(settings.DENSEFIT_JOBS, "--jobs", help="Worker processes across samples"),
    config: Optional[Path] = typer.Option(None, "--config"),
):
    """Fit every target of a dataset, or one IUV image"""
    with command_errors("fitting"):
        if (dataset is None) == (target is None):
            raise ConfigurationError("Give exactly one of --dataset or --target")
        if init not in ("mean", "gt"):
            raise ConfigurationError(f"--init must be mean or gt, got {init}")
        if split is not None and split not in SPLITS:
            raise ConfigurationError(f"Unknown split {split}; expected one of {list(SPLITS)}")
        if target is not None and init == "gt":
            raise ConfigurationError("--init gt needs a dataset with ground truth")
        file_values = load_config_file(config)
        template = _template(file_values, parts, resolution, rank)
        fit_config = _fit_config(file_values, supervision, max_iterations, tau, stride, rematch_every)
        command = CommandConfig(subcommand="fit", output=out, jobs=jobs, template=template, fit=fit_config,
                                inputs={"dataset": dataset, "target": target, "model": model_path, "config": config})
        command.check_paths()

        if target is not None:
            code = _fit_single(target, out, _model(model_path, template), command.fit, frame)
        else:
            code = _fit_dataset(dataset, out, model_path, command.fit, split, samples, limit, init, command.jobs)
    if code != EXIT_OK:
        raise typer.Exit(code=code)


def _landmark_file(target: Path, config: FitConfig, frame: bool) -> Optional[CorrespondenceSet]:
    """Anchored landmarks written next to a rendered target, unless the target is reframed"""
    path = target.with_suffix(LANDMARK_SUFFIX)
    if not path.is_file():
        return None
    if frame:
        logger.warning(f"Ignoring {path}: its landmarks do not apply to a reframed target")
        return None
    pairs = load_correspondences(path, config.tau)
    logger.info(f"Loaded {len(pairs)} correspondences from {path}")
    return pairs


def _fit_single(target: Path, out: Path, model: BodyModel, config: FitConfig, frame: bool) -> int:
    image = load_iuv(target)
    pairs = _landmark_file(target, config, frame)
    if frame:
        image = frame_to_canvas(image)
    outcome = FitOutcome(target.stem)
    try:
        outcome.result = fit(image, model, config, pairs=pairs)
    except DivergenceError as e:
        logger.error(f"Fit of {target} diverged: {e.message}", exc_info=True)
        outcome = FitOutcome(target.stem, e.partial_result, e.message, e.exit_code)
    _save_outcome(outcome, out)
    _print_fits([outcome])
    return outcome.exit_code


def _fit_dataset(dataset: Path, out: Path, model_path: Optional[Path], config: FitConfig, split: Optional[str],
                 samples: Optional[List[str]], limit: Optional[int], init: str, jobs: int) -> int:
    manifest = load_manifest(dataset)
    model = model_loader.load_file(str(model_path or dataset / manifest.model_path))
    config = config.model_copy(update={"image_size": tuple(manifest.image_size)})
    records = manifest.records if split is None else manifest.split(split)
    records = _select_records(records, samples, limit)
    logger.info(f"Fitting {len(records)} sample(s) of {manifest.name} with {config.supervision.tokens()}")

    tasks = [(model, dataset, manifest.tau, record, config, init) for record in records]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            outcomes = list(executor.map(_fit_record, tasks))
    else:
        outcomes = [_fit_record(task) for task in tasks]

    for outcome in outcomes:
        _save_outcome(outcome, out)
    _print_fits(outcomes)
    failures = [outcome for outcome in outcomes if outcome.error is not None]
    for outcome in failures:
        console.print(f"[red]{outcome.sample_id}:[/red] {outcome.error}")
    return max((outcome.exit_code for outcome in failures), default=EXIT_OK)


def _print_fits(outcomes: Sequence[FitOutcome]) -> None:
    table = Table(title="Fits")
    table.add_column("Sample")
    table.add_column("Iterations", justify="right")
    table.add_column("Initial loss", justify="right")
    table.add_column("Final loss", justify="right")
    table.add_column("Status")
    for outcome in outcomes:
        result = outcome.result
        if result is None:
            table.add_row(outcome.sample_id, "-", "-", "-", "failed")
            continue
        status = "converged" if result.converged else ("diverged" if outcome.error else "max iterations")
        table.add_row(outcome.sample_id, str(result.iterations), f"{result.initial_loss:.4g}",
                      f"{result.final_loss:.4g}", status)
    console.print(table)


def load_prediction(path: Path) -> ModelParams:
    """Parameters of a fit result file written by the fit command"""
    try:
        summary = FitSummary.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DatasetIOError(f"Cannot read prediction {path}: {e}")
    except ValidationError as e:
        raise FormatError(f"Malformed prediction {path}: {e}")
    return ModelParams(PoseParams(summary.theta), ShapeParams(summary.beta), CameraParams.from_array(summary.alpha))


@cli.command("eval")
def eval_command(
    dataset: Path = typer.Option(..., "--dataset", help="Dataset directory with a manifest"),
    predictions: Path = typer.Option(..., "--predictions", help="Directory of <sample_id>.json fit results"),
    out: Path = typer.Option(..., "--out", help="CSV file for per-sample and aggregate metrics"),
    split: str = typer.Option("test", "--split", help="train, test or all"),
    model_path: Optional[Path] = typer.Option(None, "--model", help="Prebuilt .drbm model"),
):
    """Score fitted parameters against the manifest ground truth"""
    with command_errors("evaluating"):
        if split not in SPLITS + ("all",):
            raise ConfigurationError(f"Unknown split {split}; expected train, test or all")
        command = CommandConfig(subcommand="eval", output=out,
                                inputs={"dataset": dataset, "predictions": predictions, "model": model_path})
        command.check_paths()

        manifest = load_manifest(dataset)
        model = model_loader.load_file(str(model_path or dataset / manifest.model_path))
        records = manifest.records if split == "all" else manifest.split(split)

        reports = []
        missing = []
        for record in records:
            path = predictions / f"{record.sample_id}.json"
            if not path.is_file():
                missing.append(record.sample_id)
                continue
            try:
                reports.append(evaluate_prediction(model, load_prediction(path), record.params(),
                                                   tuple(manifest.image_size), record.sample_id))
            except DenseFitError as e:
                logger.error(f"Error evaluating {record.sample_id}: {e.message}", exc_info=True)
                missing.append(record.sample_id)

        save_reports(reports, out, manifest.part_count)
        _print_eval(reports)
    if missing:
        console.print(f"[red]{len(missing)} prediction(s) missing or unreadable, skipped:[/red] {', '.join(missing)}")
        raise typer.Exit(code=EXIT_IO)


def _print_eval(reports) -> None:
    aggregate = aggregate_reports(reports)
    if aggregate is None:
        console.print("No predictions evaluated")
        return
    table = Table(title=f"Mean over {len(reports)} sample(s)")
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    for name in ("mpjpe", "pa_mpjpe", "pck", "auc", "mpvpe", "mse_params", "seg_accuracy", "seg_mean_f1",
                 "seg6_accuracy", "seg6_mean_f1", "fg_accuracy", "fg_f1"):
        value = getattr(aggregate, name)
        table.add_row(name, "-" if value is None else f"{value:.4f}")
    console.print(table)


@cli.command("gradcheck")
def gradcheck_command(
    seeds: int = typer.Option(100, "--seeds", min=1, help="Random configurations per check"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Defaults to DENSEFIT_SEED"),
    checks: Optional[List[str]] = typer.Option(None, "--check", help="Run only these checks"),
    inject_failure: bool = typer.Option(False, "--inject-failure", hidden=True),
):
    """Compare every analytic gradient with central finite differences"""
    with command_errors("checking gradients"):
        outcomes = run_gradchecks(seeds, _seed(seed), checks or None, inject_failure=inject_failure)

    table = Table(title=f"Gradient checks ({seeds} seed(s))")
    table.add_column("Check")
    table.add_column("Max relative error", justify="right")
    table.add_column("Tolerance", justify="right")
    table.add_column("Result")
    for outcome in outcomes:
        table.add_row(outcome.name, f"{outcome.max_error:.3e}", f"{outcome.tolerance:.0e}",
                      "[green]pass[/green]" if outcome.passed else "[red]FAIL[/red]")
    console.print(table)
    failed = [outcome.name for outcome in outcomes if not outcome.passed]
    if failed:
        console.print(f"[red]{len(failed)} check(s) failed:[/red] {', '.join(failed)}")
        raise typer.Exit(code=EXIT_NUMERIC)


@cli.command("ablate")
def ablate_command(
    out: Path = typer.Option(..., "--out", help="CSV file for the experiment table"),
    samples: int = typer.Option(50, "--samples", min=1, help="Perturbed targets"),
    ladder: Optional[List[str]] = typer.Option(None, "--supervision", help="Supervision sets to compare"),
    max_iterations: Optional[int] = typer.Option(None, "--max-iterations"),
    height: int = typer.Option(224, "--height"),
    width: int = typer.Option(224, "--width"),
    parts: Optional[int] = typer.Option(None, "--parts"),
    resolution: Optional[int] = typer.Option(None, "--resolution"),
    rank: Optional[int] = typer.Option(None, "--rank"),
    model_path: Optional[Path] = typer.Option(None, "--model", help="Prebuilt .drbm model"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Defaults to DENSEFIT_SEED"),
    jobs: int = typer.Option(settings.DENSEFIT_JOBS, "--jobs"),
    config: Optional[Path] = typer.Option(None, "--config"),
):
    """Recover perturbed targets under a growing set of loss terms"""
    with command_errors("running the loss ablation"):
        file_values = load_config_file(config)
        template = _template(file_values, parts, resolution, rank)
        fit_config = _fit_config(file_values, None, max_iterations, None, None, None)
        rungs = tuple(ladder) if ladder else DEFAULT_LADDER
        for rung in rungs:
            SupervisionFlags.parse(rung)
        command = CommandConfig(subcommand="ablate", inputs={"config": config, "model": model_path}, output=out,
                                seed=_seed(seed), jobs=jobs, template=template, fit=fit_config)
        command.check_paths()

        model = _model(model_path, template)
        frame = run_recovery_experiment(model, samples, command.seed, command.fit, (height, width), rungs,
                                        command.jobs)
        save_experiment(frame, out)

    table = Table(title=f"Recovery over {samples} target(s), medians")
    for column in ("supervision", "samples", "initial_mpjpe", "final_mpjpe", "final_mpvpe", "final_mse"):
        table.add_column(column, justify="left" if column == "supervision" else "right")
    for row in frame.itertuples(index=False):
        table.add_row(row.supervision, str(row.samples), f"{row.initial_mpjpe:.2f}", f"{row.final_mpjpe:.2f}",
                      f"{row.final_mpvpe:.2f}", f"{row.final_mse:.4g}")
    console.print(table)


@cli.command("serve")
def serve_command(
    host: str = typer.Option("0.0.0.0", "--host"),
    port: int = typer.Option(8001, "--port"),
    dataset: Optional[Path] = typer.Option(None, "--dataset", help="Dataset served by the HTTP API"),
    reload: bool = typer.Option(False, "--reload"),
):
    """Serve the dataset browser and fitting API"""
    with command_errors("starting the server"):
        if dataset is not None:
            CommandConfig(subcommand="serve", inputs={"dataset": dataset}).check_paths()
            os.environ["DENSEFIT_DATASET_ROOT"] = str(dataset)
            settings.DENSEFIT_DATASET_ROOT = str(dataset)
    uvicorn.run("main:app", host=host, port=port, reload=reload)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line and return its exit code instead of exiting"""
    try:
        result = cli(args=list(argv) if argv is not None else None, standalone_mode=False)
    except click.exceptions.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.exceptions.Abort:
        return EXIT_USAGE
    except click.exceptions.Exit as e:
        return e.exit_code
    except DenseFitError as e:
        logger.error(f"Command failed: {e.message}", exc_info=True)
        return e.exit_code
    except Exception as e:
        logger.error(f"Command failed: {str(e)}", exc_info=True)
        return exit_code_for(e)
    return result if isinstance(result, int) else EXIT_OK
