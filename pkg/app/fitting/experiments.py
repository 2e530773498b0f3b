"""Loss-ablation recovery experiment.

Targets are rendered from small random perturbations of the mean parameters
and fitted from the mean under a ladder of growing supervision sets. Each
rung reports the median error before and after fitting.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.body.model import BodyModel, pose_body
from app.body.params import ModelParams
from app.core.errors import DatasetIOError, DenseFitError, DivergenceError
from app.fitting.correspondence import CorrespondenceSet, anchor_landmarks, build_iuv_index, calibrate_stride, match_pixels
from app.fitting.fitter import fit, mean_params
from app.metrics.evaluation import M_TO_MM, mpjpe, mpvpe, mse_params, root_of
from app.moca.sampling import sample_perturbation
from app.render.camera import ImageSize, project
from app.render.iuv import IUVImage
from app.render.raster import rasterize
from app.schemas.fitting import FitConfig, SupervisionFlags

logger = logging.getLogger(__name__)

DEFAULT_LADDER = ("rpj,msk,adv", "rpj,msk,adv,rec", "rpj,msk,adv,rec,rgr")
EXPERIMENT_COLUMNS = [
    "supervision", "samples", "failed",
    "initial_mpjpe", "final_mpjpe", "initial_mpvpe", "final_mpvpe", "initial_mse", "final_mse",
]


@dataclass(frozen=True, eq=False)
class RecoveryTarget:
    truth: ModelParams
    image: IUVImage
    pairs: CorrespondenceSet
    joints: np.ndarray  # LSP 14 x 3, meters


def make_recovery_targets(model: BodyModel, count: int, seed: int, image_size: ImageSize,
                          tau: float = 0.05, stride: Optional[int] = None) -> List[RecoveryTarget]:
    base = mean_params(model, image_size)
    stride = stride or calibrate_stride(model, tau, image_size)
    index = build_iuv_index(model)
    targets = []
    for sample in range(count):
        truth, _ = sample_perturbation([seed, sample], base, model.skeleton)
        body = pose_body(model, truth.pose, truth.shape)
        image, _ = rasterize(body, truth.camera, image_size)
        pairs = match_pixels(image, index, tau, stride)
        pairs = anchor_landmarks(pairs, project(body.posed_vertices, truth.camera))
        targets.append(RecoveryTarget(truth, image, pairs, body.lsp14))
    return targets


def score(model: BodyModel, estimate: ModelParams, truth: ModelParams) -> Dict[str, float]:
    """14-joint MPJPE and MPVPE in millimeters plus the pose/shape parameter MSE"""
    est_body = pose_body(model, estimate.pose, estimate.shape)
    gt_body = pose_body(model, truth.pose, truth.shape)
    est_joints = est_body.lsp14 * M_TO_MM
    gt_joints = gt_body.lsp14 * M_TO_MM
    return {
        "mpjpe": mpjpe(est_joints, gt_joints),
        "mpvpe": mpvpe(est_body.posed_vertices * M_TO_MM, gt_body.posed_vertices * M_TO_MM,
                       root_of(est_joints), root_of(gt_joints)),
        "mse": mse_params(estimate, truth),
    }


def _fit_target(args) -> Optional[ModelParams]:
    model, target, config = args
    try:
        result = fit(target.image, model, config, gt_joints=target.joints, gt_params=target.truth,
                     pairs=target.pairs)
    except DivergenceError as e:
        logger.warning(f"Fit diverged, keeping its best parameters: {e.message}")
        return e.partial_result.params if e.partial_result is not None else None
    except DenseFitError as e:
        logger.error(f"Fit failed: {e.message}", exc_info=True)
        return None
    return result.params


def run_recovery_experiment(model: BodyModel, count: int = 50, seed: int = 0,
                            config: Optional[FitConfig] = None, image_size: ImageSize = (224, 224),
                            ladder: Sequence[str] = DEFAULT_LADDER, jobs: int = 1) -> pd.DataFrame:
    config = config or FitConfig()
    logger.info(f"Recovery experiment: {count} targets, {len(ladder)} supervision sets")
    targets = make_recovery_targets(model, count, seed, image_size, config.tau, config.stride)
    start = mean_params(model, image_size)
    initial = [score(model, start, target.truth) for target in targets]

    rows = []
    for supervision in ladder:
        rung = config.model_copy(update={"supervision": SupervisionFlags.parse(supervision)})
        tasks = [(model, target, rung) for target in targets]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as executor:
                estimates = list(executor.map(_fit_target, tasks))
        else:
            estimates = [_fit_target(task) for task in tasks]

        finals = [score(model, est, target.truth) for est, target in zip(estimates, targets) if est is not None]
        kept = [init for est, init in zip(estimates, initial) if est is not None]
        row = {"supervision": supervision, "samples": len(finals), "failed": len(targets) - len(finals)}
        for metric in ("mpjpe", "mpvpe", "mse"):
            row[f"initial_{metric}"] = float(np.median([s[metric] for s in kept])) if kept else float("nan")
            row[f"final_{metric}"] = float(np.median([s[metric] for s in finals])) if finals else float("nan")
        logger.info(f"[{supervision}] MPJPE {row['initial_mpjpe']:.2f} -> {row['final_mpjpe']:.2f} mm, "
                    f"MPVPE {row['initial_mpvpe']:.2f} -> {row['final_mpvpe']:.2f} mm")
        rows.append(row)
    return pd.DataFrame(rows, columns=EXPERIMENT_COLUMNS)


def save_experiment(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")
    except OSError as e:
        raise DatasetIOError(f"Cannot write experiment table {path}: {e}")
    return path
