"""Per-sample evaluation against ground truth and CSV reporting."""
import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import pandas as pd

from app.body.model import BodyModel, pose_body
from app.body.params import ModelParams
from app.core.errors import DatasetIOError
from app.metrics.evaluation import (
    M_TO_MM,
    MERGE_12_TO_6,
    MERGE_24_TO_12,
    compose_merge,
    mpjpe,
    mpvpe,
    mse_params,
    pa_mpjpe,
    pck_auc,
    root_of,
    segmentation_scores,
)
from app.render.camera import ImageSize
from app.render.iuv import IUVImage
from app.render.raster import rasterize
from app.schemas.metrics import AGGREGATE_ID, EVAL_COLUMNS, EvalReport

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.9g"


def _six_part_merge(part_count: int):
    if part_count == 24:
        return compose_merge(MERGE_24_TO_12, MERGE_12_TO_6)
    if part_count == 12:
        return MERGE_12_TO_6
    return None


def evaluate_prediction(model: BodyModel, predicted: ModelParams, truth: ModelParams, image_size: ImageSize,
                        sample_id: str = "", gt_iuv: Optional[IUVImage] = None,
                        gt_joints: Optional[np.ndarray] = None) -> EvalReport:
    """Compare predicted parameters with ground truth; gt_iuv defaults to the rendered truth"""
    pred_body = pose_body(model, predicted.pose, predicted.shape)
    gt_body = pose_body(model, truth.pose, truth.shape)
    pred_joints = pred_body.lsp14 * M_TO_MM
    true_joints = (gt_body.lsp14 if gt_joints is None else np.asarray(gt_joints, dtype=np.float64)) * M_TO_MM
    pck, auc = pck_auc(pred_joints, true_joints)

    pred_vertices = pred_body.posed_vertices * M_TO_MM
    true_vertices = gt_body.posed_vertices * M_TO_MM
    vertex_error = mpvpe(pred_vertices, true_vertices, root_of(pred_joints), root_of(true_joints))

    pred_iuv, _ = rasterize(pred_body, predicted.camera, image_size)
    if gt_iuv is None:
        gt_iuv, _ = rasterize(gt_body, truth.camera, image_size)
    native = segmentation_scores(pred_iuv, gt_iuv)
    merge = _six_part_merge(model.part_count)
    six = segmentation_scores(pred_iuv, gt_iuv, merge) if merge is not None else None

    return EvalReport(
        sample_id=sample_id,
        mpjpe=mpjpe(pred_joints, true_joints),
        pa_mpjpe=pa_mpjpe(pred_joints, true_joints),
        pck=pck,
        auc=auc,
        mpvpe=vertex_error,
        mse_params=mse_params(predicted, truth),
        seg_accuracy=native.accuracy,
        seg_mean_f1=native.mean_f1,
        seg6_accuracy=None if six is None else six.accuracy,
        seg6_mean_f1=None if six is None else six.mean_f1,
        fg_accuracy=native.fg_accuracy,
        fg_f1=native.fg_f1,
        seg_f1=native.f1,
    )


def aggregate_reports(reports: List[EvalReport]) -> Optional[EvalReport]:
    """Mean over samples; optional fields average over the samples that have them"""
    if not reports:
        return None
    values = {}
    for column in EVAL_COLUMNS[1:]:
        present = [getattr(report, column) for report in reports if getattr(report, column) is not None]
        values[column] = float(np.mean(present)) if present else None
    parts = sorted({part for report in reports for part in report.seg_f1})
    seg_f1 = {
        part: float(np.mean([report.seg_f1[part] for report in reports if part in report.seg_f1]))
        for part in parts
    }
    return EvalReport(sample_id=AGGREGATE_ID, seg_f1=seg_f1, **values)


def reports_frame(reports: List[EvalReport], part_count: int) -> pd.DataFrame:
    """One row per sample plus the aggregate row"""
    rows = [report.row(part_count) for report in reports]
    aggregate = aggregate_reports(reports)
    if aggregate is not None:
        rows.append(aggregate.row(part_count))
    columns = EVAL_COLUMNS + [f"f1_part_{part}" for part in range(1, part_count + 1)]
    return pd.DataFrame(rows, columns=columns)


def save_reports(reports: List[EvalReport], path: Union[str, Path], part_count: int) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        reports_frame(reports, part_count).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT,
                                                  lineterminator="\n")
    except OSError as e:
        raise DatasetIOError(f"Cannot write evaluation report {path}: {e}")
    logger.info(f"Wrote {len(reports)} evaluation rows to {path}")
    return path
