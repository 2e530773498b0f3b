"""Pose, mesh, parameter and segmentation metrics.

Positions are expected in millimeters. Joint sets with 14 entries are read in
LSP order and rooted at the midpoint of the hips; other sets are rooted at
joint 0.
"""
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.body.params import ModelParams
from app.core.errors import AlignmentError, DimensionError
from app.fitting.losses import parameter_residual
from app.render.iuv import IUVImage

M_TO_MM = 1000.0
PCK_THRESHOLD = 150.0
AUC_THRESHOLDS = np.arange(5.0, 151.0, 5.0)
LSP_HIPS = (2, 3)

# Merge maps send part labels to coarser groups; 0 stays background
MERGE_24_TO_12: Dict[int, int] = {part: (part + 1) // 2 for part in range(1, 25)}
# head, torso, left arm, right arm, left leg, right leg
MERGE_12_TO_6: Dict[int, int] = {
    1: 2, 2: 1,
    3: 3, 5: 3, 7: 3,
    4: 4, 6: 4, 8: 4,
    9: 5, 11: 5,
    10: 6, 12: 6,
}
GROUPS_6 = ("head", "torso", "left_arm", "right_arm", "left_leg", "right_leg")


def foreground_merge(part_count: int) -> Dict[int, int]:
    return {part: 1 for part in range(1, part_count + 1)}


def compose_merge(first: Mapping[int, int], second: Mapping[int, int]) -> Dict[int, int]:
    return {part: second[group] for part, group in first.items()}


def _pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise DimensionError(f"Point sets differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def root_of(points: np.ndarray) -> np.ndarray:
    if points.shape[0] == 14:
        return points[list(LSP_HIPS)].mean(axis=0)
    return points[0]


def joint_errors(pred, gt) -> np.ndarray:
    """Per-joint Euclidean errors after aligning both sets at their roots"""
    pred, gt = _pair(pred, gt)
    return np.linalg.norm((pred - root_of(pred)) - (gt - root_of(gt)), axis=1)


def mpjpe(pred, gt) -> float:
    return float(joint_errors(pred, gt).mean())


def procrustes_align(pred, gt) -> np.ndarray:
    """Similarity transform of pred onto gt (rotation, translation, uniform scale; no reflection)"""
    pred, gt = _pair(pred, gt)
    if pred.shape[0] < 3:
        raise AlignmentError(f"Procrustes alignment needs at least 3 points, got {pred.shape[0]}")
    mu_pred = pred.mean(axis=0)
    mu_gt = gt.mean(axis=0)
    X = pred - mu_pred
    Y = gt - mu_gt
    for name, centered in (("prediction", X), ("ground truth", Y)):
        s = np.linalg.svd(centered, compute_uv=False)
        if s[0] <= 1e-12 or s[1] <= 1e-9 * s[0]:
            raise AlignmentError(f"Degenerate {name} point set (collinear or coincident)")

    U, s, Vt = np.linalg.svd(X.T @ Y)
    # Avoid improper rotations (reflections), i.e. rotations with det(R) = -1
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    scale = float(np.trace(np.diag(s) @ D) / np.sum(X ** 2))
    return scale * X @ R.T + mu_gt


def pa_mpjpe(pred, gt) -> float:
    aligned = procrustes_align(pred, gt)
    return float(np.linalg.norm(aligned - np.asarray(gt, dtype=np.float64), axis=1).mean())


def pck_curve(pred, gt, thresholds: Sequence[float] = AUC_THRESHOLDS) -> np.ndarray:
    """Percentage of joints strictly closer than each threshold"""
    errors = joint_errors(pred, gt)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    return 100.0 * (errors[None, :] < thresholds[:, None]).mean(axis=1)


def pck_auc(pred, gt, threshold: float = PCK_THRESHOLD,
            thresholds: Sequence[float] = AUC_THRESHOLDS) -> Tuple[float, float]:
    pck = float(pck_curve(pred, gt, [threshold])[0])
    auc = float(pck_curve(pred, gt, thresholds).mean())
    return pck, auc


def mpvpe(pred, gt, pred_root: Optional[np.ndarray] = None, gt_root: Optional[np.ndarray] = None) -> float:
    """Mean vertex distance; both meshes are shifted to their roots when roots are given"""
    pred, gt = _pair(pred, gt)
    if pred_root is not None and gt_root is not None:
        pred = pred - np.asarray(pred_root, dtype=np.float64)
        gt = gt - np.asarray(gt_root, dtype=np.float64)
    return float(np.linalg.norm(pred - gt, axis=1).mean())


def mse_params(estimate: ModelParams, truth: ModelParams, include_camera: bool = False) -> float:
    """Mean squared error over rotation-matrix entries and beta (and alpha if asked)"""
    residual = parameter_residual(estimate, truth, include_camera)
    return float(np.mean(residual ** 2)) if residual.size else 0.0


@dataclass
class SegmentationScores:
    accuracy: float
    f1: Dict[int, float] = field(default_factory=dict)
    mean_f1: float = 1.0
    fg_accuracy: float = 100.0
    fg_f1: float = 1.0


def _merge_labels(part: np.ndarray, merge: Optional[Mapping[int, int]]) -> np.ndarray:
    part = np.asarray(part, dtype=np.int64)
    if merge is None:
        return part
    size = max(int(part.max(initial=0)), max(merge.keys(), default=0)) + 1
    lookup = np.arange(size)
    for source, group in merge.items():
        lookup[source] = group
    return lookup[part]


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, labels: int) -> np.ndarray:
    """labels x labels counts; rows are ground truth, columns prediction"""
    return np.bincount(gt.reshape(-1) * labels + pred.reshape(-1), minlength=labels * labels).reshape(labels, labels)


def _f1_scores(confusion: np.ndarray, groups) -> Dict[int, float]:
    scores = {}
    for g in groups:
        tp = confusion[g, g]
        predicted = confusion[:, g].sum()
        actual = confusion[g, :].sum()
        precision = tp / predicted if predicted else 0.0
        recall = tp / actual if actual else 0.0
        scores[int(g)] = float(2 * precision * recall / (precision + recall)) if precision + recall > 0 else 0.0
    return scores


def segmentation_scores(pred: IUVImage, gt: IUVImage, merge: Optional[Mapping[int, int]] = None) -> SegmentationScores:
    if pred.size != gt.size:
        raise DimensionError(f"Segmentations differ in size: {pred.size} vs {gt.size}")
    p = _merge_labels(pred.part, merge)
    g = _merge_labels(gt.part, merge)
    labels = int(max(p.max(initial=0), g.max(initial=0))) + 1
    confusion = confusion_matrix(p, g, labels)
    total = confusion.sum()
    accuracy = 100.0 * np.trace(confusion) / total if total else 100.0

    groups = [k for k in range(1, labels) if confusion[k, :].sum() or confusion[:, k].sum()]
    f1 = _f1_scores(confusion, groups)
    mean_f1 = float(np.mean(list(f1.values()))) if f1 else 1.0

    binary = confusion_matrix((p > 0).astype(np.int64), (g > 0).astype(np.int64), 2)
    fg_accuracy = 100.0 * np.trace(binary) / total if total else 100.0
    fg_present = binary[1, :].sum() or binary[:, 1].sum()
    fg_f1 = _f1_scores(binary, [1])[1] if fg_present else 1.0
    return SegmentationScores(float(accuracy), f1, mean_f1, float(fg_accuracy), fg_f1)
