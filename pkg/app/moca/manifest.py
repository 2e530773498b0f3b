"""Dataset manifest: JSON read/write and integrity checks."""
import json
import logging
from pathlib import Path
from typing import Any, List, Union

from pydantic import ValidationError

from app.core.errors import DatasetIOError, DenseFitError, FormatError
from app.fitting.correspondence import load_correspondences
from app.render.iuv import load_iuv
from app.schemas.dataset import SPLITS, DatasetManifest, ManifestSummary

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
SIGNIFICANT_DIGITS = 9


def _rounded(value: Any) -> Any:
    if isinstance(value, float):
        return float(f"{value:.{SIGNIFICANT_DIGITS}g}")
    if isinstance(value, dict):
        return {key: _rounded(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_rounded(item) for item in value]
    return value


def rounded_json(data: Any) -> str:
    """JSON text with every float written to 9 significant digits"""
    return json.dumps(_rounded(data), indent=2, ensure_ascii=False) + "\n"


def manifest_json(manifest: DatasetManifest) -> str:
    return rounded_json(manifest.model_dump(mode="json"))


def manifest_path(root: Union[str, Path]) -> Path:
    root = Path(root)
    return root if root.suffix == ".json" else root / MANIFEST_NAME


def save_manifest(manifest: DatasetManifest, root: Union[str, Path]) -> Path:
    path = manifest_path(root)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(manifest_json(manifest), encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"Cannot write manifest {path}: {e}")
    return path


def load_manifest(root: Union[str, Path]) -> DatasetManifest:
    path = manifest_path(root)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"Cannot read manifest {path}: {e}")
    try:
        return DatasetManifest.model_validate(json.loads(text))
    except (json.JSONDecodeError, ValidationError) as e:
        raise FormatError(f"Malformed manifest {path}: {e}")


def summarize(manifest: DatasetManifest) -> ManifestSummary:
    return ManifestSummary(
        name=manifest.name,
        seed=manifest.seed,
        image_size=manifest.image_size,
        part_count=manifest.part_count,
        counts=manifest.counts,
        sequences={split: len({r.sequence_id for r in manifest.split(split)}) for split in SPLITS},
        dropped=manifest.dropped,
    )


def split_leaks(manifest: DatasetManifest) -> List[str]:
    """Animations or shapes that appear in both splits"""
    train = manifest.split("train")
    test = manifest.split("test")
    problems = []
    shared_animations = {r.animation for r in train} & {r.animation for r in test}
    shared_shapes = {r.shape_id for r in train} & {r.shape_id for r in test}
    if shared_animations:
        problems.append(f"animations in both splits: {sorted(shared_animations)}")
    if shared_shapes:
        problems.append(f"shapes in both splits: {sorted(shared_shapes)}")
    return problems


def verify_manifest(manifest: DatasetManifest, root: Union[str, Path]) -> List[str]:
    """Every problem found: split leakage, missing or unparsable files, count mismatches"""
    root = Path(root)
    problems = split_leaks(manifest)
    for record in manifest.records:
        missing = [relative for relative in (record.iuv_path, record.corr_path) if not (root / relative).is_file()]
        if missing:
            problems.extend(f"{record.sample_id}: missing {relative}" for relative in missing)
            continue
        try:
            image = load_iuv(root / record.iuv_path)
            if image.size != tuple(manifest.image_size):
                problems.append(f"{record.sample_id}: image is {image.size}")
            pairs = load_correspondences(root / record.corr_path, manifest.tau)
            if len(pairs) != record.pair_count:
                problems.append(f"{record.sample_id}: {len(pairs)} pairs, manifest says {record.pair_count}")
        except DenseFitError as e:
            problems.append(f"{record.sample_id}: {e.message}")
    for split in SPLITS:
        if manifest.counts.get(split, 0) != len(manifest.split(split)):
            problems.append(f"count for {split} does not match its records")
    if problems:
        logger.warning(f"Manifest check found {len(problems)} problem(s)")
    return problems
