from fastapi import APIRouter, Depends, HTTPException, Query, UploadFile, File, status
from starlette.concurrency import run_in_threadpool
import logging
import os
from pathlib import Path
from datetime import datetime
from typing import Optional

from app.core.config import settings
from app.core.dataset_store import DatasetStore, dataset_store, get_dataset
from app.core.errors import (ConfigurationError, DenseFitError, DimensionError, FormatError,
                             InputError, NumericError)
from app.core.model_loader import model_loader
from app.fitting.correspondence import load_correspondences
from app.fitting.fitter import fit
from app.render.iuv import decode_iuv, load_iuv
from app.schemas.fitting import FitConfig, FitSummary, SupervisionFlags

logger = logging.getLogger(__name__)
router = APIRouter(prefix="/api/fitting", tags=["fitting"])

# File configuration
MAX_FILE_SIZE = 16 * 1024 * 1024  # 16MB
ALLOWED_EXTENSIONS = {'.driu'}
BAD_INPUT_ERRORS = (InputError, ConfigurationError, DimensionError, FormatError)


def validate_iuv_file(file: UploadFile) -> None:
    """Validate uploaded IUV file"""
    file_extension = Path(file.filename or "").suffix.lower()

    if file_extension not in ALLOWED_EXTENSIONS:
        raise HTTPException(
            status_code=400,
            detail=f"Only IUV images are allowed (.driu). Got: {file_extension}"
        )

    if file.content_type not in ('application/octet-stream', None):
        logger.warning(f"Unexpected content type: {file.content_type} for file: {file.filename}")


async def save_uploaded_file(file: UploadFile, upload_dir: Path) -> tuple[str, bytes]:
    """
    Save uploaded file and return (file_path, content)

    Args:
        file: The uploaded file
        upload_dir: Directory to save the file
    """
    # Timestamped filename avoids overwrites
    timestamp = datetime.now().strftime('%Y%m%d_%H%M%S_%f')
    file_extension = Path(file.filename).suffix
    original_name = Path(file.filename).stem
    file_path = upload_dir / f"{original_name}_{timestamp}{file_extension}"

    content = await file.read()
    file_size = len(content)

    if file_size > MAX_FILE_SIZE:
        raise HTTPException(
            status_code=400,
            detail=f"File too large. Maximum size is {MAX_FILE_SIZE // (1024*1024)}MB"
        )

    if file_size == 0:
        raise HTTPException(status_code=400, detail="File is empty")

    upload_dir.mkdir(parents=True, exist_ok=True)
    with open(file_path, "wb") as f:
        f.write(content)

    logger.info(f"File saved: {file_path} ({file_size} bytes)")
    return str(file_path), content


def _fit_config(supervision: Optional[str], max_iterations: Optional[int]) -> FitConfig:
    values = {}
    if supervision:
        values["supervision"] = SupervisionFlags.parse(supervision)
    if max_iterations is not None:
        values["max_iterations"] = max_iterations
    return FitConfig(**values)


def _translate(error: DenseFitError, action: str) -> HTTPException:
    if isinstance(error, BAD_INPUT_ERRORS):
        return HTTPException(status_code=400, detail=error.message)
    if isinstance(error, NumericError):
        return HTTPException(status_code=422, detail=error.message)
    logger.error(f"Error {action}: {error.message}", exc_info=True)
    return HTTPException(status_code=500, detail=f"Failed {action}: {error.message}")


@router.post("/samples/{sample_id}", response_model=FitSummary)
async def fit_sample(
    sample_id: str,
    supervision: Optional[str] = Query(None, examples=["rpj,msk,adv"], description="Comma list of loss terms"),
    max_iterations: Optional[int] = Query(None, ge=1, le=5000),
    init: str = Query("mean", pattern="^(mean|gt)$", description="Start from the mean or the ground truth"),
    dataset: DatasetStore = Depends(get_dataset),
) -> FitSummary:
    """Fit a stored sample against its IUV image and correspondences"""
    manifest = dataset.get_manifest()
    record = manifest.find(sample_id)
    if record is None:
        raise HTTPException(status_code=404, detail=f"Sample {sample_id} not found")
    try:
        config = _fit_config(supervision, max_iterations)
        model = dataset.get_model()
        target = load_iuv(dataset.path(record.iuv_path))
        pairs = load_correspondences(dataset.path(record.corr_path), config.tau)
        truth = record.params()
        result = await run_in_threadpool(
            fit, target, model, config, gt_joints=record.joints14, gt_params=truth,
            initial=truth if init == "gt" else None, pairs=pairs,
        )
        return result.summary(sample_id)
    except DenseFitError as e:
        raise _translate(e, f"fitting sample {sample_id}")
    except Exception as e:
        logger.error(f"Error fitting sample {sample_id}: {str(e)}", exc_info=True)
        raise HTTPException(
            status_code=500,
            detail=f"Failed to fit sample: {str(e)}"
        )


@router.post("/upload", status_code=status.HTTP_201_CREATED)
async def fit_upload(
    file: UploadFile = File(..., description="IUV image (.driu) to fit"),
    supervision: Optional[str] = Query(None, examples=["rpj,msk,adv"]),
    max_iterations: Optional[int] = Query(None, ge=1, le=5000),
) -> dict:
    """
    Upload an IUV image and fit the body model to it

    - **file**: DRIU image; its part labels must fit the served model

    Returns the fit summary and where the upload was stored
    """
    file_path = None

    try:
        validate_iuv_file(file)
        try:
            upload_dir = settings.get_upload_dir(dataset_store.root)
        except ConfigurationError as e:
            raise HTTPException(status_code=503, detail=e.message)
        file_path, content = await save_uploaded_file(file, upload_dir)

        config = _fit_config(supervision, max_iterations)
        target = decode_iuv(content)
        model = model_loader.get(settings.DENSEFIT_MODEL_PATH)
        result = await run_in_threadpool(fit, target, model, config)

        return {
            "status": "success",
            "message": "IUV image fitted successfully",
            "data": {
                "filename": file.filename,
                "file_path": file_path,
                "uploaded_at": datetime.now().isoformat(),
                "fit": result.summary(Path(file_path).stem).model_dump(mode="json"),
            }
        }

    except HTTPException:
        raise
    except DenseFitError as e:
        _remove(file_path)
        raise _translate(e, "fitting upload")
    except Exception as e:
        _remove(file_path)
        logger.error(f"Error fitting uploaded file: {str(e)}", exc_info=True)
        raise HTTPException(
            status_code=500,
            detail=f"Failed to fit uploaded file: {str(e)}"
        )


def _remove(file_path: Optional[str]) -> None:
    """Clean up an upload that could not be processed"""
    if file_path and os.path.exists(file_path):
        try:
            os.remove(file_path)
        except OSError:
            logger.warning(f"Could not remove {file_path}")
