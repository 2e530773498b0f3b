from fastapi import APIRouter, Depends, HTTPException, Query, Request
import logging
from typing import Optional

from app.core.dataset_store import DatasetStore, get_dataset
from app.core.errors import DenseFitError
from app.core.pagination import DEFAULT_PAGE_SIZE, MAX_PAGE_SIZE, Paginator
from app.fitting.correspondence import load_correspondences
from app.moca.manifest import summarize
from app.schemas.common import PaginatedResponse
from app.schemas.dataset import SPLITS, ManifestSummary, SampleRecord

logger = logging.getLogger(__name__)
router = APIRouter(prefix="/api/datasets", tags=["datasets"])


@router.get("/manifest", response_model=ManifestSummary)
async def get_manifest_summary(dataset: DatasetStore = Depends(get_dataset)) -> ManifestSummary:
    """Dataset name, seed and sample counts per split"""
    try:
        return summarize(dataset.get_manifest())
    except Exception as e:
        logger.error(f"Error summarizing manifest: {str(e)}", exc_info=True)
        raise HTTPException(
            status_code=500,
            detail=f"Failed to summarize manifest: {str(e)}"
        )


@router.get("/samples", response_model=PaginatedResponse[SampleRecord])
async def list_samples(
    request: Request,
    split: Optional[str] = Query(None, description="train or test; all samples when omitted"),
    page: int = Query(1, ge=1, description="Page number"),
    page_size: int = Query(DEFAULT_PAGE_SIZE, ge=1, le=MAX_PAGE_SIZE, description="Items per page"),
    dataset: DatasetStore = Depends(get_dataset),
):
    """Paginated sample records, optionally restricted to one split"""
    if split is not None and split not in SPLITS:
        raise HTTPException(status_code=400, detail=f"Unknown split {split}; expected one of {list(SPLITS)}")
    try:
        manifest = dataset.get_manifest()
        records = manifest.records if split is None else manifest.split(split)
        return Paginator(request, page, page_size).paginate(records)
    except Exception as e:
        logger.error(f"Error listing samples: {str(e)}", exc_info=True)
        raise HTTPException(
            status_code=500,
            detail=f"Failed to list samples: {str(e)}"
        )


@router.get("/samples/{sample_id}")
async def get_sample(sample_id: str, dataset: DatasetStore = Depends(get_dataset)) -> dict:
    """One sample record plus the number of correspondences stored for it"""
    record = dataset.get_manifest().find(sample_id)
    if record is None:
        raise HTTPException(status_code=404, detail=f"Sample {sample_id} not found")
    try:
        pairs = load_correspondences(dataset.path(record.corr_path), dataset.get_manifest().tau)
        return {
            "status": "success",
            "message": f"Sample {sample_id}",
            "data": {
                "record": record.model_dump(mode="json"),
                "correspondence_count": len(pairs),
                "has_landmarks": pairs.landmarks is not None,
            }
        }
    except DenseFitError as e:
        logger.error(f"Error reading sample {sample_id}: {e.message}", exc_info=True)
        raise HTTPException(status_code=422, detail=e.message)
    except Exception as e:
        logger.error(f"Error reading sample {sample_id}: {str(e)}", exc_info=True)
        raise HTTPException(
            status_code=500,
            detail=f"Failed to read sample: {str(e)}"
        )
