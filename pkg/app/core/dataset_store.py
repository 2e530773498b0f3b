# app/core/dataset_store.py
import logging
from pathlib import Path
from typing import Optional

from fastapi import HTTPException

from app.body.model import BodyModel
from app.core.config import settings
from app.core.errors import DatasetIOError, DenseFitError
from app.core.model_loader import model_loader
from app.moca.manifest import load_manifest
from app.schemas.dataset import DatasetManifest

logger = logging.getLogger(__name__)

class DatasetStore:
    def __init__(self):
        self.root: Optional[Path] = None
        self.manifest: Optional[DatasetManifest] = None

    def open(self, root: Optional[Path] = None) -> DatasetManifest:
        """Load the manifest of the served dataset and (re)load the model it was rendered with"""
        root = root or settings.get_dataset_root()
        if root is None:
            raise DatasetIOError("No dataset configured; set DENSEFIT_DATASET_ROOT")
        try:
            manifest = load_manifest(root)
            # a regenerated dataset may reuse the path of a cached model
            model_loader.reload_file(str(Path(root) / manifest.model_path))
            self.manifest = manifest
            self.root = Path(root)
            logger.info(f"Dataset {manifest.name} opened from {root}: {len(manifest.records)} samples")
        except Exception as e:
            logger.error(f"Failed to open dataset at {root}: {e}")
            raise
        return self.manifest

    def close(self):
        if self.manifest is not None:
            logger.info(f"Dataset {self.manifest.name} closed")
        self.root = None
        self.manifest = None

    def get_manifest(self) -> DatasetManifest:
        if self.manifest is None:
            self.open()
        return self.manifest

    def get_model(self) -> BodyModel:
        """Body model the dataset was rendered with, unless DENSEFIT_MODEL_PATH overrides it"""
        manifest = self.get_manifest()
        if settings.DENSEFIT_MODEL_PATH:
            return model_loader.load_file(settings.DENSEFIT_MODEL_PATH)
        return model_loader.load_file(str(self.root / manifest.model_path))

    def path(self, relative: str) -> Path:
        self.get_manifest()
        return self.root / relative

# Global instance
dataset_store = DatasetStore()

def get_dataset() -> DatasetStore:
    """Dependency to get the served dataset"""
    try:
        dataset_store.get_manifest()
    except DenseFitError as e:
        raise HTTPException(status_code=503, detail=f"Dataset unavailable: {e.message}")
    return dataset_store
