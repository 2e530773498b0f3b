# app/core/config.py
from pydantic_settings import BaseSettings
from typing import List, Optional
from pathlib import Path

from app.core.errors import ConfigurationError

UPLOAD_SUBDIR = "uploads"


class Settings(BaseSettings):
    # App settings
    APP_NAME: str = "DenseFit"
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"

    # CORS settings for the dataset browser
    ALLOWED_ORIGINS: List[str] = ["http://localhost:3000", "http://127.0.0.1:3000"]

    # Reproducibility and parallelism
    DENSEFIT_SEED: int = 0
    DENSEFIT_JOBS: int = 1

    # Dataset served by the HTTP API and optional prebuilt model
    DENSEFIT_DATASET_ROOT: Optional[str] = None
    DENSEFIT_MODEL_PATH: Optional[str] = None
    # Relative paths resolve against the dataset root, never the working directory
    DENSEFIT_UPLOAD_DIR: Optional[str] = None

    class Config:
        env_file = ".env"
        case_sensitive = True

    def get_dataset_root(self) -> Optional[Path]:
        if not self.DENSEFIT_DATASET_ROOT:
            return None
        return Path(self.DENSEFIT_DATASET_ROOT).expanduser().resolve()

    def get_upload_dir(self, dataset_root: Optional[Path] = None) -> Path:
        """Where uploaded targets are stored: an absolute DENSEFIT_UPLOAD_DIR, else a path under the dataset"""
        root = dataset_root or self.get_dataset_root()
        path = Path(self.DENSEFIT_UPLOAD_DIR).expanduser() if self.DENSEFIT_UPLOAD_DIR else Path(UPLOAD_SUBDIR)
        if path.is_absolute():
            return path
        if root is None:
            raise ConfigurationError(
                f"Upload directory {path} is relative and no dataset is served; set an absolute DENSEFIT_UPLOAD_DIR"
            )
        return Path(root) / path


settings = Settings()
