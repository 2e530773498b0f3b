# app/core/model_loader.py
import logging
from typing import Dict, Optional, Tuple

from app.body.model import BodyModel, build_procedural_template
from app.body.model_io import load_model
from app.schemas.body import TemplateConfig

logger = logging.getLogger(__name__)


class ModelLoader:
    def __init__(self):
        self._files: Dict[str, BodyModel] = {}
        self._built: Dict[Tuple, BodyModel] = {}

    def load_file(self, file_path: str) -> BodyModel:
        """Load a .drbm body model from file path with caching"""
        if file_path not in self._files:
            self._files[file_path] = load_model(file_path)
            logger.info(f"Loaded body model {file_path}")
        return self._files[file_path]

    def build(self, config: Optional[TemplateConfig] = None) -> BodyModel:
        """Build the procedural template once per distinct config"""
        config = config or TemplateConfig()
        key = tuple(sorted(config.model_dump(mode="json").items()))
        if key not in self._built:
            self._built[key] = build_procedural_template(config)
        return self._built[key]

    def get(self, file_path: Optional[str] = None, config: Optional[TemplateConfig] = None) -> BodyModel:
        if file_path:
            return self.load_file(file_path)
        return self.build(config)

    def reload_file(self, file_path: str) -> BodyModel:
        """Force reload a model file (useful after regenerating a dataset)"""
        self._files.pop(file_path, None)
        return self.load_file(file_path)


# Global instance
model_loader = ModelLoader()
