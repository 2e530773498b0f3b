from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator

from app.core.errors import ConfigurationError, DatasetIOError
from app.schemas.body import TemplateConfig
from app.schemas.dataset import GenerateConfig
from app.schemas.fitting import FitConfig

SUBCOMMANDS = ("generate", "render", "fit", "eval", "gradcheck", "ablate", "serve")
CONFIG_SECTIONS = ("template", "fit", "generate")


class CommandConfig(BaseModel):
    """Resolved settings of one command line invocation"""
    subcommand: str
    inputs: Dict[str, Optional[Path]] = Field(default_factory=dict, description="Paths that must exist")
    output: Optional[Path] = Field(None, description="Directory or file every output goes under")
    seed: int = 0
    jobs: int = 1
    template: TemplateConfig = Field(default_factory=TemplateConfig)
    fit: FitConfig = Field(default_factory=FitConfig)
    generate: GenerateConfig = Field(default_factory=GenerateConfig)

    @field_validator("subcommand")
    def validate_subcommand(cls, v):
        if v not in SUBCOMMANDS:
            raise ConfigurationError(f"Unknown subcommand {v}; expected one of {list(SUBCOMMANDS)}")
        return v

    @field_validator("jobs")
    def validate_jobs(cls, v):
        if v < 1:
            raise ConfigurationError(f"--jobs must be >= 1, got {v}")
        return v

    def check_paths(self) -> None:
        """Fail before any work starts if an input is missing"""
        for name, path in self.inputs.items():
            if path is not None and not path.exists():
                raise DatasetIOError(f"{name} path does not exist: {path}")
        if self.output is not None and self.output.exists() and self.output.is_file() and not self.output.suffix:
            raise DatasetIOError(f"Output {self.output} is a file, expected a directory")


def load_config_file(path: Optional[Path]) -> Dict[str, Dict[str, Any]]:
    """Read the optional YAML file with sections template, fit, generate"""
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle) or {}
    except OSError as e:
        raise DatasetIOError(f"Cannot read config file {path}: {e}")
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Config file {path} is not valid YAML: {e}")
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config file {path} must hold a mapping")
    unknown = sorted(set(data) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigurationError(f"Unknown config sections {unknown}; expected {list(CONFIG_SECTIONS)}")
    for section, values in data.items():
        if values is not None and not isinstance(values, dict):
            raise ConfigurationError(f"Config section {section} must be a mapping")
    return {section: values or {} for section, values in data.items()}


def merge_section(model_cls, file_values: Dict[str, Any], overrides: Dict[str, Any]):
    """Model defaults, then file values, then command line flags that were given"""
    unknown = sorted(set(file_values) - set(model_cls.model_fields))
    if unknown:
        raise ConfigurationError(f"Unknown {model_cls.__name__} keys in config file: {unknown}")
    values = dict(file_values)
    values.update({key: value for key, value in overrides.items() if value is not None})
    try:
        return model_cls(**values)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid {model_cls.__name__}: {e}")
