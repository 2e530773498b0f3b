import numpy as np
import pytest

from app.body.model import build_procedural_template
from app.body.skeleton import SkeletonPreset
from app.moca.generator import generate
from app.schemas.body import TemplateConfig
from app.schemas.dataset import GenerateConfig

SMALL_TEMPLATE = TemplateConfig(part_count=12, resolution=8, skeleton=SkeletonPreset.BODY, shape_rank=6)
TINY_DATASET = GenerateConfig(
    name="tiny",
    sequences=3,
    frames=2,
    shapes_per_sequence=1,
    image_size=(64, 64),
    seed=7,
    stride=2,
    template=SMALL_TEMPLATE,
)


@pytest.fixture(scope="session")
def small_model():
    """24-joint, 12-part template small enough for dense Jacobians"""
    return build_procedural_template(SMALL_TEMPLATE)


@pytest.fixture(scope="session")
def model24():
    return build_procedural_template(SMALL_TEMPLATE.model_copy(update={"part_count": 24}))


@pytest.fixture(scope="session")
def full_model():
    return build_procedural_template(SMALL_TEMPLATE.model_copy(update={"skeleton": SkeletonPreset.FULL}))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, small_model):
    """(root, manifest) of a 6-sample dataset shared by the read-only tests"""
    root = tmp_path_factory.mktemp("tiny")
    manifest = generate(TINY_DATASET, root, model=small_model)
    return root, manifest
