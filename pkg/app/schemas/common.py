from pydantic import BaseModel, Field, ConfigDict
from typing import Optional, List, Generic, TypeVar

T = TypeVar('T')

class PaginatedResponse(BaseModel, Generic[T]):
    """One page of a list endpoint with links to its neighbours"""
    count: int = Field(..., example=6, description="Items across every page")
    page: int = Field(..., example=1, description="Current page, starting at 1")
    pages: int = Field(..., example=1, description="Number of pages")
    next: Optional[str] = Field(
        None,
        example="http://localhost:8001/api/datasets/samples?split=train&page=2&page_size=50"
    )
    previous: Optional[str] = Field(None, description="Link to the previous page, None on the first")
    results: List[T] = Field(..., description="Records on this page")

# Base for records read back from manifests and evaluation files
class BaseRecord(BaseModel):
    model_config = ConfigDict(from_attributes=True)
