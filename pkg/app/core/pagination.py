# app/core/pagination.py
from math import ceil
from typing import Any, Dict, Optional, Sequence
from urllib.parse import urlencode

from fastapi import Request

from app.core.errors import InputError

DEFAULT_PAGE_SIZE = 50
MAX_PAGE_SIZE = 500


class Paginator:
    """Page through an in-memory sequence of records, keeping the request's filters in the links"""

    def __init__(self, request: Request, page: int = 1, page_size: int = DEFAULT_PAGE_SIZE):
        if page < 1:
            raise InputError(f"page must be >= 1, got {page}")
        if not 1 <= page_size <= MAX_PAGE_SIZE:
            raise InputError(f"page_size must lie in [1, {MAX_PAGE_SIZE}], got {page_size}")
        self.page = page
        self.page_size = page_size
        self.base_url = str(request.url).split('?')[0]
        self.filters = {key: value for key, value in request.query_params.items()
                        if key not in ("page", "page_size")}

    def _link(self, page: int) -> str:
        return f"{self.base_url}?{urlencode({**self.filters, 'page': page, 'page_size': self.page_size})}"

    def paginate(self, records: Sequence[Any]) -> Dict[str, Any]:
        """The current page plus DRF-style count/next/previous"""
        total = len(records)
        pages = max(1, ceil(total / self.page_size))
        start = (self.page - 1) * self.page_size
        next_url: Optional[str] = self._link(self.page + 1) if self.page < pages else None
        previous_url: Optional[str] = self._link(min(self.page - 1, pages)) if self.page > 1 else None
        return {
            "count": total,
            "page": self.page,
            "pages": pages,
            "next": next_url,
            "previous": previous_url,
            "results": list(records[start:start + self.page_size]),
        }
