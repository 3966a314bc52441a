"""Error codes and diagnostics shared across the pipeline stages."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional


class RiderscopeError(Exception):
    """Raised with a stable machine-readable ``code`` (e.g. ``DEX_MAGIC``)."""

    def __init__(self, code: str, message: str = "", **context):
        self.code = code
        self.message = message or code
        self.context = context
        super().__init__(f"{code}: {self.message}")


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    line: Optional[int] = None
    sample_id: Optional[str] = None
    stage: Optional[str] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}
