"""Request bodies for the HTTP service.

Variant and device definitions travel as file *contents* so all parsing
and validation happens server-side; responses are the report dicts from
report.py, already JSON-shaped.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class Overrides(BaseModel):
    batch: int | None = None
    heads: int | None = None
    seq_q: int | None = None
    seq_k: int | None = None
    d_qk: int | None = None
    d_v: int | None = None

    def as_dict(self) -> dict:
        return self.model_dump()


class VariantRef(BaseModel):
    """One variant, by builtin name or by definition-file contents."""

    variant: str | None = None
    variant_text: str | None = None
    scale: float = 1.0
    overrides: Overrides = Field(default_factory=Overrides)


class CheckRequest(VariantRef):
    seed: int = 0
    blocks: list[int] | None = None
    chunks: list[int] | None = None


class GradcheckRequest(VariantRef):
    seed: int = 0
    eps: float = 1e-5
    samples: int | None = 24


class ScheduleRequest(VariantRef):
    device_text: str | None = None
    mode: str = "analytic"
    verify: bool = False
    seed: int = 0


class EmitRequest(VariantRef):
    device_text: str | None = None
    check: bool = False
    seed: int = 0


class BenchRequest(BaseModel):
    variants: list[str] = Field(default_factory=list)
    variant_texts: list[str] = Field(default_factory=list)
    scale: float = 1.0
    seed: int = 0
    repeats: int = 3
    blocks: list[int] | None = None
    chunks: list[int] | None = None
    overrides: Overrides = Field(default_factory=Overrides)
