"""
Validated configuration models.
Defaults here are the documented defaults; config/app_settings.yaml mirrors them with comments.
"""
from datetime import datetime
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from utils.canonical import CanonicalWire

TokenizerMode = Literal["event", "grammar", "grammar_stripped"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EmbeddingConfig(_Section):
    dim: int = Field(32, ge=2)
    window: int = Field(8, ge=1)
    negatives: int = Field(5, ge=1)
    epochs: int = Field(5, ge=0)
    learning_rate: float = Field(0.025, ge=0.0)
    min_count: int = Field(1, ge=1)


class DetectorConfig(_Section):
    hidden_dim: int = Field(64, ge=1)
    latent_dim: int = Field(16, ge=1)
    segment_len: int = Field(64, ge=1)
    epochs: int = Field(50, ge=0)
    learning_rate: float = Field(1e-3, ge=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    center_floor: float = Field(0.01, gt=0.0)


class TimeRange(_Section):
    """Inclusive start, exclusive end. Either bound may be omitted."""
    start: Optional[str] = None
    end: Optional[str] = None

    @field_validator("start", "end")
    @classmethod
    def _parseable(cls, value: Optional[str]) -> Optional[str]:
        if value is not None:
            CanonicalWire.parse_timestamp(value)
        return value

    @property
    def start_ts(self) -> Optional[datetime]:
        return CanonicalWire.parse_timestamp(self.start) if self.start else None

    @property
    def end_ts(self) -> Optional[datetime]:
        return CanonicalWire.parse_timestamp(self.end) if self.end else None

    def contains(self, ts: datetime) -> bool:
        start, end = self.start_ts, self.end_ts
        if start is not None and ts < start:
            return False
        if end is not None and ts >= end:
            return False
        return True


class PreprocessingConfig(_Section):
    tokenizer: TokenizerMode = "event"


class RunConfig(_Section):
    """Fully resolved run configuration. Snapshotted into every model bundle."""
    seed: Optional[int] = None
    embedding: EmbeddingConfig = EmbeddingConfig()
    detector: DetectorConfig = DetectorConfig()
    time_range: TimeRange = TimeRange()
    preprocessing: PreprocessingConfig = PreprocessingConfig()

    @classmethod
    def from_sources(cls, file_values: Optional[Dict[str, Any]], overrides: Dict[str, Any]) -> "RunConfig":
        """
        Layers defaults < settings file < flag overrides.
        overrides uses dotted keys ('detector.epochs'); None values mean 'flag not given'.
        """
        merged: Dict[str, Any] = {}
        for key, value in (file_values or {}).items():
            if value is None:
                continue
            merged[key] = dict(value) if isinstance(value, dict) else value
        for dotted, value in overrides.items():
            if value is None:
                continue
            head, _, tail = dotted.partition(".")
            if tail:
                merged.setdefault(head, {})[tail] = value
            else:
                merged[head] = value
        return cls.model_validate(merged)

    def snapshot(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


class PvFamily(_Section):
    """
    One nominal channel family. '{i}' in the template is replaced by each instance.
    Each concrete PV walks its own states cycle, one transition per emitted event.
    """
    template: str
    instances: List[str] = Field(default_factory=lambda: [""])
    states: List[str] = Field(default_factory=lambda: ["0", "1"], min_length=2)
    description: str = ""
    weight: float = Field(1.0, gt=0.0)


class AnomalyPattern(_Section):
    """A short burst of (pv, prev_state, new_state) events never produced by nominal families."""
    events: List[List[str]] = Field(min_length=2, max_length=4)
    description: str = ""

    @field_validator("events")
    @classmethod
    def _triples(cls, value: List[List[str]]) -> List[List[str]]:
        for ev in value:
            if len(ev) != 3 or not all(ev):
                raise ValueError(f"anomaly event must be [pv, prev_state, new_state], got {ev}")
        return value


class CorpusSpec(_Section):
    """Synthetic labeled corpus definition. anomaly_rate must leave anomalies a strict minority."""
    pv_families: List[PvFamily] = Field(min_length=1)
    anomaly_patterns: List[AnomalyPattern] = Field(default_factory=list)
    n_events: int = Field(20000, ge=1)
    anomaly_rate: float = Field(0.01, ge=0.0, lt=0.5)
    start: str = "2025-06-25 10:00:00.000"
    max_step_ms: int = Field(500, ge=1)
    seed: int = 42

    @model_validator(mode="after")
    def _patterns_present(self) -> "CorpusSpec":
        if self.anomaly_rate > 0 and not self.anomaly_patterns:
            raise ValueError("anomaly_rate > 0 requires at least one anomaly pattern")
        CanonicalWire.parse_timestamp(self.start)
        return self
