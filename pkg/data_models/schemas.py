from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, FrozenSet, Iterator, Optional, Tuple

import numpy as np

from utils.canonical import CanonicalWire
from utils.errors import BadTimestamp, EmptyPV, MalformedLine

# NOTE: Dual-update maintenance requirement. Any change to the LogEvent fields must be mirrored in
# CanonicalWire.format_event_line, event_log.parse_line and the score CSV writer in pipeline.py.


@dataclass(frozen=True)
class LogEvent:
    """One parsed event-logger line."""
    timestamp: datetime
    pv: str
    prev_state: str
    new_state: str
    description: str = ""
    line_no: int = 1  # 1-based source line index

    def __post_init__(self):
        # INVARIANT PROTECTED: Channel names are non-empty single fields.
        if not self.pv:
            raise EmptyPV(f"line {self.line_no} has an empty PV field")
        if "\t" in self.pv:
            raise MalformedLine(f"line {self.line_no} PV contains a tab")

        # INVARIANT PROTECTED: Both state tokens must be present ("0"/"1" or symbolic).
        if not self.prev_state or not self.new_state:
            raise MalformedLine(f"line {self.line_no} has an empty state field")

        # INVARIANT PROTECTED: Millisecond resolution or coarser.
        if self.timestamp.microsecond % 1000 != 0:
            raise BadTimestamp(f"line {self.line_no} timestamp has sub-millisecond precision")

        if self.line_no < 1:
            raise ValueError(f"Invalid line_no {self.line_no} for LogEvent '{self.pv}'")


@dataclass(frozen=True)
class FilterList:
    """Curated noisy-PV list: exact names plus ordered '*'/'?' globs, case-sensitive."""
    exact: FrozenSet[str] = frozenset()
    globs: Tuple[str, ...] = ()
    _compiled: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "exact", frozenset(self.exact))
        object.__setattr__(self, "globs", tuple(self.globs))
        object.__setattr__(self, "_compiled", tuple(CanonicalWire.compile_glob(g) for g in self.globs))

    def matches(self, pv: str) -> bool:
        if pv in self.exact:
            return True
        return any(rx.match(pv) for rx in self._compiled)

    def __len__(self) -> int:
        return len(self.exact) + len(self.globs)


@dataclass(frozen=True)
class Diagnostic:
    """A skipped input line, reported instead of aborting the read."""
    line_no: int
    kind: str
    message: str

    def to_line(self) -> str:
        return f"{self.line_no}\t{self.kind}\t{CanonicalWire.sanitize_field(self.message)}"


@dataclass(frozen=True)
class TokenSequence:
    """The 'words' of one event 'sentence', in source order."""
    tokens: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        # INVARIANT PROTECTED: Tokens are non-empty alphanumeric runs.
        for tok in self.tokens:
            if not tok or not tok.isalnum():
                raise ValueError(f"Non-alphanumeric token '{tok}' in TokenSequence")

    def __iter__(self) -> Iterator[str]:
        return iter(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ChannelParts:
    """Structured decomposition of a convention-conforming PV name."""
    sys_subsys: str
    device: str
    signal: str
    device_instance: Optional[int] = None
    sub_device: Optional[str] = None
    is_private: bool = False

    def __post_init__(self):
        # INVARIANT PROTECTED: Device names must not end in a number; the trailing digit run is the DI.
        if not self.device or self.device[-1].isdigit():
            raise ValueError(f"Device name '{self.device}' is empty or ends in a digit")
        if self.device_instance is not None and self.device_instance < 0:
            raise ValueError(f"Negative device_instance {self.device_instance}")


@dataclass
class TokenFlowGraph:
    """
    Token paths over PV names.
    nodes: (depth, token) -> count. edges: (depth, token, next_token) -> count, where
    next_token sits at depth + 1.
    """
    nodes: Dict[Tuple[int, str], int] = field(default_factory=dict)
    edges: Dict[Tuple[int, str, str], int] = field(default_factory=dict)
    skipped: int = 0


@dataclass(frozen=True)
class EventVector:
    """Sum of known token embeddings for one event."""
    values: np.ndarray
    n_known: int

    def __post_init__(self):
        if self.n_known < 0:
            raise ValueError(f"Negative n_known {self.n_known}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("EventVector contains non-finite entries")


@dataclass(frozen=True)
class StreamState:
    """Recurrent state carried between scored events. Starts at the zero vector."""
    hidden: np.ndarray
    events_seen: int = 0

    @classmethod
    def initial(cls, hidden_dim: int) -> "StreamState":
        return cls(hidden=np.zeros(hidden_dim), events_seen=0)


@dataclass(frozen=True)
class ScoredEvent:
    """An event with its anomaly score s = ||latent - c||."""
    event: Optional[LogEvent]
    score: float
    latent: np.ndarray

    def __post_init__(self):
        if not self.score >= 0.0:
            raise ValueError(f"Anomaly score must be non-negative, got {self.score}")


@dataclass(frozen=True)
class ScoreRecord:
    """One row of scored output, in input order."""
    timestamp: datetime
    pv: str
    prev_state: str
    new_state: str
    score: float
    n_known: int
    latent: Optional[Tuple[float, ...]] = None


@dataclass(frozen=True)
class EvaluationReport:
    """Separation metrics for labeled scores. auroc is None when only one class is present."""
    auroc: Optional[float]
    median_ratio: float
    p95_nominal: float
    median_anomalous: float
    n_nominal: int
    n_anomalous: int

    def to_lines(self) -> Tuple[str, ...]:
        auroc = "undefined" if self.auroc is None else CanonicalWire.format_float(self.auroc)
        return (
            f"auroc={auroc}",
            f"median_ratio={CanonicalWire.format_float(self.median_ratio)}",
            f"p95_nominal={CanonicalWire.format_float(self.p95_nominal)}",
            f"median_anomalous={CanonicalWire.format_float(self.median_anomalous)}",
        )
