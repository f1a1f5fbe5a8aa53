"""
Error hierarchy shared by every pipeline stage.
Each subclass carries a stable `code` (its class name) that the CLI prints and the
reader writes into diagnostics, so operators can grep one vocabulary of faults.
"""


class EventLogError(ValueError):
    """Base class for all domain failures. Message format: '<code>: <detail>'."""

    def __init__(self, detail: str):
        self.detail = detail
        super().__init__(f"{self.code}: {detail}")

    @property
    def code(self) -> str:
        return type(self).__name__


# --- event_log ---
class MalformedLine(EventLogError):
    """Wrong tab-separated field count or an empty state field."""


class BadTimestamp(EventLogError):
    """Unparsable timestamp or sub-millisecond precision."""


class EmptyPV(EventLogError):
    """Channel-name field is empty."""


# --- channel_grammar ---
class EmptyResult(EventLogError):
    """Tokenizer found no alphanumeric content."""


class NotConvention(EventLogError):
    """Channel name does not follow SysSubSys:DeviceID:Signal."""


class ForbiddenCharacter(EventLogError):
    """Channel name contains a reserved character."""


class BadDeviceInstance(EventLogError):
    """Device instance has a leading zero."""


# --- token_embeddings ---
class EmptyVocab(EventLogError):
    """No token reached min_count."""


class DimensionMismatch(EventLogError):
    """Vectors of differing dimension were combined."""


# --- training (both models) ---
class NonFiniteUpdate(EventLogError):
    """A weight became NaN/Inf. Almost always a learning rate that is too high."""


class EmptyDataset(EventLogError):
    """No timesteps to compute a hypersphere center from."""


# --- pipeline ---
class EmptyCorpus(EventLogError):
    """Nothing left to train on after filtering."""


class VersionMismatch(EventLogError):
    """Bundle or state file written by another format_version."""


class CorruptBundle(EventLogError):
    """Bundle framing or checksum is invalid."""


class StateMismatch(EventLogError):
    """Persisted stream state belongs to another bundle."""


# --- synth_oracle ---
class SpecInvalid(EventLogError):
    """Synthetic corpus specification is inconsistent."""


class DegenerateLabels(EventLogError):
    """Only one class present; AUROC is undefined. `partial` holds the metrics that could be computed."""

    def __init__(self, detail: str, partial=None):
        self.partial = partial
        super().__init__(detail)


class LengthMismatch(EventLogError):
    """Scores and labels differ in length."""


class StreamReadError(EventLogError):
    """Input stream failed mid-read."""

    def __init__(self, detail: str, events_yielded: int):
        self.events_yielded = events_yielded
        super().__init__(f"{detail} (after {events_yielded} events)")
