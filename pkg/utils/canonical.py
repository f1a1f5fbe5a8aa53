"""
Option A: CENTRALIZED AUTHORITY.
This module is the single wire-format authority for the entire pipeline.
Reader, scorer, synthesizer and CSV writers must import CanonicalWire so a line written
by one stage is always parseable by another.
"""
import re
from datetime import datetime

from utils.errors import BadTimestamp

# Fraction is 1-3 digits; anything longer is sub-millisecond and rejected, never truncated.
_TIMESTAMP_PATTERN = re.compile(
    r'^(\d{4})-(\d{2})-(\d{2}) (\d{2}):(\d{2}):(\d{2})(?:\.(\d+))?$'
)


class CanonicalWire:
    """
    Centralized authority for timestamp, float and glob text forms.
    """

    FIELD_SEPARATOR = "\t"

    @staticmethod
    def parse_timestamp(text: str) -> datetime:
        """
        Parses 'YYYY-MM-DD hh:mm:ss[.f|.ff|.fff]' into a naive datetime.
        Invariant Protected: Millisecond Contract. Short fractions are right-padded
        ('.9' -> 900 ms); four or more fraction digits raise BadTimestamp.
        """
        match = _TIMESTAMP_PATTERN.match(text)
        if not match:
            raise BadTimestamp(f"unparsable timestamp '{text}'")

        fraction = match.group(7) or ""
        if len(fraction) > 3:
            raise BadTimestamp(f"sub-millisecond precision in '{text}'")
        millis = int(fraction.ljust(3, "0")) if fraction else 0

        year, month, day, hour, minute, second = (int(g) for g in match.groups()[:6])
        try:
            return datetime(year, month, day, hour, minute, second, millis * 1000)
        except ValueError as e:
            raise BadTimestamp(f"out-of-range field in '{text}': {e}")

    @staticmethod
    def format_timestamp(ts: datetime) -> str:
        """Always three fraction digits, so formatted output re-parses to the same instant."""
        return f"{ts:%Y-%m-%d %H:%M:%S}.{ts.microsecond // 1000:03d}"

    @staticmethod
    def format_event_line(event) -> str:
        """Inverse of event_log.parse_line for descriptions free of tabs and newlines."""
        return CanonicalWire.FIELD_SEPARATOR.join([
            CanonicalWire.format_timestamp(event.timestamp),
            event.pv,
            event.prev_state,
            event.new_state,
            event.description,
        ])

    @staticmethod
    def format_float(value: float) -> str:
        """
        Shortest round-trip decimal (Python repr).
        Invariant Protected: Lossless Floats. float(format_float(x)) == x bit for bit.
        """
        return repr(float(value))

    @staticmethod
    def compile_glob(pattern: str) -> "re.Pattern[str]":
        """
        Translates a PV glob into an anchored regex. Only '*' (any run) and '?' (one character)
        are special; every other character, brackets included, matches literally.
        """
        parts = []
        for ch in pattern:
            if ch == "*":
                parts.append(".*")
            elif ch == "?":
                parts.append(".")
            else:
                parts.append(re.escape(ch))
        return re.compile("".join(parts) + r"\Z", re.DOTALL)

    @staticmethod
    def sanitize_field(text: str) -> str:
        """Collapses tabs and newlines so a free-text message fits one tab-separated field."""
        return re.sub(r'[\t\r\n]+', ' ', text)
