import logging
from typing import Callable, Iterable, Iterator, List, Optional

from data_models.config import TimeRange
from data_models.schemas import Diagnostic, FilterList, LogEvent
from utils.canonical import CanonicalWire
from utils.errors import EventLogError, MalformedLine, StreamReadError

logger = logging.getLogger(__name__)

FIELD_COUNT = 5


def parse_line(line: str, line_no: int = 1) -> LogEvent:
    """
    Splits one logger line into timestamp, pv, prev_state, new_state, description.
    The description may be empty but its tab must still be present. Bytes that were not
    valid UTF-8 arrive as surrogate escapes and make the line malformed.
    """
    try:
        line.encode("utf-8")
    except UnicodeEncodeError as e:
        raise MalformedLine(f"undecodable byte at column {e.start + 1}")

    fields = line.split(CanonicalWire.FIELD_SEPARATOR)
    if len(fields) != FIELD_COUNT:
        raise MalformedLine(f"expected {FIELD_COUNT} tab-separated fields, found {len(fields)}")

    ts_text, pv, prev_state, new_state, description = fields
    return LogEvent(
        timestamp=CanonicalWire.parse_timestamp(ts_text),
        pv=pv,
        prev_state=prev_state,
        new_state=new_state,
        description=description,
        line_no=line_no,
    )


def load_filter(text: str) -> FilterList:
    """Line-oriented filter file: '#' starts a comment, blanks ignored, '*'/'?' lines are globs."""
    exact = set()
    globs: List[str] = []
    for raw in text.splitlines():
        entry = raw.split("#", 1)[0].strip()
        if not entry:
            continue
        if "*" in entry or "?" in entry:
            globs.append(entry)
        else:
            exact.add(entry)
    logger.debug("FILTER_LOADED: %d exact entries, %d globs.", len(exact), len(globs))
    return FilterList(exact=frozenset(exact), globs=tuple(globs))


def is_filtered(filter_list: FilterList, pv: str) -> bool:
    return filter_list.matches(pv)


class EventLogReader:
    """
    Sequential stream stage: raw lines in, parsed non-filtered LogEvents out, in input order.
    Malformed lines become Diagnostics and the read continues, unless strict is set.
    """

    def __init__(self, filter_list: Optional[FilterList] = None, time_range: Optional[TimeRange] = None,
                 strict: bool = False, on_diagnostic: Optional[Callable[[Diagnostic], None]] = None):
        self.filter_list = filter_list if filter_list is not None else FilterList()
        self.time_range = time_range
        self.strict = strict
        self.on_diagnostic = on_diagnostic
        self.diagnostics: List[Diagnostic] = []
        self.lines_read = 0
        self.events_emitted = 0
        self.filtered = 0
        self.out_of_range = 0

    def _report(self, line_no: int, err: EventLogError):
        diag = Diagnostic(line_no=line_no, kind=err.code, message=err.detail)
        self.diagnostics.append(diag)
        logger.debug("PARSE_SKIPPED: line %d %s", line_no, err)
        if self.on_diagnostic is not None:
            self.on_diagnostic(diag)

    def read(self, source: Iterable[str]) -> Iterator[LogEvent]:
        iterator = iter(source)
        line_no = 0
        while True:
            try:
                raw = next(iterator)
            except StopIteration:
                break
            except (OSError, UnicodeDecodeError) as e:
                # INVARIANT PROTECTED: I/O failure aborts loudly with the count already yielded.
                raise StreamReadError(f"input stream failed at line {line_no + 1}: {e}", self.events_emitted)

            line_no += 1
            self.lines_read += 1
            line = raw.rstrip("\r\n")
            if line == "":
                continue

            try:
                event = parse_line(line, line_no)
            except EventLogError as e:
                self._report(line_no, e)
                if self.strict:
                    raise type(e)(f"line {line_no}: {e.detail}")
                continue

            if self.filter_list.matches(event.pv):
                self.filtered += 1
                continue
            if self.time_range is not None and not self.time_range.contains(event.timestamp):
                self.out_of_range += 1
                continue

            self.events_emitted += 1
            yield event

        logger.info("READ_COMPLETE: %d lines, %d events, %d filtered, %d out of range, %d malformed.",
                    self.lines_read, self.events_emitted, self.filtered, self.out_of_range, len(self.diagnostics))


def read_events(source: Iterable[str], filter_list: Optional[FilterList] = None,
                time_range: Optional[TimeRange] = None) -> Iterator[LogEvent]:
    """Convenience wrapper over EventLogReader for callers that do not need the diagnostics."""
    return EventLogReader(filter_list, time_range).read(source)
