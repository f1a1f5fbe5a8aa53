from datetime import datetime

import pytest

from data_models.schemas import LogEvent
from utils.canonical import CanonicalWire
from utils.errors import BadTimestamp


def test_short_fractions_are_right_padded():
    assert CanonicalWire.parse_timestamp("2025-06-25 13:49:21.9").microsecond == 900_000
    assert CanonicalWire.parse_timestamp("2025-06-25 13:49:21.09").microsecond == 90_000
    assert CanonicalWire.parse_timestamp("2025-06-25 13:49:21.009").microsecond == 9_000
    assert CanonicalWire.parse_timestamp("2025-06-25 13:49:21").microsecond == 0


def test_sub_millisecond_precision_is_rejected():
    with pytest.raises(BadTimestamp):
        CanonicalWire.parse_timestamp("2025-06-25 13:49:21.1234")


def test_garbage_and_out_of_range_timestamps_are_rejected():
    for text in ("yesterday", "2025-13-01 00:00:00", "2025-06-25T13:49:21.1", ""):
        with pytest.raises(BadTimestamp):
            CanonicalWire.parse_timestamp(text)


def test_format_timestamp_always_has_three_fraction_digits():
    ts = datetime(2025, 6, 25, 13, 49, 21, 900_000)
    assert CanonicalWire.format_timestamp(ts) == "2025-06-25 13:49:21.900"
    assert CanonicalWire.parse_timestamp(CanonicalWire.format_timestamp(ts)) == ts


def test_format_event_line_keeps_empty_description_field():
    event = LogEvent(timestamp=datetime(2025, 6, 25, 10, 0, 0), pv="SR01C___BPM1___AM00",
                     prev_state="0", new_state="1")
    assert CanonicalWire.format_event_line(event) == "2025-06-25 10:00:00.000\tSR01C___BPM1___AM00\t0\t1\t"


def test_format_float_is_lossless():
    for value in (0.1, 1e-300, 2.0 / 3.0, 12345.678901234567):
        assert float(CanonicalWire.format_float(value)) == value


def test_glob_treats_only_star_and_question_mark_as_special():
    rx = CanonicalWire.compile_glob("SR0?C___BPM*")
    assert rx.match("SR01C___BPM1___AM00")
    assert not rx.match("SR11C___BPM1___AM00")
    assert CanonicalWire.compile_glob("a[1]").match("a[1]")
    assert not CanonicalWire.compile_glob("a.b").match("axb")


def test_sanitize_field_collapses_tabs_and_newlines():
    assert CanonicalWire.sanitize_field("bad\tfield\r\nhere") == "bad field here"
