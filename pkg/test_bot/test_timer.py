"""Test functions dedicated to time measurement and conversion."""

from datetime import timedelta
from lib import timer


def test_time_conversion() -> None:
    """Test conversion of time units."""
    assert timer.seconds(1) == timedelta(seconds=1)
    assert timer.to_seconds(timedelta(seconds=1)) == 1
    assert timer.to_seconds(timer.seconds(0.25)) == 0.25

    assert timer.sec_str(timedelta(seconds=1)) == "1.0"
    assert timer.sec_str(timedelta(seconds=12.34)) == "12.3"
    assert timer.sec_str(timedelta(milliseconds=40)) == "0.0"


def test_reset() -> None:
    """Test timer reset."""
    t = timer.Timer()
    t.starting_time -= 10
    t.reset()
    assert t.starting_time is not None
    assert timer.sec_str(t.time_since_reset()) == timer.sec_str(timedelta(0))


def test_time() -> None:
    """Test time measurement."""
    t = timer.Timer()
    t.starting_time -= 5
    assert timer.sec_str(t.time_since_reset()) == timer.sec_str(timedelta(seconds=5))


def test_lap() -> None:
    """Test that laps measure the time since the previous lap while the total keeps running."""
    t = timer.Timer()
    t.starting_time -= 7
    t.lap_start -= 3
    assert timer.sec_str(t.lap()) == "3.0"
    assert timer.sec_str(t.lap()) == "0.0"
    assert timer.sec_str(t.time_since_reset()) == "7.0"
