"""Durations and a stopwatch for timing training epochs and experiment jobs."""

from datetime import timedelta
from time import perf_counter


def seconds(time_in_sec: float) -> timedelta:
    """Create a timedelta duration in seconds."""
    return timedelta(seconds=time_in_sec)


def to_seconds(duration: timedelta) -> float:
    """Return a bare number representing the length of the duration in seconds."""
    return duration.total_seconds()


def sec_str(duration: timedelta) -> str:
    """Return a string with the duration value in seconds, to one decimal place."""
    return f"{to_seconds(duration):.1f}"


class Timer:
    """
    A stopwatch for training loops.

    `lap()` returns the time since the previous lap (or since the timer started) and
    starts a new lap, so an epoch loop can call it once per epoch. `time_since_reset()`
    keeps measuring the whole run.
    """

    def __init__(self) -> None:
        """Start the timer."""
        self.starting_time = perf_counter()
        self.lap_start = self.starting_time

    def reset(self) -> None:
        """Reset the timer."""
        self.starting_time = perf_counter()
        self.lap_start = self.starting_time

    def lap(self) -> timedelta:
        """Finish the current lap and return its length."""
        now = perf_counter()
        length = seconds(now - self.lap_start)
        self.lap_start = now
        return length

    def time_since_reset(self) -> timedelta:
        """How much time has passed."""
        return seconds(perf_counter() - self.starting_time)
