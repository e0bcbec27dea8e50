"""Codebook and speed metrics."""

from .bsq import codebook_stats

__all__ = ["codebook_stats", "measure_rtf"]


def measure_rtf(audio_duration_s, wall_time_s):
    """Real-time factor: seconds of audio produced per second of processing (> 1 is faster
    than real time)."""
    if not wall_time_s > 0:
        raise ValueError(f"wall time must be positive, got {wall_time_s}")
    return audio_duration_s / wall_time_s
