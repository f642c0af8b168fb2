"""Trajectory ingestion from OpenAI-compatible inference endpoints.

A pure producer of the trajectory JSONL wire format: it samples completions,
records per-step top-k log-probabilities, pre-extracts boxed answers, and
never computes signals or scores itself.
"""

from chronos_ingest.adapter import (
    EndpointConfig,
    IngestResult,
    extract_boxed_answer,
    load_questions,
    sample_trajectories,
)

__all__ = [
    "EndpointConfig",
    "IngestResult",
    "extract_boxed_answer",
    "load_questions",
    "sample_trajectories",
]
