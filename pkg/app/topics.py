"""Topic name scheme shared by every component."""
from __future__ import annotations

ROOT = "sdflmq"
COORD_TOPIC = f"{ROOT}/coord"
GLOBAL_FILTER = f"{ROOT}/global/+/root_result"


def client_topic(client_id: str) -> str:
    return f"{ROOT}/client/{client_id}"


def session_topic(session_id: str) -> str:
    return f"{ROOT}/session/{session_id}"


def aggregation_inbox(session_id: str, head_id: str) -> str:
    return f"{ROOT}/session/{session_id}/agg/{head_id}"


def global_topic(session_id: str) -> str:
    """Public topic the root publishes its result to; the parameter server listens here."""
    return f"{ROOT}/global/{session_id}"
