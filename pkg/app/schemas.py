from __future__ import annotations

import json
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from app.errors import ProtocolError


class ClientStats(BaseModel):
    client_id: str
    free_memory: int = Field(0, ge=0)  # bytes
    bandwidth: float = Field(0.0, ge=0.0)  # bytes/second
    cpu_utilization: float = Field(0.0, ge=0.0, le=1.0)
    last_loss: Optional[float] = None
    last_accuracy: Optional[float] = None
    degraded: bool = False


# ----------------------------------------
# Coordinator function bodies
# ----------------------------------------
class CreateSessionRequest(BaseModel):
    client_id: str
    session_id: str
    model_name: str
    session_time: float = Field(3600.0, gt=0)  # seconds
    waiting_time: float = Field(120.0, gt=0)  # seconds
    capacity_min: int = Field(1, ge=1)
    capacity_max: int = Field(1, ge=1)
    fl_rounds: int = Field(1, ge=1)
    preferred_role: str = "trainer"

    @model_validator(mode="after")
    def _capacity_order(self) -> "CreateSessionRequest":
        if self.capacity_min > self.capacity_max:
            raise ValueError("capacity_min must not exceed capacity_max")
        return self


class JoinSessionRequest(BaseModel):
    client_id: str
    session_id: str
    model_name: str
    fl_rounds: int = Field(1, ge=1)
    preferred_role: str = "trainer"


class SessionReply(BaseModel):
    request: str  # "create" | "join"
    session_id: str
    accepted: bool
    reason: Optional[str] = None
    state: Optional[str] = None


class ClientReadyMsg(BaseModel):
    session_id: str
    client_id: str
    round: int
    stats: ClientStats
    missing_children: List[str] = Field(default_factory=list)


class RoleAck(BaseModel):
    session_id: str
    client_id: str
    topology_version: int


class DeregisterRequest(BaseModel):
    session_id: str
    client_id: str


# ----------------------------------------
# Coordinator -> client
# ----------------------------------------
class RoleAssignmentMsg(BaseModel):
    session_id: str
    client_id: str
    role: str
    parent_topic: str
    inbox_topic: Optional[str] = None
    expected_input_count: int = Field(0, ge=0)
    children: List[str] = Field(default_factory=list)
    topology_version: int = 0
    fl_rounds: int = 1
    round: int = 1
    aggregation_timeout: Optional[float] = None

    @model_validator(mode="after")
    def _role_shape(self) -> "RoleAssignmentMsg":
        if self.role == "trainer":
            if self.inbox_topic is not None or self.expected_input_count != 0:
                raise ValueError("trainers carry no aggregation inbox")
        elif self.inbox_topic is None:
            raise ValueError(f"{self.role} needs an aggregation inbox")
        return self


class RoundStartMsg(BaseModel):
    session_id: str
    round: int
    topology_version: int


class SessionNotice(BaseModel):
    session_id: str
    status: str  # "terminated" | "aborted" | "demoted"
    round: int = 0
    reason: Optional[str] = None


class TopologyNodeOut(BaseModel):
    client_id: str
    role: str
    parent: Optional[str] = None
    layer: int
    expected_input_count: int


class TopologyMsg(BaseModel):
    session_id: str
    topology_version: int
    root: str
    layers: List[List[str]]
    nodes: List[TopologyNodeOut]


# ----------------------------------------
# Parameter updates
# ----------------------------------------
class UpdateMeta(BaseModel):
    session_id: str
    round: int = Field(..., ge=1)
    sender: str
    weight: float = Field(1.0, gt=0)

    @field_validator("session_id", "sender")
    @classmethod
    def _no_newline(cls, v: str) -> str:
        if "\n" in v:
            raise ValueError("newline not allowed")
        return v


def pack_update(meta: UpdateMeta, params_blob: bytes) -> bytes:
    return meta.model_dump_json().encode("utf-8") + b"\n" + params_blob


def unpack_update(body: bytes) -> Tuple[UpdateMeta, bytes]:
    head, sep, blob = body.partition(b"\n")
    if not sep:
        raise ProtocolError("update body has no metadata line")
    try:
        meta = UpdateMeta.model_validate_json(head)
    except (ValidationError, ValueError) as e:
        raise ProtocolError(f"bad update metadata: {e}") from e
    return meta, blob


def parse_body(model: type[BaseModel], body: bytes) -> BaseModel:
    try:
        return model.model_validate_json(body)
    except (ValidationError, ValueError, json.JSONDecodeError) as e:
        raise ProtocolError(f"malformed {model.__name__}: {e}") from e


# ----------------------------------------
# REST API responses
# ----------------------------------------
class SessionSummary(BaseModel):
    session_id: str
    model_name: str
    owner: str
    state: str
    round: int
    fl_rounds_max: int
    members: List[str]
    topology_version: int


class GlobalModelOut(BaseModel):
    session_id: str
    round: int
    weight: float
    received_at: float
    tensor_shapes: Dict[str, List[int]]
    blob_b64: str
