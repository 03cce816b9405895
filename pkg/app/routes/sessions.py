from typing import List, Optional

from fastapi import APIRouter, Depends, HTTPException, Query

from app.coordinator import Coordinator
from app.routes.deps import current_coordinator
from app.schemas import SessionSummary, TopologyMsg

router = APIRouter(prefix="/sessions", tags=["sessions"])


@router.get("", response_model=List[SessionSummary])
async def list_sessions(
    state: Optional[str] = Query(None, description="Only sessions in this state (e.g. active)"),
    coordinator: Coordinator = Depends(current_coordinator),
):
    out = [s.summary() for s in coordinator.sessions()]
    if state:
        out = [s for s in out if s.state == state.lower()]
    return out


@router.get("/{session_id}", response_model=SessionSummary)
async def get_session(session_id: str, coordinator: Coordinator = Depends(current_coordinator)):
    s = coordinator.get_session(session_id)
    if s is None:
        raise HTTPException(status_code=404, detail="Session not found")
    return s.summary()


@router.get("/{session_id}/topology", response_model=TopologyMsg)
async def get_topology(session_id: str, coordinator: Coordinator = Depends(current_coordinator)):
    s = coordinator.get_session(session_id)
    if s is None:
        raise HTTPException(status_code=404, detail="Session not found")
    if s.topology is None:
        raise HTTPException(status_code=404, detail="Session has not been clustered yet")
    return s.topology.to_message()
