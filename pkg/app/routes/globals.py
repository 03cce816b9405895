import base64

from fastapi import APIRouter, Depends, HTTPException

from app.model_core import serialize_params
from app.param_server import GlobalRecord, ParamServer
from app.routes.deps import current_param_server
from app.schemas import GlobalModelOut

router = APIRouter(prefix="/global", tags=["global"])


def _to_out(record: GlobalRecord) -> GlobalModelOut:
    return GlobalModelOut(
        session_id=record.session_id,
        round=record.round,
        weight=record.weight,
        received_at=record.received_at,
        tensor_shapes={name: list(shape) for name, shape in record.params.schema},
        blob_b64=base64.b64encode(serialize_params(record.params)).decode("ascii"),
    )


@router.get("/{session_id}", response_model=GlobalModelOut)
async def latest_global(session_id: str, server: ParamServer = Depends(current_param_server)):
    record = server.get_record(session_id)
    if record is None:
        raise HTTPException(status_code=404, detail="No global model for this session")
    return _to_out(record)


@router.get("/{session_id}/{round_no}", response_model=GlobalModelOut)
async def global_for_round(session_id: str, round_no: int, server: ParamServer = Depends(current_param_server)):
    record = server.get_record(session_id, round_no)
    if record is None:
        raise HTTPException(status_code=404, detail="Round not stored")
    return _to_out(record)
