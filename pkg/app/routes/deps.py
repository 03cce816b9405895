from fastapi import HTTPException

from app.coordinator import Coordinator
from app.param_server import ParamServer
from app.runtime import get_runtime


def current_coordinator() -> Coordinator:
    rt = get_runtime()
    if rt is None or rt.coordinator is None:
        raise HTTPException(status_code=503, detail="Coordinator is not running in this process")
    return rt.coordinator


def current_param_server() -> ParamServer:
    rt = get_runtime()
    if rt is None or rt.param_server is None:
        raise HTTPException(status_code=503, detail="Parameter server is not running in this process")
    return rt.param_server
