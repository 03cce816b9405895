from __future__ import annotations

import logging

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.config import CORS_ALLOW_ORIGINS
from app.logging_config import configure_logging
from app.routes.globals import router as globals_router
from app.routes.sessions import router as sessions_router
from app.runtime import get_runtime, init_runtime, shutdown_runtime, start_background

configure_logging()

app = FastAPI(title="SDFLMQ Coordinator API", version="1.0")

origins = [o.strip() for o in CORS_ALLOW_ORIGINS.split(",") if o.strip()]

app.add_middleware(
    CORSMiddleware,
    allow_origins=origins or ["http://127.0.0.1:3000", "http://localhost:3000"],
    allow_credentials=True,
    allow_methods=["GET", "OPTIONS"],
    allow_headers=["*"],
)

app.include_router(sessions_router)
app.include_router(globals_router)


@app.get("/health")
async def health():
    rt = get_runtime()
    return {"ok": rt is not None, "broker": rt.broker.broker_id if rt else None}


@app.on_event("startup")
async def on_startup():
    # Embedded deployment: in-memory broker + coordinator + parameter server
    if get_runtime() is None:
        init_runtime()
    start_background(get_runtime())
    logging.info("Startup complete.")


@app.on_event("shutdown")
async def on_shutdown():
    logging.info("Shutting down...")
    shutdown_runtime()
    logging.info("Shutdown complete.")
