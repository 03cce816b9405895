from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

ROOT_DIR = Path(__file__).resolve().parent.parent

load_dotenv(dotenv_path=ROOT_DIR / ".env")

CONFIG_PATH = ROOT_DIR / "config.json"


def _load_config(path: Path) -> Dict[str, Any]:
    if not path.exists():
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


config = _load_config(CONFIG_PATH)


def _setting(key: str, env: Optional[str], default: Any) -> Any:
    if env and os.getenv(env):
        return os.getenv(env)
    return config.get(key, default)


# Broker
BROKER_HOST = str(_setting("broker_host", "SDFLMQ_BROKER_HOST", "localhost"))
BROKER_PORT = int(_setting("broker_port", "SDFLMQ_BROKER_PORT", 1883))
DISPATCH_WORKERS = int(_setting("dispatch_workers", None, 32))

# Fleet control
CHUNK_LIMIT_BYTES = int(_setting("chunk_limit_bytes", "SDFLMQ_CHUNK_LIMIT", 64 * 1024))
MAX_PAYLOAD_BYTES = int(_setting("max_payload_bytes", "SDFLMQ_MAX_PAYLOAD", 256 * 1024 * 1024))
COMPRESS_THRESHOLD_BYTES = int(_setting("compress_threshold_bytes", None, 4 * 1024))
REASSEMBLY_TIMEOUT_SECONDS = float(_setting("reassembly_timeout_seconds", None, 60))
DEDUP_WINDOW = int(_setting("dedup_window", None, 4096))

# Coordinator
STRAGGLER_TIMEOUT_SECONDS = float(_setting("straggler_timeout_seconds", "SDFLMQ_STRAGGLER_TIMEOUT", 120))
TICK_INTERVAL_SECONDS = float(_setting("tick_interval_seconds", None, 0.5))
CLUSTERING_POLICY = str(_setting("clustering_policy", "SDFLMQ_CLUSTERING_POLICY", "hierarchical(3,0.3)"))
OPTIMIZER_POLICY = str(_setting("optimizer_policy", "SDFLMQ_OPTIMIZER_POLICY", "static"))

# Client
AGGREGATION_MARGIN_SECONDS = float(_setting("aggregation_margin_seconds", None, 10))
CLIENT_REQUEST_TIMEOUT_SECONDS = float(_setting("client_request_timeout_seconds", None, 30))

# Parameter server
PARAM_RETENTION_ROUNDS = int(_setting("param_retention_rounds", None, 8))
_store = _setting("param_store_path", "SDFLMQ_PARAM_STORE", None)
PARAM_STORE_PATH: Optional[Path] = Path(_store) if _store else None

LOG_LEVEL = str(_setting("log_level", "SDFLMQ_LOG_LEVEL", "INFO"))

# Status API
HTTP_PORT = int(_setting("http_port", "SDFLMQ_HTTP_PORT", 8000))
CORS_ALLOW_ORIGINS = str(_setting("cors_allow_origins", "CORS_ALLOW_ORIGINS", ""))
