from __future__ import annotations

import logging
from typing import Optional

import psutil

from app.fleet_control import ThroughputMeter
from app.schemas import ClientStats


def collect_stats(
    client_id: str,
    meter: Optional[ThroughputMeter] = None,
    *,
    override: Optional[ClientStats] = None,
    last_loss: Optional[float] = None,
    last_accuracy: Optional[float] = None,
) -> ClientStats:
    """
    Host probe for readiness reports: available memory and CPU load via
    psutil, bandwidth from the endpoint's recent traffic. An injected
    `override` is returned as-is (simulations use synthetic stats).
    """
    if override is not None:
        return override

    bandwidth = 0.0
    if meter is not None:
        bandwidth = meter.bytes_per_second() or 0.0

    try:
        free_memory = max(0, int(psutil.virtual_memory().available))
        cpu = min(1.0, max(0.0, psutil.cpu_percent(interval=None) / 100.0))
    except (OSError, psutil.Error) as e:
        logging.warning(f"{client_id}: resource probe failed ({e}); reporting worst-case stats")
        return ClientStats(
            client_id=client_id,
            free_memory=0,
            bandwidth=bandwidth,
            cpu_utilization=1.0,
            last_loss=last_loss,
            last_accuracy=last_accuracy,
            degraded=True,
        )

    return ClientStats(
        client_id=client_id,
        free_memory=free_memory,
        bandwidth=bandwidth,
        cpu_utilization=cpu,
        last_loss=last_loss,
        last_accuracy=last_accuracy,
    )
