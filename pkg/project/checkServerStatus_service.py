import os
from datetime import datetime

import psutil
from pydantic import BaseModel


class ServerStatusRequest(BaseModel):
    """
    Request model for a host snapshot. No parameters are needed.
    """

    pass


class ServerStatusResponse(BaseModel):
    """
    The host a run or a server executes on: logical CPUs, memory, and the resident size of
    this process.
    """

    cpu_count: int
    cpu_utilization: float
    memory_total_gb: float
    memory_utilization: float
    process_rss_mb: float
    last_update_time: datetime


def checkServerStatus(request: ServerStatusRequest | None = None) -> ServerStatusResponse:
    """
    Takes a resource snapshot of the current host. Experiment runs record it next to their
    wall times, since those times are only comparable on the same hardware.

    Args:
        request (ServerStatusRequest): Request model for fetching the snapshot. No parameters are needed.

    Returns:
        ServerStatusResponse: CPU, memory and process figures at the time of the call.

    Example:
        response = checkServerStatus(ServerStatusRequest())
        response.cpu_count
        > 8
    """
    memory = psutil.virtual_memory()
    process = psutil.Process(os.getpid())
    return ServerStatusResponse(
        cpu_count=psutil.cpu_count(logical=True) or 1,
        cpu_utilization=psutil.cpu_percent(interval=None),
        memory_total_gb=memory.total / 1024**3,
        memory_utilization=memory.percent,
        process_rss_mb=process.memory_info().rss / 1024**2,
        last_update_time=datetime.now(),
    )
