from datetime import datetime
from typing import Optional

from pydantic import BaseModel

from project.checkServerStatus_service import ServerStatusResponse, checkServerStatus


class HealthCheckResponse(BaseModel):
    """
    Liveness of the answering service, whether a checkpoint is loaded, and a host snapshot.
    """

    status: str
    timestamp: str
    message: str
    checkpoint: Optional[str] = None
    host: Optional[ServerStatusResponse] = None


def healthCheck(checkpoint: Optional[str] = None) -> HealthCheckResponse:
    """
    Reports "OK" when a checkpoint is loaded and "DEGRADED" when the service runs without one.

    Args:
        checkpoint (Optional[str]): Path of the loaded checkpoint, if any.

    Returns:
        HealthCheckResponse: Status, timestamp and host snapshot.

    Example:
        response = healthCheck("runs/heft_3_3.heft")
        # HealthCheckResponse(status='OK', timestamp='2024-10-10T10:00:00', message='Model loaded.', ...)
    """
    time_now = datetime.now().isoformat()
    try:
        host = checkServerStatus()
    except Exception as error:
        return HealthCheckResponse(
            status="ERROR",
            timestamp=time_now,
            message=f"Host check failed: {str(error)}",
            checkpoint=checkpoint,
        )
    if checkpoint is None:
        return HealthCheckResponse(
            status="DEGRADED", timestamp=time_now, message="No checkpoint loaded.", host=host
        )
    return HealthCheckResponse(
        status="OK", timestamp=time_now, message="Model loaded.", checkpoint=checkpoint, host=host
    )
