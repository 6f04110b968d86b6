from fastapi import APIRouter

from app.core.config import settings
from app.models import ProtocolId

router = APIRouter(prefix="/utils", tags=["utils"])


@router.get("/health-check/")
def health_check() -> dict[str, str]:
    return {"status": "ok", "environment": settings.ENVIRONMENT}


@router.get("/protocols/")
def read_protocols() -> list[str]:
    """
    Protocols a run can be configured with.
    """
    return [protocol.value for protocol in ProtocolId]
