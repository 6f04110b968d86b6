from typing import Any

from fastapi import APIRouter, HTTPException

from app.core.errors import ConfigurationError
from app.models import PresetPublic, PresetsPublic, RunPublic, SimConfig
from app.services.experiments import PRESETS, run_single

router = APIRouter(prefix="/experiments", tags=["experiments"])


@router.post("/run", response_model=RunPublic)
def run_experiment(config: SimConfig) -> Any:
    """
    Run one configuration to its horizon and return the aggregate metrics.
    """
    try:
        return run_single(config)
    except ConfigurationError as e:
        raise HTTPException(status_code=422, detail=str(e))


@router.get("/presets", response_model=PresetsPublic)
def read_presets() -> Any:
    """
    List the built-in figure sweeps.
    """
    presets = [preset.public() for _, preset in sorted(PRESETS.items())]
    return PresetsPublic(data=presets, count=len(presets))


@router.get("/presets/{name}", response_model=PresetPublic)
def read_preset(name: str) -> Any:
    preset = PRESETS.get(name)
    if preset is None:
        raise HTTPException(status_code=404, detail="Preset not found")
    return preset.public()
