from typing import Any
from unittest.mock import patch

from fastapi.testclient import TestClient

from app.core.config import settings
from app.core.errors import ConfigurationError

CONFIG: dict[str, Any] = {
    "protocol": "mcd",
    "n_items": 20,
    "seed": 3,
    "n_clients": 3,
    "rs_max": 3,
    "update_rate": 0.0,
    "horizon_cycles": 4,
}


def test_run_experiment(client: TestClient) -> None:
    response = client.post(f"{settings.API_V1_STR}/experiments/run", json=CONFIG)
    assert response.status_code == 200
    content = response.json()
    assert content["cycles"] == 4
    assert content["samples"] == 3
    summary = content["summary"]
    assert summary["protocol"] == "mcd"
    assert summary["mts_committed"] == summary["mts_total"] == 3
    assert summary["so_per_cycle"] == 42


def test_run_is_deterministic(client: TestClient) -> None:
    first = client.post(f"{settings.API_V1_STR}/experiments/run", json=CONFIG).json()
    second = client.post(f"{settings.API_V1_STR}/experiments/run", json=CONFIG).json()
    assert first == second


def test_run_rejects_unknown_keys(client: TestClient) -> None:
    response = client.post(
        f"{settings.API_V1_STR}/experiments/run", json={**CONFIG, "foo": 1}
    )
    assert response.status_code == 422


def test_run_rejects_inconsistent_config(client: TestClient) -> None:
    response = client.post(
        f"{settings.API_V1_STR}/experiments/run",
        json={**CONFIG, "protocol": "fresh", "write_prob": 0.5},
    )
    assert response.status_code == 422


def test_run_reports_configuration_errors(client: TestClient) -> None:
    error = ConfigurationError("rs_position outside the cycle", fields=["rs_position"])
    with patch("app.api.routes.experiments.run_single", side_effect=error):
        response = client.post(f"{settings.API_V1_STR}/experiments/run", json=CONFIG)
    assert response.status_code == 422
    assert "rs_position" in response.json()["detail"]


def test_read_presets(client: TestClient) -> None:
    response = client.get(f"{settings.API_V1_STR}/experiments/presets")
    assert response.status_code == 200
    content = response.json()
    assert content["count"] == 4
    assert [preset["name"] for preset in content["data"]] == ["fig2", "fig3", "fig4", "fig5"]


def test_read_preset(client: TestClient) -> None:
    response = client.get(f"{settings.API_V1_STR}/experiments/presets/fig5")
    assert response.status_code == 200
    content = response.json()
    assert content["sweep_param"] == "rs_position"
    assert content["overrides"]["rs_max"] == 1


def test_read_preset_not_found(client: TestClient) -> None:
    response = client.get(f"{settings.API_V1_STR}/experiments/presets/fig9")
    assert response.status_code == 404
    assert response.json() == {"detail": "Preset not found"}
