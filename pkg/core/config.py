"""Load and validate runtime configuration from environment variables."""

from __future__ import annotations

import os
from dataclasses import dataclass

from dotenv import load_dotenv

load_dotenv()


@dataclass(frozen=True)
class SimulationConfig:
    step_limit: int = 100_000       # Deliveries before a run counts as non-quiescent
    oracle_limit: int = 1_000_000   # Candidate assignments the brute-force oracle may enumerate


@dataclass(frozen=True)
class StorageConfig:
    """Simulated durable-storage acknowledgement latency, in scheduler steps."""

    min_latency: int = 0
    max_latency: int = 2


@dataclass(frozen=True)
class MonitorConfig:
    # Recompute mode re-evaluates every processor on each ingested record.
    incremental: bool = True


@dataclass(frozen=True)
class AppConfig:
    simulation: SimulationConfig = SimulationConfig()
    storage: StorageConfig = StorageConfig()
    monitor: MonitorConfig = MonitorConfig()


def _getenv(name: str, default: str | None = None) -> str | None:
    """os.getenv wrapper that strips inline comments (e.g. '500  # note' → '500')."""
    raw = os.getenv(name, default)
    if raw is None:
        return None
    # Split on first ' #' (space-hash) to drop inline comments, then strip
    return raw.split(" #")[0].strip()


def _getint(name: str, default: int) -> int:
    value = _getenv(name)
    if not value:
        return default
    try:
        parsed = int(value)
    except ValueError:
        raise EnvironmentError(f"{name} must be an integer, got {value!r}") from None
    if parsed <= 0:
        raise EnvironmentError(f"{name} must be positive, got {parsed}")
    return parsed


def _storage_latency() -> StorageConfig:
    value = _getenv("FALKIRK_STORAGE_LATENCY")
    if not value:
        return StorageConfig()
    try:
        low, high = (int(part) for part in value.split(","))
    except ValueError:
        raise EnvironmentError(
            f"FALKIRK_STORAGE_LATENCY must be 'min,max', got {value!r}"
        ) from None
    if low < 0 or high < low:
        raise EnvironmentError(f"FALKIRK_STORAGE_LATENCY range is invalid: {value!r}")
    return StorageConfig(min_latency=low, max_latency=high)


def _monitor_mode() -> MonitorConfig:
    mode = _getenv("FALKIRK_MONITOR_MODE", "incremental")
    if mode not in ("incremental", "recompute"):
        raise EnvironmentError(
            f"FALKIRK_MONITOR_MODE must be 'incremental' or 'recompute', got {mode!r}"
        )
    return MonitorConfig(incremental=mode == "incremental")


def load_config() -> AppConfig:
    """Build AppConfig from environment. Raises EnvironmentError on malformed values."""
    return AppConfig(
        simulation=SimulationConfig(
            step_limit=_getint("FALKIRK_STEP_LIMIT", SimulationConfig.step_limit),
            oracle_limit=_getint("FALKIRK_ORACLE_LIMIT", SimulationConfig.oracle_limit),
        ),
        storage=_storage_latency(),
        monitor=_monitor_mode(),
    )
