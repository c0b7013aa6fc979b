"""One flat file holding the model profile, controller policy and cost constants."""
from __future__ import annotations

import dataclasses
from importlib import resources
from pathlib import Path

from ..config import dump_flat, from_mapping, load_flat, parse_flat, to_mapping
from ..errors import ConfigError
from .controller import ControllerConfig
from .cost import CostModel
from .simulator import ModelProfile
from .trace import TraceConfig, read_trace

_PARTS = (ModelProfile, ControllerConfig, CostModel)

BUNDLED_TRACE = "trace_10k.jsonl"
BUNDLED_CALIBRATION = "default_calibration.cfg"
# how the bundled trace was generated
BUNDLED_TRACE_CONFIG = TraceConfig(sessions=4000, session_rate=0.2, max_requests=10000)
BUNDLED_TRACE_SEED = 7


def data_path(name: str) -> Path:
    return Path(str(resources.files("dsla") / "data" / name))


def _split(values: dict[str, str], source: str):
    known = set()
    for cls in _PARTS:
        known |= {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{source}: unknown calibration keys {sorted(unknown)}")
    # bucket_edges appears in the controller only; the profile and cost model ignore it
    return tuple(from_mapping(cls, values, strict=False) for cls in _PARTS)


def load_calibration(path=None) -> tuple[ModelProfile, ControllerConfig, CostModel]:
    """Parse a calibration file; ``None`` loads the bundled default."""
    path = data_path(BUNDLED_CALIBRATION) if path is None else Path(path)
    return _split(load_flat(path), str(path))


def parse_calibration(text: str) -> tuple[ModelProfile, ControllerConfig, CostModel]:
    return _split(parse_flat(text), "<calibration>")


def calibration_text(profile: ModelProfile, controller: ControllerConfig, cost: CostModel) -> str:
    values = {}
    for part in (profile, controller, cost):
        values.update(to_mapping(part))
    return dump_flat(values)


def bundled_trace():
    return read_trace(data_path(BUNDLED_TRACE))
