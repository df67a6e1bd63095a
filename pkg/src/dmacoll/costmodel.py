"""Phase latency parameters for DMA offload and the copy-duration rule.

All durations are nanoseconds; throughputs are bytes per second.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from . import kvfile
from .program import CommandKind, DmaCommand

DEFAULT_CONFIG = "default_cost.cfg"


class CostModelError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    t_ctl: float = 0.0  # host: create + enqueue one command
    t_db: float = 0.0  # host: one doorbell event
    t_fetch: float = 0.0  # engine: fetch one command
    t_copy_fixed: float = 0.0  # engine: decode/translate/launch per data command
    t_sig: float = 0.0  # engine: execute an AtomicSignal
    t_obs: float = 0.0  # host: observe the first completion signal
    t_scan: float = 0.0  # host: each further pending signal slot
    t_trig: float = 0.0  # host: one trigger-slot write (prelaunch)
    t_poll_lat: float = 0.0  # engine: notice a trigger write
    t_stream_sig: float = 0.0  # producer kernel stream signal write
    t_host_fwd: float = 0.0  # host: observe stream signal, forward trigger
    engine_throughput_cap: float = float("inf")  # bytes/s per engine
    selection_tie_tolerance: float = 0.0  # relative; see sweep.best_implementation

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not v >= 0:
                raise CostModelError(f"{f.name} must be >= 0, got {v!r}")
        if not self.engine_throughput_cap > 0:
            raise CostModelError("engine_throughput_cap must be positive")

    def check_against(self, link_bandwidth: float) -> None:
        """A single flow must be able to saturate its link."""
        if self.engine_throughput_cap < link_bandwidth:
            raise CostModelError(
                f"engine_throughput_cap {self.engine_throughput_cap:g} below link bandwidth {link_bandwidth:g}"
            )

    def observation_time(self, pending_signals: int) -> float:
        """Host time from the last signal write to observing completion."""
        if pending_signals <= 0:
            return 0.0
        return self.t_obs + self.t_scan * (pending_signals - 1)

    def with_(self, **kw) -> "CostModel":
        return replace(self, **kw)

    # -- config file ---------------------------------------------------------

    def to_config(self) -> dict[str, float]:
        out = {}
        for name, val in asdict(self).items():
            out[_CONFIG_KEY[name]] = float(val)
        return out

    def dumps(self, header: str = "") -> str:
        return kvfile.dump(self.to_config(), header)

    def save(self, path: Union[str, Path], header: str = "") -> None:
        Path(path).write_text(self.dumps(header))


def _config_key(name: str) -> str:
    if name == "engine_throughput_cap":
        return "engine_throughput_cap_bytes_per_s"
    if name == "selection_tie_tolerance":
        return name
    return name + "_ns"


_CONFIG_KEY = {f.name: _config_key(f.name) for f in fields(CostModel)}
_FIELD_OF = {v: k for k, v in _CONFIG_KEY.items()}

ZERO = CostModel()


def parse_cost_model(text: str) -> CostModel:
    values = kvfile.parse(text)
    kw = {}
    for key, val in values.items():
        if key not in _FIELD_OF:
            raise CostModelError(f"unknown cost-model key {key!r}")
        if isinstance(val, str):
            raise CostModelError(f"{key} must be numeric, got {val!r}")
        kw[_FIELD_OF[key]] = float(val)
    return CostModel(**kw)


def load_cost_model(path: Union[str, Path, None] = None) -> CostModel:
    """Load a cost config; ``None`` loads the packaged calibrated defaults."""
    if path is None:
        text = resources.files("dmacoll.data").joinpath(DEFAULT_CONFIG).read_text()
        return parse_cost_model(text)
    return parse_cost_model(Path(path).read_text())


def default_cost_model() -> CostModel:
    return load_cost_model(None)


def default_config_header() -> list[str]:
    text = resources.files("dmacoll.data").joinpath(DEFAULT_CONFIG).read_text()
    return kvfile.header_comments(text)


def copy_duration(command: DmaCommand, rate: float, cost: Optional[CostModel] = None) -> float:
    """Isolated execution time (ns) of a data command at a per-flow ``rate`` (B/s).

    Broadcast and swap finish when both of their flows have moved ``size``
    bytes; with equal per-flow rates that is a single ``size / rate``.
    """
    if not rate > 0:
        raise CostModelError(f"rate must be positive, got {rate!r}")
    if not command.kind.moves_data:
        raise CostModelError(f"{command.kind.value} moves no data")
    if command.size <= 0:
        raise CostModelError("data commands must move a positive number of bytes")
    fixed = cost.t_copy_fixed if cost is not None else 0.0
    return fixed + command.size / rate * 1e9


def command_flow_count(command: DmaCommand) -> int:
    return {CommandKind.COPY: 1, CommandKind.BROADCAST: 2, CommandKind.SWAP: 2}.get(command.kind, 0)
