"""Fully connected multi-GPU node: GPUs, DMA engines, directed links."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Optional, Union

from . import kvfile

GpuId = int

DEFAULT_ENGINES_PER_GPU = 16
DEFAULT_LINK_BANDWIDTH = 64e9  # bytes/s, one direction


class EngineId(NamedTuple):
    gpu: GpuId
    index: int

    def __str__(self) -> str:
        return f"g{self.gpu}e{self.index}"


class LinkId(NamedTuple):
    src: GpuId
    dst: GpuId

    def __str__(self) -> str:
        return f"{self.src}->{self.dst}"


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class NodeTopology:
    """A single-host node where every ordered GPU pair has its own link.

    ``engine_throughput_cap`` is optional here: when left as ``None`` the
    simulator takes the calibrated value from the cost model.
    """

    gpu_count: int
    engines_per_gpu: int = DEFAULT_ENGINES_PER_GPU
    link_bandwidth: float = DEFAULT_LINK_BANDWIDTH
    engine_throughput_cap: Optional[float] = None
    host_count: int = 1

    def __post_init__(self) -> None:
        if not isinstance(self.gpu_count, int) or self.gpu_count < 2:
            raise TopologyError(f"gpu_count must be an integer >= 2, got {self.gpu_count!r}")
        if not isinstance(self.engines_per_gpu, int) or self.engines_per_gpu < 1:
            raise TopologyError(f"engines_per_gpu must be >= 1, got {self.engines_per_gpu!r}")
        if not self.link_bandwidth > 0:
            raise TopologyError(f"link_bandwidth must be positive, got {self.link_bandwidth!r}")
        if self.engine_throughput_cap is not None and not self.engine_throughput_cap > 0:
            raise TopologyError(
                f"engine_throughput_cap must be positive, got {self.engine_throughput_cap!r}"
            )
        if self.host_count != 1:
            raise TopologyError("only a single host process is modeled")

    @property
    def gpus(self) -> range:
        return range(self.gpu_count)

    @property
    def links(self) -> list[LinkId]:
        n = self.gpu_count
        return [LinkId(i, j) for i in range(n) for j in range(n) if i != j]

    def has_link(self, src: GpuId, dst: GpuId) -> bool:
        return src != dst and 0 <= src < self.gpu_count and 0 <= dst < self.gpu_count

    def egress_bandwidth(self, gpu: GpuId = 0) -> float:
        return (self.gpu_count - 1) * self.link_bandwidth

    def engines(self, gpu: GpuId) -> list[EngineId]:
        return [EngineId(gpu, k) for k in range(self.engines_per_gpu)]

    # -- config file -------------------------------------------------------

    def to_config(self) -> dict[str, kvfile.Value]:
        out: dict[str, kvfile.Value] = {
            "gpu_count": self.gpu_count,
            "engines_per_gpu": self.engines_per_gpu,
            "link_bandwidth_bytes_per_s": float(self.link_bandwidth),
        }
        if self.engine_throughput_cap is not None:
            out["engine_throughput_cap_bytes_per_s"] = float(self.engine_throughput_cap)
        return out

    def dumps(self) -> str:
        return kvfile.dump(self.to_config())

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.dumps())


_KEYMAP = {
    "gpu_count": "gpu_count",
    "engines_per_gpu": "engines_per_gpu",
    "link_bandwidth_bytes_per_s": "link_bandwidth",
    "engine_throughput_cap_bytes_per_s": "engine_throughput_cap",
}


def build_topology(gpu_count: int, overrides: Optional[Mapping[str, object]] = None) -> NodeTopology:
    """Validated fully connected topology with defaults applied.

    ``overrides`` accepts either field names or config-file keys.
    """
    kwargs: dict = {}
    for key, val in (overrides or {}).items():
        field = _KEYMAP.get(key, key)
        if field not in ("engines_per_gpu", "link_bandwidth", "engine_throughput_cap"):
            raise TopologyError(f"unknown topology parameter {key!r}")
        kwargs[field] = val
    if "link_bandwidth" in kwargs:
        kwargs["link_bandwidth"] = float(kwargs["link_bandwidth"])
    if kwargs.get("engine_throughput_cap") is not None:
        kwargs["engine_throughput_cap"] = float(kwargs["engine_throughput_cap"])
    return NodeTopology(gpu_count=gpu_count, **kwargs)


def parse_topology(text: str) -> NodeTopology:
    values = kvfile.parse(text)
    unknown = set(values) - set(_KEYMAP)
    if unknown:
        raise TopologyError(f"unknown topology keys: {sorted(unknown)}")
    if "gpu_count" not in values:
        raise TopologyError("topology file must set gpu_count")
    n = values.pop("gpu_count")
    if not isinstance(n, int):
        raise TopologyError(f"gpu_count must be an integer, got {n!r}")
    return build_topology(n, values)


def load_topology(path: Union[str, Path]) -> NodeTopology:
    return parse_topology(Path(path).read_text())
