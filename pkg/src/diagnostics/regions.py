from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Sequence, Tuple

from src.utils.errors import ConfigError
from src.utils.monitors import HighLevelErrors


class RegionTag(str, Enum):
    SINK_WINDOW = "SinkWindow"
    SYSTEM_USER = "SystemUser"
    TOOL_RESPONSE = "ToolResponse"
    ASSISTANT_RESPONSE = "AssistantResponse"
    FILLER = "Filler"


CONTEXT_CONTENT = (RegionTag.SYSTEM_USER, RegionTag.TOOL_RESPONSE)


@dataclass(frozen=True)
class Region:
    tag: RegionTag
    start: int
    stop: int  # exclusive

    def __post_init__(self):
        object.__setattr__(self, "tag", RegionTag(self.tag))

    @property
    def width(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class RegionMap:
    """
    Ordered, disjoint key-position ranges with semantic tags. The SinkWindow region,
    when present, is exactly positions [0, sink_window).
    """
    regions: Tuple[Region, ...]
    length: int
    sink_window: int = 5

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))

    def validate(self) -> "RegionMap":
        """
        Raises:
            ConfigError: On overlapping, out-of-range or empty regions, or a misplaced sink window.
        """
        previous_stop = 0
        for region in sorted(self.regions, key=lambda r: r.start):
            if region.start < 0 or region.stop > self.length or region.start >= region.stop:
                self._fail(f"region {region} is empty or outside [0, {self.length})")
            if region.start < previous_stop:
                self._fail(f"region {region} overlaps an earlier region ending at {previous_stop}")
            previous_stop = region.stop
            if region.tag is RegionTag.SINK_WINDOW and (region.start, region.stop) != (0, self.sink_window):
                self._fail(f"SinkWindow must be [0, {self.sink_window}), got [{region.start}, {region.stop})")
        return self

    @staticmethod
    def _fail(detail: str) -> None:
        message = f"Invalid region map: {detail}."
        HighLevelErrors.error(message)
        raise ConfigError(message)

    def covers_all(self) -> bool:
        return sum(r.width for r in self.regions) == self.length

    def tags(self) -> List[RegionTag]:
        seen: List[RegionTag] = []
        for region in self.regions:
            if region.tag not in seen:
                seen.append(region.tag)
        return seen

    def to_dict(self) -> Dict[str, Any]:
        return {"length": self.length, "sink_window": self.sink_window,
                "regions": [[r.tag.value, r.start, r.stop] for r in self.regions]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RegionMap":
        regions = tuple(Region(RegionTag(tag), int(start), int(stop)) for tag, start, stop in data["regions"])
        return cls(regions, int(data["length"]), int(data["sink_window"]))

    @classmethod
    def from_turns(cls, turns: Sequence[Tuple[RegionTag, int, int]], length: int,
                   sink_window: int) -> "RegionMap":
        """SinkWindow first, then every turn span clipped to start after the window."""
        regions = [Region(RegionTag.SINK_WINDOW, 0, min(sink_window, length))]
        for tag, start, stop in turns:
            start = max(start, sink_window)
            if start < stop:
                regions.append(Region(tag, start, stop))
        return cls(tuple(regions), length, sink_window).validate()
