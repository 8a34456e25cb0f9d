from enum import Enum


class TaskKind(str, Enum):
    """Question families generated from a depth sample."""

    DISTANCE = "distance"
    PRINCIPAL_AXIS_DISTANCE = "principal_axis_distance"
    SPEED = "speed"
    TIME = "time"
    TWO_POINT_DISTANCE = "two_point_distance"
    POSE = "pose"

    @property
    def unit(self) -> str:
        return {
            TaskKind.SPEED: "m/s",
            TaskKind.TIME: "s",
        }.get(self, "m")

    @property
    def point_count(self) -> int:
        """Query pixels per question (0 for the two-image pose task)."""
        if self == TaskKind.TWO_POINT_DISTANCE:
            return 2
        if self == TaskKind.POSE:
            return 0
        return 1

    @property
    def image_count(self) -> int:
        return 2 if self == TaskKind.POSE else 1

    @classmethod
    def parse_list(cls, text: str) -> list:
        """``"distance,speed"`` -> [TaskKind.DISTANCE, TaskKind.SPEED]."""
        return [cls(part.strip()) for part in text.split(",") if part.strip()]


class PromptVariant(str, Enum):
    """How the query pixel and the expected answer are phrased."""

    MARKER_PLAIN = "marker_plain"
    MARKER_GRPO = "marker_grpo"
    TEXT_COORDINATE = "text_coordinate"
    INTRINSICS_IN_TEXT = "intrinsics_in_text"
    RAY_THEN_DEPTH = "ray_then_depth"

    @property
    def uses_markers(self) -> bool:
        return self != PromptVariant.TEXT_COORDINATE


class ParseStatus(str, Enum):
    OK = "ok"
    NO_NUMBER = "no_number"
    AMBIGUOUS = "ambiguous"
    DOMAIN = "domain"
    TRANSPORT = "transport"
