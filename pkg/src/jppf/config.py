from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

# Reference resolution for the default small-stuff threshold.
REFERENCE_AREA = 1024 * 2048
REFERENCE_MIN_STUFF = 2048


@dataclass(frozen=True)
class FusionConfig:
    """Knobs shared by pre-filtering and canvas assembly.

    ``min_stuff=None`` scales the 2048-pixel reference threshold (defined at
    1024x2048) proportionally to the image area.
    """

    confidence_threshold: float = 0.5
    overlap_threshold: float = 0.5
    min_stuff: Optional[int] = None
    normalize_heads: bool = True

    def __post_init__(self):
        for name in ("confidence_threshold", "overlap_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.min_stuff is not None and self.min_stuff < 0:
            raise ValueError(f"min_stuff must be >= 0, got {self.min_stuff}")

    def min_stuff_for(self, height: int, width: int) -> int:
        if self.min_stuff is not None:
            return int(self.min_stuff)
        return int(round(REFERENCE_MIN_STUFF * height * width / REFERENCE_AREA))
