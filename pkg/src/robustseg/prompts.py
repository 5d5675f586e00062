"""Point and box prompts in pixel coordinates (x = column, y = row)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union


@dataclass(frozen=True)
class Point:
    x: int
    y: int

    kind = "point"

    def check(self, height: int, width: int) -> None:
        if not (0 <= self.x < width and 0 <= self.y < height):
            raise ValueError(f"point ({self.x}, {self.y}) outside {height}x{width} image")

    def to_list(self) -> list[int]:
        return [int(self.x), int(self.y)]


@dataclass(frozen=True)
class Box:
    """Half-open pixel box: columns ``x0 <= x < x1``, rows ``y0 <= y < y1``."""

    x0: int
    y0: int
    x1: int
    y1: int

    kind = "box"

    def check(self, height: int, width: int) -> None:
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise ValueError(f"box {self.to_list()} invalid for {height}x{width} image")

    def to_list(self) -> list[int]:
        return [int(self.x0), int(self.y0), int(self.x1), int(self.y1)]


Prompt = Union[Point, Box]
PROMPT_KINDS = ("point", "box")
