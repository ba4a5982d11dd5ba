"""Axis-aligned box arithmetic in pixel coordinates.

Boxes are ``(x1, y1, x2, y2)`` with ``x2 > x1`` and ``y2 > y1``. Coordinates are
real-valued so the same code scores real model predictions and grid-decoded
simulator outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class InvalidBoxError(ValueError):
    """Raised for degenerate, negative or non-finite boxes."""


class OutOfBoundsError(ValueError):
    """Raised when a box does not fit inside its image."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"non-finite box coordinates: {coords}")
        if min(coords) < 0:
            raise InvalidBoxError(f"negative box coordinates: {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidBoxError(f"degenerate box (need x2 > x1 and y2 > y1): {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class ImageDims:
    width: float
    height: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.width) and math.isfinite(self.height)):
            raise ValueError(f"non-finite image dims: {self.width}x{self.height}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image dims must be positive: {self.width}x{self.height}")


def area(box: Box) -> float:
    return box.width * box.height


def center(box: Box) -> tuple[float, float]:
    """Midpoint of the box."""
    return ((box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2)


def contains_point(box: Box, x: float, y: float) -> bool:
    """Closed-region membership: points on the boundary count as inside."""
    return box.x1 <= x <= box.x2 and box.y1 <= y <= box.y2


def intersection_area(a: Box, b: Box) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: Box, b: Box) -> float:
    """Intersection over union; edge-touching boxes have IoU 0."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (area(a) + area(b) - inter)


def within(box: Box, dims: ImageDims) -> bool:
    return box.x2 <= dims.width and box.y2 <= dims.height


def relative_box_size(box: Box, dims: ImageDims) -> float:
    """Relative box size: ``(width + height) / (image_width + image_height)``.

    Smaller values mark harder grounding targets. Raises
    :class:`OutOfBoundsError` if ``box`` does not fit in the image.
    """
    if not within(box, dims):
        raise OutOfBoundsError(f"box {box.as_tuple()} exceeds image {dims.width}x{dims.height}")
    return (box.width + box.height) / (dims.width + dims.height)
