"""Membrane design geometry: rings, the 6-parameter design vector, segment layout."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

DEFAULT_OUTER_RADIUS_MM = 70.0

THICKNESS_RANGE = (1.0, 3.0)
LIFT_THICKNESS_RANGE = (2.0, 3.0)
CONTACT_RADIUS_RANGE = (25.4, 38.1)
MIN_RING_HALF_WIDTH = 5.0  # outer - inner >= 10 mm


@dataclass(frozen=True)
class Ring:
    """Axisymmetric strain-limiter ring.

    center_radius is the radius at the ring centerline; half_width the
    center-to-edge distance, so outer - inner = 2 * half_width.
    """

    center_radius: float
    half_width: float

    @property
    def inner_radius(self) -> float:
        return self.center_radius - self.half_width

    @property
    def outer_radius(self) -> float:
        return self.center_radius + self.half_width

    def __post_init__(self):
        if self.half_width <= 0:
            raise ValueError(f"ring half_width must be positive, got {self.half_width}")
        if self.center_radius <= 0:
            raise ValueError(
                f"ring center_radius must be positive, got {self.center_radius}"
            )


@dataclass(frozen=True)
class MembraneDesign:
    """The 6-parameter design: contact radius, thickness, up to two rings."""

    contact_radius: float
    thickness: float
    rings: tuple[Ring, ...] = ()
    outer_radius: float = DEFAULT_OUTER_RADIUS_MM

    def __post_init__(self):
        t_lo, t_hi = THICKNESS_RANGE
        if not t_lo <= self.thickness <= t_hi:
            raise ValueError(
                f"thickness {self.thickness} outside [{t_lo}, {t_hi}] mm"
            )
        r_lo, r_hi = CONTACT_RADIUS_RANGE
        if not r_lo <= self.contact_radius <= r_hi:
            raise ValueError(
                f"contact radius {self.contact_radius} outside [{r_lo}, {r_hi}] mm"
            )
        if self.outer_radius <= self.contact_radius:
            raise ValueError("outer radius must exceed contact radius")
        if len(self.rings) > 2:
            raise ValueError("at most two rings supported")
        rings = tuple(sorted(self.rings, key=lambda rg: rg.center_radius))
        object.__setattr__(self, "rings", rings)
        prev_outer = self.contact_radius
        for ring in rings:
            if ring.inner_radius <= prev_outer:
                raise ValueError(
                    f"ring [{ring.inner_radius}, {ring.outer_radius}] overlaps "
                    f"radius {prev_outer}"
                )
            prev_outer = ring.outer_radius
        if rings and rings[-1].outer_radius >= self.outer_radius:
            raise ValueError("outermost ring extends past the membrane edge")

    def key(self) -> str:
        """Canonical design key (rings sorted by radius)."""
        parts = [f"t{self.thickness:.4f}", f"r0_{self.contact_radius:.4f}"]
        for ring in self.rings:
            parts.append(f"ring{ring.center_radius:.4f}x{ring.half_width:.4f}")
        return "|".join(parts)

    def as_vector(self) -> list[float]:
        """[thickness, contact_radius, r1_center, r1_half, r2_center, r2_half];
        absent ring slots are NaN (tabular convention)."""
        vec = [self.thickness, self.contact_radius]
        for i in range(2):
            if i < len(self.rings):
                vec.extend([self.rings[i].center_radius, self.rings[i].half_width])
            else:
                vec.extend([float("nan"), float("nan")])
        return vec


SegmentKind = Literal["silicone", "ring"]


@dataclass(frozen=True)
class Segment:
    r_inner: float
    r_outer: float
    kind: SegmentKind


def segment_layout(design: MembraneDesign) -> list[Segment]:
    """Partition [r0, rf] into contiguous silicone/ring intervals."""
    segments: list[Segment] = []
    cursor = design.contact_radius
    for ring in design.rings:
        if ring.inner_radius > cursor:
            segments.append(Segment(cursor, ring.inner_radius, "silicone"))
        segments.append(Segment(ring.inner_radius, ring.outer_radius, "ring"))
        cursor = ring.outer_radius
    if cursor < design.outer_radius:
        segments.append(Segment(cursor, design.outer_radius, "silicone"))
    return segments


@dataclass(frozen=True)
class DesignBox:
    """Bounds for design optimization and sampling."""

    thickness: tuple[float, float] = THICKNESS_RANGE
    contact_radius: tuple[float, float] = CONTACT_RADIUS_RANGE
    ring_center: tuple[float, float] = (32.0, 63.0)
    ring_half_width: tuple[float, float] = (MIN_RING_HALF_WIDTH, 8.0)
    ring_counts: tuple[int, ...] = (0, 1, 2)
    outer_radius: float = DEFAULT_OUTER_RADIUS_MM

    def __post_init__(self):
        for lo, hi in (self.thickness, self.contact_radius,
                       self.ring_center, self.ring_half_width):
            if lo > hi:
                raise ValueError(f"empty bound interval ({lo}, {hi})")
        if self.ring_half_width[0] < MIN_RING_HALF_WIDTH:
            raise ValueError("ring half width below the 5 mm fabrication minimum")
        if not all(c in (0, 1, 2) for c in self.ring_counts):
            raise ValueError("ring counts must be drawn from {0, 1, 2}")


def lift_design_box() -> DesignBox:
    """Box used for lift-design studies (thickness restricted to [2, 3] mm)."""
    return DesignBox(thickness=LIFT_THICKNESS_RANGE)


def with_rings(design: MembraneDesign, rings: tuple[Ring, ...]) -> MembraneDesign:
    return replace(design, rings=rings)
