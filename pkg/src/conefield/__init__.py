"""Conformal flat cone-point metrics and cross-field geodesics on planar domains."""

from .field import ConePoint, HarmonicClosedForm, JunctionCharge, PhiField
from .geometry import (
    ArcSegment,
    BoundaryLoop,
    DomainSpec,
    JunctionInfo,
    LineSegment,
    PolylineSegment,
    curvature_at,
    junction_angles,
    validate_domain,
)

__all__ = [
    "ArcSegment",
    "BoundaryLoop",
    "ConePoint",
    "DomainSpec",
    "HarmonicClosedForm",
    "JunctionCharge",
    "JunctionInfo",
    "LineSegment",
    "PhiField",
    "PolylineSegment",
    "curvature_at",
    "junction_angles",
    "validate_domain",
]

__version__ = "0.1.0"
