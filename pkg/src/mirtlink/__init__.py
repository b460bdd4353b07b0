"""Stocking-Lord scale linking for UIRT and compensatory MIRT mixed-format tests."""

from .linking import LinkOptions, LinkingResult, Transform, estimate_transform, transform_item, transform_theta
from .model import DichotomousItem, Family, Format, PolytomousItem, TestForm

__version__ = "0.1.0"

__all__ = ["DichotomousItem", "Family", "Format", "LinkOptions", "LinkingResult", "PolytomousItem", "TestForm",
           "Transform", "estimate_transform", "transform_item", "transform_theta"]
