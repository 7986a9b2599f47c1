"""Maps a rendered target to a screen region, from a screen model or through the vision backend."""

import difflib
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Union

from scripts.visual_qa import BackendError, CvBackendClient, image_size

from .screen_model import ElementKind, Region, ResolverError, Screen

logger = logging.getLogger(__name__)

MAX_CANDIDATES = 3


class ResolutionMethod(str, Enum):
    FIXTURE = "fixture"
    ICON_MATCH = "icon_match"
    OCR = "ocr"
    COORDINATES = "coordinates"


@dataclass(frozen=True)
class Resolution:
    region: Region
    confidence: float
    method: ResolutionMethod
    ambiguous: bool = False
    element_id: Optional[str] = None

    def to_dict(self) -> dict:
        data = {
            "region": self.region.as_list(),
            "confidence": self.confidence,
            "method": self.method.value,
            "ambiguous": self.ambiguous,
        }
        if self.element_id is not None:
            data["element"] = self.element_id
        return data


class TargetNotFound(ResolverError):
    def __init__(self, message: str, candidates: Optional[List[str]] = None):
        super().__init__(message)
        self.candidates = candidates or []


def _describe(target: dict) -> str:
    (kind, value), = target.items()
    return f"{kind} {value!r}"


def best_candidates(target: dict, screen: Screen) -> List[str]:
    if "text" in target:
        labels = [e.label for e in screen.elements if e.kind is ElementKind.TEXT]
        return difflib.get_close_matches(target["text"], labels, n=MAX_CANDIDATES, cutoff=0.4)
    if "image" in target:
        images = [e.image for e in screen.elements if e.kind is ElementKind.ICON]
        return difflib.get_close_matches(target["image"], images, n=MAX_CANDIDATES, cutoff=0.4)
    return []


def _coordinates(target: dict, width: int, height: int) -> Resolution:
    point = target["coordinates"]
    x, y = int(point["x"]), int(point["y"])
    region = Region(x, y, 1, 1)
    if not region.within(width, height):
        raise TargetNotFound(f"coordinates ({x}, {y}) are outside the {width}x{height} screen")
    return Resolution(region, 1.0, ResolutionMethod.COORDINATES)


def resolve_on_model(target: dict, screen: Screen) -> Resolution:
    """Exact label or image-reference match; ties go to the top-most, then left-most element."""
    if "coordinates" in target:
        return _coordinates(target, *screen.resolution)
    if "text" in target:
        matches = [e for e in screen.elements if e.kind is ElementKind.TEXT and e.label == target["text"]]
    elif "image" in target:
        matches = [e for e in screen.elements if e.kind is ElementKind.ICON and e.image == target["image"]]
    else:
        raise ResolverError(f"unsupported target {target!r}")
    if not matches:
        raise TargetNotFound(f"{_describe(target)} not on screen '{screen.id}'", best_candidates(target, screen))
    matches.sort(key=lambda e: (e.region.y, e.region.x))
    chosen = matches[0]
    return Resolution(chosen.region, 1.0, ResolutionMethod.FIXTURE, len(matches) > 1, chosen.id)


class TargetResolver:
    """Fixture backend for screen models; external backend for screenshots."""

    def __init__(self, backend: Optional[CvBackendClient] = None):
        self.backend = backend

    def resolve(self, target: dict, screen: Union[Screen, bytes]) -> Resolution:
        if isinstance(screen, Screen):
            return resolve_on_model(target, screen)
        if isinstance(screen, (bytes, bytearray)):
            return self.external_backend_call(bytes(screen), target)
        raise TypeError("resolve() needs a Screen or screenshot bytes")

    def external_backend_call(self, screenshot: bytes, target: dict) -> Resolution:
        if "coordinates" in target:
            return _coordinates(target, *image_size(screenshot))
        if self.backend is None:
            raise BackendError("no vision backend configured")
        found = self.backend.locate(screenshot, target)
        if found is None:
            raise TargetNotFound(f"{_describe(target)} not found by the vision backend")
        region = Region(*found["region"])
        width, height = image_size(screenshot)
        if not region.within(width, height):
            raise BackendError(f"vision backend region {found['region']} is outside the {width}x{height} screenshot")
        method = ResolutionMethod.ICON_MATCH if "image" in target else ResolutionMethod.OCR
        return Resolution(region, found["confidence"], method)
