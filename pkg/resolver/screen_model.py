"""
Scripted screen models for the deterministic resolver backend.

A model lists screens, each with labelled or image-referenced elements, and
transitions fired by gestures on elements. Transitions may switch the current
screen and carry filesystem effects that the sandbox GUI driver applies.

Document layout::

    resolution: [1280, 800]
    initial: desktop
    screens:
      - id: desktop
        elements:
          - {id: launcher, kind: icon, image: nautilus_taskbar.png, region: [8, 300, 48, 48]}
    transitions:
      - {screen: desktop, element: launcher, gesture: left, goto: files}
"""

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Optional, Tuple, Union

import yaml

GESTURES = ("left", "right", "double", "type", "drop")
EFFECT_KINDS = ("write", "append", "mkdir", "move", "copy", "delete", "touch")


class ResolverError(Exception):
    pass


class ScreenModelError(ResolverError):
    pass


@dataclass(frozen=True)
class Region:
    x: int
    y: int
    w: int
    h: int

    @property
    def center(self) -> Tuple[int, int]:
        return self.x + self.w // 2, self.y + self.h // 2

    def within(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.w > 0 and self.h > 0 and self.x + self.w <= width and self.y + self.h <= height

    def overlaps(self, other: "Region") -> bool:
        return self.x < other.x + other.w and other.x < self.x + self.w and self.y < other.y + other.h and other.y < self.y + self.h

    def as_list(self) -> list:
        return [self.x, self.y, self.w, self.h]


class ElementKind(str, Enum):
    ICON = "icon"
    TEXT = "text"


@dataclass(frozen=True)
class Element:
    id: str
    kind: ElementKind
    region: Region
    label: Optional[str] = None
    image: Optional[str] = None


@dataclass(frozen=True)
class Screen:
    id: str
    resolution: Tuple[int, int]
    elements: Tuple[Element, ...]

    def element(self, element_id: str) -> Optional[Element]:
        for element in self.elements:
            if element.id == element_id:
                return element
        return None


@dataclass(frozen=True)
class Effect:
    kind: str
    args: Mapping[str, str]


@dataclass(frozen=True)
class Transition:
    element: str
    gesture: str
    screen: Optional[str] = None
    onto: Optional[str] = None
    goto: Optional[str] = None
    effects: Tuple[Effect, ...] = ()


@dataclass(frozen=True)
class ScreenModel:
    screens: Mapping[str, Screen]
    initial: str
    transitions: Tuple[Transition, ...] = ()
    source: Optional[Path] = field(default=None, compare=False)

    def screen(self, screen_id: str) -> Screen:
        return self.screens[screen_id]

    def find_transition(self, screen_id: str, element_id: str, gesture: str, onto: Optional[str] = None) -> Optional[Transition]:
        for transition in self.transitions:
            if transition.screen not in (None, screen_id):
                continue
            if transition.element == element_id and transition.gesture == gesture and transition.onto == onto:
                return transition
        return None


def _region(value, where: str) -> Region:
    if not isinstance(value, (list, tuple)) or len(value) != 4 or not all(isinstance(v, int) for v in value):
        raise ScreenModelError(f"{where}: region must be [x, y, w, h] integers")
    return Region(*value)


def _effects(entries, where: str) -> Tuple[Effect, ...]:
    effects = []
    for entry in entries or ():
        if not isinstance(entry, dict) or len(entry) != 1:
            raise ScreenModelError(f"{where}: each effect is a single-key mapping")
        (kind, args), = entry.items()
        if kind not in EFFECT_KINDS:
            raise ScreenModelError(f"{where}: unknown effect '{kind}'")
        if not isinstance(args, dict):
            raise ScreenModelError(f"{where}: effect '{kind}' needs a mapping of arguments")
        effects.append(Effect(kind, MappingProxyType({k: str(v) for k, v in args.items()})))
    return tuple(effects)


def build_screen_model(document: dict, source: Optional[Path] = None) -> ScreenModel:
    """Build and check a model: regions inside the screen, unique ids, no overlapping twins."""
    if not isinstance(document, dict) or "screens" not in document:
        raise ScreenModelError("screen model needs a 'screens' list")
    default_resolution = tuple(document.get("resolution", (1920, 1080)))
    screens = {}
    for raw in document["screens"]:
        screen_id = raw["id"]
        if screen_id in screens:
            raise ScreenModelError(f"duplicate screen id '{screen_id}'")
        width, height = tuple(raw.get("resolution", default_resolution))
        elements, seen = [], set()
        for item in raw.get("elements", ()):
            where = f"screen '{screen_id}' element '{item.get('id')}'"
            if item.get("id") in seen:
                raise ScreenModelError(f"{where}: duplicate element id")
            seen.add(item["id"])
            element = Element(
                id=item["id"],
                kind=ElementKind(item.get("kind", "text")),
                region=_region(item.get("region"), where),
                label=item.get("label"),
                image=item.get("image"),
            )
            if element.kind is ElementKind.TEXT and element.label is None:
                raise ScreenModelError(f"{where}: text elements need a label")
            if element.kind is ElementKind.ICON and element.image is None:
                raise ScreenModelError(f"{where}: icon elements need an image")
            if not element.region.within(width, height):
                raise ScreenModelError(f"{where}: region {element.region.as_list()} is outside {width}x{height}")
            for other in elements:
                if (
                    other.kind is ElementKind.TEXT
                    and element.kind is ElementKind.TEXT
                    and other.label == element.label
                    and other.region.overlaps(element.region)
                ):
                    raise ScreenModelError(f"{where}: overlaps '{other.id}' with the same label")
            elements.append(element)
        screens[screen_id] = Screen(screen_id, (width, height), tuple(elements))

    initial = document.get("initial") or next(iter(screens), None)
    if initial not in screens:
        raise ScreenModelError(f"initial screen '{initial}' is not defined")

    transitions = []
    for index, raw in enumerate(document.get("transitions", ()) or ()):
        where = f"transition {index}"
        gesture = raw.get("gesture", "left")
        if gesture not in GESTURES:
            raise ScreenModelError(f"{where}: gesture must be one of {', '.join(GESTURES)}")
        for key in ("screen", "goto"):
            if raw.get(key) is not None and raw[key] not in screens:
                raise ScreenModelError(f"{where}: unknown {key} '{raw[key]}'")
        transitions.append(
            Transition(
                element=raw["element"],
                gesture=gesture,
                screen=raw.get("screen"),
                onto=raw.get("onto"),
                goto=raw.get("goto"),
                effects=_effects(raw.get("effects"), where),
            )
        )
    return ScreenModel(MappingProxyType(screens), initial, tuple(transitions), source)


def load_screen_model(source: Union[str, Path]) -> ScreenModel:
    path = Path(source)
    with open(path, "r", encoding="utf-8") as fh:
        document = yaml.safe_load(fh)
    return build_screen_model(document, path)
