"""
GUI drivers used by the guest agent.

`SandboxGuiDriver` plays gestures against a scripted screen model and applies
the filesystem effects of the transitions they fire. `NativeGuiDriver` takes
real screenshots and injects input with pyautogui. Both share the target
lookup with its retry budget.
"""

import asyncio
import logging
import shutil
from datetime import datetime, timezone
from io import BytesIO
from typing import List, Optional, Union

import aiofiles

from playbook.template import TemplateError, render_template
from resolver.screen_model import Effect, Screen, ScreenModel, Transition
from resolver.target_resolver import Resolution, TargetNotFound, TargetResolver

from .execution_root import AgentError, ExecutionRoot

logger = logging.getLogger(__name__)

RETRY_ATTEMPTS = 5
RETRY_INTERVAL_S = 0.5

_CLICK_GESTURES = {"left": "left", "right": "right", "double": "double"}


class GuiError(AgentError):
    pass


class GuiDriver:
    def __init__(self, resolver: TargetResolver, retry_attempts: int = RETRY_ATTEMPTS, retry_interval_s: float = RETRY_INTERVAL_S):
        self.resolver = resolver
        self.retry_attempts = max(1, retry_attempts)
        self.retry_interval_s = retry_interval_s

    async def capture(self) -> Union[Screen, bytes]:
        raise NotImplementedError

    async def locate(self, target: dict) -> Resolution:
        """Resolve on a fresh capture, retrying while the target is not found."""
        last: Optional[TargetNotFound] = None
        for attempt in range(self.retry_attempts):
            screen = await self.capture()
            try:
                return await asyncio.to_thread(self.resolver.resolve, target, screen)
            except TargetNotFound as e:
                last = e
                if attempt + 1 < self.retry_attempts:
                    await asyncio.sleep(self.retry_interval_s)
        raise last

    async def perform(self, action: dict) -> dict:
        kind = action["kind"]
        if kind == "click":
            resolution = await self.locate(action["target"])
            events = await self._click(resolution, action.get("button", "left"))
            return _outcome(resolution, events)
        if kind == "type_text":
            events = await self._type(action["text"])
            return {"injected_events_count": events}
        if kind == "scroll":
            events = await self._scroll(action["direction"], int(action.get("amount", 1)))
            return {"injected_events_count": events}
        if kind == "drag_drop":
            source = await self.locate(action["from"])
            destination = await self.locate(action["to"])
            events = await self._drag(source, destination)
            outcome = _outcome(source, events)
            outcome["destination"] = destination.to_dict()
            return outcome
        raise GuiError(f"'{kind}' is not a GUI action")

    async def _click(self, resolution: Resolution, button: str) -> int:
        raise NotImplementedError

    async def _type(self, text: str) -> int:
        raise NotImplementedError

    async def _scroll(self, direction: str, amount: int) -> int:
        raise NotImplementedError

    async def _drag(self, source: Resolution, destination: Resolution) -> int:
        raise NotImplementedError


def _outcome(resolution: Resolution, events: int) -> dict:
    outcome = resolution.to_dict()
    outcome["resolved_region"] = outcome.pop("region")
    outcome["injected_events_count"] = events
    return outcome


def trash_local_time(moment: datetime) -> str:
    return moment.strftime("%Y-%m-%dT%H:%M:%S")


class SandboxGuiDriver(GuiDriver):
    def __init__(self, model: ScreenModel, root: ExecutionRoot, resolver: Optional[TargetResolver] = None, **kwargs):
        super().__init__(resolver or TargetResolver(), **kwargs)
        self.model = model
        self.root = root
        self.current = model.initial
        self.focused: Optional[str] = None
        self.typed_text = ""
        self.events: List[dict] = []

    async def capture(self) -> Screen:
        return self.model.screen(self.current)

    async def _click(self, resolution: Resolution, button: str) -> int:
        x, y = resolution.region.center
        count = 2 if button == "double" else 1
        self.events.append({"event": "click", "button": button, "x": x, "y": y, "screen": self.current})
        self.focused = resolution.element_id
        if resolution.element_id:
            await self._fire(resolution.element_id, _CLICK_GESTURES.get(button, "left"))
        return count

    async def _type(self, text: str) -> int:
        self.events.append({"event": "type", "text": text, "screen": self.current})
        self.typed_text = text
        if self.focused:
            await self._fire(self.focused, "type")
        return len(text)

    async def _scroll(self, direction: str, amount: int) -> int:
        self.events.append({"event": "scroll", "direction": direction, "amount": amount, "screen": self.current})
        return amount

    async def _drag(self, source: Resolution, destination: Resolution) -> int:
        self.events.append(
            {
                "event": "drag",
                "from": list(source.region.center),
                "to": list(destination.region.center),
                "screen": self.current,
            }
        )
        if source.element_id:
            await self._fire(source.element_id, "drop", onto=destination.element_id)
        return 3

    async def _fire(self, element_id: str, gesture: str, onto: Optional[str] = None) -> None:
        transition = self.model.find_transition(self.current, element_id, gesture, onto)
        if transition is None:
            return
        await self.apply_effects(transition)
        if transition.goto:
            logger.debug("screen %s -> %s via %s/%s", self.current, transition.goto, element_id, gesture)
            self.current = transition.goto
            self.focused = None

    async def apply_effects(self, transition: Transition) -> None:
        now = datetime.now().astimezone()
        scope = dict(self.root.sys_vars)
        scope.update(
            now_local=trash_local_time(now),
            now_utc=now.astimezone(timezone.utc).isoformat().replace("+00:00", "Z"),
            typed_text=self.typed_text,
        )
        for effect in transition.effects:
            try:
                args = {key: render_template(value, scope) for key, value in effect.args.items()}
            except TemplateError as e:
                raise GuiError(f"screen model effect '{effect.kind}': {e}") from None
            await self._apply(effect, args)

    def _path(self, args: dict, key: str):
        if key not in args:
            raise GuiError(f"effect argument '{key}' is missing")
        return self.root.resolve(args[key])

    async def _apply(self, effect: Effect, args: dict) -> None:
        kind = effect.kind
        if kind in ("write", "append"):
            path = self._path(args, "path")
            path.parent.mkdir(parents=True, exist_ok=True)
            async with aiofiles.open(path, "w" if kind == "write" else "a", encoding="utf-8") as fh:
                await fh.write(args.get("content", ""))
        elif kind == "mkdir":
            self._path(args, "path").mkdir(parents=True, exist_ok=True)
        elif kind in ("move", "copy"):
            src, dst = self._path(args, "from"), self._path(args, "to")
            dst.parent.mkdir(parents=True, exist_ok=True)
            if kind == "move":
                shutil.move(str(src), str(dst))
            elif src.is_dir():
                shutil.copytree(src, dst)
            else:
                shutil.copy2(src, dst)
        elif kind == "delete":
            path = self._path(args, "path")
            if path.is_dir() and not path.is_symlink():
                shutil.rmtree(path)
            elif path.exists() or path.is_symlink():
                path.unlink()
        elif kind == "touch":
            path = self._path(args, "path")
            path.parent.mkdir(parents=True, exist_ok=True)
            path.touch()
        else:
            raise GuiError(f"unknown effect '{kind}'")


class NativeGuiDriver(GuiDriver):
    """Real input injection. Needs a display and a vision backend on the resolver."""

    def __init__(self, resolver: TargetResolver, **kwargs):
        super().__init__(resolver, **kwargs)
        if resolver.backend is None:
            raise GuiError("native GUI mode needs a vision backend (--cv-backend)")
        try:
            import pyautogui
        except Exception as e:  # no display, missing package
            raise GuiError(f"pyautogui is unavailable: {e}") from None
        self._gui = pyautogui

    async def capture(self) -> bytes:
        image = await asyncio.to_thread(self._gui.screenshot)
        buffer = BytesIO()
        image.save(buffer, format="PNG")
        return buffer.getvalue()

    async def _click(self, resolution: Resolution, button: str) -> int:
        x, y = resolution.region.center
        if button == "double":
            await asyncio.to_thread(self._gui.doubleClick, x, y)
            return 2
        await asyncio.to_thread(self._gui.click, x, y, button=button)
        return 1

    async def _type(self, text: str) -> int:
        await asyncio.to_thread(self._gui.write, text, interval=0.02)
        return len(text)

    async def _scroll(self, direction: str, amount: int) -> int:
        if direction in ("up", "down"):
            await asyncio.to_thread(self._gui.scroll, amount if direction == "up" else -amount)
        else:
            await asyncio.to_thread(self._gui.hscroll, amount if direction == "right" else -amount)
        return amount

    async def _drag(self, source: Resolution, destination: Resolution) -> int:
        await asyncio.to_thread(self._gui.moveTo, *source.region.center)
        await asyncio.to_thread(self._gui.dragTo, *destination.region.center, duration=0.5, button="left")
        return 3

