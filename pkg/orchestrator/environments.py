"""
Environment registry and provisioning backends.

sandbox      a fresh temporary directory tree seeded from a template, served by
             an in-process guest agent over an in-memory channel
vm_snapshot  a virtual machine reverted to a clean snapshot through configured
             host commands, reached over TCP
"""

import asyncio
import hashlib
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Union

import yaml

from agents.execution_root import ExecutionRoot
from agents.gui_actions import RETRY_ATTEMPTS, RETRY_INTERVAL_S, SandboxGuiDriver
from agents.guest_agent import GuestAgent
from playbook.template import render_template
from protocol.messages import DEFAULT_PORT, ProtocolError
from protocol.session import HostSession
from protocol.transport import memory_channel_pair, open_tcp_channel
from resolver.screen_model import ElementKind, load_screen_model
from resolver.target_resolver import TargetResolver
from scripts.registry import AssertionRegistry

logger = logging.getLogger(__name__)

DEFAULT_CONNECT_TIMEOUT_S = 120.0
SANDBOX_PATH_PARAMS = ("template_tree", "screen_model", "assets")

HYPERVISOR_COMMANDS = {
    "virtualbox": {
        "revert": ["VBoxManage", "snapshot", "{{ machine_name }}", "restore", "{{ snapshot_name }}"],
        "start": ["VBoxManage", "startvm", "{{ machine_name }}", "--type", "headless"],
        "stop": ["VBoxManage", "controlvm", "{{ machine_name }}", "poweroff"],
    },
    "qemu": {
        "revert": ["virsh", "snapshot-revert", "{{ machine_name }}", "{{ snapshot_name }}"],
        "start": ["virsh", "start", "{{ machine_name }}"],
        "stop": ["virsh", "destroy", "{{ machine_name }}"],
    },
}


class OrchestratorError(Exception):
    pass


class EnvironmentRegistryError(OrchestratorError):
    pass


class ProvisioningError(OrchestratorError):
    pass


class BackendKind(str, Enum):
    SANDBOX = "sandbox"
    VM_SNAPSHOT = "vm_snapshot"


@dataclass(frozen=True)
class EnvironmentSpec:
    id: str
    backend: BackendKind
    params: Mapping = field(default_factory=dict)
    sys_vars: Mapping = field(default_factory=dict)
    description: str = ""

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "backend": self.backend.value,
            "description": self.description,
            "params": _plain(self.params),
            "sys_vars": dict(self.sys_vars),
        }


def _plain(value):
    if isinstance(value, Mapping):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def _build_spec(raw: dict, base_dir: Path) -> EnvironmentSpec:
    if not isinstance(raw, dict) or "id" not in raw:
        raise EnvironmentRegistryError("every environment needs an 'id'")
    try:
        backend = BackendKind(raw.get("backend", "sandbox"))
    except ValueError:
        raise EnvironmentRegistryError(f"environment '{raw['id']}': unknown backend {raw.get('backend')!r}") from None
    params = dict(raw.get("params") or {})
    if backend is BackendKind.SANDBOX:
        for key in SANDBOX_PATH_PARAMS:
            if params.get(key):
                params[key] = str((base_dir / params[key]).resolve())
    else:
        missing = [key for key in ("machine_name", "snapshot_name") if not params.get(key)]
        if missing:
            raise EnvironmentRegistryError(f"environment '{raw['id']}' misses {', '.join(missing)}")
    sys_vars = {str(k): str(v) for k, v in (raw.get("sys_vars") or {}).items()}
    return EnvironmentSpec(
        id=str(raw["id"]),
        backend=backend,
        params=MappingProxyType(params),
        sys_vars=MappingProxyType(sys_vars),
        description=str(raw.get("description", "")),
    )


class EnvironmentRegistry:
    def __init__(self, specs: List[EnvironmentSpec], source: Optional[Path] = None):
        self._specs: Dict[str, EnvironmentSpec] = {}
        for spec in specs:
            if spec.id in self._specs:
                raise EnvironmentRegistryError(f"duplicate environment id '{spec.id}'")
            self._specs[spec.id] = spec
        self.source = source

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EnvironmentRegistry":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as fh:
            document = yaml.safe_load(fh) or {}
        entries = document.get("environments") if isinstance(document, dict) else None
        if not isinstance(entries, list):
            raise EnvironmentRegistryError(f"{path}: expected a top-level 'environments' list")
        return cls([_build_spec(raw, path.parent) for raw in entries], path)

    def __contains__(self, env_id: str) -> bool:
        return env_id in self._specs

    def __iter__(self):
        return iter(self._specs.values())

    def __len__(self) -> int:
        return len(self._specs)

    def get(self, env_id: str) -> EnvironmentSpec:
        if env_id not in self._specs:
            raise EnvironmentRegistryError(f"unknown environment '{env_id}'")
        return self._specs[env_id]

    def sys_var_names(self, env_id: Optional[str] = None) -> set:
        specs = [self.get(env_id)] if env_id else list(self)
        return {name for spec in specs for name in spec.sys_vars}


def tree_digest(root: Union[str, Path]) -> str:
    """SHA-256 over relative paths, entry types and file contents, in sorted order."""
    root = Path(root)
    digest = hashlib.sha256()
    for directory, dirnames, filenames in os.walk(root):
        dirnames.sort()
        rel_dir = Path(directory).relative_to(root).as_posix()
        digest.update(f"d {rel_dir}\n".encode("utf-8"))
        for name in sorted(filenames):
            path = Path(directory) / name
            rel = path.relative_to(root).as_posix()
            if path.is_symlink():
                digest.update(f"l {rel} {os.readlink(path)}\n".encode("utf-8"))
                continue
            with open(path, "rb") as fh:
                digest.update(f"f {rel} {hashlib.sha256(fh.read()).hexdigest()}\n".encode("utf-8"))
    return digest.hexdigest()


class Backend:
    """prepare -> connect -> teardown. teardown is safe to call after a failed prepare."""

    def __init__(self, env: EnvironmentSpec, registry: AssertionRegistry, deadline_ms: Optional[int] = None):
        self.env = env
        self.registry = registry
        self.deadline_ms = deadline_ms
        self.clean_state_digest: Optional[str] = None
        self.sandbox_root: Optional[Path] = None
        self.session: Optional[HostSession] = None

    async def prepare(self) -> None:
        raise NotImplementedError

    async def connect(self) -> HostSession:
        raise NotImplementedError

    async def teardown(self) -> None:
        raise NotImplementedError

    async def _close_session(self) -> None:
        if self.session is not None:
            try:
                await asyncio.wait_for(self.session.close(), 10)
            except (ProtocolError, asyncio.TimeoutError, OSError) as e:
                logger.debug("closing session: %s", e)
            self.session = None


class SandboxBackend(Backend):
    def __init__(self, env: EnvironmentSpec, registry: AssertionRegistry, keep: bool = False, **kwargs):
        super().__init__(env, registry, **kwargs)
        self.keep = keep
        self._agent_task: Optional[asyncio.Task] = None

    async def prepare(self) -> None:
        self.sandbox_root = Path(os.path.realpath(tempfile.mkdtemp(prefix=f"tdf-{self.env.id}-")))
        template = self.env.params.get("template_tree")
        if template:
            if not os.path.isdir(template):
                raise ProvisioningError(f"template tree {template} does not exist")
            shutil.copytree(template, self.sandbox_root, dirs_exist_ok=True, symlinks=True)
        self.root = ExecutionRoot.sandbox(self.sandbox_root, self.env.sys_vars)
        for value in self.root.sys_vars.values():
            Path(self.root.resolve(value)).mkdir(parents=True, exist_ok=True)
        self.clean_state_digest = tree_digest(self.sandbox_root)
        logger.info("sandbox for '%s' prepared at %s", self.env.id, self.sandbox_root)

    def _driver(self) -> Optional[SandboxGuiDriver]:
        model_path = self.env.params.get("screen_model")
        if not model_path:
            return None
        model = load_screen_model(model_path)
        assets = self.env.params.get("assets")
        if assets:
            for screen in model.screens.values():
                for element in screen.elements:
                    if element.kind is ElementKind.ICON and not os.path.exists(os.path.join(assets, element.image)):
                        logger.warning("icon template %s is not in %s", element.image, assets)
        return SandboxGuiDriver(
            model,
            self.root,
            TargetResolver(),
            retry_attempts=int(self.env.params.get("retry_attempts", RETRY_ATTEMPTS)),
            retry_interval_s=float(self.env.params.get("retry_interval_ms", RETRY_INTERVAL_S * 1000)) / 1000.0,
        )

    async def connect(self) -> HostSession:
        host_end, agent_end = memory_channel_pair()
        agent = GuestAgent(self.root, self.registry, self._driver())
        self._agent_task = asyncio.create_task(agent.serve(agent_end))
        self.session = HostSession(host_end, default_deadline_ms=self.deadline_ms)
        await self.session.handshake(self.registry.digest())
        return self.session

    async def teardown(self) -> None:
        await self._close_session()
        if self._agent_task is not None:
            try:
                await asyncio.wait_for(self._agent_task, 10)
            except asyncio.TimeoutError:
                self._agent_task.cancel()
            except Exception as e:
                logger.debug("agent task ended with %s", e)
            self._agent_task = None
        if self.sandbox_root is not None and not self.keep:
            shutil.rmtree(self.sandbox_root, ignore_errors=True)
            logger.info("sandbox for '%s' removed", self.env.id)
        elif self.sandbox_root is not None:
            logger.info("sandbox for '%s' kept at %s", self.env.id, self.sandbox_root)


class VmSnapshotBackend(Backend):
    def __init__(self, env: EnvironmentSpec, registry: AssertionRegistry, **kwargs):
        super().__init__(env, registry, **kwargs)
        preset = HYPERVISOR_COMMANDS.get(env.params.get("hypervisor", "virtualbox"), {})
        self.commands = {**preset, **dict(env.params.get("commands") or {})}
        host, _, port = str(env.params.get("connect_addr", f"127.0.0.1:{DEFAULT_PORT}")).rpartition(":")
        try:
            self.host, self.port = host or "127.0.0.1", int(port or DEFAULT_PORT)
        except ValueError:
            raise ProvisioningError(f"bad connect_addr for '{env.id}': {env.params.get('connect_addr')!r}") from None
        self.connect_timeout_s = float(env.params.get("connect_timeout_s", DEFAULT_CONNECT_TIMEOUT_S))
        self._started = False

    async def _host_command(self, name: str) -> None:
        argv = self.commands.get(name)
        if not argv:
            return
        scope = {key: str(value) for key, value in self.env.params.items() if not isinstance(value, (dict, list))}
        rendered = [render_template(str(part), scope) for part in argv]
        logger.info("%s: %s", name, " ".join(rendered))
        try:
            process = await asyncio.create_subprocess_exec(
                *rendered, stdout=asyncio.subprocess.PIPE, stderr=asyncio.subprocess.PIPE
            )
        except OSError as e:
            raise ProvisioningError(f"cannot run {name} command: {e}") from None
        _, stderr = await process.communicate()
        if process.returncode != 0:
            raise ProvisioningError(f"{name} command exited {process.returncode}: {stderr.decode(errors='replace').strip()}")

    async def prepare(self) -> None:
        await self._host_command("revert")
        self.clean_state_digest = hashlib.sha256(
            f"{self.env.params['machine_name']}@{self.env.params['snapshot_name']}".encode("utf-8")
        ).hexdigest()
        await self._host_command("start")
        self._started = True

    async def connect(self) -> HostSession:
        loop = asyncio.get_running_loop()
        deadline = loop.time() + self.connect_timeout_s
        while True:
            try:
                channel = await open_tcp_channel(self.host, self.port)
                break
            except OSError as e:
                remaining = deadline - loop.time()
                if remaining <= 0:
                    raise ProvisioningError(f"agent at {self.host}:{self.port} unreachable: {e}") from None
                await asyncio.sleep(min(1.0, remaining))
        self.session = HostSession(channel, default_deadline_ms=self.deadline_ms)
        await self.session.handshake(self.registry.digest())
        return self.session

    async def teardown(self) -> None:
        await self._close_session()
        if self._started:
            try:
                await self._host_command("stop")
            except ProvisioningError as e:
                logger.warning("teardown of '%s': %s", self.env.id, e)
            self._started = False


def create_backend(env: EnvironmentSpec, registry: AssertionRegistry, keep_sandbox: bool = False, deadline_ms: Optional[int] = None) -> Backend:
    if env.backend is BackendKind.SANDBOX:
        return SandboxBackend(env, registry, keep=keep_sandbox, deadline_ms=deadline_ms)
    return VmSnapshotBackend(env, registry, deadline_ms=deadline_ms)
