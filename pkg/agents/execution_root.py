import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Mapping, Optional, Set, Union

import yaml

logger = logging.getLogger(__name__)

# Variables passed through to sandboxed commands; everything else is dropped.
ENV_ALLOWLIST = ("LANG", "LC_ALL", "TZ")
SANDBOX_PATH = "/usr/local/bin:/usr/bin:/bin"


class AgentError(Exception):
    pass


class PathConfinementError(AgentError):
    pass


class RootMode(str, Enum):
    NATIVE = "native"
    SANDBOX = "sandbox"


@dataclass
class ExecutionRoot:
    mode: RootMode
    root_path: Optional[Path] = None
    sys_vars: Dict[str, str] = field(default_factory=dict)
    touched: Set[str] = field(default_factory=set)

    def __post_init__(self):
        if self.mode is RootMode.SANDBOX:
            if self.root_path is None:
                raise AgentError("sandbox mode needs a root path")
            self.root_path = Path(os.path.realpath(self.root_path))
            if not self.root_path.is_dir():
                raise AgentError(f"sandbox root {self.root_path} is not a directory")

    @classmethod
    def sandbox(cls, root_path: Union[str, Path], sys_vars: Optional[Mapping[str, str]] = None) -> "ExecutionRoot":
        """Sandbox root; relative system-variable values are joined to the root."""
        root = Path(os.path.realpath(root_path))
        resolved = {}
        for name, value in (sys_vars or {}).items():
            value = str(value)
            resolved[name] = value if os.path.isabs(value) else str(root / value)
        return cls(RootMode.SANDBOX, root, resolved)

    @classmethod
    def native(cls, sys_vars: Optional[Mapping[str, str]] = None) -> "ExecutionRoot":
        return cls(RootMode.NATIVE, None, {k: str(v) for k, v in (sys_vars or {}).items()})

    @property
    def path_family(self) -> str:
        return "windows" if os.name == "nt" else "posix"

    def resolve(self, path: Union[str, Path]) -> Path:
        """Normalize a guest path; in sandbox mode reject anything outside the root."""
        if self.mode is RootMode.NATIVE:
            return Path(os.path.abspath(path))
        candidate = Path(path)
        if not candidate.is_absolute():
            candidate = self.root_path / candidate
        # realpath follows symlinks on the existing prefix, so links cannot escape either
        normalized = Path(os.path.realpath(candidate))
        if normalized != self.root_path and not normalized.is_relative_to(self.root_path):
            raise PathConfinementError(f"path {path} escapes the sandbox root")
        return normalized

    def command_env(self) -> Dict[str, str]:
        if self.mode is RootMode.NATIVE:
            return dict(os.environ)
        env = {name: os.environ[name] for name in ENV_ALLOWLIST if name in os.environ}
        env["PATH"] = SANDBOX_PATH
        env["HOME"] = str(self.root_path)
        return env

    @property
    def cwd(self) -> Optional[str]:
        return str(self.root_path) if self.root_path else None

    def record_touch(self, path: Path) -> None:
        self.touched.add(str(path))


def load_sys_vars(path: Union[str, Path]) -> Dict[str, str]:
    """Flat name -> path mapping from a YAML document."""
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise AgentError(f"{path}: system variables must be a flat mapping")
    return {str(k): str(v) for k, v in data.items()}
