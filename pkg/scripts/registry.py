"""
Assertion registry.

Assertion functions are smolagents ``Tool`` subclasses. Each test library is
described by a YAML manifest naming the tool classes and their parameter
schemas, so third-party libraries can be registered without touching this
module. The registry is frozen after start-up and only read afterwards.
"""

import hashlib
import importlib
import inspect
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable, Dict, Iterable, Mapping, Optional, Tuple

import yaml
from smolagents import Tool

logger = logging.getLogger(__name__)

CORE_MANIFEST = Path(__file__).with_name("core_tests.yaml")


class TestStatus(str, Enum):
    __test__ = False

    PASS = "pass"
    FAIL = "fail"
    ERROR = "error"


class ErrorClass(str, Enum):
    IO = "io"
    MALFORMED_FILE = "malformed_file"
    BAD_QUERY = "bad_query"
    BAD_PARAMETER = "bad_parameter"
    UNKNOWN_FUNCTION = "unknown_function"
    PATH_CONFINEMENT = "path_confinement"
    INTERNAL = "internal"


@dataclass
class Outcome:
    """What an assertion tool returns; the registry adds names and timing."""

    status: TestStatus
    observed: Any = None
    expected: Any = None
    message: str = ""
    error_class: Optional[ErrorClass] = None

    @classmethod
    def passed(cls, message: str = "", observed: Any = None, expected: Any = None) -> "Outcome":
        return cls(TestStatus.PASS, observed, expected, message)

    @classmethod
    def failed(cls, observed: Any, expected: Any, message: str) -> "Outcome":
        return cls(TestStatus.FAIL, observed, expected, message)

    @classmethod
    def errored(cls, error_class: ErrorClass, message: str) -> "Outcome":
        return cls(TestStatus.ERROR, message=f"{error_class.value}: {message}", error_class=error_class)


@dataclass
class TestResult:
    __test__ = False

    test_name: str
    function: str
    status: TestStatus
    observed: Any = None
    expected: Any = None
    message: str = ""
    started_at: str = ""
    duration_ms: float = 0.0
    error_class: Optional[ErrorClass] = None

    def to_dict(self) -> dict:
        data = asdict(self)
        data["status"] = self.status.value
        data["error_class"] = self.error_class.value if self.error_class else None
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TestResult":
        error_class = data.get("error_class")
        return cls(
            test_name=data["test_name"],
            function=data["function"],
            status=TestStatus(data["status"]),
            observed=data.get("observed"),
            expected=data.get("expected"),
            message=data.get("message", ""),
            started_at=data.get("started_at", ""),
            duration_ms=data.get("duration_ms", 0.0),
            error_class=ErrorClass(error_class) if error_class else None,
        )


class AssertionTool(Tool):
    """Base class of read-only state checks.

    Subclasses set ``name``, ``description``, ``inputs`` and implement
    ``forward`` returning an :class:`Outcome`. Inputs listed in
    ``path_inputs`` are guest paths and get confined by the agent.
    """

    output_type = "object"
    path_inputs: Tuple[str, ...] = ()


@dataclass(frozen=True)
class AssertionDescriptor:
    name: str
    library: str
    required: Mapping[str, str]
    optional: Mapping[str, Tuple[str, Any]]
    path_parameters: frozenset = field(default_factory=frozenset)


class RegistryError(Exception):
    pass


def _load_tool_class(spec: str):
    module_name, _, class_name = spec.partition(":")
    if not class_name:
        raise RegistryError(f"tool reference '{spec}' must look like 'module:Class'")
    module = importlib.import_module(module_name)
    tool_class = getattr(module, class_name, None)
    if tool_class is None or not issubclass(tool_class, AssertionTool):
        raise RegistryError(f"'{spec}' is not an AssertionTool")
    return tool_class


def _forward_defaults(tool: Tool) -> Dict[str, Any]:
    signature = inspect.signature(tool.forward)
    return {
        name: parameter.default
        for name, parameter in signature.parameters.items()
        if parameter.default is not inspect.Parameter.empty
    }


class AssertionRegistry:
    def __init__(self):
        self._tools: Dict[str, AssertionTool] = {}
        self._descriptors: Dict[str, AssertionDescriptor] = {}
        self._manifests: list = []
        self._frozen = False

    @classmethod
    def from_manifests(cls, paths: Iterable, include_core: bool = True) -> "AssertionRegistry":
        registry = cls()
        if include_core:
            registry.load_manifest(CORE_MANIFEST)
        for path in paths:
            registry.load_manifest(path)
        registry.freeze()
        return registry

    @classmethod
    def core(cls) -> "AssertionRegistry":
        return cls.from_manifests([])

    def load_manifest(self, path) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = yaml.safe_load(fh)
        if not isinstance(manifest, dict) or "functions" not in manifest:
            raise RegistryError(f"{path}: manifest needs 'library' and 'functions'")
        library = manifest.get("library", Path(path).stem)
        for entry in manifest["functions"]:
            tool = _load_tool_class(entry["tool"])()
            if tool.name != entry["name"]:
                raise RegistryError(f"{path}: manifest name '{entry['name']}' does not match tool name '{tool.name}'")
            self.register(tool, library=library, schema=entry.get("parameters", {}))
        self._manifests.append(manifest)
        logger.debug("loaded test library '%s' from %s", library, path)

    def register(self, tool: AssertionTool, library: str = "adhoc", schema: Optional[Mapping] = None) -> None:
        if self._frozen:
            raise RegistryError("registry is frozen")
        if tool.name in self._tools:
            raise RegistryError(f"assertion '{tool.name}' is already registered")
        defaults = _forward_defaults(tool)
        required, optional = {}, {}
        for name, spec in tool.inputs.items():
            if spec.get("nullable"):
                optional[name] = (spec["type"], defaults.get(name))
            else:
                required[name] = spec["type"]
        if schema:
            for name, spec in schema.items():
                if name not in tool.inputs:
                    raise RegistryError(f"manifest declares unknown parameter '{name}' for '{tool.name}'")
                if bool(spec.get("required", False)) != (name in required):
                    raise RegistryError(f"manifest and tool disagree on whether '{tool.name}.{name}' is required")
        self._tools[tool.name] = tool
        self._descriptors[tool.name] = AssertionDescriptor(
            name=tool.name,
            library=library,
            required=MappingProxyType(required),
            optional=MappingProxyType(optional),
            path_parameters=frozenset(tool.path_inputs),
        )

    def freeze(self) -> None:
        self._frozen = True

    def __contains__(self, name: str) -> bool:
        return name in self._descriptors

    def names(self) -> list:
        return sorted(self._descriptors)

    def describe(self, name: str) -> AssertionDescriptor:
        return self._descriptors[name]

    def without(self, *names: str) -> "AssertionRegistry":
        """Copy of this registry lacking the given functions."""
        copy = AssertionRegistry()
        for name, tool in self._tools.items():
            if name not in names:
                copy._tools[name] = tool
                copy._descriptors[name] = self._descriptors[name]
        copy._manifests = list(self._manifests)
        copy.freeze()
        return copy

    def digest(self) -> str:
        canonical = json.dumps(
            {"functions": {name: asdict_descriptor(self._descriptors[name]) for name in self.names()}},
            sort_keys=True,
            separators=(",", ":"),
            default=str,
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def evaluate(
        self,
        test_name: str,
        function: str,
        parameters: Mapping[str, Any],
        resolve_path: Optional[Callable[[str], Any]] = None,
    ) -> TestResult:
        """Run one assertion. Never raises; problems become ``error`` results."""
        started_at = datetime.now(timezone.utc).isoformat()
        start = time.perf_counter()
        outcome = self._run(function, dict(parameters), resolve_path)
        return TestResult(
            test_name=test_name,
            function=function,
            status=outcome.status,
            observed=outcome.observed,
            expected=outcome.expected,
            message=outcome.message,
            started_at=started_at,
            duration_ms=round((time.perf_counter() - start) * 1000, 3),
            error_class=outcome.error_class,
        )

    def _run(self, function: str, parameters: dict, resolve_path) -> Outcome:
        if function not in self._tools:
            return Outcome.errored(ErrorClass.UNKNOWN_FUNCTION, f"no assertion named '{function}'")
        descriptor = self._descriptors[function]
        missing = [name for name in descriptor.required if name not in parameters]
        if missing:
            return Outcome.errored(ErrorClass.BAD_PARAMETER, f"missing parameter(s): {', '.join(missing)}")
        unknown = [name for name in parameters if name not in descriptor.required and name not in descriptor.optional]
        if unknown:
            return Outcome.errored(ErrorClass.BAD_PARAMETER, f"unknown parameter(s): {', '.join(unknown)}")
        if resolve_path is not None:
            for name in descriptor.path_parameters:
                if parameters.get(name) is None:
                    continue
                try:
                    parameters[name] = str(resolve_path(parameters[name]))
                except Exception as e:
                    return Outcome.errored(ErrorClass.PATH_CONFINEMENT, str(e))
        try:
            outcome = self._tools[function](**parameters)
        except Exception as e:
            logger.exception("assertion %s crashed", function)
            return Outcome.errored(ErrorClass.INTERNAL, f"{type(e).__name__}: {e}")
        if not isinstance(outcome, Outcome):
            return Outcome.errored(ErrorClass.INTERNAL, f"assertion '{function}' returned {type(outcome).__name__}")
        return outcome


def asdict_descriptor(descriptor: AssertionDescriptor) -> dict:
    return {
        "library": descriptor.library,
        "required": dict(descriptor.required),
        "optional": {name: list(spec) for name, spec in descriptor.optional.items()},
        "path_parameters": sorted(descriptor.path_parameters),
    }
