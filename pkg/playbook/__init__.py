from .cursor import CursorError, ExecutionCursor, evaluate_predicate, iter_steps, next_step
from .model import DEFAULT_MAX_DEPTH, Playbook, PlaybookError, TemplateString
from .parser import Diagnostic, PlaybookParseError, parse_playbook, parse_playbook_file
from .serializer import playbook_digest, serialize_playbook
from .template import (
    UNSET,
    TemplateError,
    UnresolvedIdentifierError,
    UnsetDynamicVariableError,
    render_template,
    resolve_variables,
)
from .validation import Finding, ValidationReport, validate
