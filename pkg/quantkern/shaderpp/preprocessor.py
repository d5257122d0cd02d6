"""
Minimal shader template preprocessor.

Supported directives, each on a line of its own::

    #define NAME value     (value defaults to 1)
    #undef NAME
    #include "path"       (relative to the template root)
    #ifdef NAME / #ifndef NAME / #else / #endif

``{{NAME}}`` sites are replaced from the caller's defines or from names the
template defined itself. Names defined with ``#define`` inside templates are
also substituted as whole tokens in code lines. Caller defines only feed
interpolation and conditionals, so tuning values never leak into identifiers.
"""
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Set, Tuple, Union

from quantkern.errors import (
    IncludeCycle,
    IncludeNotFound,
    MalformedDirective,
    UnbalancedConditional,
    UnresolvedInterpolation,
)

# Configure module logger
logger = logging.getLogger(__name__)

IDENT_RE = re.compile(r'[A-Za-z_][A-Za-z0-9_]*')
DIRECTIVE_RE = re.compile(r'#\s*([A-Za-z]+)\b\s*(.*)$')
INTERP_RE = re.compile(r'\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}')
LEFTOVER_RE = re.compile(r'\{\{(.*?)\}\}')
INCLUDE_RE = re.compile(r'"([^"]+)"$')

SHADER_ROOT = Path(__file__).resolve().parent.parent / 'shaders'


@dataclass(frozen=True)
class TemplateSource:
    """Template text plus the logical path used in diagnostics."""

    text: str
    origin: str = '<string>'


class DefineSet(dict):
    """
    Ordered caller defines, identifier to string value.

    Args:
        values: Initial name to value mapping; values are stringified
        flags: Names defined as ``"1"``
    """

    def __init__(self, values: Optional[Mapping[str, object]] = None, flags: Iterable[str] = ()):
        super().__init__()
        self.update(values or {})
        for flag in flags:
            self[flag] = '1'

    def __setitem__(self, name: str, value: object) -> None:
        if not isinstance(name, str) or not IDENT_RE.fullmatch(name):
            raise ValueError(f"Invalid define name: {name!r}")
        if isinstance(value, bool):
            value = '1' if value else '0'
        super().__setitem__(name, str(value))

    def update(self, *args, **kwargs) -> None:
        for name, value in dict(*args, **kwargs).items():
            self[name] = value

    def copy(self) -> 'DefineSet':
        return DefineSet(self)


Resolver = Callable[[str], TemplateSource]


class FileResolver:
    """
    Resolve include paths against a single template root.

    Args:
        root: Template root directory
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root).resolve()

    def __call__(self, path: str) -> TemplateSource:
        rel = PurePosixPath(path)
        if rel.is_absolute() or '..' in rel.parts:
            raise LookupError(f"Include path escapes the template root: {path}")
        full = self.root.joinpath(*rel.parts)
        if not full.is_file():
            raise LookupError(f"No template {path} under {self.root}")
        return TemplateSource(full.read_text(encoding='utf-8'), origin=str(rel))


class DictResolver:
    """Resolve include paths from an in-memory mapping (tests, generated sources)."""

    def __init__(self, sources: Mapping[str, str]):
        self.sources = dict(sources)

    def __call__(self, path: str) -> TemplateSource:
        if path not in self.sources:
            raise LookupError(path)
        return TemplateSource(self.sources[path], origin=path)


def package_resolver() -> FileResolver:
    """Resolver for the bundled ``shaders/`` tree."""
    return FileResolver(SHADER_ROOT)


def load_template(path: str, resolver: Optional[Resolver] = None) -> TemplateSource:
    return (resolver or package_resolver())(path)


def _no_includes(path: str) -> TemplateSource:
    raise LookupError(path)


def _parse_directive(line: str, location: str) -> Tuple[str, str]:
    text = line.strip()
    comment = text.find('//')
    if comment >= 0:
        text = text[:comment].rstrip()
    m = DIRECTIVE_RE.match(text)
    if not m:
        raise MalformedDirective(location, line)
    return m.group(1), m.group(2).strip()


def _single_ident(arg: str, location: str, line: str) -> str:
    if not IDENT_RE.fullmatch(arg):
        raise MalformedDirective(location, line)
    return arg


def _split_define(arg: str, location: str, line: str) -> Tuple[str, str]:
    parts = arg.split(None, 1)
    if not parts:
        raise MalformedDirective(location, line)
    name = _single_ident(parts[0], location, line)
    return name, parts[1] if len(parts) > 1 else '1'


def _include_path(arg: str, location: str, line: str) -> str:
    m = INCLUDE_RE.fullmatch(arg)
    if not m:
        raise MalformedDirective(location, line)
    return m.group(1)


@dataclass
class _Conditional:
    location: str
    parent_active: bool
    taken: bool
    in_else: bool = False

    @property
    def active(self) -> bool:
        return self.parent_active and (self.taken != self.in_else)


class _Expander:
    """One preprocessing run; holds the template-defined names and the output."""

    def __init__(self, defines: Mapping[str, str], resolver: Resolver):
        self.caller = dict(defines)
        self.local: Dict[str, str] = {}
        self.undefined: Set[str] = set()
        self.resolver = resolver
        self.stack: List[str] = []
        self.lines: List[str] = []
        self.origins: List[str] = []
        self._token_re: Optional[re.Pattern] = None

    def is_defined(self, name: str) -> bool:
        return name in self.local or (name in self.caller and name not in self.undefined)

    def lookup(self, name: str) -> Optional[str]:
        if name in self.local:
            return self.local[name]
        if name in self.caller and name not in self.undefined:
            return self.caller[name]
        return None

    def interpolate(self, text: str, location: str) -> str:
        def replace(m: re.Match) -> str:
            value = self.lookup(m.group(1))
            if value is None:
                raise UnresolvedInterpolation(m.group(1), location)
            return value

        text = INTERP_RE.sub(replace, text)
        leftover = LEFTOVER_RE.search(text)
        if leftover:
            raise UnresolvedInterpolation(leftover.group(1).strip(), location)
        return text

    def substitute(self, text: str) -> str:
        if not self.local:
            return text
        if self._token_re is None:
            names = sorted(self.local, key=len, reverse=True)
            self._token_re = re.compile(r'\b(' + '|'.join(map(re.escape, names)) + r')\b')
        return self._token_re.sub(lambda m: self.local[m.group(1)], text)

    def define(self, name: str, value: str, location: str) -> None:
        self.local[name] = self.substitute(self.interpolate(value, location))
        self.undefined.discard(name)
        self._token_re = None

    def undef(self, name: str) -> None:
        self.local.pop(name, None)
        self.undefined.add(name)
        self._token_re = None

    def run(self, src: TemplateSource) -> None:
        if src.origin in self.stack:
            raise IncludeCycle(self.stack + [src.origin])
        self.stack.append(src.origin)
        conditionals: List[_Conditional] = []

        for lineno, line in enumerate(src.text.splitlines(keepends=True), start=1):
            location = f"{src.origin}:{lineno}"
            active = not conditionals or conditionals[-1].active

            if not line.lstrip().startswith('#'):
                if active:
                    self.lines.append(self.substitute(self.interpolate(line, location)))
                    self.origins.append(location)
                continue

            if not active:
                self._track_excluded(line, location, conditionals)
                continue

            directive, arg = _parse_directive(line, location)
            if directive in ('ifdef', 'ifndef'):
                name = _single_ident(arg, location, line)
                taken = self.is_defined(name) == (directive == 'ifdef')
                conditionals.append(_Conditional(location, True, taken))
            elif directive == 'else':
                self._flip_else(conditionals, location)
            elif directive == 'endif':
                self._close(conditionals, location)
            elif directive == 'define':
                self.define(*_split_define(arg, location, line), location)
            elif directive == 'undef':
                self.undef(_single_ident(arg, location, line))
            elif directive == 'include':
                self._include(_include_path(arg, location, line), location)
            else:
                raise MalformedDirective(location, line)

        if conditionals:
            raise UnbalancedConditional(conditionals[-1].location, "conditional is never closed with #endif")
        self.stack.pop()

    def _track_excluded(self, line: str, location: str, conditionals: List[_Conditional]) -> None:
        """Inside an excluded region only nesting matters."""
        m = DIRECTIVE_RE.match(line.strip())
        directive = m.group(1) if m else ''
        if directive in ('ifdef', 'ifndef'):
            conditionals.append(_Conditional(location, False, False))
        elif directive == 'else':
            self._flip_else(conditionals, location)
        elif directive == 'endif':
            self._close(conditionals, location)

    @staticmethod
    def _flip_else(conditionals: List[_Conditional], location: str) -> None:
        if not conditionals:
            raise UnbalancedConditional(location, "#else without #ifdef")
        if conditionals[-1].in_else:
            raise UnbalancedConditional(location, "second #else for the same conditional")
        conditionals[-1].in_else = True

    @staticmethod
    def _close(conditionals: List[_Conditional], location: str) -> None:
        if not conditionals:
            raise UnbalancedConditional(location, "#endif without #ifdef")
        conditionals.pop()

    def _include(self, path: str, location: str) -> None:
        if path in self.stack:
            raise IncludeCycle(self.stack + [path])
        try:
            included = self.resolver(path)
        except LookupError:
            raise IncludeNotFound(path, location) from None
        self.run(included)


def preprocess_with_origins(
    src: TemplateSource,
    defines: Optional[Mapping[str, object]] = None,
    resolver: Optional[Resolver] = None,
) -> Tuple[str, List[str]]:
    """
    Expand a template and report where every output line came from.

    Args:
        src: Template to expand
        defines: Caller defines (``DefineSet`` or plain mapping)
        resolver: Include resolver; includes fail when omitted

    Returns:
        Output text and the ``origin:line`` of each output line
    """
    expander = _Expander(DefineSet(defines or {}), resolver or _no_includes)
    expander.run(src)
    return ''.join(expander.lines), expander.origins


def preprocess(
    src: TemplateSource,
    defines: Optional[Mapping[str, object]] = None,
    resolver: Optional[Resolver] = None,
) -> str:
    """
    Expand a template into final shader source.

    Args:
        src: Template to expand
        defines: Caller defines (``DefineSet`` or plain mapping)
        resolver: Include resolver

    Returns:
        Source with no directives and no interpolation sites left
    """
    text, _ = preprocess_with_origins(src, defines, resolver)
    return text


@dataclass(frozen=True)
class TemplateParams:
    """Names a template closure needs from its caller."""

    interpolations: FrozenSet[str] = field(default_factory=frozenset)
    flags: FrozenSet[str] = field(default_factory=frozenset)

    @property
    def names(self) -> FrozenSet[str]:
        return self.interpolations | self.flags


def scan_template(src: TemplateSource, resolver: Optional[Resolver] = None) -> TemplateParams:
    """
    Collect interpolation names and conditional flags over both arms of every
    conditional and all transitive includes, minus names the closure defines.
    """
    resolver = resolver or _no_includes
    interpolations: Set[str] = set()
    flags: Set[str] = set()
    defined: Set[str] = set()
    visited: Set[str] = set()

    def walk(source: TemplateSource, stack: List[str]) -> None:
        if source.origin in stack:
            raise IncludeCycle(stack + [source.origin])
        if source.origin in visited:
            return
        stack = stack + [source.origin]
        for lineno, line in enumerate(source.text.splitlines(), start=1):
            location = f"{source.origin}:{lineno}"
            interpolations.update(INTERP_RE.findall(line))
            if not line.lstrip().startswith('#'):
                continue
            directive, arg = _parse_directive(line, location)
            if directive in ('ifdef', 'ifndef'):
                flags.add(_single_ident(arg, location, line))
            elif directive == 'define':
                defined.add(_split_define(arg, location, line)[0])
            elif directive == 'include':
                path = _include_path(arg, location, line)
                if path in stack:
                    raise IncludeCycle(stack + [path])
                try:
                    included = resolver(path)
                except LookupError:
                    raise IncludeNotFound(path, location) from None
                walk(included, stack)
            elif directive not in ('else', 'endif', 'undef'):
                raise MalformedDirective(location, line)
        visited.add(source.origin)

    walk(src, [])
    return TemplateParams(frozenset(interpolations - defined), frozenset(flags - defined))


def scan_params(src: TemplateSource, resolver: Optional[Resolver] = None) -> FrozenSet[str]:
    """Union of required ``{{NAME}}`` interpolations and conditional flags."""
    return scan_template(src, resolver).names
