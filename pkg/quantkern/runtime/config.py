"""
Runtime configuration: defaults, the key/value config file and environment overrides.

File format (UTF-8)::

    # comment
    backend = host
    slot_count = 64
    matmul.TILE_K = 32

Environment variables (loaded from ``.env`` when present) take precedence
over file values.
"""
import os
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Optional

from dotenv import load_dotenv

from quantkern.errors import ConfigError
from quantkern.kernels.types import OpKind, TuningParams

# Load environment variables from .env file
load_dotenv()

# Configure module logger
logger = logging.getLogger(__name__)

BACKENDS = ('auto', 'wgpu', 'host')

ENV_BACKEND = 'QUANTKERN_BACKEND'
ENV_FORCE_PORTABLE = 'QUANTKERN_FORCE_PORTABLE'
ENV_VALIDATION = 'QUANTKERN_VALIDATION'
ENV_CONFIG = 'QUANTKERN_CONFIG'

_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off', '')


def parse_bool(text: str, where: str = 'value') -> bool:
    lowered = text.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ConfigError(f"{where}: expected a boolean, got {text!r}")


@dataclass(frozen=True)
class RuntimeConfig:
    """
    Runtime settings shared by the library, the runtime and the CLI.

    Attributes:
        backend: ``auto`` tries wgpu then falls back to the host device
        slot_bytes: Parameter arena slot size
        slot_count: Parameter arena slot count
        ops_per_pass: Dispatches per compute pass
        passes_per_submit: Compute passes per queue submission
        force_portable: Never select subgroup variants
        validation: Create the device in validation mode
        request_f16: Require shader-f16
        request_subgroups: Require subgroup operations
        request_timestamps: Require timestamp queries
        max_context: KV cache capacity in tokens
        staging_chunk_bytes: Weight streaming chunk size
        staging_in_flight: Weight streaming staging buffers
        tuning: Per-op tuning overrides, ``{op: {PARAM: value}}``
    """

    backend: str = 'auto'
    slot_bytes: int = 256
    slot_count: int = 128
    ops_per_pass: int = 32
    passes_per_submit: int = 2
    force_portable: bool = False
    validation: bool = False
    request_f16: bool = False
    request_subgroups: bool = False
    request_timestamps: bool = False
    max_context: int = 4096
    staging_chunk_bytes: int = 1 << 20
    staging_in_flight: int = 4
    tuning: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        for name in ('slot_bytes', 'slot_count', 'ops_per_pass', 'passes_per_submit', 'max_context',
                     'staging_chunk_bytes', 'staging_in_flight'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    def tuning_for(self, op: OpKind, base: Optional[TuningParams] = None) -> TuningParams:
        """Tuning parameters for ``op`` with the configured overrides applied."""
        return (base or TuningParams()).with_overrides(self.tuning.get(str(op)))

    def with_env(self) -> 'RuntimeConfig':
        """Apply the QUANTKERN_* environment overrides."""
        changes = {}
        backend = os.getenv(ENV_BACKEND)
        if backend:
            changes['backend'] = backend.strip().lower()
        portable = os.getenv(ENV_FORCE_PORTABLE)
        if portable is not None:
            changes['force_portable'] = parse_bool(portable, ENV_FORCE_PORTABLE)
        validation = os.getenv(ENV_VALIDATION)
        if validation is not None:
            changes['validation'] = parse_bool(validation, ENV_VALIDATION)
        if changes:
            logger.info(f"Environment overrides: {changes}")
        return replace(self, **changes) if changes else self


_SCALAR_FIELDS = {f.name: f for f in fields(RuntimeConfig) if f.name != 'tuning'}
_OPS = {str(op) for op in OpKind}


def _convert(name: str, raw: str, where: str):
    default = _SCALAR_FIELDS[name].default
    if isinstance(default, bool):
        return parse_bool(raw, where)
    if isinstance(default, int):
        try:
            return int(raw, 0)
        except ValueError:
            raise ConfigError(f"{where}: {name} needs an integer, got {raw!r}") from None
    return raw.strip().lower()


def parse_config(text: str, origin: str = '<config>') -> RuntimeConfig:
    """
    Parse the key/value config format.

    Args:
        text: File contents
        origin: Name used in error messages

    Returns:
        RuntimeConfig with the file's values over the defaults
    """
    values = {}
    tuning: Dict[str, Dict[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        where = f"{origin}:{lineno}"
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split('=', 1))

        if '.' in key:
            op, param = key.split('.', 1)
            if op not in _OPS or param not in TuningParams.names():
                raise ConfigError(f"{where}: unknown tuning key {key!r}")
            try:
                tuning.setdefault(op, {})[param] = int(raw, 0)
            except ValueError:
                raise ConfigError(f"{where}: {key} needs an integer, got {raw!r}") from None
        elif key in _SCALAR_FIELDS:
            values[key] = _convert(key, raw, where)
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")

    return RuntimeConfig(**values, tuning=tuning)


def load_config(path: Optional[str] = None, use_env: bool = True) -> RuntimeConfig:
    """
    Load configuration from a file (or QUANTKERN_CONFIG) plus environment overrides.

    Args:
        path: Config file path; QUANTKERN_CONFIG when omitted, defaults when neither is set
        use_env: Apply QUANTKERN_* overrides

    Returns:
        The effective configuration
    """
    path = path or os.getenv(ENV_CONFIG)
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                config = parse_config(f.read(), origin=path)
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from e
        logger.info(f"Loaded configuration from {path}")
    else:
        config = RuntimeConfig()
    return config.with_env() if use_env else config
