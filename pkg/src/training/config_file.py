"""Training configuration files.

Two formats are accepted:

* ``.toml`` files, parsed with the standard library ``tomllib``
* ``key = value`` text, one setting per line, dotted keys for nesting and
  ``#`` comments::

      model.layer_dims = 32,64,64,1
      optimizer.kind = qft-lion
      optimizer.lion.lr = 0.005
      batch_size = 32

Both are validated by ``TrainConfig``; unknown keys are rejected.
"""
from pathlib import Path
from typing import Any, Dict, Tuple
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pydantic import ValidationError

from src.config import get_logger
from src.schemas import TrainConfig

logger = get_logger(__name__)


class ConfigFileError(ValueError):
    """Raised when a configuration file cannot be read or validated."""

    def __init__(self, message: str, path: str = "", line: int = None):
        self.path = path
        self.line = line
        location = f"{path}:{line}" if line is not None else path
        super().__init__(f"{location}: {message}" if location else message)


def parse_key_values(text: str, path: str = "") -> Tuple[Dict[str, Any], Dict[str, int]]:
    """Parse ``key = value`` lines into a nested dict.

    Returns:
        tuple: (nested settings, dotted key -> 1-based line number)

    Raises:
        ConfigFileError: On malformed lines, empty keys or duplicate keys
    """
    nested: Dict[str, Any] = {}
    lines: Dict[str, int] = {}

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"expected 'key = value', got '{raw.strip()}'", path, number)
        key, value = (part.strip() for part in line.split("=", 1))
        parts = key.split(".")
        if not key or any(not part for part in parts):
            raise ConfigFileError(f"invalid key '{key}'", path, number)
        if key in lines:
            raise ConfigFileError(f"duplicate key '{key}' (first set on line {lines[key]})", path, number)

        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigFileError(f"'{part}' is a value and cannot hold '{key}'", path, number)
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigFileError(f"'{key}' is a section and cannot hold a value", path, number)
        node[parts[-1]] = value
        lines[key] = number

    return nested, lines


def _line_for(loc: Tuple[Any, ...], lines: Dict[str, int]) -> int:
    """Best line number for a pydantic error location."""
    parts = [str(p) for p in loc if not isinstance(p, int)]
    while parts:
        key = ".".join(parts)
        if key in lines:
            return lines[key]
        matches = [n for k, n in lines.items() if k.startswith(key + ".")]
        if matches:
            return min(matches)
        parts.pop()
    return None


def config_from_dict(data: Dict[str, Any], path: str = "", lines: Dict[str, int] = None) -> TrainConfig:
    """Validate a nested settings dict.

    Raises:
        ConfigFileError: If validation fails; names the line when known
    """
    try:
        return TrainConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"])
        line = _line_for(first["loc"], lines or {})
        message = f"{field}: {first['msg']}" if field else first["msg"]
        if e.error_count() > 1:
            message += f" (and {e.error_count() - 1} more errors)"
        raise ConfigFileError(message, path, line) from e


def load_train_config(path: str) -> TrainConfig:
    """Load and validate a training configuration file.

    Args:
        path: ``.toml`` file or ``key = value`` text file

    Returns:
        TrainConfig: Validated configuration

    Raises:
        ConfigFileError: If the file is missing, malformed or invalid
    """
    file_path = Path(path)
    if not file_path.is_file():
        raise ConfigFileError("config file not found", str(path))
    text = file_path.read_text(encoding="utf-8")

    if file_path.suffix.lower() == ".toml":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigFileError(f"invalid TOML: {e}", str(path)) from e
        lines = {}
    else:
        data, lines = parse_key_values(text, str(path))

    config = config_from_dict(data, str(path), lines)
    logger.info("Config loaded", path=str(path), kind=config.optimizer.kind.value, dims=config.model.layer_dims)
    return config
