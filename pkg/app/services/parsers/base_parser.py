"""
Base Parser - Abstract base class for line-oriented input files.
"""
import json
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

from app.utils.errors import DataFormatError


class ParserError(DataFormatError):
    """Base exception for parser errors."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        self.detail = message
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FileFormatError(ParserError):
    """Invalid file format."""
    pass


class MissingFieldError(ParserError):
    """Required field missing in a record."""
    pass


class DataValidationError(ParserError):
    """Data validation failed."""
    pass


class BaseParser(ABC):
    """Abstract base class for JSON-lines parsers."""

    SUFFIXES: Tuple[str, ...] = ('.jsonl',)

    def __init__(self, file_path: Union[str, Path]):
        self.file_path = Path(file_path)
        self.errors: List[Dict[str, Any]] = []
        self.warnings: List[Dict[str, Any]] = []

        if not self.file_path.exists():
            raise FileFormatError(f"File not found: {file_path}")

        if self.file_path.suffix.lower() not in self.SUFFIXES:
            raise FileFormatError(
                f"Expected {' or '.join(self.SUFFIXES)} file, got: {self.file_path.suffix or 'no suffix'}"
            )

    @abstractmethod
    def parse(self) -> List[Any]:
        """Parse the file and return list of records."""
        pass

    @abstractmethod
    def get_header(self) -> Dict[str, Any]:
        """Return the file's header line."""
        pass

    def add_error(self, line: int, message: str, data: Any = None):
        """Add an error to the error list."""
        self.errors.append({
            'line': line,
            'message': message,
            'data': data
        })

    def add_warning(self, line: int, message: str, data: Any = None):
        """Add a warning to the warning list."""
        self.warnings.append({
            'line': line,
            'message': message,
            'data': data
        })

    def has_errors(self) -> bool:
        """Check if there were any parsing errors."""
        return len(self.errors) > 0

    def iter_json_lines(self) -> Iterator[Tuple[int, Any]]:
        """
        Yield (1-based line number, decoded JSON) for every non-blank line.

        Raises:
            FileFormatError: on undecodable text or invalid JSON
        """
        try:
            with self.file_path.open('r', encoding='utf-8') as fh:
                for number, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        yield number, json.loads(line)
                    except json.JSONDecodeError as e:
                        raise FileFormatError(f"Invalid JSON: {e.msg}", number)
        except UnicodeDecodeError as e:
            raise FileFormatError(f"File is not valid UTF-8: {e}")

    @staticmethod
    def require(data: Dict[str, Any], key: str, line: int) -> Any:
        if not isinstance(data, dict):
            raise DataValidationError("Expected a JSON object", line)
        if key not in data:
            raise MissingFieldError(f"Missing field '{key}'", line)
        return data[key]

    @staticmethod
    def parse_int(value: Any, field_name: str, line: int, min_value: int = 0) -> int:
        """Parse a non-negative integer field (booleans and floats are rejected)."""
        if isinstance(value, bool) or not isinstance(value, int):
            raise DataValidationError(f"Field '{field_name}' must be an integer, got {value!r}", line)
        if value < min_value:
            raise DataValidationError(f"Field '{field_name}' must be >= {min_value}", line)
        return value

    @staticmethod
    def parse_tokens(value: Any, field_name: str, line: int) -> Tuple[str, ...]:
        """Parse a non-empty list of token strings."""
        if not isinstance(value, list) or not value:
            raise DataValidationError(f"Field '{field_name}' must be a non-empty list", line)
        tokens = []
        for token in value:
            if not isinstance(token, str) or not token.strip():
                raise DataValidationError(f"Field '{field_name}' holds a non-string token", line)
            tokens.append(token.strip())
        return tuple(tokens)
