"""
Input Validation Utilities.

Provides consistent validation for run configuration files and CLI flags.
"""
import math
import re
from pathlib import Path
from typing import Any, Iterable, List, Optional


class ValidationError(Exception):
    """Custom validation error with field information."""

    def __init__(self, message: str, field: str = None):
        self.message = message
        self.field = field
        super().__init__(message)


def validate_integer(value: Any, field_name: str, min_value: int = None,
                     max_value: int = None, required: bool = True) -> Optional[int]:
    """
    Validate an integer value.

    Args:
        value: The value to validate (int or numeric string)
        field_name: Name of the field for error messages
        min_value: Minimum allowed value
        max_value: Maximum allowed value
        required: Whether the field is required

    Returns:
        Integer value or None if not required and empty

    Raises:
        ValidationError: If validation fails
    """
    if value is None or (isinstance(value, str) and not value.strip()):
        if required:
            raise ValidationError(f"{field_name} is required", field_name)
        return None

    if isinstance(value, bool):
        raise ValidationError(f"{field_name} must be a valid integer", field_name)

    try:
        if isinstance(value, str):
            int_value = int(value.strip().replace('_', ''))
        elif isinstance(value, float):
            if not value.is_integer():
                raise ValueError(value)
            int_value = int(value)
        else:
            int_value = int(value)
    except (ValueError, TypeError):
        raise ValidationError(f"{field_name} must be a valid integer", field_name)

    if min_value is not None and int_value < min_value:
        raise ValidationError(
            f"{field_name} must be at least {min_value}",
            field_name
        )

    if max_value is not None and int_value > max_value:
        raise ValidationError(
            f"{field_name} exceeds maximum value of {max_value}",
            field_name
        )

    return int_value


def validate_positive_integer(value: Any, field_name: str,
                              max_value: int = None, required: bool = True) -> Optional[int]:
    """Validate a positive integer (greater than 0)."""
    return validate_integer(value, field_name, min_value=1, max_value=max_value, required=required)


def validate_float(value: Any, field_name: str, min_value: float = None,
                   max_value: float = None, required: bool = True,
                   min_exclusive: bool = False) -> Optional[float]:
    """
    Validate a finite floating point value.

    Args:
        value: The value to validate
        field_name: Name of the field for error messages
        min_value: Minimum allowed value
        max_value: Maximum allowed value
        required: Whether the field is required
        min_exclusive: Reject values equal to min_value

    Returns:
        Float value or None if not required and empty

    Raises:
        ValidationError: If validation fails
    """
    if value is None or (isinstance(value, str) and not value.strip()):
        if required:
            raise ValidationError(f"{field_name} is required", field_name)
        return None

    try:
        float_value = float(value.strip() if isinstance(value, str) else value)
    except (ValueError, TypeError):
        raise ValidationError(f"{field_name} must be a valid number", field_name)

    if not math.isfinite(float_value):
        raise ValidationError(f"{field_name} must be finite", field_name)

    if min_value is not None:
        if float_value < min_value or (min_exclusive and float_value == min_value):
            bound = 'greater than' if min_exclusive else 'at least'
            raise ValidationError(f"{field_name} must be {bound} {min_value}", field_name)

    if max_value is not None and float_value > max_value:
        raise ValidationError(
            f"{field_name} exceeds maximum value of {max_value}",
            field_name
        )

    return float_value


def validate_float_list(value: Any, field_name: str, min_value: float = None,
                        max_value: float = None, length: int = None) -> List[float]:
    """Validate a comma-separated string or sequence of floats."""
    if isinstance(value, str):
        items = [part for part in value.split(',') if part.strip()]
    elif isinstance(value, Iterable):
        items = list(value)
    else:
        raise ValidationError(f"{field_name} must be a list of numbers", field_name)

    if not items:
        raise ValidationError(f"{field_name} must not be empty", field_name)

    if length is not None and len(items) != length:
        raise ValidationError(f"{field_name} must have exactly {length} values", field_name)

    return [validate_float(item, field_name, min_value=min_value, max_value=max_value)
            for item in items]


def validate_bool(value: Any, field_name: str) -> bool:
    """Validate a boolean written as true/false, yes/no, 1/0."""
    if isinstance(value, bool):
        return value
    normalized = str(value).strip().lower()
    if normalized in ('1', 'true', 'yes', 'on'):
        return True
    if normalized in ('0', 'false', 'no', 'off'):
        return False
    raise ValidationError(f"{field_name} must be true or false", field_name)


def validate_existing_path(value: Any, field_name: str) -> Path:
    """Validate that a path exists on disk."""
    if value is None or not str(value).strip():
        raise ValidationError(f"{field_name} is required", field_name)
    path = Path(str(value))
    if not path.exists():
        raise ValidationError(f"{field_name} does not exist: {path}", field_name)
    return path


_SIZE_PATTERN = re.compile(r'([0-9]*\.?[0-9]+)\s*([A-Z]*)')

_SIZE_SUFFIXES = {
    'B': 1,
    'KB': 10 ** 3,
    'MB': 10 ** 6,
    'GB': 10 ** 9,
    'TB': 10 ** 12,
    'KIB': 2 ** 10,
    'MIB': 2 ** 20,
    'GIB': 2 ** 30,
}


def parse_byte_size(value: Any, field_name: str) -> int:
    """
    Parse a byte count such as 13107200, '10MB' or '1.5GiB'.

    Decimal suffixes (KB, MB, GB, TB) are powers of 1000, binary ones powers of 1024.
    """
    if isinstance(value, int) and not isinstance(value, bool):
        return validate_integer(value, field_name, min_value=0)

    match = _SIZE_PATTERN.fullmatch(str(value).strip().upper().replace('_', ''))
    if not match:
        raise ValidationError(f"{field_name} must be a byte size such as 1048576 or 10MB", field_name)

    number, suffix = match.groups()
    if not suffix:
        return validate_integer(number, field_name, min_value=0)
    if suffix not in _SIZE_SUFFIXES:
        raise ValidationError(f"{field_name} has an unknown size suffix: {suffix}", field_name)
    return int(round(float(number) * _SIZE_SUFFIXES[suffix]))
