"""App utilities."""
from app.utils.errors import CacheSimError, DataFormatError, InvariantViolation
from app.utils.validation import (
    ValidationError,
    parse_byte_size,
    validate_bool,
    validate_existing_path,
    validate_float,
    validate_float_list,
    validate_integer,
    validate_positive_integer
)
from app.utils.exporters import (
    success_document,
    to_json,
    write_csv,
    write_json
)

__all__ = [
    # Errors
    'CacheSimError',
    'DataFormatError',
    'InvariantViolation',
    # Validation
    'ValidationError',
    'parse_byte_size',
    'validate_bool',
    'validate_existing_path',
    'validate_float',
    'validate_float_list',
    'validate_integer',
    'validate_positive_integer',
    # Output
    'success_document',
    'to_json',
    'write_csv',
    'write_json'
]
