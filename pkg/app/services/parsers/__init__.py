# Parsers module
from app.services.parsers.base_parser import (
    BaseParser, DataValidationError, FileFormatError, MissingFieldError, ParserError
)
from app.services.parsers.trace_parser import TraceParser

__all__ = [
    'BaseParser',
    'DataValidationError',
    'FileFormatError',
    'MissingFieldError',
    'ParserError',
    'TraceParser',
]
