"""
Trace Parser

File format:
- JSON lines (.jsonl), UTF-8
- Line 1: header {"format": "latent-cache-trace", "version": 1, "spec": {...}}
- Every further line: one request
    {"prompt": int, "arrival": int, "object_tokens": [str], "background_tokens": [str],
     "whole_tokens": [str], "latent_seed": int, "template": [int, int]}
- whole_tokens is optional; when present it must equal object_tokens | background_tokens
- arrivals must not decrease and prompts must be unique
"""
import logging
from typing import Any, Dict, List, Optional

from app.models import TraceRecord
from app.services.parsers.base_parser import (
    BaseParser, DataValidationError, FileFormatError, MissingFieldError
)
from app.services.workload import TRACE_FORMAT, TRACE_VERSION, Trace, TraceSpec
from app.utils.validation import ValidationError

logger = logging.getLogger(__name__)


class TraceParser(BaseParser):
    """Parser for trace JSONL files."""

    REQUIRED_FIELDS = ['prompt', 'arrival', 'object_tokens', 'background_tokens', 'latent_seed']
    OPTIONAL_FIELDS = ['whole_tokens', 'template']

    def __init__(self, file_path):
        super().__init__(file_path)
        self._header: Optional[Dict[str, Any]] = None

    def get_header(self) -> Dict[str, Any]:
        if self._header is None:
            for line, data in self.iter_json_lines():
                self._header = self._check_header(data, line)
                break
            else:
                raise FileFormatError("Trace file is empty")
        return self._header

    @staticmethod
    def _check_header(data: Any, line: int) -> Dict[str, Any]:
        if not isinstance(data, dict) or data.get('format') != TRACE_FORMAT:
            raise FileFormatError(f"Missing '{TRACE_FORMAT}' header", line)
        if data.get('version') != TRACE_VERSION:
            raise FileFormatError(f"Unsupported trace version {data.get('version')!r}", line)
        return data

    def parse_record(self, data: Dict[str, Any], line: int) -> TraceRecord:
        values = {name: self.require(data, name, line) for name in self.REQUIRED_FIELDS}
        template = data.get('template', [0, 0])
        if (not isinstance(template, list) or len(template) != 2
                or any(isinstance(t, bool) or not isinstance(t, int) for t in template)):
            raise DataValidationError("Field 'template' must be a pair of integers", line)

        record = TraceRecord(
            prompt=self.parse_int(values['prompt'], 'prompt', line),
            arrival=self.parse_int(values['arrival'], 'arrival', line),
            object_tokens=self.parse_tokens(values['object_tokens'], 'object_tokens', line),
            background_tokens=self.parse_tokens(values['background_tokens'],
                                                'background_tokens', line),
            latent_seed=self.parse_int(values['latent_seed'], 'latent_seed', line),
            template=(template[0], template[1]),
        )
        if 'whole_tokens' in data:
            whole = self.parse_tokens(data['whole_tokens'], 'whole_tokens', line)
            if tuple(sorted(set(whole))) != record.whole_tokens:
                raise DataValidationError(
                    "Field 'whole_tokens' is not the union of object and background tokens", line)
        return record

    def parse(self) -> List[TraceRecord]:
        """
        Parse every record; problems are collected in self.errors instead of raised.

        Invalid JSON and a bad header still raise immediately.
        """
        records: List[TraceRecord] = []
        seen_prompts = set()
        last_arrival = -1
        header_seen = False

        for line, data in self.iter_json_lines():
            if not header_seen:
                self._header = self._check_header(data, line)
                header_seen = True
                continue
            try:
                record = self.parse_record(data, line)
            except (DataValidationError, MissingFieldError) as e:
                self.add_error(line, e.detail, data)
                continue
            if record.prompt in seen_prompts:
                self.add_error(line, f"Duplicate prompt {record.prompt}", data)
                continue
            if record.arrival < last_arrival:
                self.add_error(line, f"Arrival {record.arrival} precedes {last_arrival}", data)
                continue
            unknown = sorted(set(data) - set(self.REQUIRED_FIELDS) - set(self.OPTIONAL_FIELDS))
            if unknown:
                self.add_warning(line, f"Ignored unknown fields: {', '.join(unknown)}", data)
            seen_prompts.add(record.prompt)
            last_arrival = record.arrival
            records.append(record)

        if not header_seen:
            raise FileFormatError("Trace file is empty")
        return records

    def spec(self) -> TraceSpec:
        raw = self.get_header().get('spec')
        if not isinstance(raw, dict):
            raise FileFormatError("Trace header has no spec", 1)
        try:
            return TraceSpec(**raw)
        except (TypeError, ValidationError) as e:
            raise FileFormatError(f"Invalid trace spec: {e}", 1)

    def read(self) -> Trace:
        """
        Parse the whole file.

        Raises:
            ParserError: the first collected error, with its line number
        """
        records = self.parse()
        if self.has_errors():
            first = self.errors[0]
            logger.error(f"{len(self.errors)} invalid records in {self.file_path}")
            raise DataValidationError(first['message'], first['line'])
        if self.warnings:
            logger.warning(f"{len(self.warnings)} records in {self.file_path} carry unknown "
                           f"fields (first on line {self.warnings[0]['line']})")
        trace = Trace(spec=self.spec(), records=tuple(records))
        logger.info(f"Read {len(trace)} requests from {self.file_path}")
        return trace
