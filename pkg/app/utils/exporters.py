"""
Standardized Output Helpers.

Provides a consistent, byte-stable format for every file the commands write.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.10g'


def _plain(value: Any) -> Any:
    """Convert numpy scalars and containers to JSON-native values."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, Path):
        return str(value)
    return value


def success_document(data: Any = None, message: str = None) -> Dict[str, Any]:
    """
    Create a standardized result document.

    Args:
        data: Result data (dict, list, or any JSON-serializable value)
        message: Optional message

    Returns:
        Dict ready for write_json
    """
    document = {
        'status': 'success'
    }

    if data is not None:
        document['data'] = _plain(data)

    if message:
        document['message'] = message

    return document


def to_json(data: Any) -> str:
    """JSON with sorted keys and a trailing newline."""
    return json.dumps(_plain(data), sort_keys=True, indent=2) + '\n'


def write_json(path: Union[str, Path], data: Any) -> Path:
    """Write JSON; identical data always produces identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_json(data), encoding='utf-8')
    logger.info(f"Wrote {path}")
    return path


def write_csv(path: Union[str, Path], frame: pd.DataFrame) -> Path:
    """Write a DataFrame as CSV without the index, floats at 10 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    logger.info(f"Wrote {path} ({len(frame)} rows)")
    return path
