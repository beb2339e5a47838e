"""
JSON Serialization Utilities
Converts numpy types, dataclasses and non-finite floats to JSON-ready Python
values with 9 significant digits.
"""

import dataclasses
import json
import math
from enum import Enum
from typing import Any

import numpy as np

SIGNIFICANT_DIGITS = 9


def format_float(value: float) -> Any:
    """
    Round to SIGNIFICANT_DIGITS significant digits; non-finite values become
    the strings "nan", "inf" and "-inf".
    """
    value = float(value)
    if math.isnan(value):
        return 'nan'
    if math.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return float(f"{value:.{SIGNIFICANT_DIGITS}g}")


def convert_numpy_types(obj: Any) -> Any:
    """
    Recursively convert numpy types to Python native types for JSON serialization.

    Args:
        obj: Object that may contain numpy types, dataclasses or enums

    Returns:
        Object built from dicts, lists, str, int, float, bool and None
    """
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    elif isinstance(obj, (int, np.integer)):
        return int(obj)
    elif isinstance(obj, (float, np.floating)):
        return format_float(obj)
    elif isinstance(obj, Enum):
        return obj.value
    elif isinstance(obj, np.ndarray):
        return [convert_numpy_types(item) for item in obj.tolist()]
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {field.name: convert_numpy_types(getattr(obj, field.name)) for field in dataclasses.fields(obj)}
    elif isinstance(obj, dict):
        return {str(key): convert_numpy_types(value) for key, value in obj.items()}
    elif isinstance(obj, (list, tuple)):
        return [convert_numpy_types(item) for item in obj]
    elif isinstance(obj, set):
        return sorted(convert_numpy_types(item) for item in obj)
    else:
        return obj


def dumps(data: Any) -> str:
    """Indented JSON with insertion-ordered keys and a trailing newline."""
    return json.dumps(convert_numpy_types(data), indent=2, allow_nan=False) + '\n'
