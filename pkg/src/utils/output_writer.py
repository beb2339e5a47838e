"""
Output Writer
Writes result tables (CSV through pandas) and reports (JSON) into the run's
output directory.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd

from src.utils.errors import ConfigurationError
from src.utils.json_serializer import SIGNIFICANT_DIGITS, dumps

logger = logging.getLogger(__name__)

FLOAT_FORMAT = f"%.{SIGNIFICANT_DIGITS}g"


def write_csv(
    path: Union[str, Path],
    rows: Union[pd.DataFrame, Sequence[Dict[str, Any]]],
    columns: Optional[Sequence[str]] = None,
) -> Path:
    """
    Write rows with a header, 9 significant digits and "nan" for missing values.

    Args:
        path: destination file; parent directories are created
        rows: DataFrame or list of row dicts
        columns: column order (required when rows is an empty list)

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=columns)
    if columns is not None:
        frame = frame[list(columns)]
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep='nan', lineterminator='\n')
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def write_json(path: Union[str, Path], data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(data))
    logger.info(f"Wrote {path}")
    return path


def read_path_csv(path: Union[str, Path], columns: List[str]) -> pd.DataFrame:
    """Read a CSV and keep the requested columns as floats."""
    frame = pd.read_csv(path)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ConfigurationError(f"{path} is missing columns {missing}")
    return frame[columns].astype(float)
