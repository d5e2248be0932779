from __future__ import annotations

import json
import logging
import os
import uuid
from typing import Any

import numpy as np
import pandas as pd

from ..errors import DatasetFormatError, InvalidInput
from ..shooting import TimeSeries

log = logging.getLogger(__name__)


def _temp_for(path: str) -> str:
    directory, name = os.path.split(path)
    return os.path.join(directory, f'{uuid.uuid4()}-{name}.tmp')


def write_frame(frame: pd.DataFrame, path: str) -> None:
    temp = _temp_for(path)
    frame.to_csv(temp, index=False, float_format='%.17g')

    # atomically move the file
    os.replace(temp, path)
    log.debug('Wrote %s (%d rows)', path, len(frame))


def write_json(payload: Any, path: str) -> None:
    temp = _temp_for(path)
    try:
        with open(temp, 'w', encoding='utf-8') as fp:
            json.dump(payload, fp, indent=2, sort_keys=True, default=_jsonable)
    except TypeError:
        os.remove(temp)
        raise

    os.replace(temp, path)


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f'{type(value).__name__} is not JSON serializable')


def read_series(path: str) -> TimeSeries:
    """Reads a ``t,state_0,...`` table back into a :class:`~nodeshoot.shooting.TimeSeries`."""
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise DatasetFormatError(f'dataset {path} does not exist') from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DatasetFormatError(f'dataset {path} could not be parsed: {e}') from None

    try:
        return TimeSeries.from_frame(frame)
    except InvalidInput as e:
        raise DatasetFormatError(f'dataset {path}: {e}') from None
