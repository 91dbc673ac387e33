from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

log = logging.getLogger(__name__)

# 17 significant digits reproduce every double exactly on re-parse.
FLOAT_FORMAT = "%.17g"


def _on_replace_retry(retry_state) -> None:
    try:
        exc = retry_state.outcome.exception() if retry_state.outcome is not None else None
        log.warning("replace retry attempt=%d err=%s", retry_state.attempt_number, exc)
    except Exception:
        pass


@retry(
    retry=retry_if_exception_type(PermissionError),
    stop=stop_after_attempt(5),
    wait=wait_exponential(multiplier=0.05, min=0.05, max=2),
    before_sleep=_on_replace_retry,
    reraise=True,
)
def _replace(src: str, dst: Path) -> None:
    os.replace(src, dst)


def _write_atomic(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        _replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    return path


def df_to_csv_text(df: pd.DataFrame) -> str:
    return df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_csv_atomic(path: Path, df: pd.DataFrame) -> Path:
    return _write_atomic(path, df_to_csv_text(df))


def read_csv_exact(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def _json_default(v: Any) -> Any:
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def json_safe(obj: Any) -> Any:
    # JSON has no inf/nan literals; they are written as strings.
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not math.isfinite(float(obj)):
        return str(float(obj))
    return obj


def write_json_atomic(path: Path, obj: Any) -> Path:
    text = json.dumps(json_safe(obj), ensure_ascii=False, indent=2, default=_json_default) + "\n"
    return _write_atomic(path, text)


def write_series(directory: Path, name: str, x_label: str, x: Any, y_label: str, y: Any) -> Path:
    """Two-column plot series `<directory>/<name>.csv`."""
    df = pd.DataFrame({x_label: np.asarray(x), y_label: np.asarray(y)})
    return write_csv_atomic(Path(directory) / f"{name}.csv", df)
