import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, List, Optional, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def to_jsonable(data: Any) -> Any:
    """Recursively convert numpy values to JSON-compatible types"""
    if isinstance(data, dict):
        return {str(k): to_jsonable(v) for k, v in data.items()}
    elif isinstance(data, (list, tuple)):
        return [to_jsonable(item) for item in data]
    elif isinstance(data, np.ndarray):
        return [to_jsonable(item) for item in data.tolist()]
    elif isinstance(data, (np.bool_, bool)):
        return bool(data)
    elif isinstance(data, np.integer):
        return int(data)
    elif isinstance(data, (np.floating, float)):
        value = float(data)
        if np.isnan(value):
            return None
        return value
    elif isinstance(data, Path):
        return str(data)
    else:
        return data


def _atomic_write(path: Path, data: Union[str, bytes]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        if isinstance(data, bytes):
            with os.fdopen(fd, "wb") as f:
                f.write(data)
        else:
            with os.fdopen(fd, "w", newline="") as f:
                f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_json(path: PathLike, data: Any) -> Path:
    path = Path(path)
    _atomic_write(path, json.dumps(to_jsonable(data), indent=2, sort_keys=True) + "\n")
    logger.debug(f"Wrote {path}")
    return path


def read_json(path: PathLike) -> Any:
    with open(path, "r") as f:
        return json.load(f)


def write_frame(path: PathLike, frame: pd.DataFrame) -> Path:
    path = Path(path)
    _atomic_write(path, frame.to_csv(index=False, float_format="%.17g"))
    logger.debug(f"Wrote {path} ({len(frame)} rows)")
    return path


def read_frame(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def write_bytes(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    _atomic_write(path, data)
    logger.debug(f"Wrote {path} ({len(data)} bytes)")
    return path


class ArtifactStore:
    """Output directory that remembers every artifact it has written"""

    def __init__(self, root: PathLike):
        self.root = Path(root)
        if not self.root.exists():
            self.root.mkdir(parents=True)
            logger.info(f"Created output directory: {self.root}")
        self.written: List[str] = []

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def write_json(self, name: str, data: Any) -> Path:
        path = write_json(self.path(name), data)
        self.written.append(str(path))
        return path

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        path = write_frame(self.path(name), frame)
        self.written.append(str(path))
        return path

    def write_bytes(self, name: str, data: bytes) -> Path:
        path = write_bytes(self.path(name), data)
        self.written.append(str(path))
        return path

    def read_json(self, name: str) -> Any:
        return read_json(self.path(name))

    def read_frame(self, name: str) -> pd.DataFrame:
        return read_frame(self.path(name))

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def relative(self, path: Optional[PathLike]) -> Optional[str]:
        if path is None:
            return None
        return os.path.relpath(path, self.root)
