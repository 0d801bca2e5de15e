"""Checkpoint container: named arrays plus a JSON config, stored as ``.npz``.

Arrays are written raw (no compression, no dtype conversion) so a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..errors import DataError

_PARAM_PREFIX = "param/"
_META_KEY = "__meta__"
FORMAT_VERSION = 1


def save_checkpoint(path: str | os.PathLike, params: Mapping[str, np.ndarray], config: Mapping[str, Any],
                    seed: int | None = None, extra: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "config": dict(config),
        "seed": seed,
        "extra": dict(extra or {}),
        "shapes": {name: list(np.shape(a)) for name, a in params.items()},
        "dtypes": {name: str(np.asarray(a).dtype) for name, a in params.items()},
    }
    arrays = {_PARAM_PREFIX + name: np.asarray(a) for name, a in params.items()}
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any], int | None, dict[str, Any]]:
    """Return ``(params, config, seed, extra)``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        if _META_KEY not in npz.files:
            raise DataError(f"{path} is not a flatformer checkpoint (missing metadata)")
        meta = json.loads(npz[_META_KEY].tobytes().decode("utf-8"))
        params = {k[len(_PARAM_PREFIX):]: npz[k] for k in npz.files if k.startswith(_PARAM_PREFIX)}
    for name, shape in meta["shapes"].items():
        if list(params[name].shape) != shape:
            raise DataError(f"checkpoint {path}: shape mismatch for {name}")
    return params, meta["config"], meta.get("seed"), meta.get("extra", {})
