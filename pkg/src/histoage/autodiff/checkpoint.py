from pathlib import Path

import numpy as np

from histoage.utils.container import read_container, write_container

CHECKPOINT_MAGIC = b"CDL1"


def save_checkpoint(path, arrays: dict, meta: dict) -> Path:
    """Write named float32 arrays (parameters and buffers) behind a CDL1 manifest."""
    payload = {name: np.asarray(a, dtype=np.float32) for name, a in arrays.items()}
    return write_container(path, CHECKPOINT_MAGIC, payload, meta)


def load_checkpoint(path) -> tuple[dict, dict]:
    return read_container(path, CHECKPOINT_MAGIC)
