"""
Checkpoint storage module for the latent VSR engine.

This module provides persistent storage for model parameters, optimizer
state and codec weights using SQLite.

A checkpoint is a single self-describing database file: a `meta` table of
JSON values (config echo, stage tag, step) and a `tensors` table holding one
row per tensor with its dtype tag, shape header and raw bytes. Round trips
are bit-exact.
"""

import os
import json
import sqlite3
import hashlib
import logging
from typing import Any, Dict, Iterable, Optional, Tuple

import numpy as np
import torch

from errors import CheckpointError

# Configure logging
logger = logging.getLogger(__name__)

CONTAINER_VERSION = 1
STAGE_TAGS = ('stage1', 'stage2', 'codec')


def get_db_connection(path: str) -> sqlite3.Connection:
    """Get a connection to a checkpoint database"""
    conn = sqlite3.connect(path)
    conn.row_factory = sqlite3.Row  # Return rows as dictionaries
    return conn


def init_db(conn: sqlite3.Connection) -> None:
    """Initialize the checkpoint schema if it doesn't exist"""
    cursor = conn.cursor()

    # Free-form metadata, one JSON value per key
    cursor.execute('''
    CREATE TABLE IF NOT EXISTS meta (
        key TEXT PRIMARY KEY,
        value_json TEXT NOT NULL
    )
    ''')

    # One row per tensor, keyed by its hierarchical name
    cursor.execute('''
    CREATE TABLE IF NOT EXISTS tensors (
        name TEXT PRIMARY KEY,
        dtype TEXT NOT NULL,
        shape_json TEXT NOT NULL,
        data BLOB NOT NULL
    )
    ''')
    conn.commit()


def _tensor_row(name: str, tensor: torch.Tensor) -> Tuple[str, str, str, bytes]:
    array = tensor.detach().cpu().contiguous().numpy()
    array = array.astype(array.dtype.newbyteorder('<'), copy=False)
    return name, array.dtype.str, json.dumps(list(array.shape)), array.tobytes()


def _row_tensor(row: sqlite3.Row) -> torch.Tensor:
    shape = json.loads(row['shape_json'])
    array = np.frombuffer(row['data'], dtype=np.dtype(row['dtype'])).reshape(shape).copy()
    return torch.from_numpy(array)


def save_checkpoint(path: str, tensors: Dict[str, torch.Tensor], meta: Dict[str, Any]) -> None:
    """
    Write a checkpoint atomically

    Parameters:
    path: Destination file (replaced if it exists)
    tensors: Named tensors to store
    meta: JSON-serializable metadata; must contain a valid 'stage' tag
    """
    stage = meta.get('stage')
    if stage not in STAGE_TAGS:
        raise CheckpointError(f"checkpoint stage tag must be one of {STAGE_TAGS}, got {stage!r}")

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    if os.path.exists(tmp_path):
        os.remove(tmp_path)

    conn = None
    try:
        conn = get_db_connection(tmp_path)
        init_db(conn)
        cursor = conn.cursor()
        full_meta = dict(meta, container_version=CONTAINER_VERSION)
        cursor.executemany(
            "INSERT INTO meta (key, value_json) VALUES (?, ?)",
            [(key, json.dumps(full_meta[key], sort_keys=True)) for key in sorted(full_meta)],
        )
        cursor.executemany(
            "INSERT INTO tensors (name, dtype, shape_json, data) VALUES (?, ?, ?, ?)",
            [_tensor_row(name, tensors[name]) for name in sorted(tensors)],
        )
        conn.commit()
    except sqlite3.Error as e:
        logger.error(f"❌ Checkpoint write failed for {path}: {e}")
        raise
    finally:
        if conn:
            conn.close()

    os.replace(tmp_path, path)
    logger.info(f"💾 Saved {stage} checkpoint with {len(tensors)} tensors: {path}")


def load_checkpoint(path: str, expected_stage: Optional[Iterable[str]] = None) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    """
    Read a checkpoint

    Parameters:
    path: Checkpoint file
    expected_stage: Optional accepted stage tags

    Returns:
    Tuple of (tensors by name, metadata)
    """
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")

    conn = None
    try:
        conn = get_db_connection(path)
        cursor = conn.cursor()
        meta = {row['key']: json.loads(row['value_json'])
                for row in cursor.execute("SELECT key, value_json FROM meta")}
        tensors = {row['name']: _row_tensor(row)
                   for row in cursor.execute("SELECT name, dtype, shape_json, data FROM tensors")}
    except sqlite3.DatabaseError as e:
        raise CheckpointError(f"{path} is not a readable checkpoint: {e}") from e
    finally:
        if conn:
            conn.close()

    if meta.get('container_version') != CONTAINER_VERSION:
        raise CheckpointError(f"{path} has unsupported container version {meta.get('container_version')}")
    if expected_stage is not None and meta.get('stage') not in tuple(expected_stage):
        raise CheckpointError(
            f"{path} is tagged {meta.get('stage')!r}, expected one of {tuple(expected_stage)}"
        )
    return tensors, meta


def state_checksum(named_tensors: Iterable[Tuple[str, torch.Tensor]]) -> str:
    """SHA-256 over names, dtypes, shapes and raw bytes, in name order"""
    digest = hashlib.sha256()
    for name, tensor in sorted(named_tensors, key=lambda item: item[0]):
        _, dtype, shape, data = _tensor_row(name, tensor)
        digest.update(name.encode())
        digest.update(dtype.encode())
        digest.update(shape.encode())
        digest.update(data)
    return digest.hexdigest()
