"""Reading and writing embedding matrices (EMBD) and vocabularies (JSON).

EMBD layout, little-endian throughout::

    magic   4 bytes  b"EMBD"
    version u32      1
    dtype   u32      0 (float32)
    rows    u64
    dims    u64
    data    rows * dims float32, row-major

There is no padding and no trailer. Embedding matrices are handled as plain
2-D ``float32`` numpy arrays; the loader guarantees shape, dtype and
finiteness.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Union

import numpy as np

PathLike = Union[str, os.PathLike]

MAGIC = b"EMBD"
VERSION = 1
DTYPE_F32 = 0
HEADER = struct.Struct("<4sIIQQ")
HEADER_SIZE = HEADER.size  # 28 bytes

_F32 = np.dtype("<f4")


class EmbdFormatError(ValueError):
    """Raised when a file does not conform to the EMBD format."""

    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


class VocabularyError(ValueError):
    pass


def _atomic_write(path: PathLike, write) -> None:
    """Write through a temp file in the destination directory, then rename."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    _atomic_write(path, lambda fh: fh.write(text.encode("utf-8")))


def read_header(path: PathLike) -> dict:
    """Parse and validate just the EMBD header. Returns its fields as a dict."""
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
        size = os.fstat(fh.fileno()).st_size
    return _parse_header(path, raw, size)


def _parse_header(path, raw: bytes, file_size: int) -> dict:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise EmbdFormatError(path, "bad magic")
    if len(raw) < HEADER_SIZE:
        raise EmbdFormatError(path, "truncated header")
    magic, version, dtype, rows, dims = HEADER.unpack(raw)
    if version != VERSION:
        raise EmbdFormatError(path, f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise EmbdFormatError(path, f"unsupported dtype {dtype}")
    expected = HEADER_SIZE + rows * dims * _F32.itemsize
    if file_size < expected:
        raise EmbdFormatError(
            path, f"truncated payload: expected {expected} bytes, found {file_size}"
        )
    if file_size > expected:
        raise EmbdFormatError(
            path, f"trailing bytes: expected {expected} bytes, found {file_size}"
        )
    return {"version": version, "dtype": "f32", "rows": rows, "dims": dims}


def load_embeddings(path: PathLike) -> np.ndarray:
    """Load an EMBD file as a read-only ``(rows, dims)`` float32 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header = _parse_header(path, blob[:HEADER_SIZE], len(blob))
    rows, dims = header["rows"], header["dims"]
    data = np.frombuffer(blob, dtype=_F32, count=rows * dims, offset=HEADER_SIZE)
    if not np.isfinite(data).all():
        bad = int(np.flatnonzero(~np.isfinite(data))[0])
        raise EmbdFormatError(
            path, f"non-finite value at row {bad // dims}, column {bad % dims}"
        )
    matrix = data.reshape(rows, dims).astype(np.float32)
    matrix.flags.writeable = False
    return matrix


def save_embeddings(matrix: np.ndarray, path: PathLike) -> None:
    """Write a 2-D float32 array as EMBD. The write is atomic."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {matrix.shape}")
    if matrix.dtype != np.float32:
        # down-conversion is the caller's decision, never silent
        raise TypeError(f"expected float32 data, got {matrix.dtype}")
    if not np.isfinite(matrix).all():
        raise ValueError("matrix contains non-finite values")
    rows, dims = matrix.shape
    payload = np.ascontiguousarray(matrix, dtype=_F32).tobytes()

    def write(fh):
        fh.write(HEADER.pack(MAGIC, VERSION, DTYPE_F32, rows, dims))
        fh.write(payload)

    try:
        _atomic_write(path, write)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


class Vocabulary(Mapping[str, int]):
    """Bijective token-string <-> id mapping.

    Token strings are kept byte-exact: no Unicode normalization and no
    stripping of leading-space markers.
    """

    def __init__(self, entries: Mapping[str, int]):
        token_to_id: Dict[str, int] = {}
        id_to_token: Dict[int, str] = {}
        for token, idx in entries.items():
            if not isinstance(token, str):
                raise VocabularyError(f"token {token!r} is not a string")
            if isinstance(idx, bool) or not isinstance(idx, (int, np.integer)):
                raise VocabularyError(f"id for {token!r} is not an integer: {idx!r}")
            idx = int(idx)
            if idx < 0:
                raise VocabularyError(f"negative id {idx} for {token!r}")
            if idx in id_to_token:
                raise VocabularyError(
                    f"duplicate id {idx} for {id_to_token[idx]!r} and {token!r}"
                )
            token_to_id[token] = idx
            id_to_token[idx] = token
        self._token_to_id = token_to_id
        self._id_to_token = id_to_token

    def __getitem__(self, token: str) -> int:
        return self._token_to_id[token]

    def __iter__(self) -> Iterator[str]:
        return iter(self._token_to_id)

    def __len__(self) -> int:
        return len(self._token_to_id)

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)})"

    def token(self, idx: int) -> str:
        return self._id_to_token[idx]

    def get_token(self, idx: int) -> Optional[str]:
        return self._id_to_token.get(idx)

    @property
    def max_id(self) -> int:
        return max(self._id_to_token) if self._id_to_token else -1

    def check_pairing(self, matrix: np.ndarray) -> None:
        """Every id must address a row of ``matrix``."""
        if self.max_id >= matrix.shape[0]:
            raise VocabularyError(
                f"vocabulary id {self.max_id} out of range for matrix with "
                f"{matrix.shape[0]} rows"
            )


def _pairs_hook(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise VocabularyError(f"duplicate token string {key!r}")
        seen[key] = value
    return seen


def load_vocabulary(path: PathLike) -> Vocabulary:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            entries = json.load(fh, object_pairs_hook=_pairs_hook)
    except json.JSONDecodeError as exc:
        raise VocabularyError(f"{path}: malformed JSON: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise VocabularyError(f"{path}: not valid UTF-8: {exc}") from exc
    if not isinstance(entries, dict):
        raise VocabularyError(f"{path}: expected a JSON object of token -> id")
    try:
        return Vocabulary(entries)
    except VocabularyError as exc:
        raise VocabularyError(f"{path}: {exc}") from exc


def save_vocabulary(vocab: Mapping[str, int], path: PathLike) -> None:
    text = json.dumps(dict(vocab), ensure_ascii=False)
    atomic_write_text(path, text)
