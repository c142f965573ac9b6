"""Flat-text tensor records.

A tensor travels as a single string, ``shape: d0 d1 ... ; data: v0 v1 ...``,
with scalars printed at 17 significant digits so a float64 survives the
round trip bit-exactly.  These records are what the model JSON embeds.
"""

import numpy as np


class TensorRecordError(ValueError):
    """Malformed flat-text tensor record."""


def format_tensor(arr):
    """Serialize a float64 array to its flat text record."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 0:
        raise TensorRecordError("tensor records require at least one dimension")
    shape = " ".join(str(int(d)) for d in arr.shape)
    data = " ".join("%.17g" % v for v in arr.reshape(-1))
    return f"shape: {shape} ; data: {data}"


def parse_tensor(text):
    """Parse a flat text record back into a float64 array.

    Raises :class:`TensorRecordError` on any structural problem: missing
    sections, non-integer dims, element-count mismatch, non-finite scalars.
    """
    if not isinstance(text, str):
        raise TensorRecordError(f"tensor record must be a string, got {type(text).__name__}")
    parts = text.split(";")
    if len(parts) != 2:
        raise TensorRecordError("tensor record must have exactly one ';' separator")
    shape_part, data_part = parts[0].strip(), parts[1].strip()
    if not shape_part.startswith("shape:"):
        raise TensorRecordError("tensor record must start with 'shape:'")
    if not data_part.startswith("data:"):
        raise TensorRecordError("tensor record data section must start with 'data:'")
    shape_tokens = shape_part[len("shape:"):].split()
    data_tokens = data_part[len("data:"):].split()
    if not shape_tokens:
        raise TensorRecordError("tensor record has an empty shape")
    try:
        shape = tuple(int(t) for t in shape_tokens)
    except ValueError as exc:
        raise TensorRecordError(f"non-integer dimension in shape: {exc}") from None
    if any(d <= 0 for d in shape):
        raise TensorRecordError(f"dimensions must be positive, got {shape}")
    expected = int(np.prod(shape))
    if len(data_tokens) != expected:
        raise TensorRecordError(
            f"element count mismatch: shape {shape} needs {expected} values, "
            f"record has {len(data_tokens)}"
        )
    try:
        data = np.array([float(t) for t in data_tokens], dtype=np.float64)
    except ValueError as exc:
        raise TensorRecordError(f"bad scalar in data section: {exc}") from None
    if not np.isfinite(data).all():
        bad = int(np.flatnonzero(~np.isfinite(data))[0])
        raise TensorRecordError(f"non-finite scalar at flat index {bad}")
    return data.reshape(shape)
