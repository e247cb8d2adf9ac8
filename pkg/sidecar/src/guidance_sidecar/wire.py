"""Tensor wire format: base64-encoded little-endian float32 payloads with
an explicit dims field, as consumed and produced by guidance clients."""

from __future__ import annotations

import base64
import binascii

import numpy as np


class WireError(ValueError):
    """A tensor payload that cannot be decoded as declared."""


def encode_tensor(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f4")
    return {"dims": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_tensor(dims, data, expect_rank: int = None) -> np.ndarray:
    try:
        shape = tuple(int(d) for d in dims)
        raw = base64.b64decode(data, validate=True)
    except (TypeError, ValueError, binascii.Error) as exc:
        raise WireError(f"malformed tensor payload: {exc}") from exc
    if any(d <= 0 for d in shape):
        raise WireError(f"tensor dims must be positive, got {shape}")
    values = np.frombuffer(raw, dtype="<f4")
    if values.size != int(np.prod(shape)):
        raise WireError(
            f"tensor holds {values.size} values but dims say {shape}")
    arr = values.reshape(shape).astype(np.float64)
    if expect_rank is not None and arr.ndim != expect_rank:
        raise WireError(f"expected rank-{expect_rank} tensor, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise WireError("tensor contains non-finite values")
    return arr
