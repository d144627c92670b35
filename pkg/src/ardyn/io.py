"""Binary file formats: model checkpoints, datasets, and sidecars.

All integers are little-endian; all reals are little-endian float64.
Writes are atomic (temp file in the target directory, then rename), so a
crashed run never leaves a half-written artifact under the final name.

Checkpoint (magic "ARDM"): version u16, kind u8 (0 feedforward,
1 autoregressive), state_dim u32, action_dim u32, hidden-layer count u32,
widths u32 each, dimension_order u32 x state_dim (autoregressive only),
normalization stats (state mean/std, action mean/std, reward mean/std),
the flat parameter buffer, then UTF-8 "key = value" metadata lines to EOF.

Dataset (magic "ARDS"): version u16, state_dim u32, action_dim u32,
count u64, flags u8 (bit 0 set: 64-bit reals), then count records of
(s, a, r, s'). The file length must match the header arithmetic exactly.

Initial-state sidecar (magic "ARS0") and synthetic-flag sidecar (magic
"ARSY") follow the same pattern.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .data import TransitionDataset
from .dynamics import (
    AutoregressiveDynamics,
    FeedforwardDynamics,
    NormalizationStats,
)
from .errors import ConfigError, DataFormatError, NumericError
from .nn import ACTIVATIONS, MlpSpec, ParameterSet

CHECKPOINT_MAGIC = b"ARDM"
DATASET_MAGIC = b"ARDS"
INITIAL_STATE_MAGIC = b"ARS0"
FLAGS_MAGIC = b"ARSY"
FORMAT_VERSION = 1

_KIND_CODES = {"feedforward": 0, "autoregressive": 1}
_KIND_NAMES = {code: name for name, code in _KIND_CODES.items()}


def atomic_write(path: str, payload: bytes) -> None:
    """Write bytes then rename into place, all within the target directory."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def _f64_bytes(array) -> bytes:
    return np.ascontiguousarray(array, dtype="<f8").tobytes()


class _Reader:
    """Cursor over a byte buffer with format-error reporting."""

    def __init__(self, payload: bytes, label: str):
        self.payload = payload
        self.offset = 0
        self.label = label

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.payload):
            raise DataFormatError(
                f"{self.label}: truncated while reading {what} "
                f"(need {self.offset + count} bytes, file has {len(self.payload)})"
            )
        chunk = self.payload[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def f64(self, count: int, what: str) -> np.ndarray:
        raw = self.take(count * 8, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def remainder(self) -> bytes:
        chunk = self.payload[self.offset :]
        self.offset = len(self.payload)
        return chunk


def _check_magic_version(reader: _Reader, magic: bytes) -> None:
    found = reader.take(4, "magic")
    if found != magic:
        raise DataFormatError(f"{reader.label}: bad magic {found!r}, expected {magic!r}")
    (version,) = reader.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{reader.label}: unsupported version {version}")


def _encode_metadata(metadata: dict[str, str]) -> bytes:
    lines = []
    for key, value in metadata.items():
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise ConfigError(f"metadata key/value may not contain '=' or newlines: {key!r}")
        lines.append(f"{key} = {value}\n")
    return "".join(lines).encode("utf-8")


def _decode_metadata(raw: bytes, label: str) -> dict[str, str]:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise DataFormatError(f"{label}: metadata block is not valid UTF-8") from None
    metadata: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise DataFormatError(f"{label}: metadata line without '=': {line!r}")
        key, value = line.split("=", 1)
        metadata[key.strip()] = value.strip()
    return metadata


def save_checkpoint(model, path: str, metadata: dict[str, str] | None = None) -> None:
    """Serialize a dynamics model; extra metadata rides along as text."""
    if model.kind not in _KIND_CODES:
        raise ConfigError(f"cannot checkpoint model kind {model.kind!r}")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<B", _KIND_CODES[model.kind]),
        struct.pack("<II", model.state_dim, model.action_dim),
        struct.pack("<I", len(model.spec.hidden_layers)),
        struct.pack(f"<{len(model.spec.hidden_layers)}I", *model.spec.hidden_layers)
        if model.spec.hidden_layers
        else b"",
    ]
    if model.kind == "autoregressive":
        parts.append(struct.pack(f"<{model.state_dim}I", *model.dimension_order))
    stats = model.stats
    parts.append(_f64_bytes(stats.state_mean))
    parts.append(_f64_bytes(stats.state_std))
    parts.append(_f64_bytes(stats.action_mean))
    parts.append(_f64_bytes(stats.action_std))
    parts.append(struct.pack("<dd", stats.reward_mean, stats.reward_std))
    parts.append(_f64_bytes(model.params.flat))
    merged = {"activation": model.spec.activation}
    merged.update(metadata or {})
    parts.append(_encode_metadata(merged))
    atomic_write(path, b"".join(parts))


def load_checkpoint(path: str):
    """Read a checkpoint back; returns (model, metadata)."""
    with open(path, "rb") as handle:
        payload = handle.read()
    reader = _Reader(payload, os.path.basename(path))
    _check_magic_version(reader, CHECKPOINT_MAGIC)
    (kind_code,) = reader.unpack("<B", "model kind")
    if kind_code not in _KIND_NAMES:
        raise DataFormatError(f"{reader.label}: unknown model kind code {kind_code}")
    kind = _KIND_NAMES[kind_code]
    n, m = reader.unpack("<II", "dimensions")
    if n < 1 or m < 1:
        raise DataFormatError(f"{reader.label}: invalid dimensions n={n}, m={m}")
    (layer_count,) = reader.unpack("<I", "hidden layer count")
    if layer_count > 64:
        raise DataFormatError(f"{reader.label}: implausible hidden layer count {layer_count}")
    widths = reader.unpack(f"<{layer_count}I", "hidden widths") if layer_count else ()
    dimension_order: tuple[int, ...] | None = None
    if kind == "autoregressive":
        dimension_order = reader.unpack(f"<{n}I", "dimension order")
        if sorted(dimension_order) != list(range(n)):
            raise DataFormatError(f"{reader.label}: dimension order is not a permutation")
    stats = NormalizationStats(
        state_mean=reader.f64(n, "state mean"),
        state_std=reader.f64(n, "state std"),
        action_mean=reader.f64(m, "action mean"),
        action_std=reader.f64(m, "action std"),
        reward_mean=float(reader.f64(1, "reward mean")[0]),
        reward_std=float(reader.f64(1, "reward std")[0]),
    )
    if np.any(stats.state_std <= 0) or np.any(stats.action_std <= 0) or stats.reward_std <= 0:
        raise DataFormatError(f"{reader.label}: non-positive normalization std")
    if kind == "feedforward":
        input_dim, output_dim = n + m, 2 * (n + 1)
    else:
        input_dim, output_dim = 3 * n + m + 1, 2
    probe = MlpSpec(input_dim, tuple(widths), output_dim)
    flat = reader.f64(probe.num_params, "parameters")
    if not np.all(np.isfinite(flat)):
        raise DataFormatError(f"{reader.label}: parameter buffer contains non-finite values")
    metadata = _decode_metadata(reader.remainder(), reader.label)
    activation = metadata.get("activation", "relu")
    if activation not in ACTIVATIONS:
        raise DataFormatError(f"{reader.label}: unknown activation {activation!r}")
    spec = MlpSpec(input_dim, tuple(widths), output_dim, activation)
    params = ParameterSet(spec, flat)
    if kind == "feedforward":
        model = FeedforwardDynamics(spec, params, stats, n, m)
    else:
        model = AutoregressiveDynamics(spec, params, stats, n, m, dimension_order)
    return model, metadata


def save_dataset(dataset: TransitionDataset, path: str) -> None:
    n, m = dataset.state_dim, dataset.action_dim
    records = np.concatenate(
        [dataset.states, dataset.actions, dataset.rewards[:, None], dataset.next_states], axis=1
    )
    header = (
        DATASET_MAGIC
        + struct.pack("<H", FORMAT_VERSION)
        + struct.pack("<II", n, m)
        + struct.pack("<Q", len(dataset))
        + struct.pack("<B", 1)
    )
    atomic_write(path, header + _f64_bytes(records))


def load_dataset(path: str) -> TransitionDataset:
    with open(path, "rb") as handle:
        payload = handle.read()
    reader = _Reader(payload, os.path.basename(path))
    _check_magic_version(reader, DATASET_MAGIC)
    n, m = reader.unpack("<II", "dimensions")
    if n < 1 or m < 1:
        raise DataFormatError(f"{reader.label}: invalid dimensions n={n}, m={m}")
    (count,) = reader.unpack("<Q", "record count")
    (flags,) = reader.unpack("<B", "flags")
    if not flags & 1:
        raise DataFormatError(f"{reader.label}: only 64-bit real records are supported")
    record_len = 2 * n + m + 1
    expected = reader.offset + count * record_len * 8
    if len(payload) != expected:
        raise DataFormatError(
            f"{reader.label}: file length {len(payload)} does not match header "
            f"arithmetic ({expected} bytes for {count} records)"
        )
    records = reader.f64(count * record_len, "records").reshape(count, record_len)
    try:
        return TransitionDataset(
            states=records[:, :n],
            actions=records[:, n : n + m],
            rewards=records[:, n + m],
            next_states=records[:, n + m + 1 :],
        )
    except NumericError as err:
        raise DataFormatError(f"{reader.label}: {err}") from None


def save_initial_states(initial_states: np.ndarray, path: str) -> None:
    s0 = np.asarray(initial_states, dtype=np.float64)
    if s0.ndim != 2:
        raise ConfigError("initial states must be a 2-D array")
    header = (
        INITIAL_STATE_MAGIC
        + struct.pack("<H", FORMAT_VERSION)
        + struct.pack("<I", s0.shape[1])
        + struct.pack("<Q", s0.shape[0])
        + struct.pack("<B", 1)
    )
    atomic_write(path, header + _f64_bytes(s0))


def load_initial_states(path: str) -> np.ndarray:
    with open(path, "rb") as handle:
        payload = handle.read()
    reader = _Reader(payload, os.path.basename(path))
    _check_magic_version(reader, INITIAL_STATE_MAGIC)
    (n,) = reader.unpack("<I", "state dim")
    (count,) = reader.unpack("<Q", "row count")
    (flags,) = reader.unpack("<B", "flags")
    if not flags & 1:
        raise DataFormatError(f"{reader.label}: only 64-bit reals are supported")
    expected = reader.offset + count * n * 8
    if len(payload) != expected:
        raise DataFormatError(
            f"{reader.label}: file length {len(payload)} does not match header "
            f"arithmetic ({expected} bytes for {count} rows)"
        )
    rows = reader.f64(count * n, "rows").reshape(count, n)
    if not np.all(np.isfinite(rows)):
        raise DataFormatError(f"{reader.label}: rows contain non-finite values")
    return rows


def save_synthetic_flags(flags: np.ndarray, path: str) -> None:
    bits = np.asarray(flags, dtype=bool).reshape(-1)
    header = (
        FLAGS_MAGIC
        + struct.pack("<H", FORMAT_VERSION)
        + struct.pack("<Q", bits.shape[0])
        + struct.pack("<B", 1)
    )
    atomic_write(path, header + bits.astype(np.uint8).tobytes())


def load_synthetic_flags(path: str) -> np.ndarray:
    with open(path, "rb") as handle:
        payload = handle.read()
    reader = _Reader(payload, os.path.basename(path))
    _check_magic_version(reader, FLAGS_MAGIC)
    (count,) = reader.unpack("<Q", "flag count")
    (flags_byte,) = reader.unpack("<B", "flags")
    if not flags_byte & 1:
        raise DataFormatError(f"{reader.label}: unsupported flag encoding")
    expected = reader.offset + count
    if len(payload) != expected:
        raise DataFormatError(
            f"{reader.label}: file length {len(payload)} does not match header "
            f"arithmetic ({expected} bytes for {count} flags)"
        )
    raw = np.frombuffer(reader.take(count, "flag bytes"), dtype=np.uint8)
    if np.any(raw > 1):
        raise DataFormatError(f"{reader.label}: flag bytes must be 0 or 1")
    return raw.astype(bool)
