"""Bit-exact save/load of agent caches to disk.

One agent persists as a pair of files in the cache directory:

* ``{agent_id}.{digest16}.safetensors`` — all cache tensors in a
  safetensors container: an 8-byte little-endian header length, a
  canonical (key-sorted, compact) UTF-8 JSON header mapping tensor name
  to ``{dtype, shape, data_offsets}``, padded with spaces to an 8-byte
  boundary, then the raw little-endian tensor bytes. Per layer ``l`` and
  block ``b`` the names are ``L{l}_B{b}_{K|V}_{weights|scales|biases}``;
  weights are uint32 ("U32"), scales and biases bfloat16 ("BF16").
  The filename embeds the first 16 hex digits of the file's SHA-256, so
  identical caches produce byte-identical files at identical paths.
* ``{agent_id}.meta.json`` — key-sorted, newline-terminated UTF-8 JSON
  sidecar with the transcript, token ids, char offsets, per-block token
  counts, the producing spec (canonical form) and its fingerprint, and
  the tensor file's name and SHA-256.

The sidecar rename is the commit point: the tensor file is fully written
and fsynced under its final (content-addressed) name before the sidecar
replaces the previous one, so a crash at any instant leaves either the
old pair or the new pair, never a torn mix. Stale tensor files are swept
after commit.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import AgentCache, CacheState, KVBlock
from .codec import QuantizedTensor, q4_tensor_bytes
from .errors import CorruptFileError, PersistenceError, SpecMismatchError
from .model_spec import ModelCacheSpec, spec_fingerprint

__all__ = [
    "CacheFilePair",
    "FORMAT_VERSION",
    "TensorSummary",
    "FileSummary",
    "discover_pair",
    "inspect_tensor_file",
    "load_agent",
    "remove_agent_files",
    "save_agent",
    "sidecar_path_for",
]

FORMAT_VERSION = 1
_HEADER_LIMIT = 16 * 2**20
_DTYPE_ITEMSIZE = {
    "BF16": 2, "F16": 2, "F32": 4, "F64": 8,
    "U8": 1, "I8": 1, "I16": 2, "U16": 2,
    "I32": 4, "U32": 4, "I64": 8, "U64": 8, "BOOL": 1,
}


@dataclass(frozen=True)
class CacheFilePair:
    tensor_path: Path
    sidecar_path: Path


@dataclass(frozen=True)
class TensorSummary:
    name: str
    dtype: str
    shape: tuple[int, ...]
    nbytes: int


@dataclass(frozen=True)
class FileSummary:
    header_bytes: int
    data_bytes: int
    total_bytes: int
    tensors: tuple[TensorSummary, ...]


def sidecar_path_for(directory: Path | str, agent_id: str) -> Path:
    return Path(directory) / f"{agent_id}.meta.json"


def _tensor_entries(cache: AgentCache) -> list[tuple[str, str, tuple[int, ...], bytes]]:
    entries = []
    for layer in cache.blocks:
        for block in layer:
            for side, qt in (("K", block.k), ("V", block.v)):
                prefix = f"L{block.layer}_B{block.block_index}_{side}"
                entries.append(
                    (
                        f"{prefix}_weights",
                        "U32",
                        qt.packed.shape,
                        np.ascontiguousarray(qt.packed, dtype="<u4").tobytes(),
                    )
                )
                entries.append(
                    (
                        f"{prefix}_scales",
                        "BF16",
                        qt.scales.shape,
                        np.ascontiguousarray(qt.scales, dtype="<u2").tobytes(),
                    )
                )
                entries.append(
                    (
                        f"{prefix}_biases",
                        "BF16",
                        qt.biases.shape,
                        np.ascontiguousarray(qt.biases, dtype="<u2").tobytes(),
                    )
                )
    return entries


def _build_container(entries: list[tuple[str, str, tuple[int, ...], bytes]]) -> bytes:
    # offsets assigned in sorted-name order so the container is canonical
    entries = sorted(entries, key=lambda e: e[0])
    header: dict[str, dict] = {}
    offset = 0
    payload = bytearray()
    for name, dtype, shape, raw in entries:
        header[name] = {
            "dtype": dtype,
            "shape": list(shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        payload.extend(raw)
        offset += len(raw)
    header_json = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if pad := (-len(header_json)) % 8:
        header_json += b" " * pad
    return struct.pack("<Q", len(header_json)) + header_json + bytes(payload)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp.{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise PersistenceError(f"failed to write {path}: {exc}") from exc


def save_agent(cache: AgentCache, directory: Path | str, spec: ModelCacheSpec) -> CacheFilePair:
    """Persist an agent cache; returns the file pair. Crash-atomic."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PersistenceError(f"cannot create cache dir {directory}: {exc}") from exc

    blob = _build_container(_tensor_entries(cache))
    digest = hashlib.sha256(blob).hexdigest()
    tensor_path = directory / f"{cache.agent_id}.{digest[:16]}.safetensors"

    sidecar = {
        "agent_id": cache.agent_id,
        "block_token_counts": cache.block_token_counts(),
        "char_offsets": list(cache.char_offsets),
        "fingerprint": cache.spec_fingerprint,
        "format_version": FORMAT_VERSION,
        "spec": spec.to_json_dict(),
        "tensor_file": tensor_path.name,
        "tensor_sha256": digest,
        "token_ids": list(cache.token_ids),
        "transcript_text": cache.transcript_text,
    }
    sidecar_bytes = (
        json.dumps(sidecar, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n"
    ).encode("utf-8")

    _atomic_write(tensor_path, blob)
    sidecar_path = sidecar_path_for(directory, cache.agent_id)
    _atomic_write(sidecar_path, sidecar_bytes)  # commit point

    for stale in directory.glob(f"{cache.agent_id}.*.safetensors"):
        if stale.name != tensor_path.name:
            stale.unlink(missing_ok=True)
    return CacheFilePair(tensor_path=tensor_path, sidecar_path=sidecar_path)


def discover_pair(directory: Path | str, agent_id: str) -> CacheFilePair | None:
    """Locate an agent's file pair via its sidecar, if present."""
    sidecar_path = sidecar_path_for(directory, agent_id)
    if not sidecar_path.exists():
        return None
    try:
        meta = json.loads(sidecar_path.read_text(encoding="utf-8"))
        tensor_name = meta["tensor_file"]
    except (OSError, ValueError, KeyError) as exc:
        raise CorruptFileError(f"unreadable sidecar {sidecar_path}: {exc}") from exc
    return CacheFilePair(
        tensor_path=Path(directory) / tensor_name, sidecar_path=sidecar_path
    )


def remove_agent_files(directory: Path | str, agent_id: str) -> None:
    directory = Path(directory)
    sidecar_path_for(directory, agent_id).unlink(missing_ok=True)
    for stale in directory.glob(f"{agent_id}.*.safetensors"):
        stale.unlink(missing_ok=True)


def _parse_header(header_blob: bytes, data_len: int, path: Path) -> dict:
    """Validate a safetensors JSON header against the data region size.

    Returns {name: (dtype, shape, begin, end)}. Never touches tensor data,
    so callers may inspect headers of arbitrarily large files cheaply.
    """
    try:
        header = json.loads(header_blob.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptFileError(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise CorruptFileError(f"{path}: header must be a JSON object")

    entries: dict[str, tuple[str, tuple[int, ...], int, int]] = {}
    extents: list[tuple[int, int]] = []
    for name, info in header.items():
        if name == "__metadata__":
            continue
        if not isinstance(info, dict):
            raise CorruptFileError(f"{path}: tensor {name}: entry must be an object")
        try:
            dtype = info["dtype"]
            shape = info["shape"]
            begin, end = info["data_offsets"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptFileError(f"{path}: tensor {name}: malformed entry") from exc
        if dtype not in _DTYPE_ITEMSIZE:
            raise CorruptFileError(f"{path}: tensor {name}: unknown dtype {dtype!r}")
        if not isinstance(shape, list) or not all(
            isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape
        ):
            raise CorruptFileError(f"{path}: tensor {name}: malformed shape {shape!r}")
        if not all(isinstance(x, int) and not isinstance(x, bool) for x in (begin, end)):
            raise CorruptFileError(f"{path}: tensor {name}: malformed offsets")
        count = 1
        for s in shape:
            count *= s
        if begin < 0 or end < begin or end - begin != count * _DTYPE_ITEMSIZE[dtype]:
            raise CorruptFileError(
                f"{path}: tensor {name}: offsets [{begin}, {end}) inconsistent with shape"
            )
        entries[name] = (dtype, tuple(shape), begin, end)
        extents.append((begin, end))

    extents.sort()
    cursor = 0
    for begin, end in extents:
        if begin != cursor:
            raise CorruptFileError(f"{path}: data region has a gap or overlap at {begin}")
        cursor = end
    if cursor != data_len:
        raise CorruptFileError(
            f"{path}: data region holds {data_len} bytes, header declares {cursor}"
        )
    return entries


def inspect_tensor_file(path: Path | str) -> FileSummary:
    """Summarize a tensor file from its header alone (no tensor data read)."""
    path = Path(path)
    try:
        total = os.stat(path).st_size
        with open(path, "rb") as fh:
            prefix = fh.read(8)
            if len(prefix) < 8:
                raise CorruptFileError(f"{path}: shorter than the 8-byte header length")
            (header_len,) = struct.unpack("<Q", prefix)
            if header_len < 2 or header_len > _HEADER_LIMIT:
                raise CorruptFileError(f"{path}: implausible header length {header_len}")
            header_blob = fh.read(header_len)
    except OSError as exc:
        raise CorruptFileError(f"cannot read {path}: {exc}") from exc
    if len(header_blob) < header_len:
        raise CorruptFileError(f"{path}: header extends past end of file")
    entries = _parse_header(header_blob, total - 8 - header_len, path)
    tensors = tuple(
        TensorSummary(name=name, dtype=dtype, shape=shape, nbytes=end - begin)
        for name, (dtype, shape, begin, end) in sorted(entries.items())
    )
    return FileSummary(
        header_bytes=header_len,
        data_bytes=sum(t.nbytes for t in tensors),
        total_bytes=total,
        tensors=tensors,
    )


def _read_sidecar(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorruptFileError(f"cannot read sidecar {path}: {exc}") from exc
    try:
        meta = json.loads(text)
    except ValueError as exc:
        raise CorruptFileError(f"sidecar {path} is not valid JSON: {exc}") from exc
    if not isinstance(meta, dict):
        raise CorruptFileError(f"sidecar {path} must be a JSON object")
    return meta


def load_agent(pair: CacheFilePair, expected_fingerprint: int | None) -> AgentCache:
    """Reconstruct an agent cache bit-identically, validating as it goes."""
    meta = _read_sidecar(pair.sidecar_path)
    try:
        if meta["format_version"] != FORMAT_VERSION:
            raise CorruptFileError(
                f"{pair.sidecar_path}: unsupported format_version {meta['format_version']!r}"
            )
        agent_id = meta["agent_id"]
        spec_dict = meta["spec"]
        fingerprint = meta["fingerprint"]
        token_ids = meta["token_ids"]
        char_offsets = meta["char_offsets"]
        transcript = meta["transcript_text"]
        block_counts = meta["block_token_counts"]
        tensor_sha = meta["tensor_sha256"]
    except KeyError as exc:
        raise CorruptFileError(f"{pair.sidecar_path}: missing field {exc}") from exc

    spec = ModelCacheSpec.from_json_dict(spec_dict)
    if spec_fingerprint(spec) != fingerprint:
        raise CorruptFileError(
            f"{pair.sidecar_path}: fingerprint does not match the embedded spec"
        )
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise SpecMismatchError(
            f"cache for {agent_id!r} was produced under a different model spec"
        )

    if not isinstance(token_ids, list) or not isinstance(char_offsets, list):
        raise CorruptFileError(f"{pair.sidecar_path}: token metadata malformed")
    if len(char_offsets) != len(token_ids):
        raise CorruptFileError(f"{pair.sidecar_path}: char_offsets/token_ids length mismatch")
    total_tokens = len(token_ids)
    if not isinstance(block_counts, list) or any(
        not isinstance(c, int) or c < 1 or c > spec.block_tokens for c in block_counts
    ):
        raise CorruptFileError(f"{pair.sidecar_path}: invalid block token counts")
    if any(c != spec.block_tokens for c in block_counts[:-1]):
        raise CorruptFileError(f"{pair.sidecar_path}: non-final block not full")
    if sum(block_counts) != total_tokens:
        raise CorruptFileError(
            f"{pair.sidecar_path}: block token counts sum to {sum(block_counts)}, "
            f"expected {total_tokens}"
        )

    try:
        blob = pair.tensor_path.read_bytes()
    except OSError as exc:
        raise CorruptFileError(f"cannot read {pair.tensor_path}: {exc}") from exc
    if hashlib.sha256(blob).hexdigest() != tensor_sha:
        raise CorruptFileError(f"{pair.tensor_path}: SHA-256 mismatch (truncated or torn)")

    if len(blob) < 8:
        raise CorruptFileError(f"{pair.tensor_path}: shorter than the 8-byte header length")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if header_len < 2 or header_len > _HEADER_LIMIT:
        raise CorruptFileError(f"{pair.tensor_path}: implausible header length {header_len}")
    if 8 + header_len > len(blob):
        raise CorruptFileError(f"{pair.tensor_path}: header extends past end of file")
    data_start = 8 + header_len
    entries = _parse_header(
        blob[8:data_start], len(blob) - data_start, pair.tensor_path
    )

    if not all(isinstance(c, int) and not isinstance(c, bool) for c in char_offsets):
        raise CorruptFileError(f"{pair.sidecar_path}: char offsets must be integers")

    expected_names = set()
    for layer in range(spec.num_layers):
        for b in range(len(block_counts)):
            for side in ("K", "V"):
                for part in ("weights", "scales", "biases"):
                    expected_names.add(f"L{layer}_B{b}_{side}_{part}")
    if set(entries) != expected_names:
        raise CorruptFileError(
            f"{pair.tensor_path}: tensor names do not match the declared blocks"
        )

    def read_tensor(name: str, dtype: str, shape: tuple[int, ...], np_dtype: str) -> np.ndarray:
        actual_dtype, actual_shape, begin, end = entries[name]
        if actual_dtype != dtype or actual_shape != shape:
            raise CorruptFileError(
                f"{pair.tensor_path}: tensor {name}: expected {dtype} {shape}, "
                f"got {actual_dtype} {actual_shape}"
            )
        raw = blob[data_start + begin : data_start + end]
        return np.frombuffer(raw, dtype=np_dtype).reshape(shape).copy()

    heads = spec.num_kv_heads
    blocks: list[list[KVBlock]] = []
    for layer in range(spec.num_layers):
        layer_blocks = []
        for b, count in enumerate(block_counts):
            tensors = {}
            for side, dim in (("K", spec.k_head_dim), ("V", spec.v_head_dim)):
                prefix = f"L{layer}_B{b}_{side}"
                packed = read_tensor(
                    f"{prefix}_weights", "U32", (heads, count, dim // 8), "<u4"
                )
                scales = read_tensor(
                    f"{prefix}_scales", "BF16", (heads, count, dim // spec.group_size), "<u2"
                )
                biases = read_tensor(
                    f"{prefix}_biases", "BF16", (heads, count, dim // spec.group_size), "<u2"
                )
                tensors[side] = QuantizedTensor(
                    heads=heads,
                    tokens=count,
                    dim=dim,
                    packed=packed.astype(np.uint32),
                    scales=scales.astype(np.uint16),
                    biases=biases.astype(np.uint16),
                    group_size=spec.group_size,
                )
            layer_blocks.append(
                KVBlock(layer=layer, block_index=b, token_count=count,
                        k=tensors["K"], v=tensors["V"])
            )
        blocks.append(layer_blocks)

    cache = AgentCache(
        agent_id=agent_id,
        spec_fingerprint=fingerprint,
        blocks=blocks,
        transcript_text=transcript,
        token_ids=list(token_ids),
        char_offsets=list(char_offsets),
        state=CacheState.HOT,
    )
    cache.validate(spec.num_layers, spec.block_tokens)
    expected_bytes = sum(
        q4_tensor_bytes(heads, c, spec.k_head_dim, spec.group_size)
        + q4_tensor_bytes(heads, c, spec.v_head_dim, spec.group_size)
        for c in block_counts
    ) * spec.num_layers
    if cache.nbytes != expected_bytes:
        raise CorruptFileError(f"{pair.tensor_path}: payload size inconsistent")
    return cache
