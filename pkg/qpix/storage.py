"""
On-disk formats: QPIX-MPS image files, QPIX-CKPT checkpoints and circuit angle files.

Both binary formats start with a 4-byte magic, a little-endian uint32 version and a
little-endian uint32 length of the UTF-8 JSON header that follows. Array payloads are
little-endian and referenced from the header.
"""

import json
import logging
import os
import struct
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from qpix.errors import FormatError, TruncatedDataError
from qpix.imaging import PatchLayout
from qpix.mps import MPS
from qpix.seq_circuit import SequentialCircuit

# Module-level logger
logger = logging.getLogger(__name__)

MPS_MAGIC = b"QPXM"
CKPT_MAGIC = b"QPXC"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sII")
_DTYPES = {"f": "<f8", "c": "<c16", "i": "<i8", "u": "<i8", "b": "<i8"}


def _write_bytes(path: str, chunks: Sequence[bytes]) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    try:
        with open(tmp_path, "wb") as f:
            for chunk in chunks:
                f.write(chunk)
        os.replace(tmp_path, path)
    except OSError as exc:
        raise OSError(f"Failed to write {path}: {exc}") from exc


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as exc:
        raise OSError(f"Failed to read {path}: {exc}") from exc


def _pack(magic: bytes, header: Dict[str, Any], payload: Sequence[bytes]) -> List[bytes]:
    header_bytes = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    return [_PREAMBLE.pack(magic, FORMAT_VERSION, len(header_bytes)), header_bytes, *payload]


def _unpack(data: bytes, magic: bytes, path: str) -> Tuple[Dict[str, Any], memoryview]:
    if len(data) < _PREAMBLE.size:
        raise TruncatedDataError(f"{path}: file too short for a {magic.decode()} header")
    found, version, header_len = _PREAMBLE.unpack_from(data)
    if found != magic:
        raise FormatError(f"{path}: bad magic {found!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    end = _PREAMBLE.size + header_len
    if len(data) < end:
        raise TruncatedDataError(f"{path}: header declares {header_len} bytes, file ends early")
    try:
        header = json.loads(data[_PREAMBLE.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid UTF-8 JSON: {exc}") from exc
    return header, memoryview(data)[end:]


def save_mps_file(
    path: str,
    mps_list: Sequence[MPS],
    layout: PatchLayout,
    chi: Optional[int],
    image_size: Optional[Tuple[int, int]] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> str:
    """Write the per-patch MPS of one image in QPIX-MPS v1 format."""
    header = {
        "format": "QPIX-MPS",
        "endianness": "little",
        "layout": str(layout),
        "chi": chi,
        "image_size": list(image_size) if image_size else None,
        "site_count": sum(len(m) for m in mps_list),
        "patches": [
            {
                "shapes": [list(t.shape) for t in m.tensors],
                "log_scale": m.log_scale,
                "phase": [float(np.real(m.phase)), float(np.imag(m.phase))],
                "truncation_error": m.truncation_error,
            }
            for m in mps_list
        ],
        "metadata": metadata or {},
    }
    payload = [np.ascontiguousarray(t, dtype="<c16").tobytes() for m in mps_list for t in m.tensors]
    _write_bytes(path, _pack(MPS_MAGIC, header, payload))
    return path


def load_mps_file(path: str) -> Tuple[List[MPS], Dict[str, Any]]:
    """
    Read a QPIX-MPS v1 file.

    Raises:
        FormatError: On a bad magic, version or header, or trailing bytes.
        TruncatedDataError: If the payload is shorter than the header declares.
    """
    header, payload = _unpack(_read_bytes(path), MPS_MAGIC, path)
    itemsize = np.dtype("<c16").itemsize
    offset = 0
    mps_list = []
    try:
        patches = header["patches"]
        for patch in patches:
            tensors = []
            for shape in patch["shapes"]:
                nbytes = int(np.prod(shape)) * itemsize
                if offset + nbytes > len(payload):
                    raise TruncatedDataError(f"{path}: payload ends inside a tensor of shape {shape}")
                block = np.frombuffer(payload[offset:offset + nbytes], dtype="<c16")
                tensors.append(block.astype(np.complex128).reshape(shape))
                offset += nbytes
            re, im = patch["phase"]
            mps_list.append(MPS(
                tensors,
                log_scale=float(patch["log_scale"]),
                phase=complex(re, im),
                truncation_error=float(patch["truncation_error"]),
            ))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed QPIX-MPS header: {exc}") from exc
    if offset != len(payload):
        raise FormatError(f"{path}: {len(payload) - offset} unexpected trailing bytes")
    return mps_list, header


def save_checkpoint(path: str, manifest: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> str:
    """
    Write a QPIX-CKPT v1 checkpoint.

    ``manifest`` is stored as given plus the endianness tag and an array table
    (name, dtype, shape, offset, nbytes) describing the payload blobs.
    """
    table = []
    blobs = []
    offset = 0
    for name, array in arrays.items():
        array = np.asarray(array)
        dtype = _DTYPES.get(array.dtype.kind)
        if dtype is None:
            raise FormatError(f"Unsupported array dtype {array.dtype} for checkpoint entry {name}")
        blob = np.ascontiguousarray(array, dtype=dtype).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(array.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = dict(manifest)
    header["format"] = "QPIX-CKPT"
    header["endianness"] = "little"
    header["arrays"] = table
    _write_bytes(path, _pack(CKPT_MAGIC, header, blobs))
    return path


def load_checkpoint(path: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Read a QPIX-CKPT v1 checkpoint into ``(manifest, arrays)``."""
    manifest, payload = _unpack(_read_bytes(path), CKPT_MAGIC, path)
    if manifest.get("endianness") != "little":
        raise FormatError(f"{path}: unsupported endianness {manifest.get('endianness')!r}")
    arrays = {}
    try:
        for entry in manifest["arrays"]:
            start, nbytes = int(entry["offset"]), int(entry["nbytes"])
            if start + nbytes > len(payload):
                raise TruncatedDataError(f"{path}: array {entry['name']} extends past the end of the file")
            block = np.frombuffer(payload[start:start + nbytes], dtype=entry["dtype"])
            arrays[entry["name"]] = block.astype(block.dtype.newbyteorder("=")).reshape(entry["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed QPIX-CKPT manifest: {exc}") from exc
    return manifest, arrays


def circuit_to_dict(circuit: SequentialCircuit, fidelity: Optional[float] = None, **extra) -> Dict[str, Any]:
    doc = {
        "n_qubits": circuit.n_qubits,
        "layers": circuit.layers,
        "readout_tail": circuit.readout_tail,
        "role": circuit.role,
        "angles": circuit.params.tolist(),
        "fidelity": fidelity,
    }
    doc.update(extra)
    return doc


def circuit_from_dict(doc: Dict[str, Any]) -> SequentialCircuit:
    try:
        return SequentialCircuit(
            n_qubits=int(doc["n_qubits"]),
            layers=int(doc["layers"]),
            params=np.asarray(doc["angles"], dtype=np.float64).reshape(-1, 15),
            readout_tail=bool(doc.get("readout_tail", False)),
            role=str(doc.get("role", "class")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"Malformed circuit angle document: {exc}") from exc


def save_circuit_file(path: str, circuit: SequentialCircuit, fidelity: Optional[float] = None, **extra) -> str:
    """Write a circuit angle table as JSON."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(circuit_to_dict(circuit, fidelity, **extra), f, ensure_ascii=False, indent=2)
    except OSError as exc:
        raise OSError(f"Failed to write {path}: {exc}") from exc
    return path


def load_circuit_file(path: str) -> Tuple[SequentialCircuit, Dict[str, Any]]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a valid circuit angle file: {exc}") from exc
    except OSError as exc:
        raise OSError(f"Failed to read {path}: {exc}") from exc
    return circuit_from_dict(doc), doc
