"""On-disk formats: versioned text tables and versioned binary model containers.

Text tables (TSV or CSV) start with one comment line::

    # popsteer <kind> v<version> stage=<hash>

followed by a header row and data rows. ``stage`` is the hash of the
configuration sections the artifact was produced from; readers pass the hash
they expect and get an :class:`ArtifactError` if it differs (stale artifact).

Binary containers (model files) have the byte layout::

    offset  size  content
    0       4     magic (b"PSBB" backbone, b"PSAE" sparse autoencoder)
    4       4     format version, uint32 little-endian
    8       4     header length H in bytes, uint32 little-endian
    12      H     UTF-8 JSON header, keys sorted; "arrays" lists
                  [name, shape] pairs in storage order
    12+H    ...   each array as little-endian float64, row-major (C order),
                  concatenated in the order given by "arrays"
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from popsteer.errors import ArtifactError

FORMAT_VERSION = 1


def stable_hash(payload) -> str:
    """Short sha256 of a JSON-serialisable payload (sorted keys)."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def format_float(x: float) -> str:
    return repr(float(x))


def write_table(
    path: str | Path,
    kind: str,
    columns: Sequence[str],
    rows: Iterable[Sequence],
    *,
    stage: str = "-",
    sep: str = "\t",
    extra_comments: Sequence[str] = (),
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# popsteer {kind} v{FORMAT_VERSION} stage={stage}"]
    lines.extend(f"# {c}" for c in extra_comments)
    lines.append(sep.join(columns))
    for row in rows:
        lines.append(sep.join(format_float(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_table(
    path: str | Path, kind: str, *, stage: str | None = None, sep: str = "\t"
) -> tuple[list[str], list[list[str]]]:
    """Read a table written by :func:`write_table`, validating kind/version/stage."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing artifact: {path}")
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# popsteer "):
        raise ArtifactError(f"{path}: not a popsteer artifact (no version header)")
    meta = lines[0].split()
    if len(meta) != 5 or meta[2] != kind:
        raise ArtifactError(f"{path}: expected artifact kind {kind!r}, found {lines[0]!r}")
    if meta[3] != f"v{FORMAT_VERSION}":
        raise ArtifactError(f"{path}: unsupported artifact version {meta[3]}")
    if stage is not None and meta[4] != f"stage={stage}":
        raise ArtifactError(
            f"stale artifact {path}: built from {meta[4]}, current config expects stage={stage}"
        )
    body = [ln for ln in lines[1:] if not ln.startswith("#")]
    columns = body[0].split(sep)
    rows = [ln.split(sep) for ln in body[1:] if ln]
    return columns, rows


def write_container(path: str | Path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(header)
    header["arrays"] = [[name, list(np.shape(a))] for name, a in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def read_container(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing artifact: {path}")
    raw = path.read_bytes()
    if raw[:4] != magic:
        raise ArtifactError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < 12:
        raise ArtifactError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported container version {version}")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{path}: unreadable header ({exc})") from None
    offset = 12 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        if offset + 8 * count > len(raw):
            raise ArtifactError(f"{path}: truncated data for array {name!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[name] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ArtifactError(f"{path}: trailing or truncated data")
    return header, arrays
