"""Checkpoint store: named-array archives with JSON manifests and provenance.

Every artifact is an ``.npz`` of named arrays plus a ``<name>.manifest.json``
carrying the artifact kind, a content checksum, parent checksums, a config
snapshot, and creation metadata.  Checksums cover array names, dtypes,
shapes, and little-endian raw bytes, so a round trip is bit-exact and any
corruption is caught at load time.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch


class CheckpointError(RuntimeError):
    """Checksum or format failure while loading an artifact."""


class ProvenanceError(RuntimeError):
    """An artifact was produced against a different parent than supplied."""


# ---------------------------------------------------------------------------
# checksums
# ---------------------------------------------------------------------------

def arrays_checksum(arrays: dict[str, np.ndarray]) -> str:
    """sha256 over sorted (name, dtype, shape, little-endian bytes)."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype.str).encode("ascii"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


def state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    """Model state_dict as plain numpy arrays."""
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def state_checksum(module: torch.nn.Module) -> str:
    """Content checksum of a model's parameters and buffers."""
    return arrays_checksum(state_arrays(module))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class CheckpointManifest:
    kind: str
    checksum: str
    parents: dict[str, str] = field(default_factory=dict)  # role -> checksum
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    created: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "CheckpointManifest":
        return CheckpointManifest(**json.loads(text))


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def manifest_path(archive_path: Path) -> Path:
    return archive_path.with_suffix("").with_suffix(".manifest.json")


def save_checkpoint(
    path: Path | str,
    kind: str,
    arrays: dict[str, np.ndarray],
    parents: dict[str, str] | None = None,
    config: dict | None = None,
    extra: dict | None = None,
) -> CheckpointManifest:
    """Write an array archive plus its manifest atomically; returns the manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    _atomic_write_bytes(path, buf.getvalue())
    manifest = CheckpointManifest(
        kind=kind,
        checksum=arrays_checksum(arrays),
        parents=parents or {},
        config=config or {},
        extra=extra or {},
        created=datetime.now(timezone.utc).isoformat(),
    )
    _atomic_write_bytes(manifest_path(path), manifest.to_json().encode("utf-8"))
    return manifest


def load_checkpoint(
    path: Path | str, expected_kind: str | None = None, verify: bool = True
) -> tuple[dict[str, np.ndarray], CheckpointManifest]:
    """Load an archive + manifest, verifying the content checksum."""
    path = Path(path)
    mpath = manifest_path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint archive: {path}")
    if not mpath.exists():
        raise CheckpointError(f"missing manifest for {path.name}: {mpath}")
    manifest = CheckpointManifest.from_json(mpath.read_text())
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    if expected_kind is not None and manifest.kind != expected_kind:
        raise CheckpointError(
            f"{path.name}: expected kind {expected_kind!r}, manifest says {manifest.kind!r}"
        )
    if verify:
        actual = arrays_checksum(arrays)
        if actual != manifest.checksum:
            raise CheckpointError(
                f"checksum mismatch for artifact {path.name}: "
                f"manifest {manifest.checksum[:12]}..., content {actual[:12]}..."
            )
    return arrays, manifest


# ---------------------------------------------------------------------------
# model <-> arrays round trips
# ---------------------------------------------------------------------------

def load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> torch.nn.Module:
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()}
    module.load_state_dict(state)
    module.eval()
    return module
