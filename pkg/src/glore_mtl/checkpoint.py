"""Named-array checkpoint container.

A checkpoint is a zip archive holding one ``.npy`` entry per array plus a
``manifest.json`` that records dtype, shape, and a sha256 checksum for every
entry. Loading verifies checksums and shapes before any state is touched, so
a partially corrupted file can never leave a model half-restored.

Format details are documented in docs/checkpoint.md.
"""

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT_NAME = "glore-mtl-checkpoint"
FORMAT_VERSION = 1
_MANIFEST = "manifest.json"
_ARRAY_DIR = "arrays"


class CheckpointError(RuntimeError):
    """Raised for malformed, mismatched, or corrupted checkpoint files."""


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write a named-array container with per-array checksums.

    ``arrays`` maps names to numpy arrays; ``meta`` is free-form JSON-safe
    metadata stored alongside the manifest.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = {}
    blobs = {}
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        blob = _npy_bytes(arr)
        blobs[name] = blob
        entries[name] = {
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
            "sha256": hashlib.sha256(blob).hexdigest(),
        }
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "meta": meta or {},
        "arrays": entries,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_MANIFEST, json.dumps(manifest, indent=1, sort_keys=True))
        for name, blob in blobs.items():
            zf.writestr(f"{_ARRAY_DIR}/{name}", blob)


def load_arrays(path, verify: bool = True) -> tuple[dict, dict]:
    """Read a container back into ``(arrays, meta)``, verifying checksums."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint file not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read(_MANIFEST))
            if manifest.get("format") != FORMAT_NAME:
                raise CheckpointError(f"not a {FORMAT_NAME} file: {path}")
            if manifest.get("version") != FORMAT_VERSION:
                raise CheckpointError(
                    f"unsupported checkpoint version {manifest.get('version')}"
                )
            arrays = {}
            for name, entry in manifest["arrays"].items():
                blob = zf.read(f"{_ARRAY_DIR}/{name}")
                if verify:
                    digest = hashlib.sha256(blob).hexdigest()
                    if digest != entry["sha256"]:
                        raise CheckpointError(
                            f"checksum mismatch for array {name!r} in {path}"
                        )
                arr = np.load(io.BytesIO(blob), allow_pickle=False)
                if list(arr.shape) != entry["shape"] or str(arr.dtype) != entry["dtype"]:
                    raise CheckpointError(
                        f"manifest disagrees with stored array {name!r} in {path}"
                    )
                arrays[name] = arr
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    return arrays, manifest.get("meta", {})


def module_state_arrays(module: torch.nn.Module, prefix: str = "") -> dict:
    """Snapshot a module's parameters and buffers as numpy arrays."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[prefix + name] = tensor.detach().cpu().numpy().copy()
    return out


def load_module_state(module: torch.nn.Module, arrays: dict, prefix: str = "") -> None:
    """Load arrays into a module, reporting every name/shape mismatch at once."""
    state = module.state_dict()
    missing = []
    mismatched = []
    new_state = {}
    for name, tensor in state.items():
        key = prefix + name
        if key not in arrays:
            missing.append(key)
            continue
        arr = arrays[key]
        if tuple(arr.shape) != tuple(tensor.shape):
            mismatched.append(
                f"{key}: checkpoint {tuple(arr.shape)} vs model {tuple(tensor.shape)}"
            )
            continue
        new_state[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(tensor.dtype)
    problems = []
    if missing:
        problems.append("missing arrays: " + ", ".join(sorted(missing)))
    if mismatched:
        problems.append("shape mismatches: " + "; ".join(sorted(mismatched)))
    if problems:
        raise CheckpointError("; ".join(problems))
    module.load_state_dict(new_state, strict=False)


def save_module(module: torch.nn.Module, path, meta: dict | None = None) -> None:
    save_arrays(path, module_state_arrays(module), meta)


def restore_module(module: torch.nn.Module, path) -> dict:
    """Load a module checkpoint and return its metadata."""
    arrays, meta = load_arrays(path)
    load_module_state(module, arrays)
    return meta
