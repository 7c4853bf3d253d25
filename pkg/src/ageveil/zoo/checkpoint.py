"""Single-file model archives: a zip holding meta.json plus state tensors."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import torch


class CheckpointError(IOError):
    pass


def save_archive(path, meta: dict, states: dict) -> None:
    """Write meta (JSON) and named state dicts into one zip archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=2, sort_keys=True))
        for name, state in states.items():
            buf = io.BytesIO()
            torch.save(state, buf)
            zf.writestr(f"{name}.pt", buf.getvalue())


def load_archive(path):
    """Return (meta, states) from an archive written by save_archive."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    states = {}
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json").decode("utf-8"))
            for name in zf.namelist():
                if name.endswith(".pt"):
                    buf = io.BytesIO(zf.read(name))
                    states[name[:-3]] = torch.load(buf, weights_only=True)
    except (zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    return meta, states
