"""Checkpoint archive format.

A checkpoint is a zip holding meta.json (stage, profile, config hash,
seeds, parent hash) and tensors.npz with namespaced arrays.  Namespaces
use a "component/param.path" convention so one archive can carry several
modules and later stages can extend earlier ones without renaming keys.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np
import torch

from .errors import ParseError, PrerequisiteError, UnsupportedVersionError

FORMAT_VERSION = 1


def collect_state(module: torch.nn.Module, prefix: str) -> dict:
    out = {}
    for key, value in module.state_dict().items():
        out[f"{prefix}/{key}"] = value.detach().cpu().numpy()
    return out


def load_into(module: torch.nn.Module, state: dict, prefix: str) -> None:
    want = prefix + "/"
    sub = {
        key[len(want):]: torch.from_numpy(np.array(value))
        for key, value in state.items()
        if key.startswith(want)
    }
    if not sub:
        raise PrerequisiteError(f"checkpoint holds no arrays under {prefix!r}")
    module.load_state_dict(sub)


def has_prefix(state: dict, prefix: str) -> bool:
    want = prefix + "/"
    return any(key.startswith(want) for key in state)


def _fixed_entry(name: str) -> zipfile.ZipInfo:
    # fixed timestamp so identical runs produce byte-identical archives
    return zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))


def save_checkpoint(path: str, state: dict, meta: dict) -> None:
    meta = dict(meta)
    meta["format_version"] = FORMAT_VERSION
    buf = io.BytesIO()
    np.savez_compressed(buf, **{k: np.asarray(v) for k, v in state.items()})
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(_fixed_entry("meta.json"),
                    json.dumps(meta, indent=2, sort_keys=True))
        zf.writestr(_fixed_entry("tensors.npz"), buf.getvalue())


def load_checkpoint(path: str) -> tuple[dict, dict]:
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if "meta.json" not in names or "tensors.npz" not in names:
                raise ParseError(f"{path} is not a checkpoint archive")
            meta = json.loads(zf.read("meta.json"))
            raw = io.BytesIO(zf.read("tensors.npz"))
    except zipfile.BadZipFile as exc:
        raise ParseError(f"{path} is not a checkpoint archive") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint format {version!r} not supported (expected {FORMAT_VERSION})"
        )
    with np.load(raw, allow_pickle=False) as npz:
        state = {key: npz[key] for key in npz.files}
    return state, meta


def require_stage(meta: dict, wanted: str, path: str) -> None:
    stage = meta.get("stage")
    if stage != wanted:
        raise PrerequisiteError(
            f"{path} holds stage {stage!r}, this command needs {wanted!r}"
        )
