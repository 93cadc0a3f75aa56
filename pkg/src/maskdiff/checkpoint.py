"""Named-tensor checkpoint archives.

An archive is a safetensors file. Tensor names are ``<component>.<param>``;
the header metadata carries ``format`` (``maskdiff-ckpt``), ``version`` and
``config`` (JSON of the producing component's configuration).
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import torch
from safetensors.torch import load_file, safe_open, save_file

from .errors import StartupError

FORMAT = "maskdiff-ckpt"
VERSION = "1"


def save_archive(path: str | os.PathLike, components: dict[str, torch.nn.Module | dict[str, torch.Tensor]],
                 config: dict) -> Path:
    """Write all component state dicts plus ``config`` atomically to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, comp in components.items():
        state = comp.state_dict() if isinstance(comp, torch.nn.Module) else comp
        for key, value in state.items():
            tensors[f"{name}.{key}"] = value.detach().cpu().contiguous()
    meta = {"format": FORMAT, "version": VERSION, "config": json.dumps(config, sort_keys=True)}
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        save_file(tensors, tmp, metadata=meta)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def read_config(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not path.is_file():
        raise StartupError(f"checkpoint not found: {path}")
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
    if meta.get("format") != FORMAT:
        raise StartupError(f"{path} is not a {FORMAT} archive")
    return json.loads(meta["config"])


def load_archive(path: str | os.PathLike) -> tuple[dict[str, dict[str, torch.Tensor]], dict]:
    """Returns ({component: state_dict}, config)."""
    config = read_config(path)
    flat = load_file(str(path))
    out: dict[str, dict[str, torch.Tensor]] = {}
    for key, value in flat.items():
        comp, _, rest = key.partition(".")
        out.setdefault(comp, {})[rest] = value
    return out, config
