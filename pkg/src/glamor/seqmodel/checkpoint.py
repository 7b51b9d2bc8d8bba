"""Binary checkpoints, stored as uncompressed ``.npz`` archives.

Every archive holds a JSON ``header`` plus named arrays. For an (inverse,
prior) model pair the header is::

    {"format": "glamor-models", "version": 2, "backend": "tabular" | "neural",
     "inverse": {dims...}, "prior": {dims...}, "shared_state_embed": bool}

and the arrays are ``inverse/<name>`` and ``prior/<name>``. Tabular models
store ``roots`` ([start, goal, node]), ``edges`` ([parent, token, child]) and
``counts`` (one row per trie node). Neural models store every parameter; a
state embedding shared by the pair is stored once as ``shared/state_embed``.
Arrays keep their exact bits, so loading reproduces the models exactly.
Optimiser state is not saved.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .recurrent import RecurrentSequenceModel
from .tabular import TabularSequenceModel

FORMAT = "glamor-models"
VERSION = 2


def write_archive(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:  # a file handle stops numpy from appending ".npz"
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def read_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    """``(header, arrays)``; raises ValueError when ``path`` is not a checkpoint archive."""
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise ValueError(f"{path} is not a checkpoint archive") from exc
    if "header" not in arrays:
        raise ValueError(f"{path} has no checkpoint header")
    return json.loads(str(arrays.pop("header"))), arrays


def archive_digest(header: dict, arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256(json.dumps(header, sort_keys=True).encode())
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(f"{name}:{a.dtype.str}:{a.shape}".encode())
        h.update(a.tobytes())
    return h.hexdigest()


def models_to_arrays(id_model, prior_model) -> tuple[dict, dict[str, np.ndarray]]:
    backend = id_model.backend
    header = {"format": FORMAT, "version": VERSION, "backend": backend}
    arrays = {}
    shared = (backend == "neural"
              and id_model.params["state_embed"] is prior_model.params["state_embed"])
    header["shared_state_embed"] = shared
    for role, model in (("inverse", id_model), ("prior", prior_model)):
        meta, arrs = model.state_arrays() if backend == "tabular" else \
            model.state_arrays(include_state_embed=not shared)
        header[role] = meta
        arrays.update({f"{role}/{k}": v for k, v in arrs.items()})
    if shared:
        arrays["shared/state_embed"] = id_model.params["state_embed"]
    return header, arrays


def models_from_arrays(header: dict, arrays: dict):
    if header.get("format") != FORMAT:
        raise ValueError("not a model checkpoint")

    def part(role):
        prefix = role + "/"
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    if header["backend"] == "tabular":
        return (TabularSequenceModel.from_arrays(header["inverse"], part("inverse")),
                TabularSequenceModel.from_arrays(header["prior"], part("prior")))
    shared = None
    if header.get("shared_state_embed"):
        shared = np.array(arrays["shared/state_embed"], dtype=float)
    idm = RecurrentSequenceModel.from_arrays(header["inverse"], part("inverse"), state_embed=shared)
    prior = RecurrentSequenceModel.from_arrays(header["prior"], part("prior"), state_embed=shared)
    from . import attach_optimizer
    attach_optimizer(idm, prior)
    return idm, prior


def save_models(path, id_model, prior_model) -> str:
    """Write a checkpoint and return :func:`models_checksum` of the pair."""
    header, arrays = models_to_arrays(id_model, prior_model)
    write_archive(path, header, arrays)
    return archive_digest(header, arrays)


def load_models(path):
    return models_from_arrays(*read_archive(path))


def models_checksum(id_model, prior_model) -> str:
    """sha256 over the header and the raw bytes of every array."""
    return archive_digest(*models_to_arrays(id_model, prior_model))
