"""Ensemble checkpoint container.

A checkpoint is an uncompressed ``.npz`` archive:

* ``__meta__`` -- 0-d unicode array holding a JSON document with keys
  ``format`` (``"disentangle-lab-checkpoint"``), ``version`` (1), ``spec``
  (model spec fields), ``tags`` (parameter name -> ``FE``/``FP``),
  ``member_seeds``, ``speakers`` (training speaker ids in label order) and
  free-form ``extra`` (run tag, adversarial and training configs).
* ``member{i}/{parameter name}`` -- one float array per parameter per member.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .models import ModelSpec, build_model
from .training import EnsembleModel

FORMAT = "disentangle-lab-checkpoint"
VERSION = 1


def save_checkpoint(path, ensemble: EnsembleModel, speakers=(), extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    first = ensemble.members[0]
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "spec": first.spec.to_dict(),
        "tags": dict(first.tags),
        "member_seeds": [int(s) for s in ensemble.member_seeds],
        "speakers": list(speakers),
        "extra": extra or {},
    }
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    for i, model in enumerate(ensemble.members):
        for name, p in model.params.items():
            arrays[f"member{i}/{name}"] = p.data
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[EnsembleModel, dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise DataError(f"{path}: not a {FORMAT} file")
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != FORMAT or meta.get("version") != VERSION:
            raise DataError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
        spec = ModelSpec.from_dict(meta["spec"])
        members = []
        for i, seed in enumerate(meta["member_seeds"]):
            model = build_model(spec.replace(seed=seed))
            prefix = f"member{i}/"
            model.load_state_dict({k[len(prefix) :]: z[k] for k in z.files if k.startswith(prefix)})
            members.append(model)
    return EnsembleModel(members, list(meta["member_seeds"])), meta
