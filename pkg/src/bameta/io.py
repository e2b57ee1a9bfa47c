"""Frame files (JSON lines) and hyperparameter checkpoints (JSON)."""
from __future__ import annotations

import json
from typing import Iterable, List, Optional, Union

import numpy as np

from .channels import FrameDataset, frame_from_record, frame_to_record
from .models import BayesHyper, FreqHyper, ModelShape

Hyper = Union[FreqHyper, BayesHyper]


class CheckpointError(ValueError):
    pass


def write_frames(frames: Iterable[FrameDataset], path: str) -> int:
    n = 0
    with open(path, "w") as fh:
        for f in frames:
            fh.write(json.dumps(frame_to_record(f), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def read_frames(path: str) -> List[FrameDataset]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(frame_from_record(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad frame record ({exc})") from exc
    return out


def hyper_to_dict(hyper: Hyper, seed: Optional[int] = None, config_hash: Optional[str] = None) -> dict:
    if isinstance(hyper, FreqHyper):
        nu, rho = hyper.init, None
    else:
        nu, rho = hyper.nu, hyper.rho
    return {
        "variant": hyper.mode,
        "nu": [float(v) for v in nu],
        "rho": None if rho is None else [float(v) for v in rho],
        "shape": None if hyper.shape is None else hyper.shape.to_dict(),
        "meta": {"seed": seed, "config-hash": config_hash},
    }


def hyper_from_dict(d: dict) -> Hyper:
    try:
        variant = d["variant"]
        nu = np.asarray(d["nu"], dtype=np.float64)
        shape = None if d.get("shape") is None else ModelShape.from_dict(d["shape"])
        meta = dict(d.get("meta") or {})
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if shape is not None and shape.dim != nu.size:
        raise CheckpointError(f"checkpoint has {nu.size} values but its shape needs {shape.dim}")
    if variant == "freq":
        return FreqHyper(nu, shape, meta)
    if variant == "bayes":
        if d.get("rho") is None:
            raise CheckpointError("bayes checkpoint without rho")
        rho = np.asarray(d["rho"], dtype=np.float64)
        if rho.shape != nu.shape:
            raise CheckpointError("nu and rho differ in length")
        return BayesHyper(nu, rho, shape, meta)
    raise CheckpointError(f"unknown checkpoint variant {variant!r}")


def save_checkpoint(hyper: Hyper, path: str, seed: Optional[int] = None, config_hash: Optional[str] = None) -> None:
    with open(path, "w") as fh:
        json.dump(hyper_to_dict(hyper, seed, config_hash), fh)
        fh.write("\n")


def load_checkpoint(path: str) -> Hyper:
    with open(path) as fh:
        return hyper_from_dict(json.load(fh))
