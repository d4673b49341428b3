"""Versioned JSON artifacts with config hashes and input lineage.

Every pipeline output embeds the seed it ran under, a hash of the
resolved configuration, and the hashes of the input artifacts it
consumed, so reruns can be verified byte for byte.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from . import fit
from .basis import ModelSpec, assemble_design
from .data import Dataset

ARTIFACT_VERSION = 1


class ArtifactError(ValueError):
    pass


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(_canonical(config).encode()).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def floats(x) -> list:
    return np.asarray(x, dtype=float).tolist()


def write_artifact(path, kind: str, payload: dict, seed: int | None = None,
                   config: dict | None = None, inputs: dict | None = None) -> None:
    doc = {
        "kind": kind,
        "version": ARTIFACT_VERSION,
        "seed": seed,
        "config_hash": config_hash(config or {}),
        "inputs": {name: file_hash(p) for name, p in (inputs or {}).items()},
        "payload": payload,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_artifact(path, kind: str | None = None) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != ARTIFACT_VERSION:
        raise ArtifactError(f"unsupported artifact version {doc.get('version')}")
    if kind is not None and doc.get("kind") != kind:
        raise ArtifactError(f"expected a {kind!r} artifact, found {doc.get('kind')!r}")
    return doc


def fit_state_payload(state: fit.FitState, spec: ModelSpec,
                      offsets: np.ndarray | None) -> dict:
    return {
        "spec": spec.to_dict(),
        "offsets": floats(offsets) if offsets is not None else None,
        "beta": floats(state.beta),
        "lambdas": floats(state.lambdas),
        "laml": float(state.laml),
        "grad_max": float(state.grad_max),
        "converged": bool(state.converged),
        "log": state.log,
    }


def restore_fit_state(payload: dict, dataset: Dataset):
    """Rebuild a FitState on its training dataset; returns (state, spec, offsets)."""
    spec = ModelSpec.from_dict(payload["spec"])
    offsets = np.asarray(payload["offsets"], dtype=float) \
        if payload.get("offsets") is not None else None
    asm = assemble_design(spec, dataset, offsets=offsets)
    beta = np.asarray(payload["beta"], dtype=float)
    if beta.shape[0] != asm.p:
        raise ArtifactError(
            f"stored coefficients ({beta.shape[0]}) do not match the design "
            f"rebuilt from this dataset ({asm.p}); wrong training data?")
    state = fit.FitState(
        assembly=asm, beta=beta,
        lambdas=np.asarray(payload["lambdas"], dtype=float),
        neg_hessian=np.zeros((asm.p, asm.p)),
        laml=payload["laml"], grad_max=payload["grad_max"],
        converged=payload["converged"], log=payload.get("log", []))
    return state, spec, offsets


def forecast_payload(forecasts) -> dict:
    out = []
    for f in forecasts:
        out.append({
            "model_id": f.model_id,
            "train_end": f.train_end,
            "timestamps": [str(t) for t in f.timestamps] if f.timestamps is not None else None,
            "mu": floats(f.mu),
            "sigma": floats(f.Sigma),
        })
    return {"windows": out}


def restore_forecasts(payload: dict):
    from .score import ForecastDistribution
    out = []
    for w in payload["windows"]:
        ts = np.asarray(w["timestamps"], dtype="datetime64[s]") \
            if w.get("timestamps") else None
        out.append(ForecastDistribution(
            np.asarray(w["mu"], dtype=float), np.asarray(w["sigma"], dtype=float),
            w.get("model_id", ""), w.get("train_end", ""), ts))
    return out
