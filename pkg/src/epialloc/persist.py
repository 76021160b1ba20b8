"""Artifact persistence for pipeline runs.

Two formats only: delimited tables for humans, JSON for machines.
Every artifact leads with a provenance record (config hash + stage
seed); nothing time-dependent is ever written, so a rerun with the same
config produces byte-identical files.
"""

import json
from pathlib import Path

import numpy as np

from .errors import MissingArtifactError


def provenance(stage: str, config_hash: str, seed: int) -> dict:
    return {"stage": stage, "config_hash": config_hash, "seed": int(seed)}


def provenance_comment(prov: dict) -> str:
    return (
        f"stage={prov['stage']} config_hash={prov['config_hash']} "
        f"seed={prov['seed']}"
    )


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    return f"{float(value):.17g}"


def write_table(path, names, columns, comment: str | None = None) -> Path:
    """Write named columns as CSV with full double precision.

    ``columns`` is a sequence of equally long 1-D arrays matching
    ``names``.  An optional comment becomes a leading ``#`` line.
    """
    path = Path(path)
    cols = [np.asarray(c).ravel() for c in columns]
    if len(cols) != len(names) or any(c.size != cols[0].size for c in cols):
        raise ValueError("names/columns mismatch")
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append(",".join(names))
    for i in range(cols[0].size):
        lines.append(",".join(_fmt(c[i]) for c in cols))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_table(path, stage: str | None = None):
    """Read a CSV written by write_table: ``(names, matrix, comment)``.

    ``stage`` names the pipeline stage to blame if the file is missing.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(stage or "unknown", str(path))
    comment = None
    names: list[str] = []
    rows: list[list[float]] = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                comment = line[1:].strip()
                continue
            if not names:
                names = line.split(",")
                continue
            rows.append([float(v) for v in line.split(",")])
    matrix = np.array(rows) if rows else np.empty((0, len(names)))
    return names, matrix, comment


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def read_json(path, stage: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(stage or "unknown", str(path))
    with open(path) as fh:
        return json.load(fh)


def update_manifest(outdir, config_hash: str, master_seed: int, stage: str,
                    seed: int, artifacts) -> Path:
    """Record a completed stage in ``<outdir>/manifest.json``.

    The manifest accumulates across stages; keys are sorted and no
    timestamps are stored, keeping reruns byte-identical.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / "manifest.json"
    manifest = {"config_hash": config_hash, "master_seed": int(master_seed),
                "stages": {}}
    if path.is_file():
        with open(path) as fh:
            previous = json.load(fh)
        if previous.get("config_hash") == config_hash:
            manifest["stages"] = previous.get("stages", {})
    manifest["stages"][stage] = {
        "seed": int(seed),
        "artifacts": sorted(str(Path(a).relative_to(outdir)) for a in artifacts),
    }
    return write_json(path, manifest)
