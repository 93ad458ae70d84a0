"""
Artifact writers and small helpers for the inverse-problem flow.
"""

import csv
import hashlib
import json
import os
from typing import Iterable, List, Optional, Sequence

import numpy as np

MANIFEST_NAME = "MANIFEST"


def write_field(path, coords, values, columns: Optional[Sequence[str]] = None) -> str:
    """Write a nodal field as `x y value...` rows; values may carry several columns."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    values = np.asarray(values, dtype=float).reshape(coords.shape[0], -1)
    names = list(columns) if columns else [f"v{k}" for k in range(values.shape[1])] if values.shape[1] > 1 else ["value"]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    np.savetxt(path, np.hstack([coords, values]), fmt="%.17g", header=" ".join(["x", "y"] + names), comments="# ")
    return path


def read_field(path):
    """Inverse of write_field: returns (coords (n, 2), values (n, k))."""
    table = np.loadtxt(path, comments="#", ndmin=2)
    if table.shape[1] < 3:
        raise ValueError(f"Field file {path} needs at least three columns, found {table.shape[1]}")
    return table[:, :2], table[:, 2:]


def write_mesh(path, mesh) -> str:
    with open(path, "w") as f:
        f.write(f"vertices {mesh.num_vertices}\n")
        for x, y in mesh.vertices:
            f.write(f"{x:.17g} {y:.17g}\n")
        f.write(f"triangles {mesh.num_triangles}\n")
        for a, b, c in mesh.triangles:
            f.write(f"{a} {b} {c}\n")
    return path


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def save_results(data, path) -> str:
    """Save results to a JSON file."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, default=str)
    return path


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(directory, files: List[str], complete: bool) -> str:
    """MANIFEST lists every artifact with its size and SHA-256, plus the completeness flag."""
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "w") as f:
        f.write(f"complete: {'yes' if complete else 'no'}\n")
        for name in sorted(set(files)):
            full = os.path.join(directory, name)
            f.write(f"{file_sha256(full)}  {os.path.getsize(full)}  {name}\n")
    return path


def read_manifest(directory):
    """Returns (complete, {name: sha256})."""
    with open(os.path.join(directory, MANIFEST_NAME)) as f:
        lines = f.read().splitlines()
    complete = lines[0].split(":", 1)[1].strip() == "yes"
    entries = {}
    for line in lines[1:]:
        digest, _, name = line.split("  ", 2)
        entries[name] = digest
    return complete, entries


def print_stage_result(stage_name, result):
    """Print stage result in a formatted way."""
    print(f"\n{'='*20} {stage_name} RESULT {'='*20}")
    print(result)
    print("=" * 60)


def validate_inputs(config_path, output_dir=None):
    """Basic validation for run inputs."""
    errors = []
    warnings = []

    if not config_path or not str(config_path).strip():
        errors.append("Config path cannot be empty")
    elif not os.path.isfile(config_path):
        errors.append(f"Config file not found: {config_path}")

    if output_dir and os.path.isdir(output_dir) and os.listdir(output_dir):
        warnings.append(f"Output directory {output_dir} is not empty; artifacts will be overwritten")

    return {
        "valid": len(errors) == 0,
        "errors": errors,
        "warnings": warnings
    }
