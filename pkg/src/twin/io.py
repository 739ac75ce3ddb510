"""File formats shared by the command-line tools."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .activation import RootNodeSet
from .geometry import ELECTRODE_NAMES, ElectrodeSet, FiberField, TetMesh, VentricularCoords


class FormatError(ValueError):
    pass


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return data


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def save_mesh(path, mesh: TetMesh, fibres: FiberField, coords: VentricularCoords) -> None:
    data = {
        "nodes": mesh.nodes.tolist(),
        "tets": mesh.tets.tolist(),
        "fibres": fibres.f.tolist(),
        "sheets": fibres.s.tolist(),
        "normals": fibres.n.tolist(),
        "coords": coords.as_array().tolist(),
    }
    if mesh.surfaces:
        data["surfaces"] = {k: v.tolist() for k, v in sorted(mesh.surfaces.items())}
    write_json(path, data)


def load_mesh(path) -> tuple[TetMesh, FiberField, VentricularCoords]:
    """Read a mesh container; coordinates must be supplied precomputed."""
    data = _read_json(path)
    missing = [k for k in ("nodes", "tets", "fibres", "sheets", "normals", "coords") if k not in data]
    if missing:
        raise FormatError(f"{path}: missing field(s) " + ", ".join(missing))
    mesh = TetMesh.from_arrays(data["nodes"], data["tets"], data.get("surfaces"), reorient=False)
    fibres = FiberField(data["fibres"], data["sheets"], data["normals"])
    for name, arr in (("fibres", fibres.f), ("sheets", fibres.s), ("normals", fibres.n)):
        if arr.shape != (mesh.n_tets, 3):
            raise FormatError(f"{path}: {name} must hold one vector per tet")
    if fibres.orthonormality_error() > 1e-6:
        raise FormatError(f"{path}: fibre frames are not orthonormal")
    c = np.asarray(data["coords"], dtype=float)
    if c.shape != (mesh.n_nodes, 4):
        raise FormatError(f"{path}: coords must hold ab,tm,tv,pa per node")
    if np.any(c < 0) or np.any(c > 1):
        raise FormatError(f"{path}: ventricular coordinates must lie in [0, 1]")
    return mesh, fibres, VentricularCoords.from_array(c)


def save_field(path, values) -> None:
    """Binary field: uint32 node count, uint32 time count, then float32 row-major (mV)."""
    values = np.asarray(values, dtype="<f4")
    with open(path, "wb") as fh:
        np.array(values.shape, dtype="<u4").tofile(fh)
        values.tofile(fh)


def load_field(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = np.fromfile(fh, dtype="<u4", count=2)
        if len(head) != 2:
            raise FormatError(f"{path}: truncated header")
        n, t = (int(x) for x in head)
        values = np.fromfile(fh, dtype="<f4")
    if values.size != n * t:
        raise FormatError(f"{path}: expected {n * t} samples, found {values.size}")
    return values.reshape(n, t).astype(np.float64)


def save_roots(path, roots: RootNodeSet) -> None:
    write_json(path, {"nodes": list(roots.nodes), "times": [float(t) for t in roots.times]})


def load_roots(path, n_nodes: int | None = None) -> RootNodeSet:
    data = _read_json(path)
    if "nodes" not in data:
        raise FormatError(f"{path}: missing 'nodes'")
    nodes = [int(i) for i in data["nodes"]]
    times = [float(t) for t in data.get("times", [0.0] * len(nodes))]
    if n_nodes is not None and any(not 0 <= i < n_nodes for i in nodes):
        raise FormatError(f"{path}: root index out of range for a {n_nodes}-node mesh")
    try:
        return RootNodeSet(tuple(nodes), tuple(times))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_electrodes(path, electrodes: ElectrodeSet) -> None:
    write_json(path, {name: [float(v) for v in electrodes[name]] for name in electrodes.names})


def load_electrodes(path) -> ElectrodeSet:
    data = _read_json(path)
    missing = [n for n in ELECTRODE_NAMES if n not in data]
    if missing:
        raise FormatError(f"{path}: missing electrode(s) " + ", ".join(missing))
    extra = sorted(set(data) - set(ELECTRODE_NAMES))
    if extra:
        raise FormatError(f"{path}: unknown electrode(s) " + ", ".join(extra))
    pos = np.array([data[n] for n in ELECTRODE_NAMES], dtype=float)
    if pos.shape != (9, 3):
        raise FormatError(f"{path}: each electrode needs an xyz position")
    if len(np.unique(pos, axis=0)) != 9:
        raise FormatError(f"{path}: electrode positions must be distinct")
    return ElectrodeSet(pos)


def save_node_values(path, values, column: str) -> None:
    """Two-column CSV ``node_index,<column>``."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"node_index,{column}\n")
        for i, v in enumerate(np.asarray(values, dtype=float)):
            fh.write(f"{i},{float(v)!r}\n")


def load_node_values(path, column: str, n_nodes: int | None = None) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
    if header != f"node_index,{column}":
        raise FormatError(f"{path}: header must be node_index,{column}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    idx = data[:, 0].astype(np.int64)
    if not np.array_equal(idx, np.arange(len(idx))):
        raise FormatError(f"{path}: node indices must run 0..N-1 in order")
    if n_nodes is not None and len(idx) != n_nodes:
        raise FormatError(f"{path}: {len(idx)} rows for a {n_nodes}-node mesh")
    return data[:, 1].copy()


def save_atmap(path, t_a) -> None:
    save_node_values(path, t_a, "t_a_ms")


def load_atmap(path, n_nodes: int | None = None) -> np.ndarray:
    t = load_node_values(path, "t_a_ms", n_nodes)
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        raise FormatError(f"{path}: activation times must be finite and >= 0")
    return t
