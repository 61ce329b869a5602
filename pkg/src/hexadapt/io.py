"""Output writers: CSV tables, legacy ASCII VTK meshes, run manifests."""
from __future__ import annotations

import csv
import json
import math
import platform
from pathlib import Path

import numpy as np

VTK_HEXAHEDRON = 12


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return "" if v is None else str(v)


def write_csv(path, rows, columns=None):
    """UTF-8 CSV with a header row; floats are written with ``repr`` so the
    text is an exact function of the values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])
    return path


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_vtk(path, mesh, positions=None, cell_data=None, point_data=None, title="hexadapt mesh"):
    """Live elements of ``mesh`` as a legacy ASCII unstructured grid.

    Parameters
    ----------
    positions : (node_capacity, 3) array, optional
        Node coordinates to write (default rest positions).
    cell_data : dict name -> (n_live_elements,) array, optional
    point_data : dict name -> (node_capacity,) or (node_capacity, 3) array, optional
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pos = mesh.rest_positions if positions is None else np.asarray(positions)
    live = mesh.live_nodes()
    idx = mesh.node_index()
    elems = mesh.live_elements()
    conn = idx[mesh.connectivity(elems)]
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {len(live)} double")
    lines.extend(" ".join(repr(float(c)) for c in p) for p in pos[live])
    lines.append(f"CELLS {len(elems)} {9 * len(elems)}")
    lines.extend("8 " + " ".join(str(int(n)) for n in row) for row in conn)
    lines.append(f"CELL_TYPES {len(elems)}")
    lines.extend([str(VTK_HEXAHEDRON)] * len(elems))
    if cell_data:
        lines.append(f"CELL_DATA {len(elems)}")
        for name, vals in cell_data.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(repr(float(v)) for v in np.asarray(vals, dtype=float))
    if point_data:
        lines.append(f"POINT_DATA {len(live)}")
        for name, vals in point_data.items():
            vals = np.asarray(vals, dtype=float)[live]
            if vals.ndim == 2:
                lines.append(f"VECTORS {name} double")
                lines.extend(" ".join(repr(float(c)) for c in row) for row in vals)
            else:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(repr(float(v)) for v in vals)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_vtk_cells(path):
    """``(points, cells, cell_types)`` from a file written by ``write_vtk``."""
    tokens = Path(path).read_text(encoding="utf-8").split("\n")
    i = 0
    pts = cells = types = None
    while i < len(tokens):
        line = tokens[i].split()
        if line and line[0] == "POINTS":
            n = int(line[1])
            pts = np.array([[float(c) for c in tokens[i + 1 + k].split()] for k in range(n)])
            i += n
        elif line and line[0] == "CELLS":
            n = int(line[1])
            cells = np.array([[int(c) for c in tokens[i + 1 + k].split()[1:]] for k in range(n)])
            i += n
        elif line and line[0] == "CELL_TYPES":
            n = int(line[1])
            types = np.array([int(tokens[i + 1 + k]) for k in range(n)])
            i += n
        i += 1
    return pts, cells, types


def versions():
    import scipy

    from . import __version__

    out = {
        "hexadapt": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }
    try:
        import pyamg

        out["pyamg"] = pyamg.__version__
    except ImportError:
        pass
    return out


def write_manifest(path, report, files=(), argv=None):
    """JSON manifest: echoed config, summary, package versions and timings."""
    path = Path(path)
    data = {
        "scenario": report.scenario,
        "argv": list(argv) if argv is not None else None,
        "config": report.config,
        "summary": report.summary,
        "versions": versions(),
        "timings": report.timings,
        "files": [str(Path(f).name) for f in files],
    }
    path.write_text(json.dumps(data, indent=2, default=_json_default) + "\n", encoding="utf-8")
    return path


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serialisable: {type(v)}")


def write_report(report, out_dir, columns=None, argv=None):
    """Every table of ``report`` as ``<name>.csv`` plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, rows in report.tables.items():
        cols = (columns or {}).get(name)
        files.append(write_csv(out / f"{name}.csv", rows, cols))
    write_manifest(out / "manifest.json", report, files, argv)
    return files
