"""Legacy ASCII VTK output for timespace meshes, surfaces, and slices.

Unstructured grids carry the tet mesh with nodal scalar fields and the
optional metric tensor (6 components per node); polydata files carry
isosurfaces and time-face slices.  A minimal reader supports the round-trip
needed by the validate subcommand.
"""

import numpy as np

VTK_TET = 10


class VtkError(Exception):
    pass


def _write_points(f, pts):
    f.write(f"POINTS {len(pts)} double\n")
    for p in pts:
        f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def write_vtk(mesh, fields, path, metric=None):
    """Write the mesh and nodal scalar fields as a legacy VTK file.

    fields maps name -> (n,) array; metric, if given, is an (n, 3, 3)
    tensor array stored as a 6-component FIELD array (xx yy zz xy yz xz).
    """
    fields = dict(fields or {})
    n, m = mesh.n_nodes, mesh.n_tets
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write("timespace slab\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        _write_points(f, mesh.nodes)
        f.write(f"CELLS {m} {5 * m}\n")
        for t in mesh.tets:
            f.write(f"4 {t[0]} {t[1]} {t[2]} {t[3]}\n")
        f.write(f"CELL_TYPES {m}\n")
        for _ in range(m):
            f.write(f"{VTK_TET}\n")
        if fields or metric is not None:
            f.write(f"POINT_DATA {n}\n")
        for name, vals in fields.items():
            vals = np.asarray(vals, dtype=float)
            if vals.shape != (n,):
                raise VtkError(f"field {name!r} has shape {vals.shape}, want ({n},)")
            f.write(f"SCALARS {name} double 1\n")
            f.write("LOOKUP_TABLE default\n")
            for v in vals:
                f.write(f"{v:.17g}\n")
        if metric is not None:
            metric = np.asarray(metric, dtype=float)
            f.write("FIELD metric_data 1\n")
            f.write(f"metric 6 {n} double\n")
            for t in metric:
                f.write(
                    f"{t[0, 0]:.17g} {t[1, 1]:.17g} {t[2, 2]:.17g} "
                    f"{t[0, 1]:.17g} {t[1, 2]:.17g} {t[0, 2]:.17g}\n"
                )


def write_vtk_polydata(verts, polys, path, point_fields=None):
    """Write a triangle/line soup as legacy VTK polydata.

    polys is a list of index sequences; triangles go to POLYGONS, longer or
    shorter chains to LINES based on per-entry length 2 meaning a segment.
    """
    point_fields = dict(point_fields or {})
    tris = [p for p in polys if len(p) == 3]
    lines = [p for p in polys if len(p) != 3]
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write("surface\n")
        f.write("ASCII\n")
        f.write("DATASET POLYDATA\n")
        _write_points(f, np.asarray(verts, dtype=float))
        if tris:
            f.write(f"POLYGONS {len(tris)} {4 * len(tris)}\n")
            for t in tris:
                f.write(f"3 {t[0]} {t[1]} {t[2]}\n")
        if lines:
            total = sum(len(p) + 1 for p in lines)
            f.write(f"LINES {len(lines)} {total}\n")
            for p in lines:
                f.write(" ".join([str(len(p))] + [str(i) for i in p]) + "\n")
        if point_fields:
            f.write(f"POINT_DATA {len(verts)}\n")
            for name, vals in point_fields.items():
                f.write(f"SCALARS {name} double 1\n")
                f.write("LOOKUP_TABLE default\n")
                for v in np.asarray(vals, dtype=float):
                    f.write(f"{v:.17g}\n")


def read_vtk(path):
    """Read a legacy ASCII unstructured-grid VTK file written by write_vtk.

    Returns (nodes (n,3), tets (m,4), fields dict, metric or None).
    """
    with open(path) as f:
        tokens = f.read().split("\n")
    i = 0

    def line():
        nonlocal i
        while i < len(tokens) and not tokens[i].strip():
            i += 1
        if i >= len(tokens):
            raise VtkError("unexpected end of file")
        i += 1
        return tokens[i - 1].strip()

    header = line()
    if not header.startswith("# vtk"):
        raise VtkError("not a VTK file")
    line()  # title
    if line() != "ASCII":
        raise VtkError("only ASCII VTK is supported")
    if line() != "DATASET UNSTRUCTURED_GRID":
        raise VtkError("only unstructured grids are supported")

    parts = line().split()
    if parts[0] != "POINTS":
        raise VtkError("missing POINTS block")
    n = int(parts[1])
    nodes = np.array([line().split() for _ in range(n)], dtype=float)
    if nodes.shape != (n, 3):
        raise VtkError("malformed POINTS block")

    parts = line().split()
    if parts[0] != "CELLS":
        raise VtkError("missing CELLS block")
    m = int(parts[1])
    cells = np.array([line().split() for _ in range(m)], dtype=np.int64)
    if cells.shape != (m, 5) or not (cells[:, 0] == 4).all():
        raise VtkError("only tetrahedral cells are supported")
    tets = cells[:, 1:]

    parts = line().split()
    if parts[0] != "CELL_TYPES":
        raise VtkError("missing CELL_TYPES block")
    types = np.array([line() for _ in range(m)], dtype=np.int64)
    if not (types == VTK_TET).all():
        raise VtkError("non-tet cell type found")

    fields, metric = {}, None
    while True:
        try:
            parts = line().split()
        except VtkError:
            break
        if parts[0] == "POINT_DATA":
            continue
        if parts[0] == "SCALARS":
            name = parts[1]
            line()  # LOOKUP_TABLE
            fields[name] = np.array([line() for _ in range(n)], dtype=float)
        elif parts[0] == "FIELD":
            narr = int(parts[2])
            for _ in range(narr):
                hp = line().split()
                comps, tuples = int(hp[1]), int(hp[2])
                data = np.array(
                    " ".join(line() for _ in range(tuples)).split(), dtype=float
                ).reshape(tuples, comps)
                if hp[0] == "metric" and comps == 6:
                    metric = np.empty((tuples, 3, 3))
                    metric[:, 0, 0] = data[:, 0]
                    metric[:, 1, 1] = data[:, 1]
                    metric[:, 2, 2] = data[:, 2]
                    metric[:, 0, 1] = metric[:, 1, 0] = data[:, 3]
                    metric[:, 1, 2] = metric[:, 2, 1] = data[:, 4]
                    metric[:, 0, 2] = metric[:, 2, 0] = data[:, 5]
        else:
            raise VtkError(f"unsupported block {parts[0]!r}")
    return nodes, tets, fields, metric
