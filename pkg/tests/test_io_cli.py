"""VTK serialization, config files, manifests, and the CLI subcommands."""

import csv
import json

import numpy as np
import pytest

from slabflow.cli import main
from slabflow.config import (
    ConfigError,
    RunManifest,
    parse_config,
    serialize_config,
)
from slabflow.mesh import build_slab_mesh
from slabflow.timeslab import SimConfig
from slabflow.vtk_io import VtkError, read_vtk, write_vtk, write_vtk_polydata


@pytest.fixture(scope="module")
def slab():
    return build_slab_mesh(0.25, 0.0, 0.25)


# -- VTK -------------------------------------------------------------------


def test_vtk_roundtrip(slab, tmp_path):
    phi = np.sin(slab.nodes[:, 0] * 3)
    p = slab.nodes[:, 1] ** 2
    rng = np.random.default_rng(0)
    A = rng.normal(size=(slab.n_nodes, 3, 3))
    metric = np.einsum("kij,klj->kil", A, A) + np.eye(3)
    path = tmp_path / "mesh.vtk"
    write_vtk(slab, {"phi": phi, "p": p}, path, metric=metric)
    nodes, tets, fields, met = read_vtk(path)
    assert np.abs(nodes - slab.nodes).max() < 1e-15
    assert np.array_equal(tets, slab.tets)
    assert set(fields) == {"phi", "p"}
    assert np.abs(fields["phi"] - phi).max() < 1e-15
    assert np.abs(met - metric).max() < 1e-15
    text = path.read_text()
    assert "SCALARS phi double 1" in text
    assert "CELLS" in text and "CELL_TYPES" in text and "\n10\n" in text


def test_vtk_single_tet(tmp_path):
    from slabflow.mesh import SimplexMesh

    nodes = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    mesh = SimplexMesh(
        nodes, np.array([[0, 1, 2, 3]]), [frozenset()] * 4, np.zeros(4, bool), {}
    )
    path = tmp_path / "one.vtk"
    write_vtk(mesh, {}, path)
    rnodes, rtets, fields, met = read_vtk(path)
    assert len(rnodes) == 4 and len(rtets) == 1 and met is None


def test_vtk_bad_field_shape(slab, tmp_path):
    with pytest.raises(VtkError):
        write_vtk(slab, {"bad": np.zeros(3)}, tmp_path / "x.vtk")


def test_vtk_polydata(tmp_path):
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    path = tmp_path / "surf.vtk"
    write_vtk_polydata(verts, [(0, 1, 2), (0, 1, 2, 3)], path, {"v": [1, 2, 3, 4]})
    text = path.read_text()
    assert "POLYGONS 1" in text and "LINES 1" in text and "SCALARS v" in text


# -- config ----------------------------------------------------------------


def test_config_file_and_overrides(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("# comment\nsigma = 0.01\ndt = 0.1  # ten slabs\n")
    c = parse_config(f)
    assert c.sigma == 0.01 and c.n_slabs == 10
    c2 = parse_config(f, {"dt": "0.5"})
    assert c2.n_slabs == 2


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(None, {})  # sigma required
    with pytest.raises(ConfigError):
        parse_config(None, {"sigma": "0.02", "dt": "0.3"})  # non-integer slabs
    with pytest.raises(ConfigError):
        parse_config(None, {"sigma": "0.02", "bogus": "1"})
    f = tmp_path / "bad.cfg"
    f.write_text("sigma 0.02\n")
    with pytest.raises(ConfigError):
        parse_config(f)
    f.write_text("sigma = zebra\n")
    with pytest.raises(ConfigError):
        parse_config(f)


def test_config_roundtrip_property():
    rng = np.random.default_rng(8)
    for _ in range(25):
        dt = float(rng.choice([0.05, 0.1, 0.2, 0.25, 0.5, 1.0]))
        cfg = SimConfig(
            sigma=float(rng.uniform(0.005, 0.1)),
            dt=dt,
            xi=float(rng.uniform(0.0, 3.0)),
            h0=float(rng.uniform(0.02, 0.3)),
            iters_per_slab=int(rng.integers(2, 30)),
            profile=str(rng.choice(["ramp", "step", "cosine"])),
            p_init=str(rng.choice(["ramp", "complement"])),
            write_snapshots=bool(rng.random() < 0.5),
            seed=int(rng.integers(0, 100)),
        )
        text = serialize_config(cfg)
        values = dict(
            line.split(" = ", 1) for line in text.strip().splitlines()
        )
        assert parse_config(None, values) == cfg


def test_manifest_lifecycle(tmp_path):
    cfg = SimConfig(sigma=0.02)
    man = RunManifest(cfg, tmp_path)
    man.write()
    assert RunManifest.read(tmp_path)["status"] == "running"
    assert not RunManifest.is_complete(tmp_path)
    (tmp_path / "a.csv").write_text("x\n")
    man.finish()
    data = RunManifest.read(tmp_path)
    assert data["status"] == "complete"
    assert data["files"] == ["a.csv"]
    assert RunManifest.is_complete(tmp_path)
    # config echo round-trips through the parser to an identical config
    echo = {k: str(v) for k, v in data["config"].items()}
    assert parse_config(None, echo) == cfg
    # a listed file going missing invalidates completeness
    (tmp_path / "a.csv").unlink()
    assert not RunManifest.is_complete(tmp_path)


# -- CLI -------------------------------------------------------------------

FAST = [
    "--h0", "0.25", "--dt", "0.5", "--t-final", "1.0",
    "--iters-per-slab", "2", "--write-snapshots", "false",
]


def test_cli_run(tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(["run", "--sigma", "0.05", *FAST, "--out", str(out), "--quiet"])
    assert rc == 0
    assert (out / "residuals.csv").exists()
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "complete"
    assert "residuals.csv" in man["files"]
    with open(out / "residuals.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4  # 2 slabs x 2 iterations
    assert rows[0]["slab"] == "1" and rows[-1]["iter"] == "2"


def test_cli_run_bad_config(tmp_path, capsys):
    rc = main(["run", "--dt", "0.1", "--out", str(tmp_path)])
    assert rc != 0
    assert "sigma" in capsys.readouterr().err


def test_cli_sweep_with_resume(tmp_path, capsys):
    out = tmp_path / "sweep"
    args = ["sweep", "--sigma", "0.05,0.08", "--dt", "0.5", *FAST[:6],
            "--iters-per-slab", "2", "--write-snapshots", "false",
            "--out", str(out), "--quiet"]
    assert main(args) == 0
    cells = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert cells == ["sigma0.05_dt0.5", "sigma0.08_dt0.5"]
    with open(out / "summary.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    assert all(float(r["tail_residual"]) > 0 for r in rows)
    # resume: mark one cell incomplete, rerun, only that cell re-executes
    stamp = {c: (out / c / "residuals.csv").stat().st_mtime_ns for c in cells}
    (out / cells[0] / "manifest.json").unlink()
    capsys.readouterr()
    assert main(args) == 0
    printed = capsys.readouterr().out
    assert f"skipping complete cell {out / cells[1]}" in printed
    assert (out / cells[0] / "residuals.csv").stat().st_mtime_ns > stamp[cells[0]]
    assert (out / cells[1] / "residuals.csv").stat().st_mtime_ns == stamp[cells[1]]


def test_cli_adapt_demo_and_validate(tmp_path, capsys):
    out = tmp_path / "demo"
    rc = main([
        "adapt-demo", "--sigma", "0.05", "--h0", "0.2", "--dt", "0.35",
        "--rounds", "1", "--sweeps", "2", "--out", str(out), "--quiet",
    ])
    assert rc == 0
    vtk = out / "adapted_sigma0.05.vtk"
    assert vtk.exists() and (out / "error_report.csv").exists()
    assert main(["validate", str(vtk)]) == 0
    assert "mesh is valid" in capsys.readouterr().out
    # corrupt connectivity and expect a nonzero exit
    nodes, tets, fields, met = read_vtk(vtk)
    bad = tmp_path / "bad.vtk"
    text = vtk.read_text().replace(
        f"4 {tets[0][0]} {tets[0][1]} {tets[0][2]} {tets[0][3]}\n",
        f"4 {tets[0][1]} {tets[0][0]} {tets[0][2]} {tets[0][3]}\n",
        1,
    )
    bad.write_text(text)
    assert main(["validate", str(bad)]) == 1


def test_cli_env_default_out(tmp_path, monkeypatch):
    monkeypatch.setenv("SLABFLOW_OUT", str(tmp_path / "envout"))
    from slabflow.cli import build_parser

    # parser default is taken from the environment at construction time
    args = build_parser().parse_args(["run", "--sigma", "0.05"])
    assert args.out == str(tmp_path / "envout")
