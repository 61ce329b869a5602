import json

import pytest

from hexadapt.cli import build_parser, main
from hexadapt.io import read_csv, read_vtk_cells


def write(tmp_path, text):
    p = tmp_path / "cfg.yaml"
    p.write_text(text, encoding="utf-8")
    return p


def test_parser_flags():
    args = build_parser().parse_args(["insert", "--config", "a.yaml", "--out", "o", "--seed", "3", "--dump-mesh-every", "5"])
    assert args.command == "insert" and args.seed == 3 and args.dump_mesh_every == 5
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run"])


def test_insert_outputs(tmp_path):
    cfg = write(tmp_path, "scenario: insert\nmotion:\n  depth: 0.0005\nadaptivity:\n  mode: adaptive\n")
    out = tmp_path / "out"
    assert main(["insert", "--config", str(cfg), "--out", str(out), "--seed", "4", "--dump-mesh-every", "5"]) == 0
    rows = read_csv(out / "steps.csv")
    assert len(rows) == 15
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 4 and "solve" in manifest["timings"]
    assert "seed: 4" in (out / "config.yaml").read_text()
    dumps = sorted(out.glob("mesh_*.vtk"))
    assert [d.name for d in dumps] == ["mesh_00005.vtk", "mesh_00010.vtk", "mesh_00015.vtk"]
    pts, cells, types = read_vtk_cells(dumps[-1])
    assert len(cells) >= 144 and set(types) == {12}


def test_probe_and_lshape_commands(tmp_path):
    cfg = write(tmp_path, "probe:\n  depth: 0.0015\n  samples: 5\n  modes: [unrefined]\n")
    out = tmp_path / "probe"
    assert main(["probe", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(read_csv(out / "profile.csv")) == 5
    cfg = write(tmp_path, "lshape:\n  uniform_passes: 1\n  adaptive_passes: 1\n")
    out = tmp_path / "lshape"
    assert main(["lshape", "--config", str(cfg), "--out", str(out)]) == 0
    assert [r["mode"] for r in read_csv(out / "convergence.csv")] == ["uniform", "adaptive"]


def test_config_errors_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, "scenario: insert\ntissue:\n  poisson_ratio: 0.6\n")
    assert main(["insert", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "tissue.poisson_ratio" in capsys.readouterr().err
    cfg = write(tmp_path, "scenario: lshape\n")
    assert main(["insert", "--config", str(cfg), "--out", str(tmp_path / "y")]) == 2
