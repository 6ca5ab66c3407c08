import csv
import json
import math

import numpy as np
import pytest

from unfoldstokes.cli import RunConfig, main
from unfoldstokes.errors import MalformedInput
from unfoldstokes.systems import model_system

RES = [[0.2, 0.5], [0.3, -0.1]]


def _c(z):
    return [float(np.real(z)), float(np.imag(z))]


def _mat(M):
    return [[_c(v) for v in row] for row in M]


@pytest.fixture
def files(tmp_path):
    def put(name, doc):
        p = tmp_path / name
        p.write_text(json.dumps(doc))
        return str(p)

    return {
        "model": put("model.json", model_system([1, -1], [0.3, 0.1]).to_document()),
        "ladder": put("ladder.json", model_system([1, -1], [0.3, 0.1], np.array(RES)).to_document()),
        "res": put("res.json", model_system([0.1, -0.1], [0.1, -0.1],
                                            np.array([[0.05, 0.3], [0.2, -0.05]])).to_document()),
        "inv": put("inv.json", {"lambda": [[_c(1), _c(0.3)], [_c(-1), _c(0.1)]]}),
        "stokes": put("stokes.json", {"C_R": _mat([[1, 0.3 + 0.1j], [0, 1]]), "C_L": _mat([[1, 0], [-0.2, 1]])}),
        "identity": put("identity.json", {"C_R": _mat(np.eye(2)), "C_L": _mat(np.eye(2))}),
        "broken": put("broken.json", {"C_R": [[1, 2]], "C_L": "x"}),
        "leaky": put("leaky.json", {"C_R": _mat([[1, 0], [0.5, 1]]), "C_L": _mat(np.eye(2))}),
        "dir": tmp_path,
    }


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, json.loads(out) if code == 0 else None, err


def test_invariants_report(files, capsys):
    code, rep, _ = run(capsys, "invariants", files["model"], "--eps-modulus", 0.01)
    assert code == 0
    np.testing.assert_allclose(np.array(rep["lambda"])[..., 0], [[1, 0.3], [-1, 0.1]], atol=1e-12)
    assert list(rep)[:4] == ["version", "command", "eps", "normalization"]
    assert set(rep) >= {"mu", "log_D", "Delta", "resonance_margins"}
    assert rep["eps"] == {"modulus": 0.01, "argument": 2 * math.pi}


def test_reports_are_byte_identical(files, capsys):
    argv = ("stokes", files["ladder"], "--eps-modulus", 0.01, "--eps-arg", 6.5)
    main(list(map(str, argv)))
    first = capsys.readouterr().out
    main(list(map(str, argv)))
    assert capsys.readouterr().out == first


@pytest.mark.parametrize("modulus", [0.01, 0])
def test_model_has_identity_collection(files, capsys, modulus):
    code, rep, _ = run(capsys, "stokes", files["model"], "--eps-modulus", modulus)
    assert code == 0
    can = rep["collection"]["canonical"]
    for key in ("C_R", "C_L"):
        np.testing.assert_allclose(np.array(can[key])[..., 0], np.eye(2), atol=1e-9)
        np.testing.assert_allclose(np.array(can[key])[..., 1], 0, atol=1e-9)


def test_resonance_exit_names_the_pair(files, capsys):
    code, _, err = run(capsys, "stokes", files["res"], "--eps-modulus", 1 / 81, "--eps-arg", 2 * math.pi)
    assert code == 3
    assert "blocking pair" in err and "'R'" in err


def test_ladder_run_writes_table(files, capsys):
    out = files["dir"] / "out"
    code, rep, _ = run(capsys, "stokes", files["ladder"], "--ladder", "1e-2,5e-3,2.5e-3,1e-3",
                       "--workers", 2, "--out-dir", out)
    assert code == 0
    assert len(rep["ladder"]) == 4 and len(rep["successive_differences"]) == 3
    assert {"slope", "r2", "gaps"} <= set(rep["gap_fit"])
    with open(out / "stokes_ladder.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["modulus", "matrix", "row", "col", "re", "im", "branch_gap"]
    assert len(rows) == 1 + 4 * 2
    assert json.loads((out / "stokes.json").read_text()) == rep


def test_riccati_check(files, capsys):
    code, rep, _ = run(capsys, "riccati-check", files["ladder"], "--eps-modulus", 0.01, "--seed", 3)
    assert code == 0 and rep["seed"] == 3
    assert rep["max_flow_vs_linear"] < 1e-6
    assert rep["max_first_integrals"] < 1e-6
    assert run(capsys, "riccati-check", files["ladder"])[0] == 2


def test_geometry_and_resonances(files, capsys):
    out = files["dir"] / "geo"
    code, rep, _ = run(capsys, "geometry", files["model"], "--eps-modulus", 0.01, "--emit-geometry", "--out-dir", out)
    assert code == 0 and rep["in_sector"]
    assert "loop_L" in rep["curves"] and (out / "geometry.csv").exists()
    code, rep, _ = run(capsys, "resonances", files["res"], "--pair", 1, 2, "R")
    assert code == 0
    first = rep["roots"][0]
    assert first["tag"] == [1, 2, "R", 1]
    assert first["eps"]["modulus"] == pytest.approx(1 / 81, rel=1e-10)


def test_realize_identity_target_gives_the_model(files, capsys):
    out = files["dir"] / "real"
    code, rep, _ = run(capsys, "realize", files["inv"], files["identity"], "--eps-modulus", 0.01, "--out-dir", out)
    assert code == 0
    doc = json.loads((out / "reconstructed_system.json").read_text())
    A = np.array(doc["B"])[..., 0, 0] + 1j * np.array(doc["B"])[..., 0, 1]  # (n, n, x-degree)
    np.testing.assert_allclose(A[:, :, 0], np.diag([1, -1]), atol=1e-12)
    np.testing.assert_allclose(A[:, :, 1], np.diag([0.3, 0.1]), atol=1e-12)
    assert (out / "reconstructed_samples.csv").exists()


def test_roundtrip_prints_distance(files, capsys):
    code, rep, err = run(capsys, "realize", files["inv"], files["stokes"], "--eps-modulus", 0.01, "--roundtrip")
    assert code == 0
    assert rep["distance"] < 1e-3
    assert err.startswith("distance ")


@pytest.mark.parametrize("argv", [
    ("invariants", "no_such_file.json"),
    ("realize", "{inv}", "{broken}"),
    ("realize", "{inv}", "{leaky}"),
    ("frobnicate",),
    ("stokes", "{model}", "--ladder", "1e-3,1e-2"),
    ("analyze", "{broken}"),
])
def test_usage_and_malformed_input_exit_2(files, capsys, argv):
    argv = [a.format(**files) for a in argv]
    assert main(argv) == 2


def test_config_file(files, capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"rtol": 1e-10, "seed": 5}))
    code, _, _ = run(capsys, "invariants", files["model"], "--config", cfg)
    assert code == 0
    cfg.write_text(json.dumps({"tolerance": 1}))
    assert run(capsys, "invariants", files["model"], "--config", cfg)[0] == 2
    with pytest.raises(MalformedInput):
        RunConfig(rtol=-1).validate()


def test_analyze(files, capsys, tmp_path):
    fam = []
    for v in (0.4, 0.7):
        fam.append({"C_R": _mat([[1, v, 0], [0, 1, 0], [0, 0, 1]]), "C_L": _mat(np.eye(3))})
    p = tmp_path / "fam.json"
    p.write_text(json.dumps(fam))
    code, rep, _ = run(capsys, "analyze", p, "--log-term", 1, 2, "R")
    assert code == 0
    assert rep["reducibility"]["blocks"] == [[1, 2], [3]]
    assert rep["log_term"]["blocked"] is True
