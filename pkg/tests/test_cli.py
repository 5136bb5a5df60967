import json

import numpy as np
import pytest

from rankone import artifacts, cli
from rankone.config import ConfigError, load_config, parse_times
from rankone.construction import ConstructionParams, Family, build_stages
from rankone.levels import StageTime


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_build_matches_library(tmp_path):
    out = tmp_path / "b"
    assert cli.main(["build", "--max-stage", "10", "--out", str(out)]) == 0
    header, rows = artifacts.read_csv_header(out / "stages.csv")
    assert rows[0] == ["j", "r_j", "h_j", "w_j", "added_spacer_mass"]
    stages = build_stages(ConstructionParams(Family.FEPS, eps=0.5, h1=1.0, max_stage=10))
    assert [float(r[2]) for r in rows[1:]] == list(stages.heights[1:])
    assert header["construction"] == {"family": "FEps", "eps": 0.5, "h1": 1.0, "max_stage": 10}
    m = _manifest(out)
    assert m["status"] == "complete" and m["outputs"][0]["path"] == "stages.csv"
    assert len(m["config_hash"]) == 64 and header["config_hash"] == m["config_hash"]


def test_weaklimit_at_zero(tmp_path):
    out = tmp_path / "w"
    assert cli.main(["weaklimit", "--times", "0", "--max-stage", "20", "--out", str(out)]) == 0
    _, rows = artifacts.read_csv_header(out / "weaklimit.csv")
    row = dict(zip(rows[0], rows[1]))
    assert abs(float(row["alpha"])) < 1e-12 and abs(float(row["beta"]) - 1) < 1e-12
    assert float(row["residual"]) < 1e-12


def test_unknown_family_exit_status(tmp_path, capsys):
    assert cli.main(["build", "--family", "Foo", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "family" in err and "Foo" in err


def test_line_anchored_errors(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[construction]\n# comment\n\nfamily = Nope\n")
    assert cli.main(["build", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert f"{cfg}:4: [construction] family:" in capsys.readouterr().err
    cfg.write_text("[construction]\nmax_stage = 12\n[spectrum]\ndt = fast\n")
    with pytest.raises(ConfigError) as info:
        load_config(cfg).get("spectrum", "dt", float)
    assert info.value.line == 4 and info.value.key == "dt"
    cfg.write_text("[construction]\nmax_stages = 12\n")
    with pytest.raises(ConfigError) as info:
        load_config(cfg)
    assert info.value.line == 2
    cfg.write_text("[nonsense]\n")
    with pytest.raises(ConfigError):
        load_config(cfg)
    cfg.write_text("family = FEps\n")
    with pytest.raises(ConfigError) as info:
        load_config(cfg)
    assert info.value.line == 1


def test_construction_errors_name_the_field(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[construction]\nfamily = FEps\neps = 1.5\n")
    with pytest.raises(ConfigError) as info:
        load_config(cfg).construction
    assert info.value.key == "eps" and info.value.line == 3


def test_flag_overrides_config(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[construction]\nfamily = OdometerControl\nmax_stage = 5\n")
    out = tmp_path / "o"
    assert cli.main(["build", "--config", str(cfg), "--max-stage", "7", "--out", str(out)]) == 0
    header, rows = artifacts.read_csv_header(out / "stages.csv")
    assert header["construction"]["max_stage"] == 7 and len(rows) == 8
    assert cli.main(["build", "--config", str(cfg), "--set", "construction.h1=2", "--out", str(out)]) == 0
    _, rows = artifacts.read_csv_header(out / "stages.csv")
    assert float(rows[1][2]) == 2.0
    assert cli.main(["build", "--set", "construction.bogus=1", "--out", str(out)]) == 2


def test_reproducible_bytes(tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        args = ["spectrum", "--max-stage", "20", "--T", "64", "--dt", "0.5", "--seed", "5", "--out", str(out)]
        assert cli.main(args) == 0
    for name in ("autocorrelation.csv", "spectrum.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    m0, m1 = _manifest(outs[0]), _manifest(outs[1])
    assert m0["config_hash"] == m1["config_hash"] and m0["outputs"] == m1["outputs"]
    header, _ = artifacts.read_csv_header(outs[0] / "spectrum.csv")
    assert header["seed"] == 5 and header["window"] == "blackman"


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.main(["build", "--max-stage", "4"]) == 0
    dirs = list((tmp_path / "root").iterdir())
    assert len(dirs) == 1 and dirs[0].name.startswith("build-")
    assert _manifest(dirs[0])["config_hash"].startswith(dirs[0].name.split("-")[1])


def test_partial_results_flagged(tmp_path, capsys):
    out = tmp_path / "d"
    assert cli.main(["decay", "--max-stage", "12", "--times", "h5..h14", "--out", str(out)]) == 0
    m = _manifest(out)
    assert m["status"] == "partial" and "h14" in m["depth_exhausted"]
    assert "partial" in capsys.readouterr().err


def test_depth_exhausted_everywhere(tmp_path):
    out = tmp_path / "x"
    code = cli.main(["spectrum", "--max-stage", "6", "--T", "1e6", "--dt", "1e5", "--out", str(out)])
    assert code == 3
    assert _manifest(out)["status"] == "failed"


def test_plots_are_flag_gated(tmp_path):
    plain, plotted = tmp_path / "p", tmp_path / "q"
    assert cli.main(["decay", "--max-stage", "20", "--times", "h3..h8", "--out", str(plain)]) == 0
    assert cli.main(["decay", "--max-stage", "20", "--times", "h3..h8", "--out", str(plotted), "--plot"]) == 0
    assert not list(plain.glob("*.svg"))
    svg = (plotted / "decay.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg
    assert (plain / "decay.csv").read_bytes() == (plotted / "decay.csv").read_bytes()


def test_strip_basis_and_multiplicity(tmp_path):
    out = tmp_path / "m"
    args = [
        "multiplicity",
        "--max-stage", "8",
        "--times", "0.5, 1, 1.5, 2.25",
        "--set", "basis.kind=strips",
        "--set", "basis.stage=2",
        "--set", "basis.strips=0 0.5 0 1; 0.5 1 0.5 1.5; 0 1 1.2 1.5",
        "--out", str(out),
    ]  # fmt: skip
    assert cli.main(args) == 0
    header, rows = artifacts.read_csv_header(out / "multiplicity.csv")
    assert header["basis"]["kind"] == "strips" and rows[1][0] == "full_square"
    assert "not certify" in header["note"]


def test_atomic_write_leaves_no_temp_files(tmp_path):
    p = artifacts.atomic_write(tmp_path / "x" / "f.txt", "hello")
    assert p.read_text() == "hello"
    artifacts.atomic_write(p, b"bytes")
    assert p.read_bytes() == b"bytes"
    assert [q.name for q in p.parent.iterdir()] == ["f.txt"]


def test_parse_times():
    assert parse_times("0, 1.5, h3..h5, 2h7+0.25") == [0.0, 1.5, StageTime(3), StageTime(4), StageTime(5), StageTime(7, 2, 0.25)]
    with pytest.raises(Exception):
        parse_times("h5..h3")
    with pytest.raises(Exception):
        parse_times("soon")


def test_csv_values_round_trip(tmp_path):
    vals = [0.1, 1 / 3, 1e300, np.float64(2.5), np.nan]
    p = artifacts.write_csv(tmp_path / "v.csv", {"k": 1}, ["x"], [[v] for v in vals])
    header, rows = artifacts.read_csv_header(p)
    assert header == {"k": 1}
    back = [float(r[0]) for r in rows[1:]]
    assert back[:4] == [float(v) for v in vals[:4]] and np.isnan(back[4])
