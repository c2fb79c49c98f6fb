import json
import shutil
import subprocess
import sys

import pytest

from cageloop.cli import main
from cageloop.shapes import load_shape


def _config(tmp_path, **extra):
    data = {"gripper": {"h": 0.12, "r": 0.01}}
    data.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture(scope="module")
def torus_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "torus.xyz"
    assert main(["gen-shape", "torus", "major=0.08", "minor=0.025", "--seed", "7", "--out", str(out)]) == 0
    return out


def test_gen_shape_writes_points(torus_file):
    cloud = load_shape(torus_file)
    assert len(cloud) == 2000


def test_gen_shape_rejects_bad_params(tmp_path, capsys):
    assert main(["gen-shape", "torus", "major", "--out", str(tmp_path / "x.xyz")]) == 1
    assert "key=value" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["gen-shape", "teapot", "--out", str(tmp_path / "x.xyz")])


def test_synthesize_then_validate(tmp_path, torus_file, capsys):
    out = tmp_path / "out"
    code = main(["synthesize", "--input", str(torus_file), "--config", _config(tmp_path), "--seed", "0",
                 "--out", str(out)])
    assert code == 0
    assert "valid poses" in capsys.readouterr().out
    assert main(["validate", "--input", str(out)]) == 0
    bad = tmp_path / "bad"
    shutil.copytree(out, bad)
    (bad / "loops.txt").unlink()
    assert main(["validate", "--input", str(bad)]) == 1


def test_small_gripper_exits_with_2(tmp_path, torus_file, capsys):
    cfg = _config(tmp_path, gripper={"h": 0.04, "r": 0.01})
    assert main(["synthesize", "--input", str(torus_file), "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "filter_length" in capsys.readouterr().err


def test_errors_exit_with_1(tmp_path, torus_file):
    bad = tmp_path / "bad.json"
    bad.write_text('{"resolutoin": 3}')
    assert main(["synthesize", "--input", str(torus_file), "--config", str(bad)]) == 1
    assert main(["synthesize", "--input", str(tmp_path / "none.xyz"), "--out", str(tmp_path / "o")]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cageloop", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("synthesize", "gen-shape", "validate"):
        assert cmd in res.stdout
