import numpy as np
import pytest

from locolab.cli import RunConfig, dispatch, main, parse_config, task_rng
from locolab.edit import load_direction
from locolab.errors import ConfigError
from locolab.molrg import random_model, save_model


def test_defaults():
    cfg = parse_config([])
    assert cfg == RunConfig()
    assert (cfg.eta, cfg.r, cfg.r_null, cfg.t, cfg.steps, cfg.schedule) == (
        0.99, 5, 5, 0.6, 100, "cosine")


def test_flags_override_file_override_defaults(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment line\nseed = 4\nsteps = 10  # trailing comment\nt_grid = 0.2,0.4\n")
    cfg = parse_config(["--steps", "20"], path)
    assert (cfg.seed, cfg.steps, cfg.t_grid) == (4, 20, (0.2, 0.4))
    assert parse_config(["--config", str(path)]).steps == 10


@pytest.mark.parametrize("args,key", [
    (["--eta", "1.5"], "eta"),
    (["--steps", "many"], "steps"),
    (["--dim", "3", "--ranks", "2,2"], "dim"),
    (["--pick", "6"], "pick"),
    (["--schedule", "sigmoid"], "schedule"),
    (["--t", "1.0"], "t"),
    (["--wat", "1"], "unrecognized"),
])
def test_usage_errors_name_the_key(args, key):
    with pytest.raises(ConfigError, match=key):
        parse_config(args)


def test_unknown_config_key(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("colour = blue\n")
    with pytest.raises(ConfigError, match="colour"):
        parse_config([], path)


def test_parsing_is_deterministic():
    args = ["--ranks", "1,1", "--dim", "4", "--seed", "7"]
    assert parse_config(args) == parse_config(args)


def test_task_rng_is_seed_xor_task_hash():
    a = task_rng(3, "edit").standard_normal(3)
    np.testing.assert_array_equal(a, task_rng(3, "edit").standard_normal(3))
    assert not np.array_equal(a, task_rng(3, "roundtrip").standard_normal(3))


def test_theorem1_command(tmp_path, capsys):
    code = main(["theorem1", "--out-dir", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "theorem1.csv").exists()
    assert "theorem1.csv" in capsys.readouterr().out


@pytest.mark.parametrize("command,filename", [
    ("rank-curve", "rank.csv"), ("linearity-curve", "linearity.csv"),
    ("symmetry-curve", "symmetry.csv"), ("subspace-curve", "subspace.csv"),
    ("epsrank-curve", "epsrank.csv"), ("roundtrip", "roundtrip.csv"),
    ("gpm-check", "gpm.csv"),
])
def test_curve_commands(tmp_path, command, filename):
    code = main([command, "--out-dir", str(tmp_path), "--n-samples", "3",
                 "--t-grid", "0.3,0.7", "--steps", "20"])
    assert code == 0
    assert (tmp_path / filename).read_text().startswith("# meta ")


def test_edit_command(tmp_path):
    out = tmp_path / "dir.txt"
    code = main(["edit", "--layout", "localized", "--mask", "0-15", "--pick", "1",
                 "--lambda", "2", "--t", "0.6", "--steps", "30", "--out", str(out),
                 "--out-dir", str(tmp_path)])
    assert code == 0
    assert load_direction(out).v_p.size == 32
    assert (tmp_path / "edit.csv").exists()


def test_edit_with_unreachable_mask_is_an_invariant_failure(tmp_path, capsys):
    # dense random bases: the outside rows see all of span(M)
    code = main(["edit", "--mask", "0,1,5", "--out-dir", str(tmp_path)])
    assert code == 1
    assert "degenerate" in capsys.readouterr().err


def test_model_file_is_used(tmp_path):
    path = tmp_path / "m.txt"
    save_model(random_model(6, [1, 1], seed=2), path)
    code = main(["rank-curve", "--model-file", str(path), "--out-dir", str(tmp_path),
                 "--n-samples", "2"])
    assert code == 0
    assert "d=6" in (tmp_path / "rank.csv").read_text().splitlines()[0]


def test_exit_codes_for_usage_and_io(tmp_path):
    assert main(["launch"]) == 2
    assert main([]) == 2
    assert main(["rank-curve", "--eta", "1.5"]) == 2
    assert main(["rank-curve", "--model-file", str(tmp_path / "missing.txt")]) == 2
    assert dispatch(RunConfig(), "nonsense") == 2
    assert main(["rank-curve", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_same_config_same_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["subspace-curve", "--out-dir", str(d), "--n-samples", "2"]) == 0
    assert (a / "subspace.csv").read_bytes() == (b / "subspace.csv").read_bytes()
