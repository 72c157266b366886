import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from savae.checkpoint import load_checkpoint, save_checkpoint
from savae.cli import main, make_run_dir, read_report
from savae.config import RunConfig, dump_config, parse_config, resolve_seed
from savae.data import SyntheticSpec, gen_synthetic, save_dataset
from savae.errors import ConfigError, DataError
from savae.evaluation import AblationTable
from savae.networks import Architecture, init_params, predict

TINY = """\
[run]
variants = AE, SA-AVAE
k = 3
seeds = 0, 1
max_folds = 1

[synthetic]
n = 120
d1 = 40
d2 = 40

[features]
n_features = 16

[train]
max_epochs = 2
shared_dim = 4
dist_dim = 4
enc_hidden = 16
dec_hidden = 16
disc_hidden = 8
reg_hidden = 8
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def only(directory: Path, pattern: str) -> Path:
    found = sorted(directory.rglob(pattern))
    assert len(found) == 1, found
    return found[0]


# config --------------------------------------------------------------------


def test_parse_config_fields():
    cfg = parse_config(TINY)
    assert cfg.variants == ("AE", "SA-AVAE")
    assert cfg.seeds == (0, 1) and cfg.k == 3 and cfg.max_folds == 1
    assert cfg.synthetic.n == 120 and cfg.synthetic.d1 == 40
    assert cfg.prep.n_features == 16
    assert cfg.train.enc_hidden == (16,) and cfg.train.max_epochs == 2
    assert not cfg.seed_from_file


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[train]\nlearning_rate = 1\n",
    "[train]\nmax_epochs = many\n",
    "[weights]\nmu1 = -1\n",
    "[run]\nvariants = GAN\n",
    "not an ini file",
])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text).validate()


def test_exactly_one_data_source():
    with pytest.raises(ConfigError):
        parse_config("[data]\npath = x.csv\n[synthetic]\nn = 10\n").validate()
    with pytest.raises(ConfigError):
        RunConfig(synthetic=None).validate()


def test_dump_round_trip():
    cfg = parse_config(TINY + "\n[weights]\nmu5 = 2.5\n")
    again = parse_config(dump_config(cfg))
    assert again.to_dict() == cfg.to_dict()
    assert again.digest() == cfg.digest()


def test_seed_precedence():
    file_cfg = parse_config("[run]\nseed = 5\n")
    plain = parse_config("")
    assert resolve_seed(9, file_cfg, {"SAVAE_SEED": "7"}) == 9
    assert resolve_seed(None, file_cfg, {"SAVAE_SEED": "7"}) == 5
    assert resolve_seed(None, plain, {"SAVAE_SEED": "7"}) == 7
    assert resolve_seed(None, plain, {}) == 0
    with pytest.raises(ConfigError):
        resolve_seed(None, plain, {"SAVAE_SEED": "x"})


def test_run_dir_never_overwrites(tmp_path):
    a = make_run_dir(tmp_path, "train", 3, "abcdef0123456789")
    b = make_run_dir(tmp_path, "train", 3, "abcdef0123456789")
    assert a[0] == "train-seed3-abcdef01" and b[0] == "train-seed3-abcdef01-1"
    assert a[1].is_dir() and b[1].is_dir()


# checkpoint ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    bundle = init_params(Architecture(m1=6, m2=5, shared_dim=3, dist_dim=2, enc_hidden=(8,),
                                      dec_hidden=(8,), disc_hidden=(4,), reg_hidden=(4,)), 2)
    bundle.age_offset, bundle.age_scale = 41.0, 9.5
    path = save_checkpoint(tmp_path / "m.npz", bundle, meta={"k": 1}, raw_dims=(10, 9))
    ck = load_checkpoint(path)
    assert ck.bundle.digest() == bundle.digest()
    assert ck.raw_dims == (10, 9) and ck.meta["k"] == 1
    x = np.random.default_rng(0).standard_normal((4, 6))
    x2 = np.random.default_rng(1).standard_normal((4, 5))
    np.testing.assert_array_equal(predict(ck.bundle, x, x2, np.array([0, 1, 0, 1])),
                                  predict(bundle, x, x2, np.array([0, 1, 0, 1])))


def test_checkpoint_rejects_foreign_files(tmp_path):
    bad = tmp_path / "x.npz"
    np.savez(bad, a=np.zeros(2))
    with pytest.raises(DataError):
        load_checkpoint(bad)
    (tmp_path / "y.npz").write_text("garbage")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "y.npz")


# commands ------------------------------------------------------------------


def test_gen_data(tmp_path, tiny, capsys):
    assert main(["gen-data", "--config", str(tiny), "--seed", "4", "--n", "30", "--out-dir", str(tmp_path)]) == 0
    csv = Path(capsys.readouterr().out.strip())
    assert csv.exists() and csv.name.startswith("gen-data-seed4-")
    assert only(tmp_path, "*.truth.npz").exists()
    assert only(tmp_path, "*.config.ini").read_bytes() == tiny.read_bytes()


def test_train_twice_gives_identical_history(tmp_path, tiny):
    for _ in range(2):
        assert main(["train", "--config", str(tiny), "--seed", "1", "--out-dir", str(tmp_path)]) == 0
    logs = sorted(tmp_path.rglob("*.history.jsonl"))
    assert len(logs) == 2
    assert logs[0].read_bytes() == logs[1].read_bytes()
    head = json.loads(logs[0].read_text().splitlines()[0])
    assert head["seed"] == 1 and head["variant"] == "SA-AVAE"
    for echo in tmp_path.rglob("*.config.ini"):
        assert echo.read_bytes() == tiny.read_bytes()


def test_seed_from_environment(tmp_path, tiny, monkeypatch):
    monkeypatch.setenv("SAVAE_SEED", "12")
    assert main(["train", "--config", str(tiny), "--max-epochs", "1", "--out-dir", str(tmp_path)]) == 0
    assert only(tmp_path, "*.history.jsonl").parent.name.startswith("train-seed12-")


def test_eval_round_trip_and_dimension_mismatch(tmp_path, tiny, capsys):
    assert main(["train", "--config", str(tiny), "--out-dir", str(tmp_path / "t")]) == 0
    ckpt = capsys.readouterr().out.strip()
    ds, _ = gen_synthetic(SyntheticSpec(n=120, d1=40, d2=40, seed=0))
    data = save_dataset(ds, tmp_path / "d.csv")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(data), "--out-dir", str(tmp_path / "e")]) == 0
    out = capsys.readouterr().out
    report = Path(out.strip().splitlines()[-1])
    doc, metrics = read_report(report)
    assert doc["kind"] == "eval" and metrics.overall.n == 120

    wrong, _ = gen_synthetic(SyntheticSpec(n=20, d1=30, d2=40, seed=0))
    bad = save_dataset(wrong, tmp_path / "wrong.csv")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(bad), "--out-dir", str(tmp_path / "e")]) == 2
    err = capsys.readouterr().err
    assert "40 modality-1 features" in err and "30" in err
    assert "Traceback" not in err


def test_ablate_is_deterministic_and_round_trips(tmp_path, tiny, capsys):
    reports = []
    for _ in range(2):
        assert main(["ablate", "--config", str(tiny), "--out-dir", str(tmp_path)]) == 0
        reports.append(Path(capsys.readouterr().out.strip().splitlines()[-1]))
    assert reports[0] != reports[1]
    assert reports[0].read_bytes() == reports[1].read_bytes()
    doc, table = read_report(reports[0])
    assert isinstance(table, AblationTable)
    assert list(doc["results"]) == ["AE", "SA-AVAE"]
    assert table.to_dict() == doc["results"]
    text = only(reports[0].parent, "*.table.txt").read_text()
    assert "AE " in text and "SA-AVAE" in text


def test_ablate_variant_flag(tmp_path, tiny, capsys):
    assert main(["ablate", "--config", str(tiny), "--variants", "AE", "--seeds", "3",
                 "--out-dir", str(tmp_path)]) == 0
    doc, _ = read_report(Path(capsys.readouterr().out.strip().splitlines()[-1]))
    assert list(doc["results"]) == ["AE"] and doc["results"]["AE"]["seeds"] == [3]


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "7", "--points", "5"]) == 0
    assert "max relative error" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["train", "--max-epochs", "lots"],
    ["train", "--config", "/nonexistent/c.ini"],
    ["train", "--variant", "GAN"],
    ["ablate", "--data", "/nonexistent/d.csv"],
])
def test_user_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "Traceback" not in capsys.readouterr().err


def test_malformed_data_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,sex,age,f1_0\na,1,abc,0.5\n")
    assert main(["train", "--data", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert "row 2, column age" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "savae", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("savae ")
