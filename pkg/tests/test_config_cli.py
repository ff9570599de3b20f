import csv
import os

import numpy as np
import pytest

from invpaint.cli import load_pgm, main, save_pgm
from invpaint.config import default_config_text, load_config
from invpaint.masks import load_mask

TINY = [
    "schedule.timesteps=100",
    "model.teacher_channels=8",
    "model.gen_channels=6",
    "model.emb_width=16",
    "train.batch=4",
    "train.lr=1e-3",
    "train.teacher_steps=30",
    "train.distill_steps=10",
    "train.inverter_steps=10",
    "train.distill_ddim_steps=4",
    "eval.n_cases=3",
]


def _ov():
    out = []
    for t in TINY:
        out += ["--set", t]
    return out


# -- config ------------------------------------------------------------


def test_defaults_match_reference_training_setup():
    rc = load_config(None)
    assert rc.get("train", "batch") == 32
    assert rc.get("train", "lr") == 1e-5
    assert rc.get("train", "disc_lr") == 1e-6
    assert rc.get("schedule", "timesteps") == 1000


def test_lr_schedule_and_ema_keys():
    rc = load_config(None, overrides=["train.lr_final=1e-5",
                                      "train.ema_decay=0.999"])
    tc = rc.train_cfg("teacher")
    assert tc.lr_final == 1e-5
    assert tc.ema_decay == 0.999
    tc0 = load_config(None).train_cfg("teacher")
    assert tc0.lr_final is None  # 0 in the config means "off"
    assert tc0.ema_decay is None


def test_unknown_key_named_in_error(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("[train]\nbatc = 4\n")
    with pytest.raises(ValueError, match="train.batc"):
        load_config(p)
    p.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ValueError, match="nonsense"):
        load_config(p)


def test_override_parsing_and_errors():
    rc = load_config(None, overrides=["train.batch=7"])
    assert rc.get("train", "batch") == 7
    with pytest.raises(ValueError, match="model.widht"):
        load_config(None, overrides=["model.widht=3"])
    with pytest.raises(ValueError, match="boolean"):
        load_config(None, overrides=["train.use_reblend=maybe"])
    with pytest.raises(ValueError, match="bad value"):
        load_config(None, overrides=["train.batch=four"])


def test_hash_tracks_values():
    a = load_config(None)
    b = load_config(None, overrides=["train.seed=1"])
    assert a.hash_hex() != b.hash_hex()
    assert a.hash_hex() == load_config(None).hash_hex()
    assert len(a.hash_hex()) == 16


def test_default_config_text_roundtrips(tmp_path):
    p = tmp_path / "default.cfg"
    p.write_text(default_config_text())
    assert load_config(p).hash_hex() == load_config(None).hash_hex()


# -- pgm ---------------------------------------------------------------


def test_pgm_roundtrip(tmp_path):
    img = np.linspace(-1, 1, 64, dtype=np.float32).reshape(8, 8)
    p = tmp_path / "x.pgm"
    save_pgm(p, img, comment="hash=00 seed=0")
    back = load_pgm(p)
    assert back.shape == (8, 8)
    np.testing.assert_allclose(back, img, atol=1.0 / 127.5)
    assert b"# hash=00" in p.read_bytes()


# -- cli end to end ----------------------------------------------------


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = str(tmp_path_factory.mktemp("run"))
    for cmd in ("train-teacher", "distill", "train-inverter"):
        assert main([cmd, *_ov(), "--out-dir", d]) == 0
    return d


def test_missing_prerequisite_names_prior_command(tmp_path, capsys):
    d = str(tmp_path / "empty")
    assert main(["distill", *_ov(), "--out-dir", d]) == 1
    assert "train-teacher" in capsys.readouterr().err
    assert main(["train-inverter", *_ov(), "--out-dir", d]) == 1
    assert "distill" in capsys.readouterr().err


def test_invalid_config_key_nonzero_exit(capsys):
    assert main(["train-teacher", "--set", "train.oops=1"]) == 1
    assert "train.oops" in capsys.readouterr().err


def test_training_artifacts_exist(run_dir):
    for f in ("teacher.ckpt", "generator.ckpt", "inverter.ckpt",
              "teacher_log.csv", "distill_log.csv", "inverter_log.csv"):
        assert os.path.exists(os.path.join(run_dir, f))
    with open(os.path.join(run_dir, "inverter_log.csv")) as f:
        assert f.readline().startswith("# config_hash=")
        rows = list(csv.DictReader(f))
    assert rows and rows[0]["wall_time"] == ""  # timing is opt-in


def test_teacher_rerun_byte_identical(run_dir, tmp_path):
    d2 = str(tmp_path / "again")
    assert main(["train-teacher", *_ov(), "--out-dir", d2]) == 0
    for f in ("teacher.ckpt", "teacher_log.csv"):
        a = open(os.path.join(run_dir, f), "rb").read()
        b = open(os.path.join(d2, f), "rb").read()
        assert a == b


def test_inpaint_writes_parsable_artifacts(run_dir):
    assert main(["inpaint", *_ov(), "--out-dir", run_dir, "--init", "random",
                 "--steps", "2", "--cases", "2", "--seed", "5"]) == 0
    mask_random = load_mask(os.path.join(run_dir, "case_000_mask.msk"))
    out_pgm = load_pgm(os.path.join(run_dir, "case_000_output.pgm"))
    assert out_pgm.shape == (16, 16)
    with open(os.path.join(run_dir, "metrics.csv")) as f:
        f.readline()
        rows = list(csv.DictReader(f))
    assert len(rows) == 2 and rows[0]["init_mode"] == "random"
    # same seed, different init mode: identical case streams, so same masks
    assert main(["inpaint", *_ov(), "--out-dir", run_dir, "--init",
                 "inverfill", "--steps", "2", "--cases", "2",
                 "--seed", "5"]) == 0
    np.testing.assert_array_equal(
        mask_random, load_mask(os.path.join(run_dir, "case_000_mask.msk"))
    )


def test_inpaint_ddim_inversion_modes(run_dir):
    for mode in ("ddiminv", "ddiminv-reblend"):
        assert main(["inpaint", *_ov(), "--set", "eval.invert_steps=10",
                     "--out-dir", run_dir, "--init", mode, "--steps", "2",
                     "--cases", "1"]) == 0


def test_init_config_command(tmp_path):
    p = str(tmp_path / "d.cfg")
    assert main(["init-config", p]) == 0
    assert load_config(p).get("train", "batch") == 32
