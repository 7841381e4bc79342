import io
import os

import numpy as np
import pytest

from clustermask import cli
from clustermask import data as Dm
from clustermask import model as Mm

SMALL_RUN = """\
# tiny model so the command tests stay fast
D = 8
N = 4
num_layers = 1
M = 2
sample_count = 16
warmup = 2
log_interval = 1
"""


def run(*argv):
    buf = io.StringIO()
    code = cli.main([str(a) for a in argv], out=buf)
    return code, buf.getvalue()


@pytest.fixture
def small_dataset(tmp_path):
    path = tmp_path / "train.cmtd"
    code, _ = run("gen", "--out", path, "--samples", 4, "--seed", 3, "--size", "16x16", "--max-shapes", 2)
    assert code == 0
    return path


@pytest.fixture
def run_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SMALL_RUN)
    return path


@pytest.fixture
def trained(tmp_path, small_dataset, run_config):
    ckpt = tmp_path / "model.cmtw"
    code, _ = run("train", "--data", small_dataset, "--config", run_config, "--out", ckpt,
                  "--iterations", 10, "--no-timestamp", "--quiet")
    assert code == 0
    return ckpt


def _log_rows(path):
    return [line for line in path.read_text().splitlines() if line and not line.startswith("#")]


# gen ------------------------------------------------------------------------


def test_gen_zero_samples_is_valid_empty_dataset(tmp_path):
    path = tmp_path / "empty.cmtd"
    code, text = run("gen", "--out", path, "--samples", 0)
    assert code == 0
    assert Dm.read_dataset(path) == []
    assert "samples\t0" in text


def test_gen_is_byte_identical_for_identical_flags(tmp_path):
    a, b = tmp_path / "a.cmtd", tmp_path / "b.cmtd"
    for p in (a, b):
        assert run("gen", "--out", p, "--samples", 5, "--seed", 11, "--size", "32x32")[0] == 0
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.cmtd"
    run("gen", "--out", c, "--samples", 5, "--seed", 12, "--size", "32x32")
    assert c.read_bytes() != a.read_bytes()


def test_gen_rejects_size_below_minimum(tmp_path, capsys):
    code, _ = run("gen", "--out", tmp_path / "x.cmtd", "--samples", 1, "--size", "8x8")
    assert code == 1
    assert "16x16" in capsys.readouterr().err


def test_gen_malformed_size_is_usage_error(tmp_path):
    assert run("gen", "--out", tmp_path / "x.cmtd", "--samples", 1, "--size", "64")[0] == 1


def test_gen_unwritable_path_is_io_error(tmp_path):
    assert run("gen", "--out", tmp_path / "missing_dir" / "x.cmtd", "--samples", 1)[0] == 2


def test_gen_prints_class_histogram(tmp_path):
    path = tmp_path / "d.cmtd"
    _, text = run("gen", "--out", path, "--samples", 6, "--seed", 1, "--size", "32x32")
    hist = Dm.class_histogram(Dm.read_dataset(path))
    for cls, count in hist.items():
        assert f"class\t{cls}\t{Dm.CLASS_NAMES[cls]}\t{count}" in text


# train ----------------------------------------------------------------------


def test_train_smoke_writes_checkpoint_and_log(tmp_path, trained):
    assert trained.exists()
    log = tmp_path / "model.cmtw.log"
    rows = _log_rows(log)
    assert rows[0] == Mm.LOG_COLUMNS
    assert [int(r.split("\t")[0]) for r in rows[1:]] == list(range(1, 11))
    assert all(len(r.split("\t")) == 6 for r in rows[1:])
    assert Mm.load_checkpoint(trained).adam.step == 10


@pytest.mark.parametrize("variant", ["baseline_eq3", "combined_eq7"])
def test_train_log_header_records_variant(tmp_path, small_dataset, run_config, variant):
    ckpt = tmp_path / f"{variant}.cmtw"
    code, _ = run("train", "--data", small_dataset, "--config", run_config, "--out", ckpt,
                  "--variant", variant, "--iterations", 2, "--no-timestamp", "--quiet")
    assert code == 0
    header = [l for l in (tmp_path / f"{variant}.cmtw.log").read_text().splitlines() if l.startswith("#")]
    assert f"# variant={variant}" in header


def test_train_logs_identical_without_timestamp(tmp_path, small_dataset, run_config):
    logs = []
    for name in ("a", "b"):
        ckpt = tmp_path / f"{name}.cmtw"
        run("train", "--data", small_dataset, "--config", run_config, "--out", ckpt,
            "--iterations", 5, "--no-timestamp", "--quiet")
        logs.append((tmp_path / f"{name}.cmtw.log").read_bytes())
    assert logs[0] == logs[1]
    assert (tmp_path / "a.cmtw").read_bytes() == (tmp_path / "b.cmtw").read_bytes()


def test_train_timestamp_confined_to_header(tmp_path, small_dataset, run_config):
    ckpt = tmp_path / "t.cmtw"
    run("train", "--data", small_dataset, "--config", run_config, "--out", ckpt, "--iterations", 2, "--quiet")
    lines = (tmp_path / "t.cmtw.log").read_text().splitlines()
    stamped = [l for l in lines if "started" in l]
    assert len(stamped) == 1 and stamped[0].startswith("#")


def test_train_bad_config_key_names_key(tmp_path, small_dataset, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("D = 8\nlearning_rate = 0.1\n")
    code, _ = run("train", "--data", small_dataset, "--config", cfg, "--out", tmp_path / "m.cmtw")
    assert code == 1
    err = capsys.readouterr().err
    assert "learning_rate" in err and "line 2" in err


def test_train_bad_set_key_names_key(tmp_path, small_dataset, capsys):
    code, _ = run("train", "--data", small_dataset, "--out", tmp_path / "m.cmtw", "--set", "bogus=1")
    assert code == 1
    assert "bogus" in capsys.readouterr().err


def test_train_stop_and_resume_matches_uninterrupted(tmp_path, small_dataset, run_config):
    common = ("--data", small_dataset, "--config", run_config, "--iterations", 6, "--no-timestamp", "--quiet")
    full = tmp_path / "full.cmtw"
    run("train", *common, "--out", full)
    part = tmp_path / "part.cmtw"
    assert run("train", *common, "--out", part, "--stop-after", 3)[0] == 0
    assert Mm.load_checkpoint(part).adam.step == 3
    rest = tmp_path / "rest.cmtw"
    assert run("train", *common, "--out", rest, "--resume", part)[0] == 0
    assert [int(r.split("\t")[0]) for r in _log_rows(tmp_path / "rest.cmtw.log")[1:]] == [4, 5, 6]
    assert _log_rows(tmp_path / "rest.cmtw.log")[1:] == _log_rows(tmp_path / "full.cmtw.log")[4:]
    a, b = Mm.load_checkpoint(full), Mm.load_checkpoint(rest)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_train_resume_with_different_model_is_rejected(tmp_path, small_dataset, run_config, trained, capsys):
    code, _ = run("train", "--data", small_dataset, "--config", run_config, "--out", tmp_path / "r.cmtw",
                  "--resume", trained, "--set", "D=12")
    assert code == 1
    assert "D" in capsys.readouterr().err


def test_train_empty_dataset_is_usage_error(tmp_path):
    empty = tmp_path / "e.cmtd"
    run("gen", "--out", empty, "--samples", 0)
    assert run("train", "--data", empty, "--out", tmp_path / "m.cmtw")[0] == 1


def test_train_missing_dataset_is_io_error(tmp_path):
    assert run("train", "--data", tmp_path / "nope.cmtd", "--out", tmp_path / "m.cmtw")[0] == 2


# eval -----------------------------------------------------------------------


def test_eval_oracle_reports_perfect_quality(small_dataset):
    code, text = run("eval", "--data", small_dataset, "--oracle", "--tsv")
    assert code == 0
    row = [l for l in text.splitlines() if l.startswith("all\t")][0].split("\t")
    assert row[1:4] == ["1.000000", "1.000000", "1.000000"]
    code, text = run("eval", "--data", small_dataset, "--oracle")
    assert text.startswith("PQ 100.0  SQ 100.0  RQ 100.0")


@pytest.mark.parametrize("merge", ["argmax", "maskwise"])
def test_eval_trained_model_both_merges(small_dataset, trained, merge):
    code, text = run("eval", "--data", small_dataset, "--ckpt", trained, "--merge", merge)
    assert code == 0
    assert text.splitlines()[0] == f"merge {merge}"
    pq = float(text.splitlines()[1].split()[1])
    assert 0.0 <= pq <= 100.0


def test_eval_tsv_columns(small_dataset, trained):
    code, text = run("eval", "--data", small_dataset, "--ckpt", trained, "--tsv")
    lines = text.splitlines()
    assert lines[0] == "scope\tpq\tsq\trq\ttp\tfp\tfn"
    assert [l.split("\t")[0] for l in lines[1:4]] == ["all", "thing", "stuff"]
    assert all(len(l.split("\t")) == 7 for l in lines)


def test_eval_is_deterministic(small_dataset, trained):
    assert run("eval", "--data", small_dataset, "--ckpt", trained, "--tsv") == run(
        "eval", "--data", small_dataset, "--ckpt", trained, "--tsv")


def test_eval_mismatched_checkpoint_names_parameter(tmp_path, small_dataset, trained, capsys):
    ckpt = Mm.load_checkpoint(trained)
    params = dict(ckpt.params)
    name = sorted(params)[0]
    params[name] = np.zeros((params[name].shape[0] + 1,) + params[name].shape[1:], dtype=params[name].dtype)
    broken = tmp_path / "broken.cmtw"
    Mm.save_checkpoint(broken, Mm.Checkpoint(ckpt.config, params, ckpt.adam))
    code, _ = run("eval", "--data", small_dataset, "--ckpt", broken)
    assert code == 1
    assert name in capsys.readouterr().err


def test_eval_requires_checkpoint_or_oracle(small_dataset):
    assert run("eval", "--data", small_dataset)[0] == 1


# attn -----------------------------------------------------------------------


def test_pgm_golden_encoding():
    levels = np.array([[0, 128, 255], [7, 8, 9]])
    assert cli.encode_pgm(levels) == "P2\n3 2\n255\n0 128 255\n7 8 9\n"


def test_heatmap_levels_min_max():
    # (v - 1) / 4 * 255 rounded: 0, 63.75, 127.5, 255; rint rounds half to even
    assert cli.heatmap_levels(np.array([[1.0, 2.0], [3.0, 5.0]])).tolist() == [[0, 64], [128, 255]]


def test_constant_map_becomes_zeros():
    assert cli.heatmap_levels(np.full((3, 4), 0.25)).tolist() == [[0] * 4] * 3


def test_pgm_round_trip(rng):
    levels = rng.integers(0, 256, size=(5, 7))
    assert np.array_equal(cli.decode_pgm(cli.encode_pgm(levels)), levels)


def test_decode_pgm_rejects_other_formats():
    with pytest.raises(ValueError):
        cli.decode_pgm("P5\n1 1\n255\n0\n")
    with pytest.raises(ValueError):
        cli.decode_pgm("P2\n2 2\n255\n1 2 3\n")


def test_attn_writes_heatmaps_and_table(tmp_path, small_dataset, trained):
    out_dir = tmp_path / "heat"
    code, text = run("attn", "--ckpt", trained, "--data", small_dataset, "--sample", 1, "--center", 2,
                     "--out-dir", out_dir)
    assert code == 0
    assert sorted(os.listdir(out_dir)) == ["layer0_attention.pgm", "layer0_cluster.pgm"]
    ckpt = Mm.load_checkpoint(trained)
    image = Dm.read_dataset(small_dataset)[1].image
    z, a = cli.attention_maps(ckpt.params, image, ckpt.config)[0]
    expected = cli.encode_pgm(cli.heatmap_levels(z[:, 2].reshape(4, 4)))
    assert (out_dir / "layer0_cluster.pgm").read_text() == expected
    decoded = cli.decode_pgm((out_dir / "layer0_attention.pgm").read_text())
    assert np.array_equal(decoded, cli.heatmap_levels(a[2].reshape(4, 4)))
    lines = text.splitlines()
    assert lines[0] == "layer\tcluster_entropy\tattention_entropy"
    ent = [float(x) for x in lines[1].split("\t")[1:]]
    assert all(0.0 <= e <= np.log(16) + 1e-9 for e in ent)


def test_attn_center_out_of_range(tmp_path, small_dataset, trained):
    assert run("attn", "--ckpt", trained, "--data", small_dataset, "--center", 4, "--out-dir", tmp_path / "h")[0] == 1


def test_attn_sample_out_of_range(tmp_path, small_dataset, trained):
    assert run("attn", "--ckpt", trained, "--data", small_dataset, "--sample", 9, "--out-dir", tmp_path / "h")[0] == 1


# gradcheck and config -------------------------------------------------------


def test_gradcheck_tiny_passes():
    code, text = run("gradcheck", "--size", "tiny", "--seed", 0)
    assert code == 0, text
    body = [l for l in text.splitlines()[1:] if not l.startswith("elapsed")]
    assert body and all(l.endswith("\tok") for l in body)


def test_gradcheck_corrupted_gradient_exits_3(capsys):
    code, text = run("gradcheck", "--size", "tiny", "--corrupt", "exp")
    assert code == 3
    assert "exp" in capsys.readouterr().err
    assert "FAIL" in text


def test_run_config_reports_line_number():
    with pytest.raises(ValueError, match="line 3"):
        cli.parse_run_config("D = 8\n# comment\nnot a pair\n")


def test_run_config_overrides_win():
    rc = cli.parse_run_config("D = 8\nmerge = maskwise\n", {"D": "12"})
    assert rc.model.D == 12 and rc.eval.merge == "maskwise"


def test_run_config_invalid_value():
    with pytest.raises(ValueError):
        cli.parse_run_config("N = 1\n")


def test_unknown_command_is_usage_error():
    assert run("frobnicate")[0] == 1
