import csv
import json

import numpy as np
import pytest

from transcc.cli import main, read_ppm, write_ppm
from transcc.data import read_manifest, read_sample, read_tensor
from transcc.evaluation import image_mae
from transcc.report import STAT_COLUMNS

TOY_OVERRIDES = [
    "--override", "image_size=32",
    "--override", "width_multiplier=0.125",
    "--override", "attention_heads=2",
    "--override", "epochs=1",
    "--override", "decay_start_epoch=0",
]


@pytest.fixture(scope="module")
def toy_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "set"
    code = main(["gen-data", "--out", str(root), "--count", "10", "--seed", "5", *TOY_OVERRIDES])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory, toy_data):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", str(toy_data), "--out", str(out), "--seed", "5", *TOY_OVERRIDES])
    assert code == 0
    return out


# ---------------------------------------------------------------------------
# pixmap format


def test_ppm_round_trip(tmp_path):
    image = np.random.default_rng(0).uniform(0, 1, (5, 7, 3))
    path = tmp_path / "img.ppm"
    write_ppm(path, image)
    back = read_ppm(path)
    assert back.shape == (5, 7, 3)
    assert back.dtype == np.float32
    assert np.abs(back - image).max() <= 0.5 / 65535 + 1e-7


def test_ppm_reads_8_bit_and_comments(tmp_path):
    path = tmp_path / "img.ppm"
    raster = bytes(range(12))
    path.write_bytes(b"P6\n# a comment\n2 2\n255\n" + raster)
    image = read_ppm(path)
    assert image.shape == (2, 2, 3)
    assert image[0, 0, 1] == pytest.approx(1 / 255)


def test_ppm_rejects_garbage(tmp_path):
    path = tmp_path / "img.ppm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes(12))
    with pytest.raises(ValueError, match="P6"):
        read_ppm(path)
    path.write_bytes(b"P6\n4 4\n255\n" + bytes(3))
    with pytest.raises(ValueError, match="truncated"):
        read_ppm(path)


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_writes_dataset_and_prints_splits(toy_data, capsys):
    capsys.readouterr()
    manifest = read_manifest(toy_data)
    assert manifest.sample_count == 10
    assert [len(manifest.splits[s]) for s in ("train", "val", "test")] == [7, 2, 1]
    assert (toy_data / "run_config.json").exists()
    code = main(["gen-data", "--out", str(toy_data), "--count", "10", "--seed", "5", *TOY_OVERRIDES])
    assert code == 0
    assert "train 7 / val 2 / test 1" in capsys.readouterr().out


def test_gen_data_is_deterministic(toy_data, tmp_path):
    other = tmp_path / "again"
    code = main(["gen-data", "--out", str(other), "--count", "10", "--seed", "5", *TOY_OVERRIDES])
    assert code == 0
    assert (other / "manifest").read_bytes() == (toy_data / "manifest").read_bytes()
    sample_id = read_manifest(toy_data).splits["train"][0]
    assert (other / sample_id / "input.t").read_bytes() == (toy_data / sample_id / "input.t").read_bytes()


def test_gen_data_bad_config_exits_2(tmp_path, capsys):
    code = main(["gen-data", "--out", str(tmp_path / "x"), "--override", "bogus=1"])
    assert code == 2
    assert "bogus" in capsys.readouterr().err


def test_gen_data_unwritable_path_exits_3(tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("a file, not a directory")
    code = main(
        ["gen-data", "--out", str(blocker / "sub"), "--count", "4", "--seed", "1", *TOY_OVERRIDES]
    )
    assert code == 3
    assert capsys.readouterr().err


# ---------------------------------------------------------------------------
# train


def test_train_leaves_artifacts(toy_run):
    assert (toy_run / "latest.ckpt").exists()
    assert (toy_run / "best.ckpt").exists()
    assert (toy_run / "epoch_0001.ckpt").exists()
    assert (toy_run / "metrics.csv").read_text().count("\n") >= 2


def test_train_prints_validation_mae(toy_data, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", str(toy_data), "--out", str(out), "--seed", "5", *TOY_OVERRIDES])
    assert code == 0
    assert "validation MAE" in capsys.readouterr().out


def test_train_resume_after_completion(toy_data, toy_run, capsys):
    code = main(["train", str(toy_data), "--out", str(toy_run), "--resume", "--seed", "5", *TOY_OVERRIDES])
    assert code == 0
    assert "validation MAE" in capsys.readouterr().out


def test_train_missing_dataset_exits_3(tmp_path, capsys):
    code = main(["train", str(tmp_path / "nope"), "--out", str(tmp_path / "run"), *TOY_OVERRIDES])
    assert code == 3
    assert capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval


def test_eval_prints_stats_and_writes_table(toy_data, toy_run, capsys):
    code = main(["eval", str(toy_run / "latest.ckpt"), str(toy_data), "--split", "val"])
    assert code == 0
    out = capsys.readouterr().out
    for column in STAT_COLUMNS:
        assert column in out
    table_path = toy_run / "per_image_val.csv"
    assert table_path.exists()
    with table_path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(read_manifest(toy_data).splits["val"])
    assert all(float(row["mae"]) >= 0 for row in rows)


def test_eval_twice_is_identical(toy_data, toy_run, capsys):
    main(["eval", str(toy_run / "latest.ckpt"), str(toy_data), "--split", "val"])
    first = capsys.readouterr().out
    main(["eval", str(toy_run / "latest.ckpt"), str(toy_data), "--split", "val"])
    assert capsys.readouterr().out == first


def test_eval_size_mismatch_exits_2(toy_run, tmp_path, capsys):
    other = tmp_path / "wide"
    overrides = [o if o != "image_size=32" else "image_size=48" for o in TOY_OVERRIDES]
    assert main(["gen-data", "--out", str(other), "--count", "4", "--seed", "2", *overrides]) == 0
    capsys.readouterr()
    code = main(["eval", str(toy_run / "latest.ckpt"), str(other), "--split", "train"])
    assert code == 2
    assert "32" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# infer


def test_infer_matches_eval_table(toy_data, toy_run, tmp_path, capsys):
    assert main(["eval", str(toy_run / "latest.ckpt"), str(toy_data), "--split", "val"]) == 0
    capsys.readouterr()
    sample_id = read_manifest(toy_data).splits["val"][0]
    record = read_sample(toy_data, sample_id)
    out_path = tmp_path / "wb.t"
    code = main(["infer", str(toy_run / "latest.ckpt"), str(toy_data / sample_id / "input.t"), "--out", str(out_path)])
    assert code == 0
    wb = read_tensor(out_path)
    assert wb.shape == (32, 32, 3)
    assert read_tensor(tmp_path / "wb_weight.t").shape == (32, 32)
    assert read_tensor(tmp_path / "wb_edge.t").shape == (32, 32)
    mae = image_mae(record.input, wb, record.gt, record.mask)
    with (toy_run / "per_image_val.csv").open(newline="") as fh:
        row = next(r for r in csv.DictReader(fh) if r["id"] == sample_id)
    assert mae == pytest.approx(float(row["mae"]), abs=1e-9)


def test_infer_ppm_round_trip(toy_data, toy_run, tmp_path):
    sample_id = read_manifest(toy_data).splits["val"][0]
    record = read_sample(toy_data, sample_id)
    src = tmp_path / "input.ppm"
    write_ppm(src, record.input.pixels)
    out_path = tmp_path / "wb.ppm"
    code = main(["infer", str(toy_run / "latest.ckpt"), str(src), "--out", str(out_path)])
    assert code == 0
    wb = read_ppm(out_path)
    assert wb.shape == (32, 32, 3)
    assert float(wb.min()) >= 0 and float(wb.max()) <= 1


def test_infer_wrong_size_exits_2_with_resize_hint(toy_run, tmp_path, capsys):
    src = tmp_path / "small.ppm"
    write_ppm(src, np.full((16, 16, 3), 0.5))
    code = main(["infer", str(toy_run / "latest.ckpt"), str(src), "--out", str(tmp_path / "o.ppm")])
    assert code == 2
    assert "resize" in capsys.readouterr().err


def test_infer_unreadable_input_exits_3(toy_run, tmp_path):
    code = main(["infer", str(toy_run / "latest.ckpt"), str(tmp_path / "absent.ppm"), "--out", str(tmp_path / "o.ppm")])
    assert code == 3


# ---------------------------------------------------------------------------
# report


def test_report_from_metrics(toy_run, tmp_path, capsys):
    out = tmp_path / "report"
    code = main(["report", str(toy_run / "metrics.csv"), "--out", str(out)])
    assert code == 0
    assert (out / "training_curves.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_from_per_image_table(toy_data, toy_run, tmp_path, capsys):
    assert main(["eval", str(toy_run / "latest.ckpt"), str(toy_data), "--split", "val"]) == 0
    capsys.readouterr()
    out = tmp_path / "report"
    code = main(["report", str(toy_run / "per_image_val.csv"), "--out", str(out)])
    assert code == 0
    assert (out / "error_histogram.png").exists()
    with (out / "summary.csv").open(newline="") as fh:
        header = next(csv.reader(fh))
    assert set(filter(None, header)) == set(STAT_COLUMNS)


def test_report_empty_log_exits_2(tmp_path, capsys):
    log = tmp_path / "metrics.csv"
    log.write_text("kind,epoch,step,lr,achromatic,edge,l1,mae,surf_sim,contrastive,total,val_mae\n")
    code = main(["report", str(log), "--out", str(tmp_path / "report")])
    assert code == 2
    assert "nothing to plot" in capsys.readouterr().err


def test_report_garbage_input_exits_2(tmp_path, capsys):
    noise = tmp_path / "noise.csv"
    noise.write_text("alpha,beta\n1,2\n")
    code = main(["report", str(noise), "--out", str(tmp_path / "report")])
    assert code == 2


# ---------------------------------------------------------------------------
# argument handling


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    capsys.readouterr()


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_seed_flag_beats_config_and_overrides(tmp_path, capsys):
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps({"seed": 1, "image_size": 32, "epochs": 1, "decay_start_epoch": 0}))
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["gen-data", "--out", str(a), "--count", "4", "--config", str(config_path), "--override", "seed=2", "--seed", "9"]) == 0
    assert main(["gen-data", "--out", str(b), "--count", "4", "--seed", "9", "--override", "image_size=32"]) == 0
    capsys.readouterr()
    assert (a / "manifest").read_bytes() == (b / "manifest").read_bytes()
    sample_id = read_manifest(a).splits["train"][0]
    assert (a / sample_id / "input.t").read_bytes() == (b / sample_id / "input.t").read_bytes()
