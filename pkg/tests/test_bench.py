import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from segbench import bench
from segbench.cli import main
from segbench.data import read_pgm
from segbench.errors import ConfigError, OutputExists
from segbench.metrics import ConfusionCounts, MetricsReport
from segbench.plots import render_loss_curves, render_roc, roc_xy, write_summary
from segbench.training import ExperimentResult

SVG = "{http://www.w3.org/2000/svg}"


def small_config(**over):
    raw = {
        "base_seed": 0,
        "dataset": {"kind": "airy", "n_images": 5, "size": 32, "params": {"spots_per_image_range": [1, 3]}},
        "model": {"arch": "cnn", "features": 4, "depth": 1},
        "train": {"epochs": 2, "batch": 4, "crop": 16, "crops_per_image": 2},
    }
    raw.update(over)
    return raw


def write_json(path, raw):
    path.write_text(json.dumps(raw))
    return str(path)


# --- config --------------------------------------------------------------------


def test_minimal_config_echo_is_fully_defaulted():
    echo = bench.config_to_dict(bench.config_from_dict({"model": {"arch": "cnn"}}))
    assert echo["format_version"] == 1 and echo["folds"] == 5 and echo["base_seed"] == 0
    assert echo["model"]["features"] == 8 and echo["model"]["patch"] == 8
    assert echo["train"]["epochs"] == 100 and echo["train"]["lr"] == 1e-3
    assert echo["dataset"]["params"]["ring_sigma"] == 0.8


def test_unknown_key_names_pointer():
    with pytest.raises(ConfigError, match="/train/epochz"):
        bench.config_from_dict({"model": {"arch": "cnn"}, "train": {"epochz": 3}})


@pytest.mark.parametrize(
    "raw, pointer",
    [
        ({}, "/model/arch"),
        ({"model": {"arch": "cnn", "depth": "2"}}, "/model/depth"),
        ({"model": {"arch": "cnn"}, "folds": 2}, "/folds"),
        ({"model": {"arch": "cnn"}, "dataset": {"params": {"snr_typo": 1}}}, "/dataset/params"),
        ({"model": {"arch": "cnn"}, "dataset": {"n_images": 3}}, "/dataset/n_images"),
    ],
)
def test_config_rejections(raw, pointer):
    with pytest.raises(ConfigError, match=pointer):
        bench.config_from_dict(raw)


def test_serialize_parse_roundtrip(tmp_path):
    cfg = bench.config_from_dict(small_config(sweep={"axis": "depth", "values": [1, 2]}))
    text = bench.serialize_config(cfg)
    again = bench.parse_config(write_json(tmp_path / "c.json", json.loads(text)))
    assert bench.serialize_config(again) == text


def test_sweep_values_must_ascend():
    with pytest.raises(ConfigError):
        bench.parse_sweep("snr", [4.0, 1.0])
    with pytest.raises(ConfigError):
        bench.parse_sweep("width", [1, 2])


# --- run -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "out"
    bench.run(bench.config_from_dict(small_config()), str(out))
    return out


def test_run_emits_all_artifacts(run_dir):
    names = set(os.listdir(run_dir))
    expected = {"config_echo.json", "metrics.csv", "losses.csv", "roc.csv", "roc_folds.csv", "summary.md"}
    expected |= {"roc.svg", "loss_curves.svg"} | {f"fold{f}.ckpt" for f in range(5)}
    expected |= {f"pred_{i}_{r}.pgm" for i in range(3) for r in ("input", "target", "output")}
    assert expected <= names
    assert not any(n.endswith(".tmp") for n in names)


def test_every_text_file_carries_the_stamp(run_dir):
    stamp = "format_version=1 base_seed=0"
    for name in ("metrics.csv", "losses.csv", "roc.csv", "summary.md", "roc.svg", "loss_curves.svg"):
        assert stamp in (run_dir / name).read_text().splitlines()[0 if name.endswith((".csv", ".md")) else 1]
    assert stamp in (run_dir / "pred_0_input.pgm").read_bytes().decode("latin-1")
    assert b'"base_seed": 0' in (run_dir / "fold0.ckpt").read_bytes()[:4096]


def test_csv_schemas(run_dir):
    metrics = bench.read_csv(run_dir / "metrics.csv")
    assert tuple(metrics[0]) == bench.METRICS_COLUMNS
    assert [r["fold"] for r in metrics] == ["0", "1", "2", "3", "4", "mean"]
    losses = bench.read_csv(run_dir / "losses.csv")
    assert tuple(losses[0]) == bench.LOSSES_COLUMNS and len(losses) == 5 * 2 * 2
    roc = bench.read_csv(run_dir / "roc.csv")
    thresholds = [float(r["threshold"]) for r in roc]
    assert thresholds[0] == float("inf") and thresholds == sorted(thresholds, reverse=True)


def test_prediction_triplet_shapes(run_dir):
    for role in ("input", "target", "output"):
        assert read_pgm(run_dir / f"pred_0_{role}.pgm").shape == (32, 32)
    assert set(np.unique(read_pgm(run_dir / "pred_0_target.pgm"))) <= {0, 255}


def test_run_is_deterministic(run_dir, tmp_path):
    bench.run(bench.config_from_dict(small_config()), str(tmp_path / "again"))
    for name in ("losses.csv", "roc.csv", "roc_folds.csv", "config_echo.json"):
        assert (tmp_path / "again" / name).read_bytes() == (run_dir / name).read_bytes()
    for f in range(5):
        assert (tmp_path / "again" / f"fold{f}.ckpt").read_bytes() == (run_dir / f"fold{f}.ckpt").read_bytes()


def test_existing_output_refused(run_dir):
    before = (run_dir / "metrics.csv").read_bytes()
    with pytest.raises(OutputExists):
        bench.run(bench.config_from_dict(small_config()), str(run_dir))
    assert (run_dir / "metrics.csv").read_bytes() == before


def test_report_rerenders_identically(run_dir, tmp_path):
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(run_dir, copy)
    for name in ("summary.md", "roc.svg", "loss_curves.svg"):
        (copy / name).unlink()
    bench.report(str(copy))
    for name in ("roc.svg", "loss_curves.svg"):
        assert (copy / name).read_text() == (run_dir / name).read_text()
    assert "| AUC |" in (copy / "summary.md").read_text()


def test_depth_sweep_params_increase(tmp_path):
    cfg = bench.config_from_dict(small_config(sweep={"axis": "depth", "values": [1, 2, 3]}, train={"epochs": 1, "crop": 16, "crops_per_image": 1}))
    outcomes = bench.run(cfg, str(tmp_path / "sweep"))
    params = [r.params for _, r in outcomes]
    assert params[0] < params[1] < params[2]
    rows = bench.read_csv(tmp_path / "sweep" / "sweep.csv")
    assert [int(r["params"]) for r in rows] == params
    assert {"depth-1", "depth-2", "depth-3"} <= set(os.listdir(tmp_path / "sweep"))
    bench.report(str(tmp_path / "sweep"))


def test_snr_sweep_shares_masks(tmp_path):
    cfg = bench.config_from_dict(small_config(sweep={"axis": "snr", "values": [1.0, 20.0]}, train={"epochs": 1, "crop": 16, "crops_per_image": 1}))
    bench.run(cfg, str(tmp_path / "s"))
    a = read_pgm(tmp_path / "s" / "snr-1.0" / "pred_0_target.pgm")
    b = read_pgm(tmp_path / "s" / "snr-20.0" / "pred_0_target.pgm")
    assert np.array_equal(a, b)


# --- plots and summary -----------------------------------------------------------


def test_perfect_roc_passes_through_corner_pixel():
    svg = render_roc([(0.0, 0.0, np.inf), (0.0, 1.0, 0.9), (1.0, 1.0, 0.1)])
    root = ET.fromstring(svg.split("\n", 1)[1])
    line = root.find(f"{SVG}polyline[@class='roc']")
    x, y = roc_xy(0.0, 1.0)
    assert f"{x:.2f},{y:.2f}" in line.get("points").split()
    assert root.find(f"{SVG}line[@class='diagonal']") is not None


def test_loss_panels_have_one_polyline_per_fold():
    series = {f: [1.0, 0.5, 0.25] for f in range(5)}
    root = ET.fromstring(render_loss_curves(series, series).split("\n", 1)[1])
    lines = root.findall(f"{SVG}polyline")
    assert sum("train" in l.get("class") for l in lines) == 5
    assert sum("val" in l.get("class") for l in lines) == 5


def test_summary_single_result_and_undefined_values():
    rep = MetricsReport(None, 1.0, None, 1.0, ConfusionCounts(0, 10, 0, 0), [])
    result = ExperimentResult("cnn", {}, 1321, [], [rep], {"auc": None, "accuracy": 1.0, "sensitivity": None, "specificity": 1.0}, rep)
    text = write_summary([result])
    header = [l for l in text.splitlines() if l.startswith("| metric")][0]
    assert header.count("|") == 3
    assert "| Sensitivity | n/a |" in text and "| Parameters | 1321 |" in text
    assert "| AUC | n/a |" in text and "| Accuracy | 1.000 |" in text


def test_summary_orders_architectures():
    rows = [dict(arch=a, auc=0.5, params=1) for a in ("vssm", "cnn", "vit", "unet")]
    header = write_summary(rows).splitlines()[0]
    assert header == "| metric | cnn | unet | vit | vssm |"


# --- command line ------------------------------------------------------------------


def test_cli_run_and_collision(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", small_config())
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert "auc=" in capsys.readouterr().out
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert main(["report", "--in", str(tmp_path / "o")]) == 0


def test_cli_config_errors(tmp_path, capsys):
    bad = write_json(tmp_path / "bad.json", {"model": {"arch": "cnn"}, "train": {"epochz": 1}})
    assert main(["run", "--config", bad, "--out", str(tmp_path / "o")]) == 2
    assert "/train/epochz" in capsys.readouterr().err
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["run", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path / "o")]) == 2
    good = write_json(tmp_path / "c.json", small_config())
    assert main(["sweep", "--config", good, "--axis", "snr", "--values", "4,1", "--out", str(tmp_path / "s")]) == 2
    assert main(["report", "--in", str(tmp_path)]) == 4


def test_cli_gen(tmp_path):
    out = tmp_path / "g"
    assert main(["gen", "--kind", "vessels", "--seed", "1", "--n", "2", "--size", "32", "--out", str(out)]) == 0
    assert sorted(os.listdir(out / "masks")) == ["0000.pgm", "0001.pgm"]
    assert main(["gen", "--kind", "vessels", "--n", "2", "--size", "32", "--out", str(out)]) == 3


def test_cli_gen_then_run_from_directory(tmp_path):
    assert main(["gen", "--kind", "airy", "--n", "5", "--size", "64", "--snr", "10", "--out", str(tmp_path / "d")]) == 0
    raw = small_config(dataset={"kind": "dir", "path": str(tmp_path / "d"), "n_images": 5, "size": 64})
    cfg = write_json(tmp_path / "c.json", raw)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 0


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--instances", "1"]) == 0
    assert "cases passed" in capsys.readouterr().out
