import hashlib
import json
import shutil

import numpy as np
import pytest
from PIL import Image

from etm.cli import MAP_PALETTE, main
from etm.metrics import parse_history_csv

PAL = {
    "source": [[0.45, 0.45, 0.45], [0.85, 0.2, 0.2], [0.2, 0.75, 0.25], [0.2, 0.3, 0.85]],
    "T1": [[0.35, 0.42, 0.30], [0.9, 0.55, 0.15], [0.25, 0.65, 0.6], [0.55, 0.3, 0.8]],
    "T2": [[0.6, 0.52, 0.62], [0.75, 0.25, 0.5], [0.5, 0.75, 0.2], [0.25, 0.6, 0.9]],
}

TINY = {
    "image_size": [32, 32],
    "domains": [{"name": n, "role": "source" if n == "source" else "target", "palette": p,
                 "samples": 6, "val_samples": 5, "texture_noise_sigma": 0.05}
                for n, p in PAL.items()],
    "model": {"channels": [8, 8, 16, 16], "head_width": 8, "disc_width": 4},
    "train": {"iter_max": 3, "source_iters": 2, "source_batch_size": 2, "batch_size": 2},
}


def write_config(path, **overrides):
    cfg = json.loads(json.dumps(TINY))
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json")
    assert main(["generate", "--config", cfg, "--out", str(root / "data")]) == 0
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def _digest(folder):
    h = hashlib.sha256()
    for f in sorted(folder.rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(folder)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def test_generate_layout_and_determinism(workspace, tmp_path, capsys):
    data = workspace / "data"
    for name in PAL:
        assert len(list((data / name / "train" / "images").glob("*.png"))) == 6
        assert len(list((data / name / "val" / "images").glob("*.png"))) == 5
    assert not (data / "T1" / "train" / "labels").exists()
    assert (data / "source" / "train" / "labels").exists()
    assert json.loads((data / "dataset.json").read_text())["seed"] == 0
    assert main(["generate", "--config", str(workspace / "cfg.json"), "--out", str(tmp_path / "again")]) == 0
    assert _digest(tmp_path / "again") == _digest(data)
    out = capsys.readouterr().out
    assert "source/train: 6 images, class pixels" in out


def test_generate_seed_override_changes_data(workspace, tmp_path):
    assert main(["generate", "--config", str(workspace / "cfg.json"), "--out", str(tmp_path / "s"),
                 "--seed", "5"]) == 0
    assert _digest(tmp_path / "s") != _digest(workspace / "data")


def test_etm_toy_preset_sizes(tmp_path):
    from etm.config import domain_specs, resolve_config
    specs = domain_specs(resolve_config({}))
    assert [(s.name, s.samples, s.val_samples) for s in specs] == [
        ("source", 400, 100), ("T1", 400, 100), ("T2", 400, 100)]


def test_invalid_config_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"iter_max": 3, "bogus": 1}}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "bogus" in capsys.readouterr().err
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad), "--data", "x", "--out", "y"]) == 1


def test_unwritable_output_exit_2(workspace, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["generate", "--config", str(workspace / "cfg.json"), "--out", str(blocker / "sub")]) == 2


def test_missing_data_exit_2(workspace, tmp_path):
    assert main(["train", "--config", str(workspace / "cfg.json"), "--data", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == 2


def test_train_outputs(workspace):
    run = workspace / "run"
    history = parse_history_csv((run / "history.csv").read_text())
    lines = (run / "metrics.tsv").read_text().splitlines()
    assert lines[0] == f"# config_hash={history.config_hash}"
    assert lines[1].split("\t") == ["domain_index", "iteration", "eval_domain", "miou"]
    rows = [line.split("\t") for line in lines[2:]]
    assert [(r[0], r[1], r[2]) for r in rows] == [("1", "3", "T1"), ("2", "3", "T1"), ("2", "3", "T2")]
    manifest = json.loads((run / "bundle" / "manifest.json").read_text())
    assert manifest["tm_domains"] == [1, 2] and manifest["discriminators"] == []
    assert manifest["config_hash"] == history.config_hash
    assert (run / "checkpoints" / "after_1" / "manifest.json").exists()


def _eval_value(capsys):
    out = capsys.readouterr().out
    line = [l for l in out.splitlines() if l.startswith("mIoU")][0]
    return float(line.split("(")[1].rstrip(")"))


def test_eval_matches_logged_values(workspace, capsys):
    run, data = workspace / "run", str(workspace / "data")
    history = parse_history_csv((run / "history.csv").read_text())
    capsys.readouterr()
    assert main(["eval", str(run / "checkpoints" / "after_1"), "--data", data, "--domain", "T1"]) == 0
    assert _eval_value(capsys) == history.entries[(1, 1)]
    for d, name in ((1, "T1"), (2, "T2")):
        assert main(["eval", str(run / "bundle"), "--data", data, "--domain", name]) == 0
        assert _eval_value(capsys) == history.entries[(2, d)]
    assert main(["eval", str(run / "bundle"), "--data", data, "--domain", "source"]) == 0
    assert 0 <= _eval_value(capsys) <= 1


def test_eval_unknown_domain_lists_available(workspace, capsys):
    run = workspace / "run"
    assert main(["eval", str(run / "bundle"), "--data", str(workspace / "data"), "--domain", "T7"]) == 1
    assert "source, T1, T2" in capsys.readouterr().err
    assert main(["eval", str(run / "checkpoints" / "after_1"), "--data", str(workspace / "data"),
                 "--domain", "T2"]) == 1


def test_eval_emit_maps(workspace, tmp_path):
    maps = tmp_path / "maps"
    assert main(["eval", str(workspace / "run" / "bundle"), "--data", str(workspace / "data"),
                 "--domain", "T2", "--emit-maps", str(maps)]) == 0
    files = sorted(maps.glob("*.png"))
    assert len(files) == 5
    with Image.open(files[0]) as im:
        assert im.mode == "P" and im.size == (32, 32)
        assert im.getpalette()[:6] == [*MAP_PALETTE[0], *MAP_PALETTE[1]]
        assert np.asarray(im).max() < 4


def test_corrupt_bundle_exit_2(workspace, tmp_path):
    copy = tmp_path / "b"
    shutil.copytree(workspace / "run" / "bundle", copy)
    blob = next((copy / "blobs").glob("*.bin"))
    blob.write_bytes(blob.read_bytes()[:-1])
    assert main(["eval", str(copy), "--data", str(workspace / "data"), "--domain", "T1"]) == 2


def test_rerun_is_byte_identical(workspace, tmp_path):
    assert main(["train", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "history.csv").read_bytes() == (workspace / "run" / "history.csv").read_bytes()
    assert (tmp_path / "r" / "metrics.tsv").read_bytes() == (workspace / "run" / "metrics.tsv").read_bytes()


def test_resume_after_interrupt(workspace, tmp_path, caplog):
    run = tmp_path / "r"
    shutil.copytree(workspace / "run", run)
    shutil.rmtree(run / "checkpoints" / "after_2")
    shutil.rmtree(run / "bundle")
    with (run / "metrics.tsv").open("a") as fh:
        fh.write("2\t1\tT1\t0.5\n")   # partial progress from the interrupted domain
    with caplog.at_level("INFO", logger="etm"):
        assert main(["train", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data"),
                     "--out", str(run)]) == 0
    assert "resuming after domain 1" in caplog.text
    for name in ("history.csv", "metrics.tsv"):
        assert (run / name).read_bytes() == (workspace / "run" / name).read_bytes()
    assert _digest(run / "bundle") == _digest(workspace / "run" / "bundle")


def test_resume_refuses_other_config(workspace, tmp_path):
    run = tmp_path / "r"
    shutil.copytree(workspace / "run", run)
    other = write_config(tmp_path / "other.json", train={"iter_max": 4})
    assert main(["train", "--config", other, "--data", str(workspace / "data"), "--out", str(run)]) == 1


@pytest.mark.parametrize("ablation", [{"use_tm": False, "adv_loss": "GAN"}, {"adv_loss": "GAN"},
                                      {"adv_loss": "GeoGAN"}, {"tm_pool_branch": False}])
def test_ablation_switches_train(workspace, tmp_path, ablation):
    cfg = write_config(tmp_path / "c.json", ablation=ablation)
    assert main(["train", "--config", cfg, "--data", str(workspace / "data"), "--out", str(tmp_path / "o")]) == 0
    manifest = json.loads((tmp_path / "o" / "bundle" / "manifest.json").read_text())
    assert manifest["tm_domains"] == ([] if ablation.get("use_tm") is False else [1, 2])


def test_source_only_mode(workspace, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", mode="source_only", method="SourceOnly")
    assert main(["train", "--config", cfg, "--data", str(workspace / "data"), "--out", str(tmp_path / "o")]) == 0
    h = parse_history_csv((tmp_path / "o" / "history.csv").read_text())
    assert h.entries[(1, 1)] == h.entries[(2, 1)]
    assert "Gain +0.00" in capsys.readouterr().out


def test_divergence_exit_3(workspace, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", train={"source_lr": 1e30})
    assert main(["train", "--config", cfg, "--data", str(workspace / "data"), "--out", str(tmp_path / "o")]) == 3
    assert "iteration" in capsys.readouterr().err


def test_thread_env_validated(workspace, monkeypatch):
    monkeypatch.setenv("ETM_NUM_THREADS", "zero")
    assert main(["report", str(workspace / "run" / "history.csv")]) == 1


def test_report_text_csv_and_plots(workspace, tmp_path, capsys):
    hist = str(workspace / "run" / "history.csv")
    capsys.readouterr()
    assert main(["report", hist]) == 0
    assert capsys.readouterr().out.startswith("ETM: T1: ")
    assert main(["report", hist, "--format", "csv"]) == 0
    assert capsys.readouterr().out == (workspace / "run" / "history.csv").read_text()
    assert main(["report", hist, hist, "--plot", str(tmp_path / "plots")]) == 0
    out = capsys.readouterr().out
    assert "Fgt[T1]" in out
    assert sorted(p.name for p in (tmp_path / "plots").glob("*.png")) == ["miou_T1.png", "miou_T2.png"]


def test_report_single_domain(tmp_path, capsys):
    f = tmp_path / "one.csv"
    f.write_text("method,eval_domain,miou,fgt,mean_miou,gain\nM,only,0.25,,0.25,0.05\n")
    assert main(["report", str(f)]) == 0
    assert capsys.readouterr().out.strip() == "M: only: 25.00 | Mean 25.00 | Gain +5.00"


def test_report_errors(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("method,eval_domain,miou,fgt,mean_miou,gain\nM,T1,abc,,0.2,0.0\n")
    assert main(["report", str(bad)]) == 1
    assert "row 2" in capsys.readouterr().err
    other = tmp_path / "other.csv"
    other.write_text("method,eval_domain,miou,fgt,mean_miou,gain\nM,X,0.25,,0.25,0.05\n")
    assert main(["report", str(workspace / "run" / "history.csv"), str(other)]) == 1
    assert "conflicting" in capsys.readouterr().err
