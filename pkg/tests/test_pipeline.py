"""Config loading, CLI plumbing and a tiny end-to-end run."""

import json

import pytest
import yaml
from filelock import FileLock

from octa import cli
from octa.config import load_config
from octa.errors import OctaError, PrerequisiteError, ValidationError
from octa.pipeline import STAGES, run_all, run_stage

TINY = {
    "run_dir": "run",
    "synth": {
        "plan": [["healthy", "train", 4], ["late", "validation", 2],
                 ["healthy", "categorization", 3], ["early", "categorization", 3], ["late", "categorization", 3],
                 ["healthy", "test", 2], ["early", "test", 2], ["late", "test", 2]],
        "phantom": {"width": 128, "height": 100, "ilm_row": 30, "thickness": 44, "surface_amplitude": 4},
    },
    "features": {"arch": [32, 16], "arch3": [8], "lr_schedule": [[2, 0.05]], "max_patches": 1500,
                 "pca_components": 8},
    "svm": {"nu_grid": [0.1, 0.5]},
    "cluster": {"C_range": [2, 4], "n_restarts": 2},
    "forest": {"n_trees": 8},
}


def write_cfg(path, data=TINY):
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = load_config(write_cfg(root / "cfg.yaml"), environ={})
    info = run_all(cfg)
    return cfg, info


def test_precedence(tmp_path):
    p = write_cfg(tmp_path / "c.yaml", {"seed": 3, "features": {"minibatch": 20}})
    cfg = load_config(p, environ={})
    assert cfg.profile == "desk" and cfg.seed == 3 and cfg.features.minibatch == 20
    assert cfg.features.arch == [512, 256, 128]
    env = {"OCTA_SEED": "9", "OCTA_FEATURES__MINIBATCH": "10", "OCTA_SVM__NU_GRID": "[0.2, 0.4]"}
    cfg = load_config(p, environ=env)
    assert cfg.seed == 9 and cfg.features.minibatch == 10 and cfg.svm.nu_grid == [0.2, 0.4]
    cfg = load_config(p, seed=11, profile="paper", environ=env)
    assert cfg.seed == 11 and cfg.profile == "paper"
    assert cfg.features.arch == [2048, 1024, 512]
    assert cfg.run_dir == str(tmp_path / "runs/default")


def test_published_profile_values():
    cfg = load_config(profile="paper", environ={})
    f = cfg.features
    assert f.lr_schedule == [[150, 1e-4], [150, 1e-5]]
    assert (f.minibatch, f.momentum, f.corruption) == (50, 0.9, 0.5)
    assert f.arch == [2048, 1024, 512] and f.arch3 == [256]
    assert cfg.svm.nu_grid == [0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]


def test_invalid_values(tmp_path):
    with pytest.raises(ValidationError):
        load_config(write_cfg(tmp_path / "a.yaml", {"svm": {"nu_grid": [0.0]}}), environ={})
    with pytest.raises(ValidationError):
        load_config(write_cfg(tmp_path / "b.yaml", {"nope": 1}), environ={})
    with pytest.raises(ValidationError):
        load_config(environ={"OCTA_SVM__SCALING": "whiten"})


def test_digest_tracks_content(tmp_path):
    a = load_config(write_cfg(tmp_path / "a.yaml", {"seed": 1}), environ={})
    b = load_config(write_cfg(tmp_path / "b.yaml", {"seed": 1}), environ={})
    c = load_config(write_cfg(tmp_path / "c.yaml", {"seed": 2}), environ={})
    assert a.digest() == b.digest() != c.digest()


def test_missing_prerequisite(tmp_path):
    cfg = load_config(write_cfg(tmp_path / "c.yaml"), environ={})
    with pytest.raises(PrerequisiteError):
        run_stage("fit-svm", cfg)
    assert cli.main(["fit-svm", "--config", str(tmp_path / "c.yaml")]) == 2


def test_lock_blocks_concurrent_run(tmp_path):
    cfg = load_config(write_cfg(tmp_path / "c.yaml"), environ={})
    cfg.run_path.mkdir(parents=True)
    with FileLock(str(cfg.run_path / ".lock")):
        with pytest.raises(OctaError, match="locked"):
            run_stage("synth", cfg)


def test_end_to_end_layout(tiny_run):
    cfg, info = tiny_run
    run = cfg.run_path
    assert set(info) == set(STAGES)
    for stage in STAGES:
        rec = json.loads((run / "records" / f"{stage}.json").read_text())
        assert rec["config_hash"] == cfg.digest() and rec["seed"] == cfg.seed
    for rel in ("data/manifest.csv", "models/ddae_ent.octm", "models/pca256.octm", "svm/ddae/sweep.csv",
                "svm/ddae/chosen.json", "categorize/cluster.octm", "categorize/db_curve.csv",
                "classify/results.json", "eval/metrics.json", "eval/table.txt", "eval/pr_ddae.csv"):
        assert (run / rel).exists(), rel
    metrics = json.loads((run / "eval" / "metrics.json").read_text())
    for method in ("ddae", "pca256"):
        summ = metrics["segmentation"][method]["summary"]
        assert set(summ) == {"dice", "precision", "recall", "specificity", "accuracy"}
    table = (run / "eval" / "table.txt").read_text()
    assert "ddae" in table and "pca256" in table


def test_rerun_is_byte_identical(tiny_run, tmp_path):
    cfg, _ = tiny_run
    first = (cfg.run_path / "eval" / "metrics.json").read_bytes()
    again = load_config(write_cfg(tmp_path / "cfg.yaml"), environ={})
    run_all(again)
    assert (again.run_path / "eval" / "metrics.json").read_bytes() == first


def test_cli_single_stage(tiny_run, capsys):
    cfg, _ = tiny_run
    cfg_path = cfg.run_path.parent / "cfg.yaml"
    assert cli.main(["eval", "--config", str(cfg_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out) == {"ddae", "pca256"}
