import json

import pytest
import yaml

from sar2opt import io
from sar2opt.cli import main
from sar2opt.config import ExperimentConfig, config_from_dict, dump_config, load_config, smoke_config, stage_seeds
from sar2opt.errors import ConfigError
from sar2opt.pipeline import Paths, decode_confidence, encode_confidence, verify_run_manifest

MICRO = {
    "dataset": {"n_scenes": 20},
    "encoder": {"embed_dim": 32, "heads": 4},
    "teacher": {"steps": 4, "batch_size": 8, "warmup": 1, "eval_every": 2},
    "distill": {"steps": 4, "batch_size": 8, "warmup": 1, "eval_every": 2},
    "denoiser": {"channels": [8, 16, 16, 16], "time_dim": 32, "text_dim": 8, "d_k": 8},
    "translator": {"steps": 3, "batch_size": 4, "warmup": 1},
    "sampler": {"steps": 3, "limit": 2},
}


def micro_config(tmp_path, name="cfg.yaml", **extra):
    path = tmp_path / name
    path.write_text(yaml.safe_dump({**MICRO, "workdir": str(tmp_path / "run"), **extra}))
    return str(path)


STAGES = ["synth", "train-teacher", "distill", "train-translator", "translate", "evaluate"]


def run_pipeline(cfg_path):
    for cmd in STAGES:
        assert main([cmd, "--config", cfg_path]) == 0, cmd


# config


def test_config_round_trip():
    cfg = smoke_config()
    again = config_from_dict(yaml.safe_load(dump_config(cfg)))
    assert again.to_dict() == cfg.to_dict()
    assert again.hash() == cfg.hash()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        config_from_dict({"dataset": {"n_scene": 10}})
    with pytest.raises(ConfigError):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        config_from_dict({"schema": 99})


def test_stage_seeds_derive_from_root():
    a, b = ExperimentConfig(seed=1), ExperimentConfig(seed=2)
    assert a.dataset.seed == stage_seeds(1)["dataset"]
    assert a.dataset.seed != b.dataset.seed
    assert len(set(stage_seeds(1).values())) == 5
    assert stage_seeds(7) == stage_seeds(7)


def test_hash_ignores_workdir():
    a, b = ExperimentConfig(workdir="x"), ExperimentConfig(workdir="y")
    assert a.hash() == b.hash()
    assert ExperimentConfig(seed=3).hash() != a.hash()


def test_workdir_env_override(monkeypatch, tmp_path):
    monkeypatch.setenv("SAR2OPT_WORKDIR", str(tmp_path))
    assert ExperimentConfig().workdir_path == tmp_path


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.yaml")


def test_confidence_png_encoding():
    import numpy as np

    conf = np.exp(np.linspace(-10, 10, 64)).reshape(8, 8)
    back = decode_confidence(encode_confidence(conf))
    np.testing.assert_allclose(np.log(back), np.log(conf), atol=20 / 65535)


# command line


def test_init_config_prints_yaml(capsys):
    assert main(["init-config", "--smoke"]) == 0
    data = yaml.safe_load(capsys.readouterr().out)
    assert data["dataset"]["n_scenes"] == 200


def test_exit_code_for_bad_config(tmp_path, capsys):
    assert main(["synth", "--config", str(tmp_path / "missing.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("dataset: {n_scenes: 10, colour: red}\n")
    assert main(["synth", "--config", str(bad)]) == 2
    assert "unknown keys" in capsys.readouterr().err


def test_exit_code_for_missing_upstream(tmp_path):
    cfg = micro_config(tmp_path)
    assert main(["train-teacher", "--config", cfg]) == 3
    assert main(["distill", "--config", cfg]) == 3
    assert main(["translate", "--config", cfg]) == 3


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("micro")
    cfg = micro_config(tmp)
    run_pipeline(cfg)
    return tmp, cfg


def test_pipeline_artifacts(finished_run):
    tmp, cfg_path = finished_run
    paths = Paths(load_config(cfg_path))
    manifest = json.loads(paths.manifest.read_text())
    assert set(manifest["stages"]) == set(STAGES)
    assert set(manifest["checkpoints"]) == {"teacher", "student", "translator"}
    assert verify_run_manifest(paths) == []
    pngs = sorted(p.name for p in paths.translations.glob("*.png"))
    assert len(pngs) == 4 and sum(n.endswith("_conf.png") for n in pngs) == 2
    report = json.loads(paths.report.read_text())
    assert {"ssim", "sam", "scc", "d_lambda", "efid", "ekid"} <= set(report["aggregate"])
    assert report["config"]["config_hash"] == manifest["config_hash"]
    log_lines = (paths.logs / "translator.jsonl").read_text().splitlines()
    assert all("loss" in json.loads(line) for line in log_lines)


def test_evaluate_is_deterministic(finished_run, tmp_path):
    _, cfg = finished_run
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["evaluate", "--config", cfg, "--out", str(a)]) == 0
    assert main(["evaluate", "--config", cfg, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_strict_evaluate_fails_on_unmatched(finished_run, tmp_path):
    _, cfg = finished_run
    # the sampler limit leaves most reference images without a prediction
    assert main(["evaluate", "--config", cfg, "--strict", "--out", str(tmp_path / "r.json")]) == 2


def test_corrupted_checkpoint_refused(finished_run, tmp_path):
    tmp, cfg = finished_run
    paths = Paths(load_config(cfg))
    params = paths.translator.with_suffix(".safetensors")
    original = params.read_bytes()
    try:
        params.write_bytes(original[:-1] + bytes([original[-1] ^ 0xFF]))
        assert main(["translate", "--config", cfg, "--out", str(tmp_path / "t")]) == 3
        assert verify_run_manifest(paths) == ["checkpoint translator"]
    finally:
        io.atomic_write_bytes(params, original)
