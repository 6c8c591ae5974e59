"""The six pipeline stages and the run manifest that ties them together.

Layout under the work directory::

    data/                  synthetic dataset (train/, test/, manifest.json)
    checkpoints/           teacher, student and translator checkpoints
    logs/                  one JSON-lines file per training stage
    translations/          generated optical PNGs and confidence snapshots
    reports/               metric report (JSON and text table)
    run_manifest.json
"""

from __future__ import annotations

import dataclasses
import logging
import time
from pathlib import Path

import numpy as np
import torch

from . import io
from .backbone import ViTEncoder, encode, load_encoder
from .checkpoint import load_manifest as load_ckpt_manifest
from .config import ExperimentConfig, stage_seeds
from .diffusion import Denoiser, load_translator, student_conditions, train_translator, translate
from .distill import DistillWeights, distill_student, train_teacher
from .errors import UpstreamArtifactError
from .evalkit import evaluate_run, write_report
from .prompt import PromptVocabulary
from .synthdata import DEFAULT_CLASSES, build_dataset, load_split, quantize, write_dataset
from .synthdata.dataset import load_manifest
from .diffusion.uncertainty import CONF_LOG_MAX, CONF_LOG_MIN

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = 1


class Paths:
    def __init__(self, cfg: ExperimentConfig):
        root = cfg.workdir_path
        self.root = root
        self.data = root / "data"
        self.ckpt = root / "checkpoints"
        self.logs = root / "logs"
        self.translations = root / "translations"
        self.reports = root / "reports"
        self.manifest = root / "run_manifest.json"
        self.teacher = self.ckpt / "teacher"
        self.student = self.ckpt / "student"
        self.translator = self.ckpt / "translator"
        self.report = self.reports / "metrics.json"


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash(), "root_seed": cfg.seed}


def read_run_manifest(paths: Paths) -> dict:
    if paths.manifest.exists():
        return io.read_json(paths.manifest)
    return {"schema": MANIFEST_SCHEMA, "stages": {}, "checkpoints": {}, "timings": {}}


def update_run_manifest(cfg: ExperimentConfig, stage: str, seconds: float, **entries) -> dict:
    """Record a finished stage; written atomically."""
    paths = Paths(cfg)
    m = read_run_manifest(paths)
    m.update(
        schema=MANIFEST_SCHEMA,
        config_hash=cfg.hash(),
        config=cfg.to_dict(),
        root_seed=cfg.seed,
        stage_seeds=stage_seeds(cfg.seed),
    )
    m["stages"][stage] = {"done": True, **entries.pop("stage_info", {})}
    m["timings"][stage] = round(seconds, 3)
    for key, value in entries.items():
        if isinstance(value, dict) and isinstance(m.get(key), dict):
            m[key].update(value)
        else:
            m[key] = value
    io.write_json(paths.manifest, m)
    return m


def verify_run_manifest(paths: Paths) -> list[str]:
    """Return problems with referenced artifacts (missing or checksum mismatch)."""
    m = read_run_manifest(paths)
    problems = []
    for name, digest in m.get("checkpoints", {}).items():
        stem = paths.ckpt / name
        params = stem.with_suffix(".safetensors")
        if not params.exists() or io.sha256_file(params) != digest:
            problems.append(f"checkpoint {name}")
    if "dataset_manifest_sha256" in m:
        dm = paths.data / "manifest.json"
        if not dm.exists() or io.sha256_file(dm) != m["dataset_manifest_sha256"]:
            problems.append("dataset manifest")
    if "report" in m:
        rp = paths.root / m["report"]["path"]
        if not rp.exists() or io.sha256_file(rp) != m["report"]["sha256"]:
            problems.append("metric report")
    return problems


def _require_checkpoint(stem: Path, command: str) -> None:
    if not stem.with_suffix(".json").exists():
        raise UpstreamArtifactError(f"{stem.name} checkpoint not found under {stem.parent}; run '{command}' first")


def cmd_synth(cfg: ExperimentConfig) -> Path:
    t0 = time.perf_counter()
    paths = Paths(cfg)
    splits = build_dataset(cfg.dataset)
    splits = {"train": quantize(splits["train"]), "test": quantize(splits["test"]), "_reference": splits["_reference"]}
    write_dataset(paths.data, splits, cfg.dataset, [c.name for c in DEFAULT_CLASSES])
    update_run_manifest(
        cfg,
        "synth",
        time.perf_counter() - t0,
        dataset_manifest_sha256=io.sha256_file(paths.data / "manifest.json"),
        stage_info={"n_train": len(splits["train"]), "n_test": len(splits["test"])},
    )
    return paths.data


def _load_train(paths: Paths):
    load_manifest(paths.data)
    return load_split(paths.data, "train")


def cmd_train_teacher(cfg: ExperimentConfig) -> Path:
    t0 = time.perf_counter()
    paths = Paths(cfg)
    data = _load_train(paths)
    weights = DistillWeights(**cfg.to_dict()["weights"])
    train_teacher(data, cfg.encoder, cfg.teacher, weights, paths.teacher, paths.logs / "teacher.jsonl")
    _tag(paths.teacher, cfg)
    update_run_manifest(cfg, "train-teacher", time.perf_counter() - t0, checkpoints={"teacher": _digest(paths.teacher)})
    return paths.teacher


def cmd_distill(cfg: ExperimentConfig) -> Path:
    t0 = time.perf_counter()
    paths = Paths(cfg)
    _require_checkpoint(paths.teacher, "train-teacher")
    teacher, _ = load_encoder(paths.teacher, expect_role="teacher")
    data = _load_train(paths)
    weights = DistillWeights(**cfg.to_dict()["weights"])
    distill_student(data, teacher, weights, cfg.distill, paths.student, paths.logs / "distill.jsonl")
    _tag(paths.student, cfg)
    update_run_manifest(cfg, "distill", time.perf_counter() - t0, checkpoints={"student": _digest(paths.student)})
    return paths.student


def _vocab() -> PromptVocabulary:
    return PromptVocabulary([c.name for c in DEFAULT_CLASSES])


def cmd_train_translator(cfg: ExperimentConfig) -> Path:
    t0 = time.perf_counter()
    paths = Paths(cfg)
    _require_checkpoint(paths.student, "distill")
    student, _ = load_encoder(paths.student, expect_role="student")
    data = _load_train(paths)
    vocab = _vocab()
    cond, _ = student_conditions(student, data.sar, vocab, cfg.translator.tau, cfg.translator.k)
    dcfg = dataclasses.replace(cfg.denoiser, hier_layers=student.cfg.hier_layers, visual_dim=student.cfg.embed_dim)
    model = Denoiser(dcfg, vocab, seed=cfg.translator.seed)
    train_translator(data.optical, cond, model, cfg.translator, paths.translator, paths.logs / "translator.jsonl", student=student)
    _tag(paths.translator, cfg)
    update_run_manifest(cfg, "train-translator", time.perf_counter() - t0, checkpoints={"translator": _digest(paths.translator)})
    return paths.translator


def _read_sar_dir(input_dir: Path, limit: int | None) -> tuple[list[str], np.ndarray]:
    files = sorted(input_dir.glob("*_sar.png"))
    if not files:
        raise UpstreamArtifactError(f"no *_sar.png images in {input_dir}; run 'synth' or point --input at SAR PNGs")
    files = files[:limit] if limit else files
    ids = [f.stem[: -len("_sar")] for f in files]
    return ids, np.stack([io.from_uint(io.read_png(f)) for f in files])


def encode_confidence(conf: np.ndarray) -> np.ndarray:
    """Map a positive confidence map to 16 bits through its clamped log range."""
    scaled = (np.log(np.clip(conf, np.exp(CONF_LOG_MIN), np.exp(CONF_LOG_MAX))) - CONF_LOG_MIN) / (CONF_LOG_MAX - CONF_LOG_MIN)
    return io.to_uint16(scaled)


def decode_confidence(arr: np.ndarray) -> np.ndarray:
    return np.exp(io.from_uint(arr).astype(np.float64) * (CONF_LOG_MAX - CONF_LOG_MIN) + CONF_LOG_MIN)


def cmd_translate(cfg: ExperimentConfig, input_dir: str | Path | None = None, out_dir: str | Path | None = None) -> Path:
    t0 = time.perf_counter()
    paths = Paths(cfg)
    _require_checkpoint(paths.student, "distill")
    _require_checkpoint(paths.translator, "train-translator")
    student, _ = load_encoder(paths.student, expect_role="student")
    model, _ = load_translator(paths.translator)
    input_dir = Path(input_dir) if input_dir else paths.data / cfg.sampler.split
    out = Path(out_dir) if out_dir else paths.translations
    ids, sar = _read_sar_dir(input_dir, cfg.sampler.limit)
    seed = stage_seeds(cfg.seed)["sampler"]
    result = translate(sar, student, model, cfg.sampler.steps, cfg.sampler.cfg_scale, seed, cfg.translator.tau, cfg.translator.k)
    records = {}
    for k, sid in enumerate(ids):
        img_sha = io.write_png(out / f"{sid}.png", io.to_uint8(result.images[k]))
        conf = result.confidence_mid[k]
        conf_sha = io.write_png(out / f"{sid}_conf.png", encode_confidence(conf))
        records[sid] = {
            "prompt": result.prompts[k].text,
            "image_sha256": img_sha,
            "confidence_sha256": conf_sha,
            "confidence_stats": {"min": float(conf.min()), "max": float(conf.max()), "mean": float(conf.mean())},
        }
    io.write_json(
        out / "translations.json",
        {
            **_stamp(cfg),
            "seed": seed,
            "cfg_scale": cfg.sampler.cfg_scale,
            "steps": cfg.sampler.steps,
            "confidence_timestep": result.mid_timestep,
            "confidence_encoding": f"log-linear uint16 over [{CONF_LOG_MIN}, {CONF_LOG_MAX}]",
            "images": records,
        },
    )
    update_run_manifest(cfg, "translate", time.perf_counter() - t0, translations=str(out), stage_info={"n_images": len(ids)})
    return out


def teacher_features(teacher: ViTEncoder):
    def fn(images: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
        return torch.cat([encode(x[i : i + 128], teacher).final_cls for i in range(0, len(x), 128)]).double().numpy()

    return fn


def cmd_evaluate(
    cfg: ExperimentConfig,
    pred_dir: str | Path | None = None,
    ref_dir: str | Path | None = None,
    out: str | Path | None = None,
    strict: bool | None = None,
    teacher_stem: str | Path | None = None,
):
    t0 = time.perf_counter()
    paths = Paths(cfg)
    teacher_stem = Path(teacher_stem) if teacher_stem else paths.teacher
    _require_checkpoint(teacher_stem, "train-teacher")
    teacher, _ = load_encoder(teacher_stem, expect_role="teacher")
    pred_dir = Path(pred_dir) if pred_dir else paths.translations
    ref_dir = Path(ref_dir) if ref_dir else paths.data / cfg.sampler.split
    if not pred_dir.is_dir():
        raise UpstreamArtifactError(f"prediction directory {pred_dir} not found; run 'translate' first")
    strict = cfg.evaluate.strict if strict is None else strict
    report = evaluate_run(pred_dir, ref_dir, teacher_features(teacher), strict, cfg.evaluate.uiqi_window, cfg.evaluate.d_lambda_p)
    report.config.update(_stamp(cfg))
    out = Path(out) if out else paths.report
    write_report(out, report)
    io.atomic_write_bytes(out.with_suffix(".txt"), (report.table() + "\n").encode())
    try:
        rel = str(out.relative_to(paths.root))
    except ValueError:
        rel = str(out)
    update_run_manifest(cfg, "evaluate", time.perf_counter() - t0, report={"path": rel, "sha256": io.sha256_file(out)})
    return report


def _digest(stem: Path) -> str:
    return load_ckpt_manifest(stem)["checksum"]


def _tag(stem: Path, cfg: ExperimentConfig) -> None:
    """Embed the experiment config hash in a checkpoint manifest."""
    path = stem.with_suffix(".json")
    m = io.read_json(path)
    m.update(_stamp(cfg))
    io.write_json(path, m)
