"""Building, writing and loading synthetic paired datasets."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import io
from ..errors import UpstreamArtifactError
from .preprocess import ChannelStats, clip_and_scale, fit_reference_stats, sar_channels, split_dataset
from .scene import SceneConfig, generate_scene
from .speckle import apply_speckle

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class DatasetConfig:
    n_scenes: int = 200
    size: int = 64
    looks: int = 4
    lee_window: int = 7
    split_ratio: float = 0.8
    grid: int = 2
    mixture: list[float] | None = None
    seed: int = 0

    def scene_config(self) -> SceneConfig:
        kw = {"size": self.size, "grid": self.grid}
        if self.mixture is not None:
            kw["mixture"] = tuple(self.mixture)
        return SceneConfig(**kw)


@dataclass
class SceneArrays:
    """Stacked scenes of one split, channels-last, values in [0, 1]."""

    ids: list[str]
    seeds: list[int]
    sar: np.ndarray
    optical: np.ndarray
    label_maps: np.ndarray
    labels: np.ndarray
    norm_stats: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "SceneArrays":
        idx = np.asarray(idx)
        return SceneArrays(
            [self.ids[i] for i in idx],
            [self.seeds[i] for i in idx],
            self.sar[idx],
            self.optical[idx],
            self.label_maps[idx],
            self.labels[idx],
            [self.norm_stats[i] for i in idx] if self.norm_stats else [],
        )


def _scene_seeds(root_seed: int, n: int) -> list[tuple[int, int]]:
    children = np.random.SeedSequence(root_seed).spawn(n)
    return [tuple(int(s) for s in c.generate_state(2)) for c in children]


def build_dataset(config: DatasetConfig) -> dict[str, SceneArrays]:
    """Generate, speckle, despeckle and normalise ``n_scenes`` scenes.

    Clip/scale bounds are fitted on the training split only and applied to
    every scene.
    """
    scfg = config.scene_config()
    seeds = _scene_seeds(config.seed, config.n_scenes)
    raw = []
    for k, (scene_seed, speckle_seed) in enumerate(seeds):
        scene = generate_scene(scene_seed, config=scfg)
        speckled = apply_speckle(scene.sar_clean, config.looks, speckle_seed)
        sar3 = sar_channels(speckled, window=config.lee_window, looks=config.looks)
        raw.append((f"scene_{k:05d}", scene, sar3))

    train, test = split_dataset(list(range(len(raw))), config.split_ratio, seed=config.seed)
    reference = fit_reference_stats([raw[i][2] for i in train], [raw[i][1].optical for i in train])

    def pack(indices: list[int]) -> SceneArrays:
        indices = sorted(indices)
        sar, opt, stats = [], [], []
        for i in indices:
            _, scene, sar3 = raw[i]
            s_chan, o_chan, st = [], [], {"sar": [], "optical": []}
            for c in range(3):
                v, cs = clip_and_scale(sar3[..., c], reference["sar"][c])
                s_chan.append(v)
                st["sar"].append(cs.to_dict())
                v, cs = clip_and_scale(scene.optical[..., c], reference["optical"][c])
                o_chan.append(v)
                st["optical"].append(cs.to_dict())
            sar.append(np.stack(s_chan, -1))
            opt.append(np.stack(o_chan, -1))
            stats.append(st)
        return SceneArrays(
            ids=[raw[i][0] for i in indices],
            seeds=[int(raw[i][1].seed) for i in indices],
            sar=np.asarray(sar, dtype=np.float32).reshape(len(indices), config.size, config.size, 3),
            optical=np.asarray(opt, dtype=np.float32).reshape(len(indices), config.size, config.size, 3),
            label_maps=np.asarray([raw[i][1].label_map for i in indices], dtype=np.uint8).reshape(
                len(indices), config.size, config.size
            ),
            labels=np.asarray([raw[i][1].multi_hot(scfg.num_classes) for i in indices], dtype=np.float32).reshape(
                len(indices), scfg.num_classes
            ),
            norm_stats=stats,
        )

    return {"train": pack(train), "test": pack(test), "_reference": reference}  # type: ignore[dict-item]


def quantize(arrays: SceneArrays) -> SceneArrays:
    """Round-trip image values through 16-bit storage precision."""
    q = lambda a: io.from_uint(io.to_uint16(a))  # noqa: E731
    return SceneArrays(arrays.ids, arrays.seeds, q(arrays.sar), q(arrays.optical), arrays.label_maps, arrays.labels, arrays.norm_stats)


def write_dataset(root: str | Path, splits: dict, config: DatasetConfig, class_names: list[str]) -> dict:
    """Write one directory per split plus ``manifest.json``; returns the manifest."""
    root = Path(root)
    scenes = []
    for split in ("train", "test"):
        arrays: SceneArrays = splits[split]
        for k, sid in enumerate(arrays.ids):
            files = {
                f"{sid}_sar.png": io.write_png(root / split / f"{sid}_sar.png", io.to_uint16(arrays.sar[k])),
                f"{sid}_opt.png": io.write_png(root / split / f"{sid}_opt.png", io.to_uint16(arrays.optical[k])),
                f"{sid}_label.png": io.write_png(root / split / f"{sid}_label.png", arrays.label_maps[k]),
            }
            sidecar = {
                "id": sid,
                "seed": arrays.seeds[k],
                "present_classes": [int(c) for c in np.flatnonzero(arrays.labels[k])],
                "norm_stats": arrays.norm_stats[k] if arrays.norm_stats else {},
            }
            io.write_json(root / split / f"{sid}.json", sidecar)
            files[f"{sid}.json"] = io.sha256_file(root / split / f"{sid}.json")
            scenes.append({"id": sid, "split": split, "files": files})
    reference = splits.get("_reference")
    manifest = {
        "schema": SCHEMA_VERSION,
        "config": asdict(config),
        "config_hash": io.config_hash(asdict(config)),
        "class_names": class_names,
        "reference_stats": {k: [s.to_dict() for s in v] for k, v in reference.items()} if reference else None,
        "scenes": scenes,
    }
    io.write_json(root / "manifest.json", manifest)
    return manifest


def load_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise UpstreamArtifactError(f"no dataset manifest at {path}; run the 'synth' command first")
    return io.read_json(path)


def load_split(root: str | Path, split: str, verify: bool = True) -> SceneArrays:
    root = Path(root)
    manifest = load_manifest(root)
    n_classes = len(manifest["class_names"])
    entries = [s for s in manifest["scenes"] if s["split"] == split]
    ids, seeds, sar, opt, lmaps, labels, stats = [], [], [], [], [], [], []
    for entry in entries:
        sid = entry["id"]
        if verify:
            for name, digest in entry["files"].items():
                path = root / split / name
                if not path.exists() or io.sha256_file(path) != digest:
                    raise UpstreamArtifactError(f"dataset file {path} is missing or fails its checksum; rerun 'synth'")
        side = io.read_json(root / split / f"{sid}.json")
        ids.append(sid)
        seeds.append(side["seed"])
        sar.append(io.from_uint(io.read_png(root / split / f"{sid}_sar.png")))
        opt.append(io.from_uint(io.read_png(root / split / f"{sid}_opt.png")))
        lmaps.append(io.read_png(root / split / f"{sid}_label.png"))
        y = np.zeros(n_classes, dtype=np.float32)
        y[side["present_classes"]] = 1.0
        labels.append(y)
        stats.append(side["norm_stats"])
    return SceneArrays(ids, seeds, np.asarray(sar), np.asarray(opt), np.asarray(lmaps), np.asarray(labels), stats)


def reference_from_manifest(manifest: dict) -> dict[str, list[ChannelStats]]:
    ref = manifest["reference_stats"]
    return {k: [ChannelStats.from_dict(d) for d in v] for k, v in ref.items()}
