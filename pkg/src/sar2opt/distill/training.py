"""Teacher fine-tuning and SAR student distillation loops."""

from __future__ import annotations

import copy
import itertools
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from ..backbone import EncoderConfig, FeatureBundle, ViTEncoder, encode, save_encoder
from ..errors import ValidationError
from ..synthdata import SceneArrays
from ..training import JsonlLogger, check_finite, cosine_with_warmup, flip_batch, to_nchw
from .losses import DistillWeights, attention_kl, task_loss, total_student_loss
from .metrics import classification_metrics

log = logging.getLogger(__name__)


@dataclass
class EncoderTrainConfig:
    steps: int = 1200
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 100
    val_fraction: float = 0.1
    eval_every: int = 100
    checkpoint_every: int = 0
    augment: bool = True
    seed: int = 0


def _split_val(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fraction * n))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _channel_stats(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return x.mean(dim=(0, 2, 3)), x.std(dim=(0, 2, 3))


def predict_probs(model: ViTEncoder, images: torch.Tensor, batch_size: int = 128) -> np.ndarray:
    out = [torch.sigmoid(encode(images[i : i + batch_size], model).logits) for i in range(0, len(images), batch_size)]
    return torch.cat(out).numpy()


def evaluate_encoder(model: ViTEncoder, images: np.ndarray | torch.Tensor, labels: np.ndarray) -> dict[str, float]:
    x = to_nchw(images) if isinstance(images, np.ndarray) else images
    return classification_metrics(predict_probs(model, x), labels)


def encode_all(model: ViTEncoder, images: torch.Tensor, batch_size: int = 128) -> FeatureBundle:
    """Eval-mode bundles for a whole image stack, concatenated along the batch."""
    parts = [encode(images[i : i + batch_size], model) for i in range(0, len(images), batch_size)]
    cat = lambda key: {l: torch.cat([getattr(p, key)[l] for p in parts]) for l in getattr(parts[0], key)}  # noqa: E731
    return FeatureBundle(
        cat("cls_per_layer"),
        cat("attn_per_layer"),
        cat("patch_tokens_per_layer"),
        torch.cat([p.logits for p in parts]),
        torch.cat([p.final_cls for p in parts]),
    )


def mean_attention_kl(student: ViTEncoder, teacher: ViTEncoder, sar: np.ndarray, optical: np.ndarray) -> float:
    """Mean over aligned layers and images of KL(teacher || student) attention."""
    layers = student.cfg.aligned_layers
    b_s = encode_all(student, to_nchw(sar))
    b_t = encode_all(teacher, to_nchw(optical))
    return float(torch.stack([attention_kl(b_s.attn_per_layer[l], b_t.attn_per_layer[l]).mean() for l in layers]).mean())


def class_counts(labels: np.ndarray) -> list[int]:
    return [int(c) for c in np.asarray(labels).sum(axis=0)]


def train_teacher(
    data: SceneArrays,
    enc_cfg: EncoderConfig,
    cfg: EncoderTrainConfig,
    weights: DistillWeights | None = None,
    out_stem: str | Path | None = None,
    log_path: str | Path | None = None,
) -> tuple[ViTEncoder, list[dict]]:
    """Fine-tune adapters and head on optical images with the weighted task loss.

    Returns the best-validation model (by micro-AP) and the log records.
    """
    tr_idx, val_idx = _split_val(len(data), cfg.val_fraction, cfg.seed)
    x_all = to_nchw(data.optical)
    y_all = torch.from_numpy(data.labels)
    x, y = x_all[tr_idx], y_all[tr_idx]

    weights = weights or DistillWeights()
    weights.class_counts, weights.total = class_counts(data.labels[tr_idx]), len(tr_idx)
    pos_w = weights.positive_weights().float()

    torch.manual_seed(cfg.seed)
    model = ViTEncoder(enc_cfg, adapter_seed=cfg.seed + 1)
    model.set_input_normalization(*_channel_stats(x))
    return _fit(
        model,
        x,
        y,
        x_all[val_idx],
        data.labels[val_idx],
        cfg,
        lambda m, xb, yb, idx, codes: (lambda l: (l, {"task": float(l.detach())}))(task_loss(m(xb).logits, yb, pos_w)),
        out_stem,
        log_path,
        role="teacher",
        extra={"weights": asdict(weights)},
        select="ap_micro",
    )


def init_student(data: SceneArrays, teacher: ViTEncoder, cfg: EncoderTrainConfig) -> ViTEncoder:
    """The student before distillation: zero-initialised adapters on the
    shared frozen base, inputs normalised with the SAR channel statistics."""
    student = ViTEncoder(teacher.cfg, adapter_seed=cfg.seed + 2)
    student.set_input_normalization(*_channel_stats(to_nchw(data.sar)))
    return student


def distill_student(
    data: SceneArrays,
    teacher: ViTEncoder,
    weights: DistillWeights,
    cfg: EncoderTrainConfig,
    out_stem: str | Path | None = None,
    log_path: str | Path | None = None,
) -> tuple[ViTEncoder, list[dict]]:
    """Train the SAR student against the frozen teacher on paired optical images."""
    if data.sar.shape[:3] != data.optical.shape[:3]:
        raise ValidationError("SAR and optical stacks are not paired")
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    layers = teacher.cfg.aligned_layers

    tr_idx, val_idx = _split_val(len(data), cfg.val_fraction, cfg.seed)
    sar_all, opt_all = to_nchw(data.sar), to_nchw(data.optical)
    y_all = torch.from_numpy(data.labels)
    weights.class_counts, weights.total = class_counts(data.labels[tr_idx]), len(tr_idx)
    pos_w = weights.positive_weights().float()

    # teacher targets for the four flip states, computed once
    opt_tr = opt_all[tr_idx]
    cache = [encode_all(teacher, flip_batch(opt_tr, torch.full((len(opt_tr),), code))) for code in range(4)]

    def teacher_targets(idx: torch.Tensor, codes: torch.Tensor) -> FeatureBundle:
        pick = lambda get: torch.stack([get(cache[c]) for c in range(4)])[codes, idx]  # noqa: E731
        return FeatureBundle(
            {l: pick(lambda b: b.cls_per_layer[l]) for l in layers},
            {l: pick(lambda b: b.attn_per_layer[l]) for l in layers},
            {},
            pick(lambda b: b.logits),
            pick(lambda b: b.final_cls),
        )

    def loss_fn(m, xb, yb, idx, codes):
        return total_student_loss(m(xb), teacher_targets(idx, codes), yb, weights, layers, pos_w)

    torch.manual_seed(cfg.seed)
    student = init_student(data.subset(tr_idx), teacher, cfg)
    teacher_before = {k: v.clone() for k, v in teacher.state_dict().items()}
    model, history = _fit(
        student,
        sar_all[tr_idx],
        y_all[tr_idx],
        sar_all[val_idx],
        data.labels[val_idx],
        cfg,
        loss_fn,
        out_stem,
        log_path,
        role="student",
        extra={"weights": asdict(weights)},
        select="ap_micro",
    )
    for k, v in teacher.state_dict().items():
        if not torch.equal(v, teacher_before[k]):
            raise RuntimeError(f"teacher parameter {k} changed during distillation")
    return model, history


def _fit(model, x, y, x_val, y_val, cfg, loss_fn, out_stem, log_path, role, extra, select):
    logger = JsonlLogger(log_path)
    params = model.trainable_parameters()
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = cosine_with_warmup(opt, cfg.warmup, cfg.steps)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(x)
    best, best_state = -np.inf, None
    perm, cursor = torch.randperm(n, generator=gen), 0

    for step in range(cfg.steps):
        if cursor + cfg.batch_size > n:
            perm, cursor = torch.randperm(n, generator=gen), 0
        idx = perm[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        codes = torch.randint(0, 4, (len(idx),), generator=gen) if cfg.augment else torch.zeros(len(idx), dtype=torch.long)
        model.train()
        loss, terms = loss_fn(model, flip_batch(x[idx], codes), y[idx], idx, codes)
        check_finite(loss, f"{role} loss", step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        record = {"step": step, "lr": opt.param_groups[0]["lr"], "loss": float(loss.detach()), **terms}

        last = step == cfg.steps - 1
        if len(x_val) and ((step + 1) % cfg.eval_every == 0 or last):
            metrics = evaluate_encoder(model, x_val, y_val)
            record.update({f"val_{k}": v for k, v in metrics.items()})
            if metrics[select] > best:
                best, best_state = metrics[select], copy.deepcopy(model.state_dict())
        logger.log(**record)
        if out_stem and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_encoder(Path(f"{out_stem}_step{step + 1}"), model, step + 1, {"role": role, **extra})

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if out_stem:
        save_encoder(out_stem, model, cfg.steps, {"role": role, "best_val": float(best), **extra})
    return model, logger.records


def sweep_weights(
    data: SceneArrays,
    teacher: ViTEncoder,
    grid: dict[str, list[float]],
    cfg: EncoderTrainConfig,
    eval_data: SceneArrays | None = None,
    base: DistillWeights | None = None,
) -> list[dict]:
    """Distil one student per point of a weight grid and score each.

    ``grid`` maps DistillWeights field names to candidate values; the
    cartesian product is swept. Each row reports the weights, the attention
    KL before and after distillation and the student and teacher micro-AP
    on ``eval_data`` (the training data when omitted).
    """
    eval_data = eval_data or data
    base = base or DistillWeights()
    names = sorted(grid)
    tr_idx, _ = _split_val(len(data), cfg.val_fraction, cfg.seed)
    fresh = init_student(data.subset(tr_idx), teacher, cfg).eval()
    kl_init = mean_attention_kl(fresh, teacher, eval_data.sar, eval_data.optical)
    teacher_ap = evaluate_encoder(teacher, eval_data.optical, eval_data.labels)["ap_micro"]
    rows = []
    for values in itertools.product(*(grid[n] for n in names)):
        point = dict(zip(names, values))
        fields = {k: v for k, v in asdict(base).items() if k not in ("class_counts", "total")}
        weights = DistillWeights(**{**fields, **point})
        student, _ = distill_student(data, teacher, weights, cfg)
        kl = mean_attention_kl(student, teacher, eval_data.sar, eval_data.optical)
        rows.append(
            {
                **point,
                "attn_kl_init": kl_init,
                "attn_kl": kl,
                "kl_ratio": kl / kl_init,
                "student_ap_micro": evaluate_encoder(student, eval_data.sar, eval_data.labels)["ap_micro"],
                "teacher_ap_micro": teacher_ap,
            }
        )
        log.info("sweep point %s: %s", point, rows[-1])
    return rows
