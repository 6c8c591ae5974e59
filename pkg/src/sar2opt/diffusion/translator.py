"""Translator training against a frozen SAR student, and guided DDIM sampling."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ..backbone import ViTEncoder, encode
from ..checkpoint import load_checkpoint, save_checkpoint
from ..errors import UpstreamArtifactError, ValidationError
from ..prompt import PromptSpec, PromptVocabulary, build_prompt, drop_tokens
from ..sggm import HierPrompts
from ..training import JsonlLogger, check_finite, cosine_with_warmup, to_nchw
from .denoiser import Condition, Denoiser, DenoiserConfig
from .schedule import NoiseSchedule, cfg_combine, ddim_step, ddim_timesteps, forward_diffuse, linear_schedule
from .uncertainty import UncertaintyConfig, uncertainty_loss

log = logging.getLogger(__name__)


@dataclass
class TranslatorConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 5e-4
    warmup: int = 100
    p_drop: float = 0.5
    grad_clip: float = 1.0
    tau: float = 0.7
    k: int = 2
    diffusion_steps: int = 1000
    log_every: int = 25
    seed: int = 0
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TranslationResult:
    images: np.ndarray  # N x H x W x 3 in [0, 1]
    confidence_mid: np.ndarray  # N x H x W, Sigma captured near T/2
    mid_timestep: int
    prompts: list[PromptSpec]
    timesteps: list[int]


def student_conditions(
    student: ViTEncoder, sar: np.ndarray | torch.Tensor, vocab: PromptVocabulary, tau: float = 0.7, k: int = 2, batch_size: int = 128
) -> tuple[Condition, list[PromptSpec]]:
    """Prompts and hierarchical features for a SAR stack from the frozen student."""
    if student.training:
        raise ValidationError("the student must be in eval mode")
    x = to_nchw(sar) if isinstance(sar, np.ndarray) else sar
    layers = student.cfg.hier_layers
    feats = {l: [] for l in layers}
    specs: list[PromptSpec] = []
    for i in range(0, len(x), batch_size):
        bundle = encode(x[i : i + batch_size], student)
        for l in layers:
            feats[l].append(bundle.patch_tokens_per_layer[l])
        probs = torch.sigmoid(bundle.logits).numpy()
        specs += [build_prompt(p, tau, k, vocab.class_names) for p in probs]
    hier = HierPrompts({l: torch.cat(v) for l, v in feats.items()}, source="student")
    return Condition(x, vocab.batch(specs), hier), specs


def train_translator(
    optical: np.ndarray,
    cond: Condition,
    model: Denoiser,
    cfg: TranslatorConfig,
    out_stem: str | Path | None = None,
    log_path: str | Path | None = None,
    student: ViTEncoder | None = None,
    on_log: Callable[[Denoiser], dict] | None = None,
) -> tuple[Denoiser, list[dict]]:
    """Optimise the denoiser with the uncertainty-weighted objective.

    ``cond`` holds precomputed student features, so the encoder receives no
    gradient; when ``student`` is given its weights are checked afterwards.
    ``on_log`` is called with the model at every log step and its returned
    fields are added to the log record.
    """
    if len(optical) != len(cond):
        raise ValidationError("optical targets and conditions are not paired")
    before = {k: v.clone() for k, v in student.state_dict().items()} if student is not None else None
    schedule = linear_schedule(cfg.diffusion_steps)
    x0_all = to_nchw(optical) * 2.0 - 1.0
    logger = JsonlLogger(log_path)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=cfg.lr)
    sched = cosine_with_warmup(opt, cfg.warmup, cfg.steps)
    null_id = model.embedder.vocab.null_id
    n = len(optical)
    model.train()
    for step in range(cfg.steps):
        idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=gen)
        x0 = x0_all[idx]
        t = torch.randint(0, schedule.steps, (len(idx),), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        c = cond.select(idx)
        c = c.with_tokens(drop_tokens(c.token_ids, cfg.p_drop, null_id, gen))
        out = model(forward_diffuse(x0, t, eps, schedule), t, c)
        total, recon, reg = uncertainty_loss(out.eps_pred, out.confidence, eps, cfg.uncertainty)
        check_finite(total, "translator loss", step)
        opt.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        sched.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            logger.log(
                step=step,
                lr=opt.param_groups[0]["lr"],
                loss=float(total.detach()),
                recon=float(recon.detach()),
                reg=float(reg.detach()),
                mean_confidence=float(out.confidence.detach().mean()),
                **(on_log(model) if on_log else {}),
            )
    model.eval()
    if before is not None:
        for k, v in student.state_dict().items():
            if not torch.equal(v, before[k]):
                raise RuntimeError(f"student parameter {k} changed during translator training")
    if out_stem:
        save_translator(out_stem, model, cfg.steps, {"train_config": cfg.to_dict()})
    return model, logger.records


@torch.no_grad()
def sample(
    model: Denoiser,
    cond: Condition,
    num_steps: int = 50,
    scale: float = 5.5,
    seed: int = 0,
    eta: float = 0.0,
    schedule: NoiseSchedule | None = None,
    batch_size: int = 64,
) -> tuple[torch.Tensor, torch.Tensor, int]:
    """Guided DDIM from pure noise; returns ``x0`` in [-1, 1], Sigma near T/2 and that timestep."""
    model.eval()
    schedule = schedule or linear_schedule()
    ts = ddim_timesteps(schedule, num_steps)
    mid_t = min(ts, key=lambda t: (abs(t - schedule.steps // 2), t))
    gen = torch.Generator().manual_seed(seed)
    size = model.cfg.image_size
    x_all = torch.randn((len(cond), 3, size, size), generator=gen)
    null_ids = torch.full_like(cond.token_ids, model.embedder.vocab.null_id)
    outs, confs = [], []
    for i in range(0, len(cond), batch_size):
        sl = slice(i, i + batch_size)
        c = cond.select(sl)
        x = x_all[sl]
        pair = Condition(torch.cat([c.sar3, c.sar3]), torch.cat([c.token_ids, null_ids[sl]]), HierPrompts({l: torch.cat([f, f]) for l, f in c.hier.features.items()}))
        conf_mid = None
        for j, t in enumerate(ts):
            t_prev = ts[j + 1] if j + 1 < len(ts) else -1
            if scale == 1:
                out = model(x, torch.full((len(x),), t), c)
                eps = out.eps_pred
                conf = out.confidence
            else:
                out = model(torch.cat([x, x]), torch.full((2 * len(x),), t), pair)
                e_c, e_u = out.eps_pred.chunk(2)
                eps = cfg_combine(e_c, e_u, scale)
                conf = out.confidence[: len(x)]
            if t == mid_t:
                conf_mid = conf
            x = ddim_step(x, eps, t, t_prev, schedule, eta, gen)
        outs.append(x.clamp(-1, 1))
        confs.append(conf_mid)
    return torch.cat(outs), torch.cat(confs), mid_t


def translate(
    sar: np.ndarray,
    student: ViTEncoder,
    model: Denoiser,
    num_steps: int = 50,
    scale: float = 5.5,
    seed: int = 0,
    tau: float = 0.7,
    k: int = 2,
) -> TranslationResult:
    """SAR stack (N x H x W x 3 in [0, 1]) to optical images in [0, 1]."""
    vocab = model.embedder.vocab
    cond, specs = student_conditions(student, sar, vocab, tau, k)
    schedule = linear_schedule()
    x0, conf, mid_t = sample(model, cond, num_steps, scale, seed, schedule=schedule)
    images = ((x0 + 1.0) / 2.0).clamp(0, 1).permute(0, 2, 3, 1).numpy()
    return TranslationResult(images, conf[:, 0].numpy(), mid_t, specs, ddim_timesteps(schedule, num_steps))



def save_translator(stem: str | Path, model: Denoiser, step: int, extra: dict | None = None) -> dict:
    manifest = {
        "role": "translator",
        "step": step,
        "denoiser_config": model.cfg.to_dict(),
        "class_names": model.embedder.vocab.class_names,
        **(extra or {}),
    }
    return save_checkpoint(stem, dict(model.state_dict()), manifest)


def load_translator(stem: str | Path) -> tuple[Denoiser, dict]:
    tensors, manifest = load_checkpoint(stem)
    if manifest.get("role") != "translator":
        raise UpstreamArtifactError(f"{stem} is not a translator checkpoint; run train-translator first")
    cfg = DenoiserConfig(**manifest["denoiser_config"])
    model = Denoiser(cfg, PromptVocabulary(manifest["class_names"]))
    model.load_state_dict(tensors)
    model.eval()
    return model, manifest
