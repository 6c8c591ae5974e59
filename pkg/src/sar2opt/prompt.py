"""Class-aware text prompts and their token embeddings.

A small learned embedding table stands in for a frozen text encoder; the
rendered string is kept for logs and run manifests.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, VocabularyError

PREFIX = "Electro-Optical Image"
SEPARATOR = ", "
PROMPT_LENGTH = 8
PAD, NULL = "<pad>", "<null>"
TEMPLATE_TOKENS = ("electro-optical", "image", "of")


@dataclass(frozen=True)
class PromptSpec:
    active_classes: tuple[int, ...]
    text: str
    is_null: bool = False
    probs: tuple[float, ...] = field(default=(), compare=False)


def render(active_classes: Sequence[int], class_names: Sequence[str]) -> str:
    if not active_classes:
        return PREFIX
    return f"{PREFIX} of [{SEPARATOR.join(class_names[c] for c in active_classes)}]"


def null_prompt() -> PromptSpec:
    return PromptSpec((), "", is_null=True)


def build_prompt(probs, tau: float = 0.7, k: int = 2, class_names: Sequence[str] = ()) -> PromptSpec:
    """Keep the top-``k`` classes whose probability exceeds ``tau``.

    Classes are ordered by descending probability, ties by lower index.
    When nothing survives the threshold the prompt falls back to the bare
    prefix with no classes.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    p = np.asarray(probs, dtype=float).ravel()
    if class_names and len(class_names) != p.size:
        raise ConfigError(f"{len(class_names)} class names for {p.size} probabilities")
    order = sorted(range(p.size), key=lambda i: (-p[i], i))[:k]
    active = tuple(i for i in order if p[i] > tau)
    names = list(class_names) or [str(i) for i in range(p.size)]
    return PromptSpec(active, render(active, names), probs=tuple(float(p[i]) for i in active))


def parse_prompt(text: str, class_names: Sequence[str]) -> tuple[int, ...]:
    """Recover the active class ids from a rendered prompt."""
    if text == PREFIX or text == "":
        return ()
    m = re.fullmatch(re.escape(PREFIX) + r" of \[(.*)\]", text)
    if not m:
        raise VocabularyError(f"not a prompt: {text!r}")
    names = list(class_names)
    out = []
    for name in m.group(1).split(SEPARATOR):
        if name not in names:
            raise VocabularyError(f"unknown class name {name!r}")
        out.append(names.index(name))
    return tuple(out)


class PromptVocabulary:
    def __init__(self, class_names: Sequence[str], length: int = PROMPT_LENGTH):
        self.class_names = list(class_names)
        self.tokens = [PAD, NULL, *TEMPLATE_TOKENS, *self.class_names]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.length = length

    def __len__(self) -> int:
        return len(self.tokens)

    def token_ids(self, spec: PromptSpec) -> list[int]:
        if spec.is_null:
            return [self.index[NULL]] * self.length
        words = list(TEMPLATE_TOKENS if spec.active_classes else TEMPLATE_TOKENS[:2])
        for c in spec.active_classes:
            if not 0 <= c < len(self.class_names):
                raise VocabularyError(f"class id {c} not in vocabulary")
            words.append(self.class_names[c])
        ids = [self.index[w] for w in words][: self.length]
        return ids + [self.index[PAD]] * (self.length - len(ids))

    def token_ids_from_names(self, names: Sequence[str]) -> list[int]:
        for n in names:
            if n not in self.class_names:
                raise VocabularyError(f"unknown class name {n!r}")
        return self.token_ids(PromptSpec(tuple(self.class_names.index(n) for n in names), ""))

    def batch(self, specs: Sequence[PromptSpec]) -> torch.Tensor:
        return torch.tensor([self.token_ids(s) for s in specs], dtype=torch.long)

    @property
    def null_id(self) -> int:
        return self.index[NULL]


class PromptEmbedder(nn.Module):
    """Learned lookup from prompt token ids to a ``length x dim`` sequence."""

    def __init__(self, vocab: PromptVocabulary, dim: int):
        super().__init__()
        self.vocab = vocab
        self.table = nn.Embedding(len(vocab), dim)
        nn.init.normal_(self.table.weight, std=1.0)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.table(token_ids)


def embed_prompt(spec: PromptSpec, embedder: PromptEmbedder) -> torch.Tensor:
    return embedder(torch.tensor(embedder.vocab.token_ids(spec)))


def cfg_drop(spec: PromptSpec, p_drop: float, seed: int | np.random.Generator | None = None) -> PromptSpec:
    """Replace ``spec`` by the null prompt with probability ``p_drop``."""
    if not 0.0 <= p_drop <= 1.0:
        raise ConfigError(f"p_drop must be in [0, 1], got {p_drop}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return null_prompt() if rng.random() < p_drop else spec


def drop_tokens(token_ids: torch.Tensor, p_drop: float, null_id: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Batched null-prompt dropout on a ``B x length`` id tensor."""
    mask = torch.rand(token_ids.shape[0], generator=generator) < p_drop
    out = token_ids.clone()
    out[mask] = null_id
    return out
