"""
Class-aware prompts and the guidance module
===========================================

Turn class probabilities into a prompt, map U-Net stages to encoder layers
and check that freshly initialised guidance leaves features untouched.
"""

import torch

from sar2opt.prompt import PromptVocabulary, build_prompt, parse_prompt
from sar2opt.sggm import SGGM, STAGES, HierPrompts, apply_sggm, stage_to_layer
from sar2opt.synthdata import DEFAULT_CLASSES

names = [c.name for c in DEFAULT_CLASSES]
probs = [0.92, 0.15, 0.81, 0.74, 0.05, 0.3]
spec = build_prompt(probs, tau=0.7, k=2, class_names=names)
print(spec.text, "->", parse_prompt(spec.text, names))
print("token ids", PromptVocabulary(names).token_ids(spec))

print("full-scale stage map:", {s: stage_to_layer(s) for s in STAGES})
print("desk-scale stage map:", {s: stage_to_layer(s, (3, 4, 5, 7)) for s in STAGES})

channels = {s: 16 for s in STAGES}
sggm = SGGM(channels, text_dim=8, visual_dim=32, hier_layers=(3, 4, 5, 7), d_k=8)
feats = {s: torch.randn(1, 16, 4, 4) for s in STAGES}
hier = HierPrompts({l: torch.randn(1, 64, 32) for l in (3, 4, 5, 7)})
sggm.trace = []
out = apply_sggm(feats, torch.randn(1, 8, 8), hier, sggm)
print("identity at init:", all(torch.equal(out[s], feats[s]) for s in STAGES))
print("first trace entries:", sggm.trace[:4])
