"""Model variants for the ablation table.

========================  ====================================================
name                      prior path
========================  ====================================================
``full``                  z_g -> feature map -> shared slot attention, shared init
``mlp_prior``             z_g -> MLP -> K slots in a fixed order
``transformer_prior``     init tokens cross-attend to z_g (transformer decoder)
``no_weight_share``       its own slot attention, independent init noise
``no_init_share``         shared slot attention, independent init noise
========================  ====================================================
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch

from .model import VARIANTS, SlotVAE, SlotVAEConfig

DISPLAY_NAMES = {
    "full": "shared weights + shared init",
    "mlp_prior": "MLP slot prior",
    "transformer_prior": "transformer slot prior",
    "no_weight_share": "separate slot attention",
    "no_init_share": "separate init noise",
}


@dataclass
class VariantSpec:
    name: str = "full"
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in VARIANTS:
            raise ValueError(f"unknown variant {self.name!r}; choose from {', '.join(VARIANTS)}")


def variant_config(spec: VariantSpec, base: SlotVAEConfig) -> SlotVAEConfig:
    return replace(base, **spec.overrides, variant=spec.name)


def build_variant(spec: VariantSpec | str, base: SlotVAEConfig | None = None, seed: int | None = None) -> SlotVAE:
    if isinstance(spec, str):
        spec = VariantSpec(spec)
    cfg = variant_config(spec, base or SlotVAEConfig())
    if seed is not None:
        torch.manual_seed(seed)
    return SlotVAE(cfg)


def parameter_count(model: torch.nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
