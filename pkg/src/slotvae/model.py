"""Networks of the slot VAE: backbone, shared slot attention, Gaussian heads,
global auto-encoder, spatial-broadcast component decoder, and the two-path
forward pass used for training.

Tensors follow torch conventions: images are ``(B, C, H, W)`` in [0, 1];
feature maps are channel-last ``(B, H, W, F)``; slot sets are ``(B, K, D)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_VERSION = 1
VARIANTS = ("full", "mlp_prior", "transformer_prior", "no_weight_share", "no_init_share")


@dataclass
class SlotVAEConfig:
    image_size: int = 64
    channels: int = 3
    num_slots: int = 5  # K
    slot_dim: int = 64  # D, also the slot latent size
    global_dim: int = 32  # L
    feature_dim: int = 64  # backbone output channels
    backbone_layers: int = 4
    kernel_size: int = 5
    global_hidden: int = 512
    head_hidden: int = 128
    decoder_channels: int = 64
    decoder_base: int = 8  # spatial size the slot latents are broadcast to
    decoder_refine: int = 1  # stride-1 convs after the upsampling stack
    iterations: int = 3
    std_floor: float = 1e-4
    variant: str = "full"
    transformer_layers: int = 2
    transformer_heads: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.num_slots < 1:
            raise ValueError("num_slots must be >= 1")
        ratio = self.image_size / self.decoder_base
        if ratio < 1 or ratio != 2 ** round(math.log2(ratio)):
            raise ValueError(
                f"image_size {self.image_size} must be decoder_base {self.decoder_base} times a power of two"
            )

    @property
    def upsample_layers(self) -> int:
        return round(math.log2(self.image_size // self.decoder_base))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SlotVAEConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# Distributions


@dataclass
class DiagGaussian:
    """Diagonal Gaussian with positive ``std``; any leading batch shape."""

    mean: torch.Tensor
    std: torch.Tensor

    @classmethod
    def from_raw(cls, mean, raw_std, floor: float = 1e-4) -> "DiagGaussian":
        return cls(mean, F.softplus(raw_std) + floor)

    @classmethod
    def standard(cls, shape, like: torch.Tensor) -> "DiagGaussian":
        return cls(like.new_zeros(shape), like.new_ones(shape))

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        """Elementwise log density."""
        z = (x - self.mean) / self.std
        return -0.5 * z * z - torch.log(self.std) - 0.5 * math.log(2 * math.pi)

    def permute_slots(self, perm) -> "DiagGaussian":
        return DiagGaussian(self.mean[:, perm], self.std[:, perm])


def reparameterize(dist: DiagGaussian, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """``mean + std * eps`` with ``eps ~ N(0, I)``; differentiable in mean and std."""
    eps = torch.randn(
        dist.mean.shape, generator=generator, dtype=dist.mean.dtype, device=dist.mean.device
    )
    return dist.mean + dist.std * eps


# ---------------------------------------------------------------------------
# Building blocks


def position_grid(height: int, width: int) -> torch.Tensor:
    """(H, W, 4) grid of normalized coordinates and their complements."""
    rows = torch.linspace(0.0, 1.0, height)
    cols = torch.linspace(0.0, 1.0, width)
    r, c = torch.meshgrid(rows, cols, indexing="ij")
    return torch.stack([r, c, 1.0 - r, 1.0 - c], dim=-1)


class SoftPositionEmbed(nn.Module):
    """Adds a learned linear projection of the coordinate grid to a channel-last map."""

    def __init__(self, dim: int, size: int):
        super().__init__()
        self.proj = nn.Linear(4, dim)
        self.register_buffer("grid", position_grid(size, size), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.proj(self.grid.to(x.dtype))


class Backbone(nn.Module):
    """Stride-1 CNN keeping image resolution; output is channel-last."""

    def __init__(self, cfg: SlotVAEConfig):
        super().__init__()
        pad = cfg.kernel_size // 2
        layers = []
        c_in = cfg.channels
        for i in range(cfg.backbone_layers):
            layers.append(nn.Conv2d(c_in, cfg.feature_dim, cfg.kernel_size, padding=pad))
            if i < cfg.backbone_layers - 1:
                layers.append(nn.ReLU())
            c_in = cfg.feature_dim
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).permute(0, 2, 3, 1)


@dataclass
class SlotSet:
    slots: torch.Tensor  # (B, K, D)
    init_noise: torch.Tensor  # (B, K, D)
    iterations_run: int
    attn: Optional[torch.Tensor] = None  # (B, N, K) from the last iteration


class SlotAttention(nn.Module):
    """Iterative competitive attention over N feature vectors into K slots.

    Each iteration computes logits ``k(f) q(s)^T / sqrt(D)``, normalizes them
    over the slot axis, renormalizes each slot's weights over the features,
    takes the weighted mean of ``v(f)`` and feeds it to a GRU cell.
    Inputs and slots are layer-normalized before projection.
    """

    def __init__(self, feature_dim: int, slot_dim: int, iterations: int = 3, eps: float = 1e-8):
        super().__init__()
        self.slot_dim = slot_dim
        self.iterations = iterations
        self.eps = eps
        self.init_mu = nn.Parameter(torch.zeros(1, 1, slot_dim))
        self.init_log_sigma = nn.Parameter(torch.zeros(1, 1, slot_dim))
        nn.init.xavier_uniform_(self.init_mu)
        self.norm_inputs = nn.LayerNorm(feature_dim)
        self.norm_slots = nn.LayerNorm(slot_dim)
        self.to_k = nn.Linear(feature_dim, slot_dim, bias=False)
        self.to_q = nn.Linear(slot_dim, slot_dim, bias=False)
        self.to_v = nn.Linear(feature_dim, slot_dim, bias=False)
        self.gru = nn.GRUCell(slot_dim, slot_dim)

    def sample_noise(self, batch: int, num_slots: int, generator=None, like=None) -> torch.Tensor:
        dtype = self.init_mu.dtype if like is None else like.dtype
        return torch.randn(
            (batch, num_slots, self.slot_dim), generator=generator, dtype=dtype, device=self.init_mu.device
        )

    def initial_slots(self, noise: torch.Tensor) -> torch.Tensor:
        return self.init_mu + torch.exp(self.init_log_sigma) * noise

    def attention(self, k: torch.Tensor, slots: torch.Tensor) -> torch.Tensor:
        """(B, N, K) attention, normalized over slots for every feature."""
        q = self.to_q(self.norm_slots(slots))
        logits = torch.einsum("bnd,bkd->bnk", k, q) / math.sqrt(self.slot_dim)
        logits = logits - logits.amax(dim=-1, keepdim=True)
        attn = torch.exp(logits)
        attn = attn / attn.sum(dim=-1, keepdim=True)
        if not torch.isfinite(attn).all():
            raise FloatingPointError("non-finite slot attention weights")
        return attn

    def forward(self, features: torch.Tensor, noise: torch.Tensor) -> SlotSet:
        """``features`` is (B, H, W, F) or (B, N, F); ``noise`` is (B, K, D)."""
        b = features.shape[0]
        f = self.norm_inputs(features.reshape(b, -1, features.shape[-1]))
        k, v = self.to_k(f), self.to_v(f)
        slots = self.initial_slots(noise)
        attn = None
        for _ in range(self.iterations):
            attn = self.attention(k, slots)
            weights = (attn + self.eps) / (attn + self.eps).sum(dim=1, keepdim=True)
            updates = torch.einsum("bnk,bnd->bkd", weights, v)
            slots = self.gru(updates.reshape(-1, self.slot_dim), slots.reshape(-1, self.slot_dim))
            slots = slots.reshape(b, -1, self.slot_dim)
        if not torch.isfinite(slots).all():
            raise FloatingPointError("non-finite slots")
        return SlotSet(slots, noise, self.iterations, attn)


class GaussianHead(nn.Module):
    """Two-layer MLP applied to every slot independently, giving (mean, std)."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, floor: float):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, 2 * out_dim))
        self.floor = floor

    def forward(self, slots: torch.Tensor) -> DiagGaussian:
        mean, raw = self.net(slots).chunk(2, dim=-1)
        return DiagGaussian.from_raw(mean, raw, self.floor)


class GlobalEncoder(nn.Module):
    """Flattened feature map -> three-layer MLP -> q(z_g | x)."""

    def __init__(self, cfg: SlotVAEConfig):
        super().__init__()
        n_in = cfg.image_size * cfg.image_size * cfg.feature_dim
        h = cfg.global_hidden
        self.net = nn.Sequential(
            nn.Linear(n_in, h), nn.ReLU(), nn.Linear(h, h), nn.ReLU(), nn.Linear(h, 2 * cfg.global_dim)
        )
        self.floor = cfg.std_floor

    def forward(self, features: torch.Tensor) -> DiagGaussian:
        mean, raw = self.net(features.flatten(1)).chunk(2, dim=-1)
        return DiagGaussian.from_raw(mean, raw, self.floor)


def _upsample_stack(n: int, c_in: int, c: int, c_out: int, kernel: int) -> list[nn.Module]:
    """``n`` stride-2 transposed convs (each doubles H and W) with ReLU between."""
    pad = kernel // 2
    layers: list[nn.Module] = []
    for i in range(n):
        last = i == n - 1
        layers.append(
            nn.ConvTranspose2d(c_in, c_out if last else c, kernel, stride=2, padding=pad, output_padding=1)
        )
        if not last:
            layers.append(nn.ReLU())
        c_in = c
    return layers


class FeatureMapDecoder(nn.Module):
    """z_g -> (B, H, W, F) feature map via a dense layer and transposed convs."""

    def __init__(self, cfg: SlotVAEConfig):
        super().__init__()
        self.base = cfg.decoder_base
        self.feature_dim = cfg.feature_dim
        self.fc = nn.Linear(cfg.global_dim, cfg.decoder_base**2 * cfg.feature_dim)
        ups = _upsample_stack(
            cfg.upsample_layers, cfg.feature_dim, cfg.feature_dim, cfg.feature_dim, cfg.kernel_size
        )
        self.net = nn.Sequential(nn.ReLU(), *ups)

    def forward(self, z_g: torch.Tensor) -> torch.Tensor:
        h = self.fc(z_g).reshape(-1, self.feature_dim, self.base, self.base)
        return self.net(h).permute(0, 2, 3, 1)


@dataclass
class DecodedScene:
    components: torch.Tensor  # (B, K, C, H, W) component means in [0, 1]
    masks: torch.Tensor  # (B, K, H, W), sums to one over K
    composed: torch.Tensor  # (B, C, H, W)
    mask_logits: Optional[torch.Tensor] = None


class ComponentDecoder(nn.Module):
    """Spatial-broadcast decoder shared across slots.

    Each slot latent is tiled over a ``base x base`` grid together with two
    coordinate channels, upsampled by stride-2 transposed convolutions to the
    image size, and mapped to 3 colour channels plus one mask logit.
    """

    def __init__(self, cfg: SlotVAEConfig):
        super().__init__()
        self.base = cfg.decoder_base
        c = cfg.decoder_channels
        k = cfg.kernel_size
        n_up = cfg.upsample_layers
        grid = torch.stack(
            torch.meshgrid(
                torch.linspace(-1, 1, self.base), torch.linspace(-1, 1, self.base), indexing="ij"
            )
        )
        self.register_buffer("grid", grid, persistent=False)
        layers: list[nn.Module] = []
        if cfg.decoder_refine == 0:
            layers += _upsample_stack(n_up, cfg.slot_dim + 2, c, cfg.channels + 1, k)
        else:
            layers += _upsample_stack(n_up, cfg.slot_dim + 2, c, c, k)
            if n_up:
                layers.append(nn.ReLU())
            for i in range(cfg.decoder_refine):
                last = i == cfg.decoder_refine - 1
                layers.append(nn.Conv2d(c, cfg.channels + 1 if last else c, k, padding=k // 2))
                if not last:
                    layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        self.channels = cfg.channels

    def forward(self, z: torch.Tensor) -> DecodedScene:
        b, k, d = z.shape
        tiled = z.reshape(b * k, d, 1, 1).expand(-1, -1, self.base, self.base)
        grid = self.grid.to(z.dtype).expand(b * k, -1, -1, -1)
        out = self.net(torch.cat([tiled, grid], dim=1))
        out = out.reshape(b, k, self.channels + 1, out.shape[-2], out.shape[-1])
        components = torch.sigmoid(out[:, :, : self.channels])
        logits = out[:, :, self.channels]
        masks = torch.softmax(logits, dim=1)
        composed = (masks.unsqueeze(2) * components).sum(dim=1)
        if not torch.isfinite(composed).all():
            raise FloatingPointError("non-finite decoder output")
        return DecodedScene(components, masks, composed, logits)


class MLPSlotGenerator(nn.Module):
    """Ablation: map z_g straight to K slots with a fixed output order."""

    def __init__(self, cfg: SlotVAEConfig):
        super().__init__()
        self.k, self.d = cfg.num_slots, cfg.slot_dim
        h = cfg.global_hidden
        self.net = nn.Sequential(
            nn.Linear(cfg.global_dim, h), nn.ReLU(), nn.Linear(h, cfg.num_slots * cfg.slot_dim)
        )

    def forward(self, z_g: torch.Tensor) -> torch.Tensor:
        return self.net(z_g).reshape(-1, self.k, self.d)


class TransformerSlotGenerator(nn.Module):
    """Ablation: slot-init tokens cross-attend to z_g through a transformer decoder."""

    def __init__(self, cfg: SlotVAEConfig, memory_tokens: int = 4):
        super().__init__()
        self.d = cfg.slot_dim
        self.memory_tokens = memory_tokens
        self.to_memory = nn.Linear(cfg.global_dim, memory_tokens * cfg.slot_dim)
        layer = nn.TransformerDecoderLayer(
            d_model=cfg.slot_dim,
            nhead=cfg.transformer_heads,
            dim_feedforward=2 * cfg.slot_dim,
            dropout=0.0,
            batch_first=True,
        )
        self.decoder = nn.TransformerDecoder(layer, num_layers=cfg.transformer_layers)

    def forward(self, z_g: torch.Tensor, init_slots: torch.Tensor) -> torch.Tensor:
        memory = self.to_memory(z_g).reshape(-1, self.memory_tokens, self.d)
        return self.decoder(init_slots, memory)


# ---------------------------------------------------------------------------
# Full model


@dataclass
class ForwardOutput:
    q_global: DiagGaussian
    z_global: torch.Tensor
    q_slots: DiagGaussian  # posterior path
    p_slots: DiagGaussian  # prior path
    z_slots: torch.Tensor
    scene: DecodedScene
    posterior_slots: SlotSet
    prior_slots: SlotSet


class SlotVAE(nn.Module):
    def __init__(self, cfg: SlotVAEConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.pos_embed = SoftPositionEmbed(cfg.feature_dim, cfg.image_size)
        self.slot_attention = SlotAttention(cfg.feature_dim, cfg.slot_dim, cfg.iterations)
        self.posterior_head = GaussianHead(cfg.slot_dim, cfg.head_hidden, cfg.slot_dim, cfg.std_floor)
        self.prior_head = GaussianHead(cfg.slot_dim, cfg.head_hidden, cfg.slot_dim, cfg.std_floor)
        self.global_encoder = GlobalEncoder(cfg)
        self.decoder = ComponentDecoder(cfg)
        if cfg.variant == "mlp_prior":
            self.slot_generator = MLPSlotGenerator(cfg)
        elif cfg.variant == "transformer_prior":
            self.slot_generator = TransformerSlotGenerator(cfg)
        else:
            self.feature_decoder = FeatureMapDecoder(cfg)
        if cfg.variant == "no_weight_share":
            self.prior_slot_attention = SlotAttention(cfg.feature_dim, cfg.slot_dim, cfg.iterations)

    # -- individual stages -------------------------------------------------

    def _check_image(self, x: torch.Tensor):
        c, s = self.cfg.channels, self.cfg.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (c, s, s):
            raise ValueError(f"expected images of shape (B, {c}, {s}, {s}), got {tuple(x.shape)}")

    def encode_features(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        return self.pos_embed(self.backbone(x))

    def sample_slot_init(self, batch: int, generator=None) -> torch.Tensor:
        """Standard-normal noise; the slot module turns it into mu + sigma * noise."""
        return self.slot_attention.sample_noise(batch, self.cfg.num_slots, generator)

    def global_posterior(self, features: torch.Tensor) -> DiagGaussian:
        return self.global_encoder(features)

    def global_prior(self, batch: int, like: torch.Tensor) -> DiagGaussian:
        return DiagGaussian.standard((batch, self.cfg.global_dim), like)

    def build_feature_map(self, z_g: torch.Tensor) -> torch.Tensor:
        return self.pos_embed(self.feature_decoder(z_g))

    def prior_slots(self, z_g: torch.Tensor, noise: torch.Tensor) -> SlotSet:
        """Deterministic prior-path slots from z_g and init noise."""
        variant = self.cfg.variant
        if variant == "mlp_prior":
            return SlotSet(self.slot_generator(z_g), noise, 0)
        if variant == "transformer_prior":
            init = self.slot_attention.initial_slots(noise)
            return SlotSet(self.slot_generator(z_g, init), noise, self.cfg.transformer_layers)
        f = self.build_feature_map(z_g)
        module = self.prior_slot_attention if variant == "no_weight_share" else self.slot_attention
        return module(f, noise)

    def decode_components(self, z_slots: torch.Tensor) -> DecodedScene:
        return self.decoder(z_slots)

    # -- composite passes --------------------------------------------------

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> ForwardOutput:
        return self.forward_train(x, generator)

    def forward_train(self, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> ForwardOutput:
        b = x.shape[0]
        f_x = self.encode_features(x)
        noise = self.sample_slot_init(b, generator)
        if self.cfg.variant in ("no_weight_share", "no_init_share"):
            prior_noise = self.sample_slot_init(b, generator)
        else:
            prior_noise = noise

        post = self.slot_attention(f_x, noise)
        q_slots = self.posterior_head(post.slots)
        z_slots = reparameterize(q_slots, generator)
        scene = self.decode_components(z_slots)

        q_global = self.global_posterior(f_x)
        z_global = reparameterize(q_global, generator)
        prior = self.prior_slots(z_global, prior_noise)
        p_slots = self.prior_head(prior.slots)
        return ForwardOutput(q_global, z_global, q_slots, p_slots, z_slots, scene, post, prior)

    @torch.no_grad()
    def generate_scene(self, batch: int = 1, generator: Optional[torch.Generator] = None) -> DecodedScene:
        like = self.slot_attention.init_mu
        z_g = reparameterize(self.global_prior(batch, like), generator)
        noise = self.sample_slot_init(batch, generator)
        p_slots = self.prior_head(self.prior_slots(z_g, noise).slots)
        return self.decode_components(reparameterize(p_slots, generator))

    @torch.no_grad()
    def infer_slots(self, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> DiagGaussian:
        f_x = self.encode_features(x)
        noise = self.sample_slot_init(x.shape[0], generator)
        return self.posterior_head(self.slot_attention(f_x, noise).slots)

    @torch.no_grad()
    def reconstruct(self, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> DecodedScene:
        """Decode posterior means (no latent sampling)."""
        return self.decode_components(self.infer_slots(x, generator).mean)

    @torch.no_grad()
    def traverse_latent(
        self,
        x: torch.Tensor,
        slot_index: int,
        dim: int,
        values,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        """Decode posterior means with coordinate ``(slot_index, dim)`` swept over ``values``.

        ``x`` is a single image (1, C, H, W). Returns (len(values), C, H, W).
        """
        if not 0 <= slot_index < self.cfg.num_slots:
            raise IndexError(f"slot_index {slot_index} out of range")
        if not 0 <= dim < self.cfg.slot_dim:
            raise IndexError(f"dim {dim} out of range")
        mean = self.infer_slots(x[:1], generator).mean
        z = mean.repeat(len(values), 1, 1)
        z[:, slot_index, dim] = torch.as_tensor(list(values), dtype=z.dtype)
        return self.decode_components(z).composed

    def slot_attention_groups(self) -> list[str]:
        return sorted({name.split(".")[0] for name, m in self.named_modules() if isinstance(m, SlotAttention)})


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model: SlotVAE, extra: Optional[dict] = None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "params": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def expected_slot_groups(variant: str) -> list[str]:
    return ["prior_slot_attention", "slot_attention"] if variant == "no_weight_share" else ["slot_attention"]


def load_checkpoint(path, map_location="cpu") -> tuple[SlotVAE, dict]:
    """Rebuild a model from ``path``; returns (model, raw payload)."""
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = SlotVAEConfig.from_dict(payload["config"])
    params = payload["params"]
    groups = sorted({k.split(".")[0] for k in params if k.split(".")[0].endswith("slot_attention")})
    if groups != expected_slot_groups(cfg.variant):
        raise ValueError(f"checkpoint slot-attention groups {groups} invalid for variant {cfg.variant!r}")
    model = SlotVAE(cfg)
    own = model.state_dict()
    for key, value in params.items():
        if key in own and own[key].shape != value.shape:
            raise ValueError(f"shape mismatch for {key}: {tuple(value.shape)} vs {tuple(own[key].shape)}")
    model.load_state_dict(params)
    return model.to(next(iter(params.values())).dtype), payload
