"""Evaluation metrics: foreground ARI, Fréchet feature distance, and a
scripted structure-accuracy check for ArrowWorld images."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from . import scenegen
from .model import load_checkpoint
from .training import images_to_tensor, order_match_diagnostic

AIM_TOLERANCE_EVAL = 0.35  # radians
COV_EPS = 1e-6
SQRT_RESIDUAL_TOL = 1e-3

# ---------------------------------------------------------------------------
# ARI


def adjusted_rand_index(labels_a: np.ndarray, labels_b: np.ndarray) -> float:
    """ARI between two flat labelings of the same items."""
    labels_a = np.asarray(labels_a).ravel()
    labels_b = np.asarray(labels_b).ravel()
    _, ia = np.unique(labels_a, return_inverse=True)
    _, ib = np.unique(labels_b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def pairs(v):
        v = np.asarray(v, dtype=np.float64)
        return (v * (v - 1) / 2).sum()

    n = labels_a.size
    index = pairs(table)
    sum_a = pairs(table.sum(axis=1))
    sum_b = pairs(table.sum(axis=0))
    total = n * (n - 1) / 2
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both partitions trivial (one cluster or all singletons): identical
        return 1.0
    return float((index - expected) / (max_index - expected))


def ari_fg(pred: np.ndarray, truth: np.ndarray, foreground: Optional[np.ndarray] = None) -> Optional[float]:
    """ARI restricted to foreground pixels; None when fewer than 2 are foreground."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if foreground is None:
        foreground = truth > 0
    if foreground.sum() < 2:
        return None
    return adjusted_rand_index(pred[foreground], truth[foreground])


def predicted_segmentation(masks: torch.Tensor) -> np.ndarray:
    """Per-pixel argmax over the slot axis: (B, K, H, W) -> (B, H, W)."""
    return masks.argmax(dim=1).cpu().numpy()


# ---------------------------------------------------------------------------
# Fréchet distance


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    mu = features.mean(axis=0)
    cov = np.atleast_2d(np.cov(features, rowvar=False))
    return mu, cov


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


class FrechetError(ArithmeticError):
    pass


def frechet_distance_from_stats(mu1, cov1, mu2, cov2, eps: float = COV_EPS) -> float:
    """||mu1 - mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2))."""
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    eye = np.eye(cov1.shape[0])
    cov1 = cov1 + eps * eye
    cov2 = cov2 + eps * eye
    # tr (cov1 cov2)^(1/2) = tr (s cov2 s)^(1/2) with s = cov1^(1/2); the
    # inner matrix is symmetric PSD so an eigendecomposition is enough
    s = _psd_sqrt(cov1)
    inner = s @ cov2 @ s
    inner = (inner + inner.T) / 2
    w = np.linalg.eigvalsh(inner)
    scale = max(abs(w).max(), 1e-300)
    if w.min() < -SQRT_RESIDUAL_TOL * scale:
        raise FrechetError(
            f"covariance product not PSD: min eigenvalue {w.min():.3e}, max {w.max():.3e}"
        )
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu1 - mu2
    value = diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt
    return float(max(value, 0.0))


def frechet_distance(features_real: np.ndarray, features_fake: np.ndarray) -> float:
    mu1, cov1 = gaussian_stats(features_real)
    mu2, cov2 = gaussian_stats(features_fake)
    if mu1.shape != mu2.shape:
        raise ValueError("feature dimensions differ")
    return frechet_distance_from_stats(mu1, cov1, mu2, cov2)


class RandomConvEmbedder(nn.Module):
    """Fixed random-weight CNN used as the default Fréchet feature extractor.

    Distances computed with it are only comparable between runs that use the
    same seed and feature size.
    """

    def __init__(self, channels: int = 3, features: int = 128, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv2d(channels, 32, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(64, features // 2, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        with torch.no_grad():
            for p in self.parameters():
                if p.dim() > 1:
                    fan_in = p[0].numel()
                    p.copy_(torch.randn(p.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                else:
                    p.zero_()
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.net(x.float())
        return torch.cat([h.mean(dim=(2, 3)), h.std(dim=(2, 3))], dim=1)

    def embed(self, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
        out = [self(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
        return torch.cat(out).double().numpy()


def load_features(path) -> np.ndarray:
    """External embeddings: ``.npy`` (N, F) or whitespace-separated text."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    return np.loadtxt(path, ndmin=2)


# ---------------------------------------------------------------------------
# Structure accuracy


@dataclass
class DetectedObject:
    shape: str
    centroid: tuple[float, float]
    color: tuple[float, float, float]
    area: int
    score: float
    rotation: float = 0.0


@dataclass
class StructureVerdict:
    objects: list[DetectedObject] = field(default_factory=list)
    arrow_angle_est: float = float("nan")
    unique_shape_ok: bool = False
    aim_ok: bool = False
    reason: str = ""

    @property
    def s_acc_pass(self) -> bool:
        return self.unique_shape_ok and self.aim_ok


def _unit_area(shape: str) -> float:
    """Area of the sprite with bounding radius 1."""
    if shape == "circle":
        return math.pi
    if shape == "square":
        return 2.0
    if shape == "triangle":
        return 3 * math.sqrt(3) / 4
    shaft, head = scenegen._arrow_polygons(1.0, 0.0)
    # the two parts overlap in a 0.05 x 0.44 strip
    overlap = 0.05 * 0.44
    return scenegen._polygon_area(shaft) + scenegen._polygon_area(head) - overlap


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


class ShapeTemplates:
    """Rasterized shape templates over a discrete scale/rotation grid."""

    def __init__(
        self,
        scale_factors: Sequence[float] = (0.85, 0.92, 1.0, 1.08, 1.16),
        coarse_rotations: int = 36,
        fine_step: float = math.radians(2.0),
    ):
        self.scale_factors = tuple(scale_factors)
        self.coarse = np.linspace(-math.pi, math.pi, coarse_rotations, endpoint=False)
        self.fine_step = fine_step
        self.unit_areas = {s: _unit_area(s) for s in scenegen.SHAPES}

    def _score(self, window, origin, centroid, shape, scale, rotation) -> float:
        sprite = scenegen.SpriteSpec(shape, (1.0, 1.0, 1.0), centroid, max(scale, scenegen.MIN_SCALE), rotation)
        templ = scenegen.rasterize(sprite, window.shape[0], window.shape[1], origin)
        return _ncc(window, templ)

    def match(self, window: np.ndarray, origin, centroid, area: int, shape: str) -> tuple[float, float]:
        """Best (ncc, rotation) for ``shape``; rotation only searched for arrows."""
        base = math.sqrt(area / self.unit_areas[shape])
        best = (-1.0, 0.0)
        if shape != "arrow":
            for f in self.scale_factors:
                best = max(best, (self._score(window, origin, centroid, shape, base * f, 0.0), 0.0))
        else:
            # coarse heading at the area-implied scale, then refine heading and
            # scale together around it
            for rot in self.coarse:
                best = max(best, (self._score(window, origin, centroid, shape, base, rot), rot))
            step = self.coarse[1] - self.coarse[0]
            rots = best[1] + np.arange(-step, step + 1e-9, self.fine_step)
            for f in self.scale_factors:
                for rot in rots:
                    best = max(best, (self._score(window, origin, centroid, shape, base * f, rot), rot))
        return best


_DEFAULT_TEMPLATES: Optional[ShapeTemplates] = None


def default_templates() -> ShapeTemplates:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = ShapeTemplates()
    return _DEFAULT_TEMPLATES


def _as_float_image(image) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def s_acc_oracle(
    image: np.ndarray,
    templates: Optional[ShapeTemplates] = None,
    tolerance: float = AIM_TOLERANCE_EVAL,
    fg_threshold: float = 0.2,
    min_area: int = 12,
) -> StructureVerdict:
    """Check the arrow rule on an (H, W, 3) image.

    Foreground = pixels far from the border-median background colour;
    connected components are classified by template correlation. The scene
    passes if exactly one back shape is unique and the arrow's estimated
    heading is within ``tolerance`` of the direction to that object.
    """
    templates = templates or default_templates()
    img = _as_float_image(image)
    h, w = img.shape[:2]
    border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
    bg = np.median(border, axis=0)
    fg = np.abs(img - bg).max(axis=-1) > fg_threshold
    labels, n = ndimage.label(fg)
    comps = []
    for j in range(1, n + 1):
        ys, xs = np.nonzero(labels == j)
        if ys.size >= min_area:
            comps.append((ys, xs))
    verdict = StructureVerdict()
    if len(comps) < 4:
        verdict.reason = f"found {len(comps)} objects, need 4"
        return verdict
    comps.sort(key=lambda c: -c[0].size)
    if len(comps) > 4:
        verdict.reason = f"found {len(comps)} objects, kept the 4 largest"
        comps = comps[:4]

    scored = []
    for ys, xs in comps:
        centroid = (ys.mean() + 0.5, xs.mean() + 0.5)
        r0, r1 = max(ys.min() - 2, 0), min(ys.max() + 3, h)
        c0, c1 = max(xs.min() - 2, 0), min(xs.max() + 3, w)
        window = labels[r0:r1, c0:c1] > 0
        # isolate this component inside its window
        own = np.zeros_like(window)
        own[ys - r0, xs - c0] = True
        scores = {s: templates.match(own, (r0, c0), centroid, ys.size, s) for s in scenegen.SHAPES}
        color = tuple(float(c) for c in img[ys, xs].mean(axis=0))
        scored.append((centroid, color, ys.size, scores))

    # the arrow is the component that looks most like an arrow relative to
    # its best alternative shape
    def arrow_margin(item):
        scores = item[3]
        return scores["arrow"][0] - max(scores[s][0] for s in scenegen.BACK_SHAPES)

    arrow_i = max(range(4), key=lambda i: arrow_margin(scored[i]))
    for i, (centroid, color, area, scores) in enumerate(scored):
        if i == arrow_i:
            ncc, rot = scores["arrow"]
            verdict.objects.append(DetectedObject("arrow", centroid, color, area, ncc, float(rot)))
        else:
            shape = max(scenegen.BACK_SHAPES, key=lambda s: scores[s][0])
            verdict.objects.append(DetectedObject(shape, centroid, color, area, scores[shape][0]))

    if arrow_margin(scored[arrow_i]) <= 0:
        verdict.reason = "no component classified as an arrow"
        return verdict
    arrow = verdict.objects[arrow_i]
    back = [o for i, o in enumerate(verdict.objects) if i != arrow_i]
    verdict.arrow_angle_est = arrow.rotation
    shapes = [o.shape for o in back]
    unique = [o for o in back if shapes.count(o.shape) == 1]
    verdict.unique_shape_ok = len(set(shapes)) == 2 and len(unique) == 1
    if not verdict.unique_shape_ok:
        verdict.reason = verdict.reason or f"back shapes {shapes} have no single unique shape"
        return verdict
    target = scenegen.aim_angle(arrow.centroid, unique[0].centroid)
    err = abs(scenegen._wrap(target - arrow.rotation))
    verdict.aim_ok = err < tolerance
    if not verdict.aim_ok:
        verdict.reason = f"arrow misses unique object by {err:.3f} rad"
    return verdict


def verdict_matches_record(verdict: StructureVerdict, record: scenegen.SceneRecord) -> bool:
    """Oracle agrees with ground truth: passes, and sees the same shape multiset."""
    truth = sorted(s.shape for s in record.sprites)
    seen = sorted(o.shape for o in verdict.objects)
    return verdict.s_acc_pass and truth == seen


# ---------------------------------------------------------------------------
# Full evaluation


FD_NOTE = "frechet_distance uses a fixed random-weight embedder; values are not comparable to Inception FID"


def _fmt(v) -> str:
    if v is None:
        return "not_applicable"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(report: dict, path) -> None:
    lines = [f"# {FD_NOTE}"] + [f"{k}={_fmt(v)}" for k, v in report.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k] = v
    return out


@torch.no_grad()
def evaluate(
    checkpoint,
    data_dir,
    n_gen: int = 2000,
    n_ari: int = 2000,
    n_sacc: int = 100,
    seed: int = 0,
    batch_size: int = 64,
    embedder_seed: int = 0,
    real_features=None,
    fake_features=None,
) -> dict:
    """ARI-FG on ``data_dir`` records, Fréchet distance of samples vs data,
    and S-Acc of samples (ArrowWorld only). Fully determined by ``seed``."""
    model, payload = load_checkpoint(checkpoint)
    model.eval()
    manifest = scenegen.read_manifest(data_dir)
    images, masks = scenegen.load_arrays(data_dir)
    dtype = model.slot_attention.init_mu.dtype

    report: dict = {
        "checkpoint": Path(checkpoint).name,
        "variant": model.cfg.variant,
        "dataset": manifest.generator,
        "seed": seed,
        "ari_seed": seed,
        "generation_seed": seed + 1,
        "embedder_seed": embedder_seed,
    }

    # segmentation
    n = min(n_ari, len(images))
    scores = []
    order = {"mean_aligned_cosine": [], "mean_best_permutation_cosine": []}
    gen = torch.Generator().manual_seed(seed)
    has_masks = bool(masks[:n].any())
    for i in range(0, n, batch_size):
        x = images_to_tensor(images[i : i + batch_size], dtype)
        scene = model.reconstruct(x, gen)
        pred = predicted_segmentation(scene.masks)
        for p, t in zip(pred, masks[i : i + batch_size]):
            v = ari_fg(p, t)
            if v is not None:
                scores.append(v)
        out = model.forward_train(x, gen)
        diag = order_match_diagnostic(out.posterior_slots, out.prior_slots)
        for k in order:
            order[k].append(diag[k] * len(x))
    if has_masks and scores:
        report["ari_fg_mean"] = float(np.mean(scores))
        report["ari_fg_sd"] = float(np.std(scores))
        report["ari_fg_count"] = len(scores)
    else:
        report["ari_fg_mean"] = None
        report["ari_fg_sd"] = None
    aligned = sum(order["mean_aligned_cosine"]) / n
    best = sum(order["mean_best_permutation_cosine"]) / n
    report["order_aligned_cosine"] = aligned
    report["order_best_cosine"] = best
    report["order_ratio"] = aligned / best if best > 0 else float("nan")

    # generation
    gen = torch.Generator().manual_seed(seed + 1)
    samples = []
    for i in range(0, n_gen, batch_size):
        samples.append(model.generate_scene(min(batch_size, n_gen - i), gen).composed)
    samples = torch.cat(samples).clamp(0, 1)

    if real_features is None or fake_features is None:
        embedder = RandomConvEmbedder(model.cfg.channels, 128, embedder_seed)
        n_real = min(n_gen, len(images))
        real = embedder.embed(images_to_tensor(images[:n_real]))
        fake = embedder.embed(samples)
    else:
        real, fake = load_features(real_features), load_features(fake_features)
    report["frechet_distance"] = frechet_distance(real, fake)
    report["frechet_n_real"] = len(real)
    report["frechet_n_fake"] = len(fake)

    if manifest.generator == "arrowworld":
        m = min(n_sacc, len(samples))
        arr = samples[:m].permute(0, 2, 3, 1).double().numpy()
        passes = [s_acc_oracle(a).s_acc_pass for a in arr]
        report["s_acc"] = float(np.mean(passes))
        report["s_acc_n"] = m
    else:
        report["s_acc"] = None
    return report


def save_report_json(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
