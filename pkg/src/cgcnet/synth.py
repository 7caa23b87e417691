"""Synthetic tissue: glands as rings of nuclei, progressively scattered by grade.

Disruption 0 places every nucleus on a gland ring; disruption 1 places them
uniformly at random.  Intermediate values interpolate positions and also
inflate nuclear size, shape and intensity variation, so both structure and
per-node appearance carry the class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .features import descriptor_matrix
from .graph import EdgeConfig, SamplerConfig, assemble_graph

DISRUPTION = {0: 0.0, 1: 0.5, 2: 1.0}
MAX_RETRIES = 30


@dataclass
class SynthConfig:
    label: int = 0
    n_glands: int = 16
    nuclei_per_gland: int = 13
    ring_radius: float = 26.0
    radius_jitter: float = 2.0
    disruption: float | None = None  # None: taken from DISRUPTION[label]
    feature_noise: float = 1.0
    canvas: tuple = (400, 400)
    margin: float = 10.0
    seed: int = 0

    @property
    def level(self):
        return DISRUPTION[self.label] if self.disruption is None else float(self.disruption)

    @property
    def max_semi_axis(self):
        return 4.5 + 2.0 * self.level

    @property
    def min_separation(self):
        """Centre spacing below which two nuclei could touch."""
        return 2.0 * self.max_semi_axis + 1.0


def gland_centres(cfg, rng):
    side = math.ceil(math.sqrt(cfg.n_glands))
    h, w = cfg.canvas
    cells = [(i, j) for i in range(side) for j in range(side)][: cfg.n_glands]
    ch, cw = h / side, w / side
    jitter = 0.1 * min(ch, cw)
    return [((i + 0.5) * ch + rng.uniform(-jitter, jitter), (j + 0.5) * cw + rng.uniform(-jitter, jitter)) for i, j in cells]


def place_nuclei(cfg, rng):
    """Nucleus centres (row, col) and ring tangent angles, collisions rejected."""
    h, w = cfg.canvas
    lo, hi = cfg.margin + cfg.max_semi_axis, np.array([h, w]) - cfg.margin - cfg.max_semi_axis
    level = cfg.level
    placed, tangents = [], []
    sep2 = cfg.min_separation ** 2
    for cr, cc in gland_centres(cfg, rng):
        phase = rng.uniform(0, 2 * np.pi)
        for k in range(cfg.nuclei_per_gland):
            theta = phase + 2 * np.pi * k / cfg.nuclei_per_gland
            for _ in range(MAX_RETRIES):
                r = cfg.ring_radius + rng.uniform(-cfg.radius_jitter, cfg.radius_jitter)
                ring = np.array([cr + r * np.sin(theta), cc + r * np.cos(theta)])
                scatter = rng.uniform(lo, hi)
                pos = np.clip((1.0 - level) * ring + level * scatter, lo, hi)
                if not placed or ((np.asarray(placed) - pos) ** 2).sum(axis=1).min() >= sep2:
                    placed.append(pos)
                    tangents.append(theta + np.pi / 2)
                    break
    return np.asarray(placed).reshape(-1, 2), np.asarray(tangents)


def _ellipse_mask(shape, centre, a, b, angle):
    r0 = max(int(math.floor(centre[0] - a - 1)), 0)
    c0 = max(int(math.floor(centre[1] - a - 1)), 0)
    r1 = min(int(math.ceil(centre[0] + a + 2)), shape[0])
    c1 = min(int(math.ceil(centre[1] + a + 2)), shape[1])
    rr, cc = np.mgrid[r0:r1, c0:c1]
    dr, dc = rr - centre[0], cc - centre[1]
    ca, sa = math.cos(angle), math.sin(angle)
    u = dc * ca + dr * sa
    v = -dc * sa + dr * ca
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return (slice(r0, r1), slice(c0, c1)), inside


def generate_image(cfg: SynthConfig):
    """Render (label map, grayscale image, class label) for one synthetic tile."""
    if cfg.label not in DISRUPTION:
        raise ValueError(f"label must be one of {sorted(DISRUPTION)}")
    if not 0.0 <= cfg.level <= 1.0:
        raise ValueError("disruption must lie in [0, 1]")
    rng = np.random.default_rng(cfg.seed)
    level, noise = cfg.level, cfg.feature_noise
    centres, tangents = place_nuclei(cfg, rng)
    h, w = cfg.canvas
    labels = np.zeros((h, w), dtype=np.uint16)
    image = 215.0 + rng.normal(0.0, 4.0, size=(h, w))
    for idx, (centre, tangent) in enumerate(zip(centres, tangents), start=1):
        a = rng.uniform(3.5, 4.5) + level * rng.uniform(0.0, 2.0)
        b = a * rng.uniform(0.95 - 0.2 - 0.35 * level, 0.95)
        angle = tangent + rng.normal(0.0, 0.2 + level * np.pi / 2)
        sl, inside = _ellipse_mask((h, w), centre, a, b, angle)
        if not inside.any():
            continue
        labels[sl][inside] = idx
        mu = 80.0 + 50.0 * level + rng.normal(0.0, (5.0 + 10.0 * level) * noise)
        sigma = (6.0 + 14.0 * level) * noise
        image[sl][inside] = mu + rng.normal(0.0, sigma, size=int(inside.sum()))
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return labels, image, cfg.label


def sample_seed(seed, index):
    """Independent per-sample seed from a (seed, counter) pair."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class SynthSample:
    features: np.ndarray
    coords: np.ndarray
    label: int
    image_id: str
    seed: int


def synth_samples(n_per_class, seed, base: SynthConfig | None = None, n_classes=3):
    """Descriptor sets for a class-balanced synthetic collection."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    base = base or SynthConfig()
    out = []
    for idx in range(n_per_class * n_classes):
        label = idx % n_classes
        s = sample_seed(seed, idx)
        labels, image, _ = generate_image(replace(base, label=label, seed=s))
        feats, coords = descriptor_matrix(labels, image)
        out.append(SynthSample(feats, coords, label, f"img{idx:05d}", s))
    return out


def split_indices(n, seed, test_fraction=1 / 3):
    perm = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0]).permutation(n)
    n_test = int(round(n * test_fraction))
    return sorted(perm[n_test:].tolist()), sorted(perm[:n_test].tolist())


def build_graphs(samples, sampler_cfg: SamplerConfig, edge_cfg: EdgeConfig):
    graphs = []
    for i, smp in enumerate(samples):
        cfg = replace(sampler_cfg, seed=sample_seed(sampler_cfg.seed, i))
        graphs.append(assemble_graph(
            smp.features, smp.coords, cfg, edge_cfg, smp.label,
            meta={"image_id": smp.image_id, "synth_seed": smp.seed},
        ))
    return graphs


def generate_dataset(n_per_class, seed, sampler_cfg=None, edge_cfg=None, base=None, test_fraction=1 / 3):
    """Balanced labelled graphs split into (train, test) by ``seed``."""
    samples = synth_samples(n_per_class, seed, base)
    graphs = build_graphs(samples, sampler_cfg or SamplerConfig(seed=seed), edge_cfg or EdgeConfig())
    train_idx, test_idx = split_indices(len(graphs), seed, test_fraction)
    return [graphs[i] for i in train_idx], [graphs[i] for i in test_idx]
