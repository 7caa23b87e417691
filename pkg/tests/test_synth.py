from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from cgcnet.features import N_FEATURES, descriptor_matrix
from cgcnet.graph import EdgeConfig, SamplerConfig, assemble_graph, load_bundle, save_bundle
from cgcnet.synth import (
    SynthConfig,
    generate_dataset,
    generate_image,
    place_nuclei,
    sample_seed,
    split_indices,
    synth_samples,
)
from oracles import mean_clustering, nearest_neighbour_distances, uniform_rsa


def fit_circle(pts):
    """Algebraic least-squares circle: returns centre (row, col) and radius."""
    a = np.column_stack([2 * pts, np.ones(len(pts))])
    b = (pts ** 2).sum(1)
    (r0, c0, k), *_ = np.linalg.lstsq(a, b, rcond=None)
    return np.array([r0, c0]), np.sqrt(k + r0 ** 2 + c0 ** 2)


def test_single_gland_is_a_ring():
    for seed in range(5):
        cfg = SynthConfig(label=0, n_glands=1, nuclei_per_gland=12, seed=seed)
        labels, image, label = generate_image(cfg)
        assert label == 0
        _, centroids = descriptor_matrix(labels, image)
        assert len(centroids) == 12
        centre, _ = fit_circle(centroids)
        radii = np.linalg.norm(centroids - centre, axis=1)
        # half a pixel of slack for rasterised centroids
        assert np.abs(radii - cfg.ring_radius).max() <= cfg.radius_jitter + 0.5


def test_full_disruption_matches_uniform_scatter():
    cfg = SynthConfig(label=2)
    lo = cfg.margin + cfg.max_semi_axis
    hi = np.array(cfg.canvas) - lo
    synth, ref = [], []
    for seed in range(6):
        pts, _ = place_nuclei(replace(cfg, seed=seed), np.random.default_rng(seed))
        synth.append(nearest_neighbour_distances(pts))
        ref.append(nearest_neighbour_distances(uniform_rsa(len(pts), lo, hi, cfg.min_separation, np.random.default_rng(1000 + seed))))
    assert stats.ks_2samp(np.concatenate(synth), np.concatenate(ref)).pvalue > 0.01


def test_intact_glands_differ_from_uniform():
    cfg = SynthConfig(label=0)
    pts, _ = place_nuclei(cfg, np.random.default_rng(0))
    lo = cfg.margin + cfg.max_semi_axis
    ref = uniform_rsa(len(pts), lo, np.array(cfg.canvas) - lo, cfg.min_separation, np.random.default_rng(1))
    assert stats.ks_2samp(nearest_neighbour_distances(pts), nearest_neighbour_distances(ref)).pvalue < 1e-6


def test_generate_image_deterministic_and_valid():
    cfg = SynthConfig(label=1, seed=3)
    a = generate_image(cfg)
    b = generate_image(cfg)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    labels, image, _ = a
    assert labels.dtype == np.uint16 and image.dtype == np.uint8
    ids = np.unique(labels)
    assert ids[0] == 0 and len(ids) - 1 == 208


def test_disruption_monotone_in_class():
    levels = [SynthConfig(label=k).level for k in range(3)]
    assert levels == sorted(levels) == [0.0, 0.5, 1.0]
    with pytest.raises(ValueError):
        generate_image(SynthConfig(label=3))
    with pytest.raises(ValueError):
        generate_image(SynthConfig(disruption=1.5))


def test_nuclei_do_not_overlap():
    for label in range(3):
        cfg = SynthConfig(label=label, seed=label)
        pts, _ = place_nuclei(cfg, np.random.default_rng(cfg.seed))
        assert nearest_neighbour_distances(pts).min() >= cfg.min_separation


def test_appearance_depends_on_class():
    means = []
    for label in range(3):
        labels, image, _ = generate_image(SynthConfig(label=label, seed=7))
        feats, _ = descriptor_matrix(labels, image)
        means.append(feats[:, 0].mean())
    assert means[0] < means[1] < means[2]


def test_sample_seeds_are_distinct():
    seeds = {sample_seed(0, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert sample_seed(0, 5) == sample_seed(0, 5) != sample_seed(1, 5)


def test_split_indices():
    train, test = split_indices(300, 0)
    assert len(train) == 200 and len(test) == 100
    assert sorted(train + test) == list(range(300))
    assert split_indices(300, 0) == (train, test)
    assert split_indices(300, 1) != (train, test)


def test_generate_dataset_contract(tmp_path):
    train, test = generate_dataset(2, seed=4)
    graphs = train + test
    assert len(graphs) == 6 and len(test) == 2
    assert sorted(g.label for g in graphs) == [0, 0, 1, 1, 2, 2]
    for i, g in enumerate(graphs):
        g.check()
        assert g.features.shape[1] == N_FEATURES
        assert g.n == 73 + 32  # ceil(0.35 * 208) + ceil(0.15 * 208)
        save_bundle(g, tmp_path / str(i))
        back = load_bundle(tmp_path / str(i))
        assert np.array_equal(back.features, g.features) and np.array_equal(back.adjacency, g.adjacency)
    again, _ = generate_dataset(2, seed=4)
    assert all(np.array_equal(a.features, b.features) for a, b in zip(train, again))


def test_synth_samples_balanced():
    samples = synth_samples(2, seed=0, base=SynthConfig(n_glands=2))
    assert [s.label for s in samples] == [0, 1, 2, 0, 1, 2]
    assert len({s.image_id for s in samples}) == 6
    with pytest.raises(ValueError):
        synth_samples(0, seed=0)


def test_intact_tissue_clusters_more():
    cc = {0: [], 2: []}
    for label in cc:
        for seed in range(50):
            cfg = SynthConfig(label=label, seed=sample_seed(0, seed))
            pts, _ = place_nuclei(cfg, np.random.default_rng(cfg.seed))
            g = assemble_graph(np.zeros((len(pts), N_FEATURES)), pts, SamplerConfig(seed=seed), EdgeConfig())
            cc[label].append(mean_clustering(g.adjacency))
    assert np.mean(cc[0]) > np.mean(cc[2])
