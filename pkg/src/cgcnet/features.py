"""Per-nucleus appearance and shape descriptors from an instance label map."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage

DESCRIPTOR_NAMES = (
    "mean_intensity",
    "fg_bg_difference",
    "intensity_std",
    "intensity_skewness",
    "intensity_entropy",
    "glcm_dissimilarity",
    "glcm_homogeneity",
    "glcm_energy",
    "glcm_asm",
    "eccentricity",
    "area",
    "major_axis_length",
    "minor_axis_length",
    "perimeter",
    "solidity",
    "orientation",
    "centroid_row",
    "centroid_col",
)
N_FEATURES = len(DESCRIPTOR_NAMES)

# column subsets used by the node-feature ablation
FEATURE_SETS = {
    "both": tuple(range(N_FEATURES)),
    "appearance": tuple(range(N_FEATURES - 2)),
    "spatial": (N_FEATURES - 2, N_FEATURES - 1),
}

RING_WIDTH = 3
GRAY_LEVELS = 8
# (drow, dcol) for 0, 45, 90 and 135 degrees at distance 1
GLCM_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1))


@dataclass
class InstanceRegion:
    label: int
    pixels: np.ndarray  # (N, 2) int rows/cols in image coordinates
    bbox: tuple  # (row0, col0, row1, col1), half-open
    mask: np.ndarray  # bool crop over bbox
    foreground: np.ndarray  # intensities of the instance pixels
    background: np.ndarray  # intensities of the surrounding ring

    @property
    def area(self):
        return len(self.pixels)


def to_gray(image):
    """Luma conversion for RGB input; grayscale passes through as float."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    return np.asarray(image, dtype=np.float64)


def extract_instances(labels, image):
    labels = np.asarray(labels)
    image = to_gray(image)
    if labels.shape != image.shape:
        raise ValueError(f"label map {labels.shape} and image {image.shape} differ in size")
    if labels.ndim != 2:
        raise ValueError("label map must be 2-D")
    if not labels.any():
        return []
    height, width = labels.shape
    ring_struct = np.ones((2 * RING_WIDTH + 1, 2 * RING_WIDTH + 1), dtype=bool)
    regions = []
    for idx, sl in enumerate(ndimage.find_objects(labels)):
        if sl is None:
            continue
        label = idx + 1
        r0, r1, c0, c1 = sl[0].start, sl[0].stop, sl[1].start, sl[1].stop
        mask = labels[r0:r1, c0:c1] == label
        rr, cc = np.nonzero(mask)
        pixels = np.column_stack([rr + r0, cc + c0])
        fg = image[r0:r1, c0:c1][mask]

        er0, ec0 = max(r0 - RING_WIDTH, 0), max(c0 - RING_WIDTH, 0)
        er1, ec1 = min(r1 + RING_WIDTH, height), min(c1 + RING_WIDTH, width)
        big = np.zeros((er1 - er0, ec1 - ec0), dtype=bool)
        big[r0 - er0:r1 - er0, c0 - ec0:c1 - ec0] = mask
        ring = ndimage.binary_dilation(big, structure=ring_struct) & (labels[er0:er1, ec0:ec1] == 0)
        bg = image[er0:er1, ec0:ec1][ring]
        regions.append(InstanceRegion(label, pixels, (r0, c0, r1, c1), mask, fg, bg))
    return regions


def quantize(values):
    """Map intensities in [0, 255] to GRAY_LEVELS uniform bins."""
    q = np.floor(np.asarray(values, dtype=np.float64) * GRAY_LEVELS / 256.0)
    return np.clip(q, 0, GRAY_LEVELS - 1).astype(np.intp)


def intensity_stats(region):
    fg = np.asarray(region.foreground, dtype=np.float64)
    if fg.size == 0:
        raise ValueError("empty region")
    mean = fg.mean()
    dev = fg - mean
    m2 = np.mean(dev ** 2)
    m3 = np.mean(dev ** 3)
    skew = m3 / m2 ** 1.5 if m2 > 0 else 0.0
    diff = mean - np.mean(region.background) if len(region.background) else 0.0
    counts = np.bincount(quantize(fg), minlength=GRAY_LEVELS)
    prob = counts[counts > 0] / fg.size
    entropy = float(-(prob * np.log(prob)).sum())
    return float(mean), float(diff), float(np.sqrt(m2)), float(skew), abs(entropy)


def cooccurrence(levels, mask):
    """Symmetric, normalised co-occurrence matrix restricted to ``mask`` pairs.

    Returns ``None`` when no in-mask pair exists.
    """
    h, w = mask.shape
    counts = np.zeros((GRAY_LEVELS, GRAY_LEVELS))
    for dr, dc in GLCM_OFFSETS:
        # pair (r, c) -> (r + dr, c + dc), both inside the crop
        ra = slice(max(0, -dr), h - max(0, dr))
        ca = slice(max(0, -dc), w - max(0, dc))
        rb = slice(max(0, dr), h + min(0, dr))
        cb = slice(max(0, dc), w + min(0, dc))
        both = mask[ra, ca] & mask[rb, cb]
        np.add.at(counts, (levels[ra, ca][both], levels[rb, cb][both]), 1.0)
    counts = counts + counts.T
    total = counts.sum()
    if total == 0:
        return None
    return counts / total


def glcm_features(region, image):
    image = to_gray(image)
    r0, c0, r1, c1 = region.bbox
    levels = quantize(image[r0:r1, c0:c1])
    P = cooccurrence(levels, region.mask)
    if P is None:
        return 0.0, 1.0, 1.0, 1.0
    i, j = np.indices(P.shape)
    dissimilarity = float((P * np.abs(i - j)).sum())
    homogeneity = float((P / (1.0 + (i - j) ** 2)).sum())
    asm = float((P * P).sum())
    return dissimilarity, homogeneity, float(np.sqrt(asm)), asm


def _outline(mask):
    padded = np.pad(mask.astype(np.uint8), 1)
    contours, _ = cv2.findContours(padded, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    return contours


def shape_features(region):
    """Ellipse-moment and contour descriptors.

    Returns ``(eccentricity, area, major_axis, minor_axis, perimeter,
    solidity, orientation, centroid)`` with ``centroid = (row, col)``.
    Orientation is the angle of the major axis from the column axis towards
    increasing rows, in (-pi/2, pi/2].
    """
    px = np.asarray(region.pixels, dtype=np.float64)
    area = len(px)
    if area == 0:
        raise ValueError("empty region")
    centroid = px.mean(axis=0)
    d = px - centroid
    # +1/12: variance of a unit pixel square about its centre
    var_r = np.mean(d[:, 0] ** 2) + 1.0 / 12.0
    var_c = np.mean(d[:, 1] ** 2) + 1.0 / 12.0
    cov = np.mean(d[:, 0] * d[:, 1])
    half_tr = 0.5 * (var_r + var_c)
    root = np.hypot(0.5 * (var_r - var_c), cov)
    lam1, lam2 = half_tr + root, max(half_tr - root, 0.0)
    major, minor = 4.0 * np.sqrt(lam1), 4.0 * np.sqrt(lam2)
    ecc = float(np.sqrt(max(0.0, 1.0 - lam2 / lam1)))
    orientation = 0.5 * np.arctan2(2.0 * cov, var_c - var_r)
    if orientation <= -np.pi / 2:
        orientation += np.pi

    contours = _outline(region.mask)
    perimeter = float(sum(cv2.arcLength(c, True) for c in contours))
    points = np.concatenate(contours, axis=0)
    hull_area = cv2.contourArea(cv2.convexHull(points)) if len(points) >= 3 else 0.0
    solidity = min(1.0, area / hull_area) if hull_area > 0 else 1.0

    return (
        ecc,
        float(area),
        float(major),
        float(minor),
        perimeter,
        float(solidity),
        float(orientation),
        (float(centroid[0]), float(centroid[1])),
    )


def describe(region, image):
    """Full descriptor vector in DESCRIPTOR_NAMES order."""
    mean, diff, std, skew, entropy = intensity_stats(region)
    dis, hom, energy, asm = glcm_features(region, image)
    ecc, area, major, minor, perim, solidity, orient, centroid = shape_features(region)
    return np.array([
        mean, diff, std, skew, entropy,
        dis, hom, energy, asm,
        ecc, area, major, minor, perim, solidity, orient,
        centroid[0], centroid[1],
    ])


def build_descriptors(labels, image):
    """Descriptor vectors and centroids for every nucleus, in label order.

    Returns a list of ``(vector, (row, col))`` pairs.
    """
    image = to_gray(image)
    out = []
    for region in extract_instances(labels, image):
        vec = describe(region, image)
        out.append((vec, (vec[-2], vec[-1])))
    return out


def descriptor_matrix(labels, image):
    """Stacked descriptors (n x N_FEATURES) and centroids (n x 2)."""
    pairs = build_descriptors(labels, image)
    if not pairs:
        return np.zeros((0, N_FEATURES)), np.zeros((0, 2))
    feats = np.vstack([v for v, _ in pairs])
    return feats, feats[:, -2:].copy()
