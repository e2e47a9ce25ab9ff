"""Unsupervised segmentation and rotation-consistency experiments.

An image is pushed through the network up to a feature tap, the map is
resized to a ``grid x grid`` lattice, and grid cells inside the tissue mask
become feature rows.  A clusterer fitted on sampled rows labels every cell;
the label grid is scattered back and upscaled to image size.

For the rotation analyses each image is rotated by every angle, segmented,
and the label map is rotated back.  Label maps are then reduced to the grid
by block majority, and ICC, Kappa and Dice are computed over the cells that
are valid in every rotation.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import seeding
from .clustering import KNeighborsClassifier, PCA, make_clusterer
from .imaging import (IGNORE, WHITE, block_mode, block_reduce_mask, read_label_map, read_pnm, resize,
                      rotate_image, rotate_label_map, tissue_mask, to_float, write_label_map)
from .metrics import ALL_PAIRS, MetricRow, dice, rank_sum_test, rotation_consistency

DEFAULT_ANGLES = tuple(range(0, 360, 30))
QUARTER_ANGLES = (0, 90, 180, 270)
DEFAULT_CLUSTERERS = (("kmeans", 2), ("kmeans", 3), ("kmeans", 4), ("gmm", 3))
METRIC_NAMES = ("icc", "kappa", "dice")
INTRA, INTER = "intra", "inter"


class NoTissueError(ValueError):
    """The tissue mask of an image is empty."""


# ---------------------------------------------------------------------------
# cohort manifest


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    image_path: str
    gt_path: str | None
    split: str

    def load_image(self):
        return to_float(read_pnm(self.image_path), np.float64)

    def load_gt(self):
        return None if self.gt_path is None else read_label_map(self.gt_path)


def read_manifest(path):
    """Parse ``id<TAB>image<TAB>gt|-<TAB>split`` lines; relative paths resolve against the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            sid, img, gt, split = parts
            if split not in ("train", "test"):
                raise ValueError(f"{path}:{lineno}: split must be train or test, got {split!r}")
            if sid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate subject id {sid!r}")
            seen.add(sid)
            resolve = (lambda p: p if os.path.isabs(p) else os.path.join(base, p))
            records.append(SubjectRecord(sid, resolve(img), None if gt == "-" else resolve(gt), split))
    return records


def split_records(records):
    train = [r for r in records if r.split == "train"]
    test = [r for r in records if r.split == "test"]
    return train, test


# ---------------------------------------------------------------------------
# features and segmentation


@dataclass
class GridFeatures:
    """Feature lattice (grid, grid, C) and the tissue mask reduced to the same lattice."""

    features: np.ndarray
    mask: np.ndarray

    @property
    def rows(self):
        return self.features[self.mask]

    @property
    def coords(self):
        return np.argwhere(self.mask)


def _to_batch(image, dtype):
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    return np.ascontiguousarray(image.transpose(2, 0, 1)[None], dtype=dtype)


def grid_features(model, image, layer=4, grid=128) -> GridFeatures:
    """Tap-``layer`` features bilinearly resized to the grid, plus the block-reduced tissue mask."""
    fmap = model.forward_features(_to_batch(image, model.dtype), layer)[0]
    feats = resize(fmap.transpose(1, 2, 0), grid, grid, "bilinear")
    mask = block_reduce_mask(tissue_mask(image), grid, grid)
    return GridFeatures(np.asarray(feats, dtype=np.float64), mask)


def extract_masked_features(model, image, layer=4, grid=128):
    """Feature rows at tissue cells, their (y, x) grid coordinates, and the grid mask."""
    gf = grid_features(model, image, layer, grid)
    if not gf.mask.any():
        raise NoTissueError("tissue mask is empty")
    return gf.rows, gf.coords, gf.mask


def label_grid(clusterer, gf: GridFeatures):
    """Cluster labels on the grid, IGNORE outside the mask."""
    out = np.full(gf.mask.shape, IGNORE, dtype=np.uint8)
    if gf.mask.any():
        out[gf.mask] = clusterer.predict(gf.rows)
    return out


def segment_features(clusterer, gf: GridFeatures, shape):
    return resize(label_grid(clusterer, gf), shape[0], shape[1], "nearest")


def segment(model, clusterer, image, layer=4, grid=128):
    """Label map at image resolution; IGNORE outside the tissue mask."""
    gf = grid_features(model, image, layer, grid)
    n_feat = gf.features.shape[-1]
    if getattr(clusterer, "n_features_in_", n_feat) != n_feat:
        raise ValueError(f"clusterer expects {clusterer.n_features_in_} features, map has {n_feat}")
    return segment_features(clusterer, gf, np.shape(image)[:2])


def sample_rows(rows, n, rng):
    """``n`` rows drawn without replacement, or with replacement if too few (flag set)."""
    if len(rows) == 0:
        raise NoTissueError("no feature rows to sample")
    replace = len(rows) < n
    idx = rng.choice(len(rows), size=n, replace=replace)
    return rows[idx], replace


class UnsupervisedSegmenter(BaseEstimator):
    """Cluster network features into tissue regions.

    Parameters
    ----------
    model : Network
        Frozen feature extractor.
    layer : int, default=4
    grid : int, default=128
    method : {'kmeans', 'gmm'}, default='kmeans'
    n_clusters : int, default=3
    n_samples : int, default=2000
        Feature rows sampled per fitted image.
    random_state : int, default=0
    """

    def __init__(self, model=None, layer=4, grid=128, method="kmeans", n_clusters=3, n_samples=2000,
                 random_state=0):
        self.model = model
        self.layer = layer
        self.grid = grid
        self.method = method
        self.n_clusters = n_clusters
        self.n_samples = n_samples
        self.random_state = random_state

    def fit(self, images, y=None):
        if self.model is None:
            raise ValueError("a feature model is required")
        rows, flags = [], []
        for i, img in enumerate(images):
            r, flag = sample_rows(self.transform(img).rows, self.n_samples,
                                  seeding.rng_for(self.random_state, seeding.SAMPLING, i))
            rows.append(r)
            flags.append(flag)
        if not rows:
            raise ValueError("no images to fit on")
        self.resampled_ = flags
        seed = seeding.child_seed(self.random_state, seeding.CLUSTERING)
        self.clusterer_ = make_clusterer(self.method, self.n_clusters, seed).fit(np.concatenate(rows))
        return self

    def transform(self, image) -> GridFeatures:
        return grid_features(self.model, image, self.layer, self.grid)

    def predict(self, image):
        check_is_fitted(self, "clusterer_")
        return segment(self.model, self.clusterer_, image, self.layer, self.grid)


# ---------------------------------------------------------------------------
# rotation analyses


@dataclass
class RotationFeatures:
    """Grid features of one image at every analysis angle."""

    angles: tuple
    grids: list
    shape: tuple


def rotation_features(model, image, angles=DEFAULT_ANGLES, layer=4, grid=128) -> RotationFeatures:
    grids = [grid_features(model, rotate_image(image, a, "bilinear", WHITE), layer, grid) for a in angles]
    return RotationFeatures(tuple(angles), grids, np.shape(image)[:2])


def aligned_label_grids(clusterer, rf: RotationFeatures, grid=128, dump=None):
    """Per-angle label maps rotated back to 0 degrees and block-reduced to the grid."""
    out = []
    n_labels = getattr(clusterer, "n_clusters", getattr(clusterer, "n_components", None))
    for i, (angle, gf) in enumerate(zip(rf.angles, rf.grids)):
        full = segment_features(clusterer, gf, rf.shape)
        back = rotate_label_map(full, -angle)
        if dump is not None:
            write_label_map(f"{dump}_a{i:02d}_{int(round(angle)):03d}.pgm", back)
        out.append(block_mode(back, grid, grid, n_labels))
    return np.stack(out)


def consistency_scores(stack, K=None, mode=ALL_PAIRS):
    """ICC / Kappa / Dice over grid cells valid in every aligned map."""
    valid = np.all(stack != IGNORE, axis=0)
    if not valid.any():
        raise NoTissueError("no grid cell is valid in every rotation")
    return rotation_consistency(stack[:, valid].astype(np.int64), K, mode)


@dataclass
class SubjectResult:
    subject_id: str
    model: str
    method: str
    scores: dict
    resampled: bool = False

    def rows(self):
        out = [MetricRow(self.subject_id, self.model, self.method, m, self.scores[m]) for m in METRIC_NAMES]
        if self.resampled:
            out.append(MetricRow(self.subject_id, self.model, self.method, "resampled", 1.0))
        return out


def method_tag(analysis, method, K):
    return f"{analysis}-{method}-k{K}"


def intra_subject_analysis(model, image, angles=DEFAULT_ANGLES, n=2000, K=3, seed=0, layer=4, grid=128,
                           method="kmeans", mode=ALL_PAIRS, subject_index=0, rf=None, dump=None):
    """Fit on ``n`` sampled 0-degree rows of this image, then score consistency across ``angles``.

    Returns ``(scores, resampled)``.  ``rf`` may carry precomputed rotation
    features whose first angle is 0.
    """
    if len(angles) < 2:
        raise ValueError("need at least two angles to measure agreement")
    if rf is None:
        rf = rotation_features(model, image, angles, layer, grid)
    ref = rf.grids[rf.angles.index(0)] if 0 in rf.angles else grid_features(model, image, layer, grid)
    rows, resampled = sample_rows(ref.rows, n, seeding.rng_for(seed, seeding.SAMPLING, 0, subject_index))
    clusterer = make_clusterer(method, K, seeding.child_seed(seed, seeding.CLUSTERING)).fit(rows)
    return consistency_scores(aligned_label_grids(clusterer, rf, grid, dump), K, mode), resampled


def fit_inter_clusterer(model, train_images, n_per_subject=500, K=3, seed=0, layer=4, grid=128,
                        method="kmeans", train_grids=None):
    """One clusterer on pooled 0-degree samples from every training image."""
    if train_grids is None:
        if not train_images:
            raise ValueError("inter-subject analysis needs at least one training subject")
        train_grids = [grid_features(model, img, layer, grid) for img in train_images]
    pooled = []
    for i, gf in enumerate(train_grids):
        rows, _ = sample_rows(gf.rows, n_per_subject, seeding.rng_for(seed, seeding.SAMPLING, 1, i))
        pooled.append(rows)
    X = np.concatenate(pooled)
    return make_clusterer(method, K, seeding.child_seed(seed, seeding.CLUSTERING)).fit(X), X.shape[0]


def inter_subject_analysis(model, train_images, test_images, angles=DEFAULT_ANGLES, n_per_subject=500, K=3,
                           seed=0, layer=4, grid=128, method="kmeans", mode=ALL_PAIRS):
    """Per-test-image consistency scores with a clusterer fitted on the pooled training images."""
    if not train_images or not test_images:
        raise ValueError("inter-subject analysis needs non-empty train and test sets")
    clusterer, _ = fit_inter_clusterer(model, train_images, n_per_subject, K, seed, layer, grid, method)
    return [consistency_scores(aligned_label_grids(clusterer, rotation_features(model, img, angles, layer, grid),
                                                   grid), K, mode)
            for img in test_images]


@dataclass
class AnalysisConfig:
    angles: tuple = DEFAULT_ANGLES
    layer: int = 4
    grid: int = 128
    n_intra: int = 2000
    n_inter: int = 500
    clusterers: tuple = DEFAULT_CLUSTERERS
    analyses: tuple = (INTRA, INTER)
    mode: str = ALL_PAIRS
    seed: int = 0
    dump_dir: str | None = None


def ablation_run(models: dict, records, config: AnalysisConfig | None = None, log=None):
    """Intra and inter analyses for every model and clusterer.

    ``models`` maps a name to a network.  Rotated features are computed once
    per (model, subject, angle) and shared by every clusterer.  Returns
    per-subject :class:`SubjectResult` objects ordered by model, subject,
    analysis and clusterer.
    """
    cfg = config or AnalysisConfig()
    if len(cfg.angles) < 2:
        raise ValueError("need at least two angles to measure agreement")
    train, test = split_records(records)
    if not test:
        raise ValueError("cohort has no test subjects")
    if INTER in cfg.analyses and not train:
        raise ValueError("inter-subject analysis needs training subjects")
    results = []
    for name, model in models.items():
        inter = {}
        if INTER in cfg.analyses:
            train_grids = [grid_features(model, r.load_image(), cfg.layer, cfg.grid) for r in train]
            for method, K in cfg.clusterers:
                inter[(method, K)], _ = fit_inter_clusterer(
                    model, None, cfg.n_inter, K, cfg.seed, cfg.layer, cfg.grid, method, train_grids)
            del train_grids
        for si, rec in enumerate(test):
            if log:
                log(f"{name}: {rec.subject_id}")
            image = rec.load_image()
            rf = rotation_features(model, image, cfg.angles, cfg.layer, cfg.grid)
            for analysis in cfg.analyses:
                for method, K in cfg.clusterers:
                    tag = method_tag(analysis, method, K)
                    dump = None
                    if cfg.dump_dir:
                        os.makedirs(cfg.dump_dir, exist_ok=True)
                        dump = os.path.join(cfg.dump_dir, f"{name}_{rec.subject_id}_{tag}")
                    if analysis == INTRA:
                        scores, resampled = intra_subject_analysis(
                            model, image, cfg.angles, cfg.n_intra, K, cfg.seed, cfg.layer, cfg.grid, method,
                            cfg.mode, subject_index=si, rf=rf, dump=dump)
                    else:
                        stack = aligned_label_grids(inter[(method, K)], rf, cfg.grid, dump)
                        scores, resampled = consistency_scores(stack, K, cfg.mode), False
                    results.append(SubjectResult(rec.subject_id, name, tag, scores, resampled))
    return results


# ---------------------------------------------------------------------------
# embedding evaluation


def embedding_eval(model, records, samples_per_subject=100, seed=0, layer=4, grid=128, k=3,
                   cumulative_variance=0.99, warn=None):
    """Dice of a PCA + kNN classifier trained on a few ground-truth-labelled embeddings.

    Each subject contributes ``samples_per_subject`` tissue cells with their
    ground-truth label; every tissue cell of every subject is then classified
    and scored against its ground truth at image resolution.  Returns
    ``{subject_id: dice}``.
    """
    usable = []
    for rec in records:
        if rec.gt_path is None:
            if warn:
                warn(f"{rec.subject_id}: no ground truth, skipped")
            continue
        usable.append(rec)
    if not usable:
        raise ValueError("no subject has ground truth")
    data = []
    pool_X, pool_y = [], []
    for i, rec in enumerate(usable):
        image, gt = rec.load_image(), rec.load_gt()
        gf = grid_features(model, image, layer, grid)
        gt_grid = block_mode(gt, grid, grid)
        cells = gf.mask & (gt_grid != IGNORE)
        if not cells.any():
            if warn:
                warn(f"{rec.subject_id}: no labelled tissue, skipped")
            continue
        rng = seeding.rng_for(seed, seeding.SAMPLING, 2, i)
        idx = np.flatnonzero(cells.ravel())
        pick = rng.choice(idx, size=samples_per_subject, replace=len(idx) < samples_per_subject)
        flat = gf.features.reshape(-1, gf.features.shape[-1])
        pool_X.append(flat[pick])
        pool_y.append(gt_grid.ravel()[pick])
        data.append((rec, gf, gt))
    pca = PCA(variance_threshold=cumulative_variance).fit(np.concatenate(pool_X))
    knn = KNeighborsClassifier(n_neighbors=k).fit(pca.transform(np.concatenate(pool_X)), np.concatenate(pool_y))
    out = {}
    for rec, gf, gt in data:
        pred = np.full(gf.mask.shape, IGNORE, dtype=np.uint8)
        pred[gf.mask] = knn.predict(pca.transform(gf.rows))
        full = resize(pred, gt.shape[0], gt.shape[1], "nearest")
        out[rec.subject_id] = dice(full, gt)
    return out


# ---------------------------------------------------------------------------
# summaries


@dataclass
class Summary:
    """Cohort mean and sample standard deviation per (model, method, metric)."""

    stats: dict = field(default_factory=dict)
    pvalues: dict = field(default_factory=dict)

    def rows(self):
        out = []
        for (model, method, metric), (mean, sd, n) in self.stats.items():
            out.append(MetricRow("mean", model, method, metric, mean))
            out.append(MetricRow("sd", model, method, metric, sd))
            out.append(MetricRow("n", model, method, metric, n))
        for (pair, method, metric), (u, p) in self.pvalues.items():
            out.append(MetricRow("rank-sum-u", pair, method, metric, u))
            out.append(MetricRow("rank-sum-p", pair, method, metric, p))
        return out


def values_by_key(results):
    table = {}
    for r in results:
        for m in METRIC_NAMES:
            table.setdefault((r.model, r.method, m), []).append(r.scores[m])
    return table


def summarize(results, compare=None) -> Summary:
    """Mean, sd and count per key; NaN scores (no-variance ICC) are left out.

    ``compare`` is an optional (model_a, model_b) pair tested per method
    and metric with the rank-sum test.
    """
    summary = Summary()
    table = values_by_key(results)
    for key, vals in table.items():
        v = np.asarray(vals, dtype=np.float64)
        v = v[~np.isnan(v)]
        mean = float(v.mean()) if v.size else float("nan")
        sd = float(v.std(ddof=1)) if v.size > 1 else float("nan")
        summary.stats[key] = (mean, sd, float(v.size))
    if compare is not None:
        a, b = compare
        for (model, method, metric), vals in table.items():
            if model != a or (b, method, metric) not in table:
                continue
            x = np.asarray(vals, dtype=np.float64)
            y = np.asarray(table[(b, method, metric)], dtype=np.float64)
            x, y = x[~np.isnan(x)], y[~np.isnan(y)]
            if x.size >= 3 and y.size >= 3:
                summary.pvalues[(f"{a}-vs-{b}", method, metric)] = rank_sum_test(x, y)
    return summary
