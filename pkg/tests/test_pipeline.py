import math

import numpy as np
import pytest

from sreseg.clustering import make_clusterer
from sreseg.datagen import gen_tma_cohort, gen_tma_subject, write_cohort
from sreseg.imaging import IGNORE, rotate_label_map, to_float
from sreseg.invariants import _randomize_norm
from sreseg.metrics import dice
from sreseg.model import build_model
from sreseg.nn import SRE, STANDARD, BatchNorm2d
from sreseg.pipeline import (INTER, INTRA, AnalysisConfig, NoTissueError, SubjectResult, UnsupervisedSegmenter,
                             ablation_run, embedding_eval, extract_masked_features, fit_inter_clusterer,
                             grid_features, inter_subject_analysis, intra_subject_analysis, method_tag,
                             read_manifest, rotation_features, sample_rows, segment, summarize)

TINY = dict(stage_channels=(4, 4, 8, 8), sre_kernel_sizes=(5, 3, 3, 3))
GRID = 16
SIZE = 64


def _model(variant=SRE, seed=0):
    m = build_model(variant=variant, seed=seed, dtype=np.float64, **TINY)
    rng = np.random.default_rng(seed)
    for _, layer in m.named_layers():
        if isinstance(layer, BatchNorm2d):
            _randomize_norm(layer, rng)
    return m


@pytest.fixture(scope="module")
def sre_model():
    return _model(SRE)


@pytest.fixture(scope="module")
def image():
    return to_float(gen_tma_subject(11, 0, size=SIZE).image, np.float64)


def test_white_image_has_no_tissue(sre_model):
    with pytest.raises(NoTissueError):
        extract_masked_features(sre_model, np.ones((SIZE, SIZE, 3)), grid=GRID)


def test_rows_match_mask(sre_model, image):
    rows, coords, mask = extract_masked_features(sre_model, image, grid=GRID)
    assert rows.shape == (mask.sum(), 8) and coords.shape == (mask.sum(), 2)


@pytest.mark.parametrize("q", [1, 2, 3])
def test_quarter_turn_embeddings_permute(sre_model, image, q):
    a = grid_features(sre_model, image, grid=GRID)
    b = grid_features(sre_model, np.rot90(image, q), grid=GRID)
    assert np.array_equal(np.rot90(a.mask, q), b.mask)
    assert np.abs(np.rot90(a.features, q) - b.features).max() <= 1e-4


def test_segment_fit_image_and_single_cluster(sre_model, image):
    gf = grid_features(sre_model, image, grid=GRID)
    km = make_clusterer("kmeans", 3, 0).fit(gf.rows)
    seg = segment(sre_model, km, image, grid=GRID)
    assert seg.shape == image.shape[:2]
    cells = seg[:: SIZE // GRID, :: SIZE // GRID][gf.mask]
    assert np.array_equal(cells, km.predict(gf.rows))
    one = segment(sre_model, make_clusterer("kmeans", 1, 0).fit(gf.rows), image, grid=GRID)
    assert set(np.unique(one)) <= {0, IGNORE}


def test_segment_quarter_turn_consistent(sre_model, image):
    gf = grid_features(sre_model, image, grid=GRID)
    km = make_clusterer("kmeans", 3, 0).fit(gf.rows)
    a = segment(sre_model, km, image, grid=GRID)
    b = rotate_label_map(segment(sre_model, km, np.rot90(image), grid=GRID), -90)
    both = (a != IGNORE) & (b != IGNORE)
    assert np.array_equal(a[both], b[both]) and dice(a[both], b[both]) == 1.0


def test_segment_rejects_wrong_feature_width(sre_model, image):
    km = make_clusterer("kmeans", 2, 0).fit(np.random.default_rng(0).random((10, 5)))
    with pytest.raises(ValueError):
        segment(sre_model, km, image, grid=GRID)


def test_sample_rows():
    rows = np.arange(10)[:, None]
    got, flag = sample_rows(rows, 4, np.random.default_rng(0))
    assert len(np.unique(got)) == 4 and not flag
    got, flag = sample_rows(rows, 25, np.random.default_rng(0))
    assert len(got) == 25 and flag
    with pytest.raises(NoTissueError):
        sample_rows(rows[:0], 3, np.random.default_rng(0))


def test_intra_angles(sre_model, image):
    with pytest.raises(ValueError):
        intra_subject_analysis(sre_model, image, angles=(0,), n=50, grid=GRID)
    same, _ = intra_subject_analysis(sre_model, image, angles=(0, 0), n=50, grid=GRID)
    assert same["kappa"] == 1.0 and same["dice"] == 1.0


def test_intra_quarter_turns_exact(sre_model, image):
    scores, resampled = intra_subject_analysis(sre_model, image, angles=(0, 90, 180, 270), n=50, grid=GRID)
    assert scores["dice"] == 1.0 and scores["kappa"] == 1.0 and not resampled


def test_intra_flags_resampling(sre_model, image):
    _, resampled = intra_subject_analysis(sre_model, image, angles=(0, 90), n=10_000, grid=GRID)
    assert resampled


def test_inter_single_subject(sre_model, image):
    scores = inter_subject_analysis(sre_model, [image], [image], angles=(0, 0), n_per_subject=40, grid=GRID)
    assert scores[0]["kappa"] == 1.0


def test_inter_pooled_row_count(sre_model, image):
    _, n = fit_inter_clusterer(sre_model, [image] * 25, n_per_subject=500, grid=GRID)
    assert n == 12_500


def test_rotation_features_keep_angle_order(sre_model, image):
    rf = rotation_features(sre_model, image, (0, 30), grid=GRID)
    assert rf.angles == (0, 30) and len(rf.grids) == 2


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    d = tmp_path_factory.mktemp("cohort")
    return read_manifest(write_cohort(d, gen_tma_cohort(3, n_subjects=6, size=SIZE)))


def test_ablation_rows_and_tags(cohort, tmp_path):
    models = {"sre": _model(SRE), "standard": _model(STANDARD)}
    cfg = AnalysisConfig(angles=(0, 90), grid=GRID, n_intra=60, n_inter=30,
                         clusterers=(("kmeans", 2), ("gmm", 3)), seed=1, dump_dir=str(tmp_path / "d"))
    results = ablation_run(models, cohort, cfg)
    n_test = sum(r.split == "test" for r in cohort)
    assert len(results) == 2 * n_test * 2 * 2
    assert {r.method for r in results} == {method_tag(a, m, k) for a in (INTRA, INTER)
                                           for m, k in (("kmeans", 2), ("gmm", 3))}
    assert len(list((tmp_path / "d").iterdir())) == len(results) * 2
    summary = summarize(results, compare=("sre", "standard"))
    assert len(summary.stats) == 2 * 4 * 3
    for r in results:
        if r.model == "sre":
            assert r.scores["dice"] == 1.0
    again = ablation_run(models, cohort, AnalysisConfig(angles=(0, 90), grid=GRID, n_intra=60, n_inter=30,
                                                        clusterers=(("kmeans", 2), ("gmm", 3)), seed=1))
    assert [r.scores for r in again] == [r.scores for r in results]


def test_ablation_single_model_single_clusterer(cohort):
    cfg = AnalysisConfig(angles=(0, 90), grid=GRID, n_intra=40, n_inter=20, clusterers=(("kmeans", 3),))
    results = ablation_run({"sre": _model()}, cohort, cfg)
    assert len(summarize(results).stats) == 2 * 3


def test_summary_rows_skip_nan():
    res = [SubjectResult(f"s{i}", "a", "intra-kmeans-k3", {"icc": v, "kappa": 1.0, "dice": 1.0})
           for i, v in enumerate([0.5, float("nan"), 0.7])]
    s = summarize(res)
    mean, sd, n = s.stats[("a", "intra-kmeans-k3", "icc")]
    assert math.isclose(mean, 0.6) and n == 2.0
    assert res[0].rows()[0].metric == "icc"


def test_embedding_eval_constant_ground_truth(sre_model, tmp_path):
    s = gen_tma_subject(2, 0, size=SIZE)
    gt = np.where(s.labels == IGNORE, IGNORE, 1).astype(np.uint8)
    from sreseg.imaging import write_label_map, write_pnm

    write_pnm(tmp_path / "i.ppm", s.image)
    write_label_map(tmp_path / "g.pgm", gt)
    (tmp_path / "m.tsv").write_text("a\ti.ppm\tg.pgm\ttest\nb\ti.ppm\t-\ttest\n")
    warnings = []
    out = embedding_eval(sre_model, read_manifest(tmp_path / "m.tsv"), samples_per_subject=20, grid=GRID,
                         warn=warnings.append)
    assert out == {"a": 1.0} and len(warnings) == 1


def test_segmenter_estimator(sre_model, image):
    seg = UnsupervisedSegmenter(sre_model, grid=GRID, n_clusters=2, n_samples=40).fit([image])
    assert seg.predict(image).shape == image.shape[:2]
    assert seg.get_params()["n_clusters"] == 2


def test_manifest_errors(tmp_path):
    (tmp_path / "bad.tsv").write_text("a\tx.ppm\t-\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "bad.tsv")
    (tmp_path / "dup.tsv").write_text("a\tx\t-\ttest\na\ty\t-\ttest\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "dup.tsv")
