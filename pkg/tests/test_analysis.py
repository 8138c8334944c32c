import csv

import numpy as np
import pytest

from unsupmeta.analysis import (MetricSeries, extract_filters, filter_images, pca_variance, rollout,
                                supervised_baseline, write_pca_csv, write_series_csv, evaluate_params)
from unsupmeta.base_model import ArchSpec, BaseParams, init_params
from unsupmeta.config import get_profile
from unsupmeta.tasks import glyph_task, read_pgm, two_moons_task, invert_permutation
from unsupmeta.update_rule import init_theta

CFG = get_profile("desk")


def _theta():
    return init_theta(CFG.rule, 0)


def test_rollout_zero_steps_is_baseline():
    task = two_moons_task(0.1, 0)
    p = init_params(ArchSpec((2, 8, 8)), 0)
    series, final = rollout(_theta(), p, task, 0, 5, CFG, seed=1)
    assert series.steps == [0]
    acc, obj = evaluate_params(p, task, CFG, np.random.default_rng(np.random.SeedSequence(1).spawn(2)[1]))
    assert series.rows[0]["few_shot_accuracy"] == acc and series.rows[0]["meta_objective"] == obj
    assert all(np.array_equal(final.arrays()[k], v) for k, v in p.arrays().items())


def test_rollout_rows_and_determinism(tmp_path):
    task = two_moons_task(0.1, 0)
    p = init_params(ArchSpec((2, 8, 8)), 0)
    a, fa = rollout(_theta(), p, task, 10, 4, CFG, seed=2, eval_repeats=1)
    b, fb = rollout(_theta(), p, task, 10, 4, CFG, seed=2, eval_repeats=1)
    assert a.steps == [0, 4, 8] and a.rows == b.rows
    assert len(a.rows[0]["delta_rms"]) == 2
    write_series_csv(a, tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["inner_step", "few_shot_accuracy", "meta_objective", "delta_rms_1", "delta_rms_2"]
    assert len(rows) == 4


def test_rollout_rejects_wrong_batch():
    task = two_moons_task(0.1, 0)
    with pytest.raises(ValueError):
        rollout(_theta(), init_params(ArchSpec((2, 4)), 0), task, 1, 0, CFG)


def test_series_strictly_increasing():
    s = MetricSeries()
    s.append({"inner_step": 1})
    with pytest.raises(ValueError):
        s.append({"inner_step": 1})


def test_baseline_separable_task():
    # noiseless prototypes: every test image equals a training image, so the classes separate linearly
    task = glyph_task(4, 8, 0)
    res = supervised_baseline(task, init_params(ArchSpec((64, 16, 8)), 0), 10, 200, lr=3e-3, seed=0, n_test=400)
    assert res["accuracy"] == 1.0


def test_baseline_first_step_lowers_loss():
    task = glyph_task(4, 8, 0)
    res = supervised_baseline(task, init_params(ArchSpec((64, 16, 8)), 0), 10, 1, seed=0, n_test=8)
    assert res["losses"][1] < res["losses"][0]


def test_baseline_shuffled_labels_chance():
    task = two_moons_task(0.1, 1)
    accs = [supervised_baseline(task, init_params(ArchSpec((2, 16, 8)), s), 10, 100, seed=s, n_test=1000,
                                shuffle_labels=True)["accuracy"] for s in range(8)]
    # 20 shuffled labels still agree with the truth on some points, so allow a loose band around 0.5
    assert abs(np.mean(accs) - 0.5) <= 0.1


def test_baseline_errors():
    with pytest.raises(ValueError):
        supervised_baseline(two_moons_task(0.0, 0), init_params(ArchSpec((2, 4)), 0), 0)


def test_filter_images_min_max(tmp_path):
    p = init_params(ArchSpec((16, 3)), 0)
    imgs = filter_images(p)
    assert imgs.shape == (3, 4, 4)
    np.testing.assert_array_equal(imgs[1].ravel(), p.W[0].data[:, 1])
    files = extract_filters(p, tmp_path)
    assert len(files) == 4
    col = p.W[0].data[:, 0]
    want = np.rint((col - col.min()) / (col.max() - col.min()) * 255).astype(np.uint8)
    np.testing.assert_array_equal(read_pgm(files[0]).ravel(), want)
    np.testing.assert_allclose(np.loadtxt(files[-1], delimiter=",")[::1][0], col, rtol=0, atol=0)


def test_filter_unpermutation_round_trip():
    p = init_params(ArchSpec((16, 3)), 0)
    perm = np.random.default_rng(0).permutation(16)
    A = p.arrays()
    A["W1"] = A["W1"][perm]
    q = BaseParams.from_arrays(p.arch, A)
    np.testing.assert_array_equal(filter_images(q, permutation=perm), filter_images(p))


def test_filter_grid_errors():
    p = init_params(ArchSpec((6, 2)), 0)
    with pytest.raises(ValueError):
        filter_images(p)
    with pytest.raises(ValueError):
        filter_images(p, grid=3)


def test_pca_rank_one_and_cumulative(tmp_path):
    r = np.random.default_rng(0)
    X = np.outer(r.normal(size=50), r.normal(size=6))
    res = pca_variance(X)
    assert abs(res["cumulative"][0] - 1) <= 1e-9
    Y = r.normal(size=(40, 5))
    res = pca_variance(Y)
    assert np.all(np.diff(res["eigenvalues"]) <= 0) and np.all(np.diff(res["cumulative"]) >= -1e-15)
    assert abs(res["cumulative"][-1] - 1) <= 1e-9
    write_pca_csv(res, tmp_path / "p.csv")
    assert len(open(tmp_path / "p.csv").readlines()) == 6


def test_pca_isotropic():
    n, d = 10_000, 32
    res = pca_variance(np.random.default_rng(0).normal(size=(n, d)))
    # eigenvalues of a white sample covariance spread over [(1-sqrt(d/n))^2, (1+sqrt(d/n))^2]
    edge = (1 + np.sqrt(d / n)) ** 2 - 1
    assert np.all(np.abs(res["explained"] * d - 1) <= 3 * edge)


def test_pca_errors():
    with pytest.raises(ValueError):
        pca_variance(np.ones((1, 3)))
    with pytest.raises(ValueError):
        pca_variance(np.ones((5, 3)))
