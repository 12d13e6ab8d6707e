import numpy as np
import pytest
from sklearn.utils.estimator_checks import parametrize_with_checks

from dmcr2.errors import EmptyClass, ZeroVariance
from dmcr2.evaluation import (
    NearestSubspaceClassifier,
    check_theorem1,
    class_mean_cosine_stats,
    cosine_similarity_matrix,
    fit_subspace_model,
    geometry_report,
    iidr,
    linear_cka,
    nearest_subspace_classify,
    subspace_residuals,
    wccr,
    write_heatmap_svg,
)
from dmcr2.linalg import sym_eig


def random_rotation(rng, d):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return Q


# cosine matrix


def test_cosine_of_orthonormal_columns_is_identity():
    np.testing.assert_array_equal(cosine_similarity_matrix(np.eye(4)), np.eye(4))


def test_cosine_duplicated_column():
    Z = np.array([[1.0, 1.0, 0.0], [2.0, 2.0, 1.0]])
    assert cosine_similarity_matrix(Z)[0, 1] == pytest.approx(1.0, abs=1e-15)


def test_cosine_matches_double_loop():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((5, 9))
    naive = np.empty((9, 9))
    for i in range(9):
        for j in range(9):
            a, b = Z[:, i], Z[:, j]
            naive[i, j] = sum(x * y for x, y in zip(a, b)) / (np.sqrt(a @ a) * np.sqrt(b @ b))
    np.testing.assert_allclose(cosine_similarity_matrix(Z), naive, atol=1e-12)


def test_cosine_order_and_rotation_invariance():
    rng = np.random.default_rng(1)
    Z = rng.standard_normal((6, 7))
    order = rng.permutation(7)
    C = cosine_similarity_matrix(Z)
    np.testing.assert_allclose(cosine_similarity_matrix(Z, order), C[np.ix_(order, order)], atol=1e-15)
    np.testing.assert_allclose(cosine_similarity_matrix(random_rotation(rng, 6) @ Z), C, atol=1e-10)


# property suite on constructed features


def orthogonal_two_class(rng, per=6):
    # class 0 lives in e0,e1 and class 1 in e2,e3, each spread evenly on a circle
    angles = np.linspace(0, np.pi / 2, per)
    Z = np.zeros((4, 2 * per))
    Z[0, :per], Z[1, :per] = np.cos(angles), np.sin(angles)
    Z[2, per:], Z[3, per:] = np.cos(angles), np.sin(angles)
    return Z, np.repeat([0, 1], per)


def test_theorem1_passes_on_exact_orthogonal_features():
    Z, y = orthogonal_two_class(np.random.default_rng(0))
    rep = check_theorem1([Z[:, ::2], Z[:, 1::2]], [y[::2], y[1::2]], class_dims=2)
    assert rep.within_node_max_cos == 0.0 and rep.across_node_max_cos == 0.0
    assert rep.orthogonal_within and rep.orthogonal_across and rep.passed
    assert rep.effective_rank == {0: 2, 1: 2}


def test_theorem1_flags_collapse():
    Z = np.zeros((4, 8))
    Z[0, :4] = 1.0
    Z[2, 4:] = 1.0
    y = np.repeat([0, 1], 4)
    rep = check_theorem1([Z], [y], class_dims=3)
    assert rep.orthogonal_within
    assert rep.effective_rank == {0: 1, 1: 1}
    assert not rep.diverse and not rep.passed
    assert rep.to_dict()["passed"] is False


def test_theorem1_detects_cross_node_overlap():
    a = np.eye(2)
    b = np.array([[0.0, 1.0], [1.0, 0.0]])
    rep = check_theorem1([a, b], [[0, 1], [0, 1]])
    assert rep.orthogonal_within and not rep.orthogonal_across
    assert rep.across_node_max_cos == 1.0


# subspace model


def test_plane_class_has_rank_two():
    rng = np.random.default_rng(2)
    B = np.linalg.qr(rng.standard_normal((6, 2)))[0]
    Z = B @ rng.standard_normal((2, 40))
    model = fit_subspace_model(Z, np.zeros(40, int), energy=0.95)
    assert model.ranks[0] == 2


def test_isotropic_class_full_rank_in_the_limit():
    d = 4
    Z = np.hstack([np.eye(d), -np.eye(d)])
    model = fit_subspace_model(Z, np.zeros(2 * d, int), energy=1.0)
    assert model.ranks[0] == d


def test_basis_matches_sym_eig_within_sign():
    rng = np.random.default_rng(3)
    Z = rng.standard_normal((5, 30)) * np.array([3.0, 2.0, 1.0, 0.5, 0.1])[:, None]
    model = fit_subspace_model(Z, np.zeros(30, int), rank=3)
    C = Z - Z.mean(axis=1, keepdims=True)
    top = sym_eig(C @ C.T).vectors[:, :3]
    B = model.bases[0]
    for j in range(3):
        assert min(np.linalg.norm(B[:, j] - top[:, j]), np.linalg.norm(B[:, j] + top[:, j])) < 1e-8


def test_mean_point_classified_to_its_class():
    Z, y = orthogonal_two_class(np.random.default_rng(4))
    model = fit_subspace_model(Z, y, rank=1)
    for k in (0, 1):
        assert nearest_subspace_classify(model, model.means[k]) == k


def test_point_in_affine_span_has_zero_residual():
    Z, y = orthogonal_two_class(np.random.default_rng(5))
    model = fit_subspace_model(Z, y, rank=1)
    z = model.means[1] + 0.7 * model.bases[1][:, 0]
    assert subspace_residuals(model, z)[1, 0] == pytest.approx(0.0, abs=1e-24)
    assert nearest_subspace_classify(model, z) == 1


def test_two_class_toy_residual_table():
    # mu0=(1,0), mu1=(0,1); basis e1 for class 0 and e0 for class 1
    Z = np.array([[1.0, 1.0, -1.0, 1.0], [1.0, -1.0, 1.0, 1.0]])
    y = np.array([0, 0, 1, 1])
    model = fit_subspace_model(Z, y, rank=1)
    np.testing.assert_allclose(model.means[0], [1.0, 0.0])
    np.testing.assert_allclose(model.means[1], [0.0, 1.0])
    np.testing.assert_allclose(np.abs(model.bases[0][:, 0]), [0.0, 1.0])
    np.testing.assert_allclose(np.abs(model.bases[1][:, 0]), [1.0, 0.0])
    pts = np.array([[0.0, 0.0], [2.0, 1.0], [1.0, 3.0], [3.0, 1.5]]).T
    # class 0 keeps the x offset, class 1 keeps the y offset
    expected = np.array([[(x - 1.0) ** 2 for x in pts[0]], [(v - 1.0) ** 2 for v in pts[1]]])
    np.testing.assert_allclose(subspace_residuals(model, pts), expected, atol=1e-24)
    # the first point ties; argmin keeps the lower class id
    np.testing.assert_array_equal(nearest_subspace_classify(model, pts), [0, 1, 0, 1])


def test_rank_zero_is_nearest_mean():
    rng = np.random.default_rng(6)
    Z = rng.standard_normal((3, 30))
    y = rng.integers(0, 3, 30)
    model = fit_subspace_model(Z, y, rank=0)
    pts = rng.standard_normal((3, 10))
    M = np.stack([Z[:, y == k].mean(axis=1) for k in range(3)], axis=1)
    dist = ((pts[:, None, :] - M[:, :, None]) ** 2).sum(axis=0)
    np.testing.assert_array_equal(nearest_subspace_classify(model, pts), np.argmin(dist, axis=0))


def test_empty_class_in_model():
    with pytest.raises(EmptyClass):
        fit_subspace_model(np.eye(2), [0, 0], n_classes=2)


# scalar diagnostics


def test_wccr_limits():
    Z = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
    y = np.array([0, 0, 1, 1])
    assert wccr(Z, y) == 0.0
    rng = np.random.default_rng(7)
    W = rng.standard_normal((3, 10))
    assert wccr(W, np.zeros(10, int)) == pytest.approx(1.0)
    with pytest.raises(ZeroVariance):
        wccr(np.ones((2, 3)), [0, 1, 1])


def test_scatter_decomposition():
    from dmcr2.evaluation import _scatter_traces

    rng = np.random.default_rng(8)
    Z = rng.standard_normal((4, 25))
    y = rng.integers(0, 3, 25)
    w, b, t = _scatter_traces(Z, y)
    assert w + b == pytest.approx(t, abs=1e-8)


def test_iidr_sentinel_and_zero():
    Z = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
    assert iidr(Z, [0, 0, 1, 1]) == float("inf")
    S = np.array([[1.0, -1.0, 1.0, -1.0], [0.0, 0.0, 0.0, 0.0]])
    assert iidr(S, [0, 1, 1, 0]) == 0.0


def test_cka_examples():
    rng = np.random.default_rng(9)
    Z = rng.standard_normal((5, 20))
    assert linear_cka(Z, Z) == pytest.approx(1.0, abs=1e-12)
    assert linear_cka(Z, random_rotation(rng, 5) @ Z) == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(ZeroVariance):
        linear_cka(np.ones((2, 4)), Z[:, :4])
    with pytest.raises(ValueError):
        linear_cka(Z, Z[:, :3])


def test_cka_matches_hsic_ratio():
    rng = np.random.default_rng(10)
    A, B = rng.standard_normal((4, 15)), rng.standard_normal((6, 15))
    n = 15
    H = np.eye(n) - np.ones((n, n)) / n

    def hsic(K, L):
        return np.trace(K @ H @ L @ H)

    K, L = A.T @ A, B.T @ B
    oracle = hsic(K, L) / np.sqrt(hsic(K, K) * hsic(L, L))
    assert linear_cka(A, B) == pytest.approx(oracle, abs=1e-10)


def test_class_mean_cosines():
    C, mean, std = class_mean_cosine_stats(np.eye(3), [0, 1, 2])
    np.testing.assert_array_equal(C, np.eye(3))
    assert mean == 0.0 and std == 0.0
    C, mean, _ = class_mean_cosine_stats(np.array([[1.0, 1.0], [2.0, 2.0]]), [0, 1])
    assert C[0, 1] == pytest.approx(1.0) and mean == pytest.approx(1.0)
    with pytest.raises(ZeroVariance):
        class_mean_cosine_stats(np.array([[1.0, -1.0, 1.0], [0.0, 0.0, 0.0]]), [0, 0, 1])


def test_metrics_ignore_class_relabeling():
    rng = np.random.default_rng(11)
    Z = rng.standard_normal((4, 30))
    y = rng.integers(0, 3, 30)
    perm = np.array([2, 0, 1])
    assert wccr(Z, perm[y]) == pytest.approx(wccr(Z, y))
    assert iidr(Z, perm[y]) == pytest.approx(iidr(Z, y))


def test_geometry_report_fields():
    Z, y = orthogonal_two_class(np.random.default_rng(12))
    rep = geometry_report({"0": Z, "1": Z}, y, class_dims=2)
    d = rep.to_dict()
    assert d["iidr"] != "inf" and 0.0 <= d["wccr"] <= 1.0
    assert d["cka"]["0|1"] == pytest.approx(1.0)
    assert d["theorem1"]["passed"]
    assert set(rep.spectra) == {"all", "0", "1"}


# heatmap


def test_svg_has_one_rect_per_cell(tmp_path):
    C = cosine_similarity_matrix(np.random.default_rng(13).standard_normal((3, 7)))
    write_heatmap_svg(C, tmp_path / "c.svg")
    text = (tmp_path / "c.svg").read_text()
    assert text.count("<rect") == 49
    assert 'fill="#ff0000"' in text
    write_heatmap_svg(C, tmp_path / "s.svg", max_cells=3)
    assert (tmp_path / "s.svg").read_text().count("<rect") == 9


# sklearn estimator


def test_classifier_predicts_labels():
    rng = np.random.default_rng(14)
    Z, y = orthogonal_two_class(rng, per=10)
    X = Z.T + 0.01 * rng.standard_normal(Z.T.shape)
    labels = np.array(["a", "b"])[y]
    clf = NearestSubspaceClassifier(rank=1).fit(X, labels)
    assert clf.score(X, labels) == 1.0
    assert clf.get_params() == {"energy": 0.95, "rank": 1}
    with pytest.raises(ValueError):
        NearestSubspaceClassifier(energy=1.5).fit(X, labels)


@parametrize_with_checks([NearestSubspaceClassifier()])
def test_sklearn_compatible(estimator, check):
    check(estimator)
