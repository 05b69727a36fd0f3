import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import f1_score, normalized_mutual_info_score
from sklearn.neighbors import KNeighborsClassifier

from discvae import evaluation as ev
from discvae.core import ContractError
from discvae.dataset import DataConfig, generate_dataset, make_batch
from discvae.model import Rollout

# -- KNN ------------------------------------------------------------------


def test_knn_exact_match_with_k1():
    z = np.array([[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]])
    assert ev.knn_classify(z, [3, 4, 5], z[[2, 0]], k=1).tolist() == [5, 3]


def test_knn_duplicated_train_set_votes_identically():
    rng = np.random.default_rng(0)
    z, y, q = rng.normal(size=(60, 3)), rng.integers(0, 4, 60), rng.normal(size=(40, 3))
    a = ev.knn_classify(z, y, q, k=3)
    b = ev.knn_classify(np.concatenate([z, z]), np.concatenate([y, y]), q, k=6)
    assert np.array_equal(a, b)


def test_knn_tie_goes_to_nearest():
    z = np.array([[0.0], [1.0], [2.0], [3.0]])
    # votes 2-2 between labels 7 and 8; the nearest neighbour carries 8
    assert ev.knn_classify(z, [8, 7, 8, 7], np.array([[0.1]]), k=4)[0] == 8


def test_knn_contract():
    with pytest.raises(ContractError):
        ev.knn_classify(np.zeros((3, 2)), [0, 1, 2], np.zeros((1, 2)), k=4)
    with pytest.raises(ContractError):
        ev.knn_classify(np.zeros((0, 2)), [], np.zeros((1, 2)), k=1)


def brute_force_knn(train_z, train_y, query, k):
    """Plain-loop reference: sort distances, majority vote, nearest label breaks ties."""
    out = []
    for q in query:
        d = [float(np.sum((z - q) ** 2)) for z in train_z]
        order = sorted(range(len(d)), key=lambda i: (d[i], i))[:k]
        votes = {}
        for i in order:
            votes[train_y[i]] = votes.get(train_y[i], 0) + 1
        best = max(votes.values())
        out.append(next(train_y[i] for i in order if votes[train_y[i]] == best))
    return np.array(out)


def test_knn_on_gaussian_blobs():
    rng = np.random.default_rng(1)
    sigma = 0.1
    centres = 3 * sigma * np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
    y_tr, y_te = rng.integers(0, 3, 600), rng.integers(0, 3, 300)
    z_tr = centres[y_tr] + sigma * rng.normal(size=(600, 2))
    z_te = centres[y_te] + sigma * rng.normal(size=(300, 2))
    pred = ev.knn_classify(z_tr, y_tr, z_te)
    assert np.mean(pred == brute_force_knn(z_tr, y_tr, z_te, 5)) >= 0.99
    # the blobs overlap, so agreement with the truth is bounded by the Bayes rate
    bayes = np.argmin(((z_te[:, None] - centres[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == y_te) >= np.mean(bayes == y_te) - 0.05


def test_knn_matches_sklearn_without_ties():
    rng = np.random.default_rng(2)
    z, y, q = rng.normal(size=(200, 4)), rng.integers(0, 2, 200), rng.normal(size=(100, 4))
    ref = KNeighborsClassifier(n_neighbors=5, algorithm="brute").fit(z, y).predict(q)
    assert np.array_equal(ev.knn_classify(z, y, q, k=5), ref)


def test_knn_rotation_invariance():
    rng = np.random.default_rng(3)
    z, y, q = rng.normal(size=(150, 5)), rng.integers(0, 6, 150), rng.normal(size=(80, 5))
    rot, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    assert np.array_equal(ev.knn_classify(z, y, q), ev.knn_classify(z @ rot, y, q @ rot))


# -- accuracy / F1 -----------------------------------------------------------


def test_perfect_predictions():
    y = np.array([0, 1, 2, 1])
    assert ev.accuracy_f1(y, y, 3) == (100.0, 1.0)


def test_constant_predictor_on_balanced_pair():
    acc, f1 = ev.accuracy_f1(np.zeros(10, int), np.array([0, 1] * 5), 2)
    # class 0: precision 1/2, recall 1 -> F1 2/3; class 1 scores 0
    assert acc == 50.0 and f1 == pytest.approx(1 / 3)


def test_f1_matches_sklearn_macro():
    rng = np.random.default_rng(4)
    p, y = rng.integers(0, 12, 500), rng.integers(0, 12, 500)
    _, f1 = ev.accuracy_f1(p, y, 12)
    assert f1 == pytest.approx(f1_score(y, p, average="macro", labels=range(12), zero_division=0))
    perm = rng.permutation(500)
    assert ev.accuracy_f1(p[perm], y[perm], 12) == ev.accuracy_f1(p, y, 12)


def test_absent_classes_score_zero():
    _, f1 = ev.accuracy_f1(np.array([0, 1]), np.array([0, 1]), 4)
    assert f1 == pytest.approx(0.5)


# -- NMI ------------------------------------------------------------------


def test_nmi_identity_and_constant():
    y = np.array([0, 0, 1, 2, 2, 2])
    assert ev.nmi(y, y) == pytest.approx(1.0)
    assert ev.nmi(np.zeros(6), y) == 0.0
    with pytest.raises(ContractError):
        ev.nmi(y, y[:-1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 4)), min_size=2, max_size=200))
def test_nmi_matches_sklearn_and_is_symmetric(pairs):
    a, b = np.array(pairs).T
    ours = ev.nmi(a, b)
    assert ours == pytest.approx(ev.nmi(b, a), abs=1e-12)
    if len(set(a)) > 1 and len(set(b)) > 1:
        assert ours == pytest.approx(normalized_mutual_info_score(b, a, average_method="arithmetic"), abs=1e-9)
    assert 0.0 <= ours <= 1.0


def test_nmi_invariant_to_renaming():
    rng = np.random.default_rng(5)
    a, b = rng.integers(0, 6, 300), rng.integers(0, 4, 300)
    rename = rng.permutation(6)
    assert ev.nmi(rename[a], b) == pytest.approx(ev.nmi(a, b))


def test_nmi_of_independent_draws_vanishes():
    rng = np.random.default_rng(6)
    assert ev.nmi(rng.integers(0, 13, 10_000), rng.integers(0, 12, 10_000)) < 0.05


# -- forecasting and cluster reports -----------------------------------------


@pytest.fixture(scope="module")
def long_windows():
    windows, stats = generate_dataset(DataConfig(seed=1, episodes_per_map=(8, 8, 6)))
    return make_batch(windows["forecast"], stats), make_batch(windows["train"], stats)


class Oracle:
    """Replays the true continuation, or zeros."""

    kind = "oracle"

    def __init__(self, data, zero=False):
        self.data, self.zero, self.offset = data, zero, 0

    def predict_rollout(self, joystick, laser, n, generator=None, override_cluster=None, mean=False):
        B, t = joystick.shape[:2]
        sl = slice(self.offset, self.offset + B)
        self.offset += B
        j = self.data.joystick[sl, t:t + n]
        l = self.data.laser[sl, t:t + n]
        if self.zero:
            j, l = torch.zeros_like(j), torch.zeros_like(l)
        return Rollout(j, l, None, None, None, None)


def test_forecast_mse_of_true_continuation_is_zero(long_windows):
    data, _ = long_windows
    assert ev.forecast_mse(Oracle(data), data, prefix_len=20, horizon=10) == (0.0, 0.0)


def test_zero_forecast_mse_is_about_unit(long_windows):
    data, train = long_windows
    a, l = ev.forecast_mse(Oracle(data, zero=True), data, prefix_len=20, horizon=10)
    # oracle: second moment of the same continuation steps, measured directly
    ref_a = float((data.joystick[:, 20:30] ** 2).mean())
    ref_l = float((data.laser[:, 20:30] ** 2).mean())
    assert a == pytest.approx(ref_a, rel=1e-5) and l == pytest.approx(ref_l, rel=1e-5)
    assert 0.3 < a < 3.0 and 0.3 < l < 3.0


def test_forecast_window_contract(long_windows):
    data, _ = long_windows
    with pytest.raises(ContractError):
        ev.forecast_mse(Oracle(data), data, prefix_len=25, horizon=10)


def test_histograms_conserve_counts():
    rng = np.random.default_rng(7)
    assigned, man, narrow = rng.integers(0, 13, 400), rng.integers(0, 6, 400), rng.integers(0, 2, 400)
    by_man, by_space = ev.cluster_histograms(assigned, man, narrow, 13)
    assert by_man.shape == (13, 6) and by_space.shape == (13, 2)
    assert np.array_equal(by_man.sum(0), np.bincount(man, minlength=6))
    assert np.array_equal(by_space.sum(0), np.bincount(narrow, minlength=2))
    assert np.array_equal(by_man.sum(1), np.bincount(assigned, minlength=13))


def test_constant_assignment_fills_one_row(long_windows):
    _, train = long_windows

    class Fixed:
        n_clusters = 13

        def assign_cluster(self, joystick, laser):
            return torch.full((joystick.shape[0],), 4)

    by_man, by_space = ev.cluster_report(Fixed(), train)
    assert by_man[4].sum() == len(train) and by_man.sum() == len(train)
    assert by_space[4].sum() == len(train)


def test_report_files(tmp_path):
    rep = ev.EvalReport(model="discvae", knn_k=5, accuracy=90.0, f1=0.8, a_mse=0.1, l_mse=0.2, nmi=0.3,
                        by_manoeuvre=[[1] * 6] * 2, by_space=[[1, 2]] * 2)
    rep.save(tmp_path)
    assert (tmp_path / "metrics.csv").read_text().splitlines()[1] == "discvae,90,0.8,0.1,0.2,0.3"
    assert (tmp_path / "clusters_by_space.csv").read_text().splitlines()[0] == "cluster,wide,narrow"
    assert ev.config_hash({"a": 1, "b": 2}) == ev.config_hash({"b": 2, "a": 1})
