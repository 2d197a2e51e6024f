import numpy as np
import pytest

import lsdr


@pytest.fixture(scope="module")
def data():
    return lsdr.generate(3, 2, separation=5.0, n1=120, m1=400, gamma_l=10.0, gamma_u=10.0,
                         shape="reversed", seed=3)


def test_generate_shapes(data):
    x, y = data["features"], data["labels"]
    assert x.shape[0] == y.shape[0] == data["hidden_labels"].shape[0]
    assert x.shape[1] == 2
    labeled = y >= 0
    assert np.array_equal(y[labeled], data["hidden_labels"][labeled])
    assert data["unlabeled_prior"].sum() == pytest.approx(1.0)
    # reversed: the unlabeled head is the labeled tail
    assert np.argmax(data["unlabeled_prior"]) == np.argmin(data["labeled_prior"])


def test_generate_is_deterministic():
    a = lsdr.generate(3, 2, n1=30, m1=60, gamma_l=3.0, gamma_u=3.0, seed=9)
    b = lsdr.generate(3, 2, n1=30, m1=60, gamma_l=3.0, gamma_u=3.0, seed=9)
    assert np.array_equal(a["features"], b["features"])


def test_oracle_dr_matches_label_frequencies_when_fully_labeled():
    rng = np.random.default_rng(0)
    post = rng.dirichlet(np.ones(4), size=50)
    labels = rng.integers(0, 4, size=50)
    rep = lsdr.estimate_prior("dr", post, np.ones(4), labels)
    freq = np.bincount(labels, minlength=4) / 50
    assert np.allclose(rep["raw"], freq, atol=1e-12)


def test_train_and_estimate(data):
    model = lsdr.train("simpro", 3, data["features"], data["labels"],
                       config={"epochs": 20, "warmup_epochs": 2, "seed": 1})
    assert model.method == "simpro"
    post = model.posterior(data["features"][:5])
    assert post.shape == (5, 3)
    assert np.allclose(post.sum(axis=1), 1.0)
    rep = lsdr.estimate(model, "dr", data["features"], data["labels"])
    assert sum(rep["p_combined"]) == pytest.approx(1.0)
    truth = data["unlabeled_prior"]
    # better than assuming no shift
    assert (lsdr.tv_distance(np.asarray(rep["p_unlabeled"]), truth)
            < lsdr.tv_distance(data["labeled_prior"], truth))
    assert len(model.predict(data["features"][:7])) == 7


def test_bad_config_key_raises(data):
    with pytest.raises(ValueError):
        lsdr.train("em", 3, data["features"], data["labels"], config={"epoch": 3})


def test_helpers():
    assert lsdr.coverage_band(500) == pytest.approx((0.916, 0.976))
    assert lsdr.config_hash("") == "cbf29ce484222325"
