import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from cancelpq.embed_io import SyntheticSpec, gen_synthetic, holdout_split
from cancelpq.estimators import CancelablePQIndex, PCACompressor, ProductQuantizer, SecureRetriever
from cancelpq.exceptions import DataError


@pytest.fixture(scope="module")
def split():
    g, p = holdout_split(gen_synthetic(SyntheticSpec(25, 5, 32, 0.2, 1)), 1)
    return g.vectors, g.labels, p.vectors, p.labels


def test_clone_keeps_params():
    est = SecureRetriever(m=8, n=16, K=3, key_seed=9)
    assert clone(est).get_params() == est.get_params()
    assert CancelablePQIndex(sigma_proj=0).get_params()["sigma_proj"] == 0


def test_not_fitted():
    with pytest.raises(NotFittedError):
        ProductQuantizer().transform(np.zeros((1, 4)))


def test_pca_output_is_unit_norm(split):
    X = split[0]
    Y = PCACompressor(16).fit_transform(X)
    assert Y.shape == (len(X), 16)
    np.testing.assert_allclose(np.linalg.norm(Y, axis=1), 1, atol=1e-6)


def test_quantizer_round_trip(split):
    X = PCACompressor(16).fit_transform(split[0])
    pq = ProductQuantizer(m=8, n=8).fit(X)
    codes = pq.transform(X)
    assert codes.shape == (len(X), 8) and codes.max() < 8
    assert np.mean((pq.inverse_transform(codes) - X) ** 2) < np.mean(X ** 2)


def test_index_revoke_changes_key_not_results(split):
    X, y, Q, yq = split
    X = PCACompressor(16).fit(X).transform(X)
    idx = CancelablePQIndex(m=8, n=8, K=4, sigma_proj=0).fit(X, y)
    _, before = idx.kneighbors(X[:10])
    old = idx.key_.key_id
    idx.revoke(123)
    _, after = idx.kneighbors(X[:10])
    assert idx.key_.key_id != old
    np.testing.assert_array_equal(before, after)  # permutation-only keys do not move distances


def test_index_predict_needs_labels(split):
    with pytest.raises(DataError):
        CancelablePQIndex(m=8, n=8).fit(split[0]).predict(split[0][:1])


def test_pipeline_scores_like_plaintext(split):
    X, y, Q, yq = split
    pipe = make_pipeline(PCACompressor(16), SecureRetriever(m=8, n=8, K=100))
    pipe.fit(X, y)
    pca = pipe[0]
    Xp, Qp = pca.transform(X), pca.transform(Q)
    exact = np.mean(y[(Qp @ Xp.T).argmax(1)] == yq)
    assert pipe.score(Q, yq) == pytest.approx(exact)
