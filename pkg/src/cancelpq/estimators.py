"""scikit-learn style wrappers around the pipeline stages.

These compose with ``sklearn.pipeline.Pipeline`` and ``clone``; every
hyperparameter lives in ``__init__`` and learned state gets a trailing
underscore.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import cancelable, pq_index, secure_rank
from .embed_io import EmbeddingSet, apply_pca, fit_pca, l2_normalize
from .exceptions import DataError, ParameterError


def _as_set(X, y=None):
    X = check_array(X, dtype=np.float32)
    return EmbeddingSet(X, None if y is None else np.asarray(y))


class PCACompressor(BaseEstimator, TransformerMixin):
    """PCA without whitening, optionally re-normalizing the output rows."""

    def __init__(self, n_components=128, normalize=True):
        self.n_components = n_components
        self.normalize = normalize

    def fit(self, X, y=None):
        self.model_ = fit_pca(_as_set(X), self.n_components)
        self.n_features_in_ = self.model_.input_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        out = apply_pca(self.model_, _as_set(X))
        if self.normalize:
            out = l2_normalize(out)
        return out.vectors.astype(np.float64)

    def inverse_transform(self, Y):
        check_is_fitted(self, "model_")
        return self.model_.reconstruct(check_array(Y))


class ProductQuantizer(BaseEstimator, TransformerMixin):
    """Plain PQ. ``transform`` returns codes, ``inverse_transform`` decodes them."""

    def __init__(self, m=64, n=64, random_state=0):
        self.m = m
        self.n = n
        self.random_state = random_state

    def fit(self, X, y=None):
        self.codebook_ = pq_index.train_codebook(_as_set(X), self.m, self.n, self.random_state)
        self.table_ = pq_index.build_distance_table(self.codebook_)
        self.n_features_in_ = self.codebook_.dim
        return self

    def transform(self, X):
        check_is_fitted(self, "codebook_")
        return pq_index.quantize_batch(self.codebook_, check_array(X, dtype=np.float32))

    def inverse_transform(self, codes):
        check_is_fitted(self, "codebook_")
        codes = np.asarray(codes, dtype=np.int64)
        cb = self.codebook_
        return cb.centroids[np.arange(cb.m)[None, :], codes].reshape(len(codes), -1).astype(np.float64)


class CancelablePQIndex(BaseEstimator):
    """Key-protected PQ index with Top-K search.

    ``fit`` trains the codebook on ``X``, derives a key from ``key_seed`` and
    indexes ``X``. ``revoke`` reissues the key and rebuilds the index without
    retraining.
    """

    def __init__(self, m=64, n=64, K=5, sigma_proj=cancelable.DEFAULT_SIGMA_PROJ, key_seed=0,
                 permute=True, random_state=0):
        self.m = m
        self.n = n
        self.K = K
        self.sigma_proj = sigma_proj
        self.key_seed = key_seed
        self.permute = permute
        self.random_state = random_state

    def fit(self, X, y=None):
        s = _as_set(X, y)
        self.codebook_ = pq_index.train_codebook(s, self.m, self.n, self.random_state)
        self.table_ = pq_index.build_distance_table(self.codebook_)
        self.labels_ = None if y is None else np.asarray(y)
        self._index(s, self.key_seed)
        self.n_features_in_ = s.dim
        return self

    def _index(self, s, seed):
        cb = self.codebook_
        self.key_ = cancelable.keygen(seed, cb.m, cb.n, cb.d_sub, self.sigma_proj, permute=self.permute)
        self.pcb_ = cancelable.protect(cb, self.table_, self.key_)
        self.index_ = cancelable.build_protected_index(s, self.pcb_, self.key_)
        self._data = s

    def revoke(self, new_seed):
        check_is_fitted(self, "index_")
        self._index(self._data, new_seed)
        return self

    def kneighbors(self, X, n_neighbors=None):
        """``(distances, ids)``, each ``(len(X), min(K, N))``."""
        check_is_fitted(self, "index_")
        K = self.K if n_neighbors is None else n_neighbors
        X = check_array(X, dtype=np.float32)
        codes = cancelable.secure_quantize_batch(self.pcb_, self.key_, X)
        dist, ids = [], []
        for c in codes:
            cl = cancelable.cancelable_topk(self.index_, pq_index.PqCode(c, self.key_.key_id), K)
            dist.append(cl.distances)
            ids.append(cl.ids)
        return np.array(dist), np.array(ids)

    def predict(self, X):
        if getattr(self, "labels_", None) is None:
            raise DataError("predict needs labels passed to fit")
        return self.labels_[self.kneighbors(X, 1)[1][:, 0]]


class SecureRetriever(BaseEstimator):
    """Cancelable Top-K filtering followed by encrypted re-ranking.

    Inputs are expected to be unit-norm (for example the output of
    :class:`PCACompressor`). ``predict`` returns the label of the best
    re-ranked candidate; ``score`` is Recall@1.
    """

    def __init__(self, m=64, n=64, K=5, sigma_proj=cancelable.DEFAULT_SIGMA_PROJ, key_seed=0,
                 backend="sim", random_state=0):
        self.m = m
        self.n = n
        self.K = K
        self.sigma_proj = sigma_proj
        self.key_seed = key_seed
        self.backend = backend
        self.random_state = random_state

    def fit(self, X, y):
        if y is None:
            raise ParameterError("SecureRetriever needs labels")
        self.index_ = CancelablePQIndex(self.m, self.n, self.K, self.sigma_proj, self.key_seed,
                                        random_state=self.random_state).fit(X, y)
        self.labels_ = np.asarray(y)
        backend = secure_rank.get_backend(self.backend)
        idx = self.index_
        self.roles_ = secure_rank.setup_roles(backend, idx._data.vectors, seed=self.key_seed,
                                              pindex=idx.index_, cancel_key=idx.key_, record=False)
        self.n_features_in_ = idx.n_features_in_
        return self

    def rank(self, x):
        check_is_fitted(self, "roles_")
        return secure_rank.secure_search(self.roles_, np.asarray(x, dtype=np.float32), self.K)

    def predict(self, X):
        X = check_array(X, dtype=np.float32)
        return np.array([self.labels_[self.rank(x).top] for x in X])

    def score(self, X, y):
        return float(np.mean(self.predict(X) == np.asarray(y)))
