"""Cancelable product-quantization retrieval with encrypted re-ranking."""

from .cancelable import (CancelKey, ProtectedCodebook, ProtectedIndex, build_protected_index,
                         cancelable_topk, keygen, log2_bruteforce_cost, protect, revoke_and_reissue,
                         secure_quantize)
from .embed_io import (EmbeddingSet, PcaModel, SyntheticSpec, apply_pca, fit_pca, gen_synthetic,
                       l2_normalize, load_evec, write_evec)
from .estimators import CancelablePQIndex, PCACompressor, ProductQuantizer, SecureRetriever
from .exceptions import (AuthorizationError, CancelPQError, CapacityError, DataError, FormatError,
                         KeyMismatchError, ParameterError, StateError)
from .pq_index import (DistanceTable, PqCode, PqCodebook, PqIndex, build_distance_table, build_index,
                       pq_distance, quantize, topk_filter, train_codebook)

__version__ = "0.1.0"
