import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cancelpq.cancelable import (CancelKey, ProtectedIndex, build_protected_index, cancelable_topk,
                                 dumps_key, dumps_protected_index, fisher_yates, identity_key, keygen,
                                 loads_key, loads_protected_index, log2_bruteforce_cost, project, protect,
                                 reconstruct, revoke_and_reissue, secure_quantize, secure_quantize_batch)
from cancelpq.embed_io import EmbeddingSet
from cancelpq.exceptions import AuthorizationError, FormatError, ParameterError
from cancelpq.pq_index import (PqCode, PqCodebook, build_distance_table, build_index, pq_distance,
                               quantize, quantize_batch, topk_filter, train_codebook)

from conftest import unit_rows

M, N, D = 4, 8, 3


@pytest.fixture
def model(rng):
    cb = PqCodebook(rng.standard_normal((M, N, D)))
    return cb, build_distance_table(cb)


class TestKeygen:
    def test_zero_sigma_gives_identity(self):
        k = keygen(5, M, N, D, sigma_proj=0)
        assert np.array_equal(k.projs, np.broadcast_to(np.eye(D, dtype=np.float32), (M, D, D)))

    def test_perms_are_bijections(self):
        k = keygen(5, 64, 64, 2)
        assert all(np.array_equal(np.sort(p), np.arange(64)) for p in k.perms)

    def test_deterministic(self):
        a, b = keygen(2**200 + 7, M, N, D), keygen(2**200 + 7, M, N, D)
        assert a.key_id == b.key_id
        assert dumps_key(a) == dumps_key(b)

    def test_projection_is_perturbed_identity(self):
        k = keygen(1, 64, 8, 16, sigma_proj=1e-2)
        g = (k.projs - np.eye(16)).ravel()
        assert abs(g.std() - 1e-2) < 5e-4
        assert abs(g.mean()) < 5e-4

    def test_no_collisions_over_100_seed_pairs(self):
        ids = {keygen(s, 64, 64, 2).perms.tobytes() for s in range(200)}
        assert len(ids) == 200

    def test_fisher_yates_uniform_on_three(self):
        counts = {}
        rng = np.random.default_rng(0)
        for _ in range(6000):
            p = tuple(fisher_yates(3, rng))
            counts[p] = counts.get(p, 0) + 1
        assert len(counts) == 6
        assert min(counts.values()) > 850

    def test_rejects_bad_params(self):
        with pytest.raises(ParameterError):
            keygen(1, 0, N, D)
        with pytest.raises(ParameterError):
            keygen(1, M, N, D, sigma_proj=-1)
        with pytest.raises(ParameterError):
            keygen(b"short", M, N, D)

    def test_rejects_non_bijection(self):
        with pytest.raises(ParameterError):
            CancelKey(1, 3, 1, 0.0, [[0, 0, 1]], [[[1.0]]])


class TestProtect:
    def test_identity_key_is_noop(self, model):
        cb, t = model
        pcb = protect(cb, t, identity_key(M, N, D))
        np.testing.assert_array_equal(pcb.centroids, cb.centroids)
        np.testing.assert_array_equal(pcb.table.table, t.table)

    def test_table_conjugation(self, model):
        cb, t = model
        k = keygen(3, M, N, D)
        tp = protect(cb, t, k).table.table
        for j in range(M):
            s = k.perms[j]
            for a in range(N):
                for b in range(N):
                    assert tp[j, s[a], s[b]] == t.table[j, a, b]

    def test_invariants_after_protect(self, model):
        cb, t = model
        pcb = protect(cb, t, keygen(4, M, N, D))
        tp = pcb.table.table
        np.testing.assert_array_equal(tp, tp.transpose(0, 2, 1))
        assert np.all(tp[:, np.arange(N), np.arange(N)] == 0)
        for j in range(M):
            assert sorted(map(tuple, pcb.centroids[j])) == sorted(map(tuple, cb.centroids[j]))

    def test_original_unchanged(self, model):
        cb, t = model
        before = cb.centroids.copy()
        protect(cb, t, keygen(4, M, N, D))
        np.testing.assert_array_equal(cb.centroids, before)

    def test_composition(self, model):
        cb, t = model
        k1, k2 = keygen(1, M, N, D, 0), keygen(2, M, N, D, 0)
        twice = protect(protect(cb, t, k1).codebook, protect(cb, t, k1).table, k2)
        composed = k2.perms[np.arange(M)[:, None], k1.perms]  # a -> p2[p1[a]]
        kc = CancelKey(M, N, D, 0.0, composed, k1.projs)
        once = protect(cb, t, kc)
        np.testing.assert_array_equal(twice.centroids, once.centroids)
        np.testing.assert_array_equal(twice.table.table, once.table.table)

    def test_shape_mismatch(self, model):
        cb, t = model
        with pytest.raises(ParameterError):
            protect(cb, t, keygen(1, M, N + 1, D))


class TestSecureQuantize:
    def test_identity_key_equals_plain(self, model, rng):
        cb, t = model
        k = identity_key(M, N, D)
        pcb = protect(cb, t, k)
        for x in rng.standard_normal((50, M * D)):
            assert np.array_equal(secure_quantize(pcb, k, x).codes, quantize(cb, x).codes)

    @given(st.integers(0, 2**64 - 1))
    def test_permutation_only_relabels(self, seed):
        rng = np.random.default_rng(seed % 1000)
        cb = PqCodebook(rng.standard_normal((M, N, D)))
        k = keygen(seed, M, N, D, sigma_proj=0)
        pcb = protect(cb, build_distance_table(cb), k)
        x = rng.standard_normal(M * D)
        plain = quantize(cb, x).codes
        assert np.array_equal(secure_quantize(pcb, k, x).codes, k.perms[np.arange(M), plain])

    def test_projected_matches_brute_force(self, model, rng):
        cb, t = model
        k = keygen(9, M, N, D, 2e-3)
        pcb = protect(cb, t, k)
        c = pcb.centroids.astype(np.float64)
        for x in rng.standard_normal((30, M * D)).astype(np.float32):
            code = secure_quantize(pcb, k, x).codes
            for j in range(M):
                y = x[j * D:(j + 1) * D].astype(np.float64) @ k.projs[j].astype(np.float64)
                d = ((y - c[j]) ** 2).sum(1)
                assert code[j] == int(np.argmin(d))

    def test_wrong_key_refused(self, model):
        cb, t = model
        pcb = protect(cb, t, keygen(1, M, N, D))
        with pytest.raises(AuthorizationError):
            secure_quantize(pcb, keygen(2, M, N, D), np.zeros(M * D))

    def test_code_carries_key_id(self, model):
        cb, t = model
        k = keygen(1, M, N, D)
        assert secure_quantize(protect(cb, t, k), k, np.zeros(M * D)).key_id == k.key_id

    def test_projection_distortion_bound(self):
        # relative change in squared distance between random unit sub-vector pairs
        d_sub = 2
        rng = np.random.default_rng(0)
        a, b = unit_rows(rng, 100_000, d_sub), unit_rows(rng, 100_000, d_sub)
        for sigma in (1e-4, 2e-3, 5e-3):
            k = keygen(3, 1, 2, d_sub, sigma)
            ra, rb = project(k, a), project(k, b)
            before = ((a - b) ** 2).sum(1)
            after = ((ra - rb) ** 2).sum(1)
            rel = np.abs(after - before) / before
            assert np.quantile(rel, 0.99) <= 10 * sigma * np.sqrt(d_sub)


class TestProtectedIndex:
    def test_empty(self, model):
        cb, t = model
        k = keygen(1, M, N, D)
        assert len(build_protected_index(EmbeddingSet(np.zeros((0, M * D))), protect(cb, t, k), k)) == 0

    def test_codes_recomputable(self, model, rng):
        cb, t = model
        k = keygen(1, M, N, D)
        pcb = protect(cb, t, k)
        x = rng.standard_normal((1000, M * D))
        pidx = build_protected_index(EmbeddingSet(x), pcb, k)
        for i in range(0, 1000, 53):
            assert np.array_equal(pidx.codes[i], secure_quantize(pcb, k, x[i]).codes)

    def test_permutation_only_matches_plain(self, model, rng):
        cb, t = model
        k = keygen(7, M, N, D, sigma_proj=0)
        pcb = protect(cb, t, k)
        s = EmbeddingSet(rng.standard_normal((300, M * D)))
        plain = build_index(cb, t, s)
        prot = build_protected_index(s, pcb, k)
        np.testing.assert_array_equal(prot.codes, k.perms[np.arange(M)[None], plain.codes])
        for x in rng.standard_normal((50, M * D)):
            a = topk_filter(plain, quantize(cb, x), 7)
            b = cancelable_topk(prot, secure_quantize(pcb, k, x), 7)
            assert a.ids.tobytes() == b.ids.tobytes()
            assert a.distances.tobytes() == b.distances.tobytes()

    def test_full_scan_oracle(self, model, rng):
        cb, t = model
        k = keygen(8, M, N, D)
        pcb = protect(cb, t, k)
        pidx = build_protected_index(EmbeddingSet(rng.standard_normal((200, M * D))), pcb, k)
        for x in rng.standard_normal((10, M * D)):
            q = secure_quantize(pcb, k, x)
            full = sorted((pq_distance(pcb.table, q.codes, c), i) for i, c in enumerate(pidx.codes))
            assert cancelable_topk(pidx, q, 5).ids.tolist() == [i for _, i in full[:5]]
            assert cancelable_topk(pidx, q, 500).ids.tolist() == [i for _, i in full]

    def test_unbound_or_foreign_codes_refused(self, model, rng):
        cb, t = model
        k = keygen(1, M, N, D)
        pidx = build_protected_index(EmbeddingSet(rng.standard_normal((5, M * D))), protect(cb, t, k), k)
        with pytest.raises(AuthorizationError):
            cancelable_topk(pidx, PqCode([0] * M), 1)
        with pytest.raises(AuthorizationError):
            cancelable_topk(pidx, PqCode([0] * M, keygen(2, M, N, D).key_id), 1)


class TestRevoke:
    def test_same_seed_same_key(self, model, rng):
        cb, t = model
        s = EmbeddingSet(rng.standard_normal((20, M * D)))
        k1, i1 = revoke_and_reissue(s, cb, t, 42)
        k2, i2 = revoke_and_reissue(s, cb, t, 42)
        assert k1.key_id == k2.key_id
        assert dumps_protected_index(i1) == dumps_protected_index(i2)

    def test_new_seed_invalidates_old_codes(self, model, rng):
        cb, t = model
        s = EmbeddingSet(rng.standard_normal((20, M * D)))
        k1, i1 = revoke_and_reissue(s, cb, t, 1)
        k2, i2 = revoke_and_reissue(s, cb, t, 2)
        assert k1.key_id != k2.key_id
        with pytest.raises(AuthorizationError):
            cancelable_topk(i2, i1.code(0), 1)

    def test_accuracy_survives_reissue(self, bench_data, bench_cache):
        gallery, probes = bench_data
        key = ("codebook-test",)
        if key not in bench_cache:
            cb = train_codebook(gallery, 64, 64, 0)
            bench_cache[key] = (cb, build_distance_table(cb))
        cb, t = bench_cache[key]

        def recall(seed):
            k, pidx = revoke_and_reissue(gallery, cb, t, seed)
            codes = secure_quantize_batch(pidx.pcb, k, probes.vectors)
            top = [cancelable_topk(pidx, PqCode(c, k.key_id), 1).ids[0] for c in codes]
            return np.mean(gallery.labels[top] == probes.labels)

        before = np.mean([recall(s) for s in range(5)])
        after = np.mean([recall(s) for s in range(100, 105)])
        assert abs(before - after) <= 0.01


class TestReconstruct:
    def test_exact_centroid_under_identity(self, model):
        cb, t = model
        k = identity_key(M, N, D)
        pcb = protect(cb, t, k)
        x = np.concatenate([cb.centroids[j, (j * 3) % N] for j in range(M)])
        np.testing.assert_array_equal(reconstruct(pcb, secure_quantize(pcb, k, x)), x)

    def test_round_trip_under_permutation(self, model):
        cb, t = model
        k = keygen(5, M, N, D, 0)
        pcb = protect(cb, t, k)
        x = np.concatenate([cb.centroids[j, (j + 5) % N] for j in range(M)])
        np.testing.assert_array_equal(reconstruct(pcb, secure_quantize(pcb, k, x)), x)

    def test_error_bounded_by_radius(self, model, rng):
        cb, t = model
        k = identity_key(M, N, D)
        pcb = protect(cb, t, k)
        x = rng.standard_normal((200, M * D)).astype(np.float32)
        codes = quantize_batch(cb, x)
        sub = x.reshape(200, M, D).astype(np.float64)
        near = cb.centroids[np.arange(M)[None], codes].astype(np.float64)
        radii = np.sqrt(((sub - near) ** 2).sum(-1)).max(0)
        for i in range(200):
            err = np.linalg.norm(reconstruct(pcb, codes[i]) - x[i])
            assert err <= radii.max() * np.sqrt(M) + 1e-9

    def test_out_of_range(self, model):
        cb, t = model
        with pytest.raises(ParameterError):
            reconstruct(protect(cb, t, identity_key(M, N, D)), [N] * M)


class TestBruteForceCost:
    def test_matches_exact_integer(self):
        # exact oracle: bit length of the integer (64!)^64
        exact = math.factorial(64) ** 64
        got = log2_bruteforce_cost(64, 64)
        assert exact.bit_length() - 1 <= got < exact.bit_length()
        assert got == pytest.approx(math.log2(exact), rel=1e-12)
        assert round(got, 2) == 18943.69

    def test_small_case(self):
        assert log2_bruteforce_cost(2, 3) == pytest.approx(3.0)


class TestSerialization:
    def test_key_round_trip(self):
        k = keygen(11, M, N, D, 3e-3)
        back = loads_key(dumps_key(k))
        assert back.key_id == k.key_id
        np.testing.assert_array_equal(back.perms, k.perms)
        np.testing.assert_array_equal(back.projs, k.projs)

    def test_tampered_key_detected(self):
        data = bytearray(dumps_key(keygen(11, M, N, D)))
        data[-1] ^= 1
        with pytest.raises(FormatError, match="key_id"):
            loads_key(bytes(data))

    def test_index_round_trip(self, model, rng):
        cb, t = model
        k = keygen(1, M, N, D)
        pidx = build_protected_index(EmbeddingSet(rng.standard_normal((9, M * D))), protect(cb, t, k), k)
        back = loads_protected_index(dumps_protected_index(pidx))
        assert isinstance(back, ProtectedIndex)
        assert back.key_id == k.key_id
        np.testing.assert_array_equal(back.codes, pidx.codes)
