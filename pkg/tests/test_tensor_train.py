import io

import numpy as np
import pytest
import scipy.sparse as sp

from sgtt.tensor_train import (
    TTOperator,
    TensorTrain,
    identity_operator,
    orthogonalize,
    pad_modes,
    slice_modes,
    tt_add,
    tt_apply,
    tt_dot,
    tt_eval,
    tt_from_full,
    tt_max_ranks,
    tt_norm,
    tt_random,
    tt_read,
    tt_round,
    tt_scale,
    tt_write,
)
from oracles import tt_contract_full, ttop_dense


def rank_one_tt(a, b, c):
    return TensorTrain([a[:, None], b[None, :, None], c[None, :, None]])


class TestFromFull:
    def test_all_ones_is_rank_one(self):
        tt = tt_from_full(np.ones((3, 2, 2)), 0.0)
        assert tt.ranks == (1, 1)
        assert np.allclose(tt_contract_full(tt), 1.0, atol=1e-14)

    def test_outer_product_rank_one(self):
        rng = np.random.default_rng(0)
        a, b, c = rng.standard_normal(4), rng.standard_normal(3), rng.standard_normal(5)
        full = np.einsum("i,j,k->ijk", a, b, c)
        tt = tt_from_full(full, 1e-12)
        assert tt.ranks == (1, 1)
        assert np.allclose(tt_contract_full(tt), full, atol=1e-12)

    def test_random_roundtrip(self):
        rng = np.random.default_rng(1)
        full = rng.standard_normal((4, 3, 3))
        tt = tt_from_full(full, 0.0)
        assert np.allclose(tt_contract_full(tt), full, atol=1e-12)

    def test_roundtrip_up_to_five_modes(self):
        rng = np.random.default_rng(2)
        for shape in [(5,), (4, 3), (3, 2, 2), (3, 2, 2, 2), (2, 2, 3, 2, 2)]:
            full = rng.standard_normal(shape)
            tt = tt_from_full(full, 0.0)
            assert np.allclose(tt_contract_full(tt), full, atol=1e-12)

    def test_negative_tol_rejected(self):
        with pytest.raises(ValueError):
            tt_from_full(np.ones((2, 2)), -1.0)


class TestRound:
    def test_padded_rank_one_collapses(self):
        rng = np.random.default_rng(3)
        a, b, c = rng.standard_normal(3), rng.standard_normal(2), rng.standard_normal(2)
        base = rank_one_tt(a, b, c)
        comps = [np.hstack([base.components[0], np.zeros((3, 1))])]
        mid = np.zeros((2, 2, 2))
        mid[0, :, 0] = b
        comps.append(mid)
        comps.append(np.concatenate([c[None, :, None], np.zeros((1, 2, 1))], axis=0))
        padded = TensorTrain(comps)
        rounded, err = tt_round(padded, 1e-12)
        assert rounded.ranks == (1, 1)
        assert err <= 1e-12
        assert np.allclose(tt_contract_full(rounded), tt_contract_full(base), atol=1e-13)

    def test_tol_zero_keeps_values(self):
        tt = tt_random((4, 3, 2), (3, 2), seed=4)
        rounded, err = tt_round(tt, 0.0)
        assert np.allclose(tt_contract_full(rounded), tt_contract_full(tt), atol=1e-13)

    def test_max_ranks_at_current_ranks_is_identity(self):
        tt = tt_random((4, 3, 3), (2, 2), seed=5)
        rounded, _ = tt_round(tt, 0.0, max_ranks=(2, 2))
        assert np.allclose(tt_contract_full(rounded), tt_contract_full(tt), atol=1e-13)

    def test_error_estimate_upper_bounds_truth(self):
        rng = np.random.default_rng(6)
        for trial in range(100):
            dims = (3, 2, 3)
            tt = tt_random(dims, (3, 3), seed=100 + trial)
            target = (rng.integers(1, 3), rng.integers(1, 3))
            rounded, est = tt_round(tt, 0.0, max_ranks=target)
            truth = np.linalg.norm(tt_contract_full(rounded) - tt_contract_full(tt))
            assert truth <= est + 1e-12


class TestEvalAndAlgebra:
    def test_rank_one_eval_is_product(self):
        a = np.array([1.0, 2.0, -1.0])
        b = np.array([0.5, 3.0])
        c = np.array([2.0, -2.0])
        tt = rank_one_tt(a, b, c)
        assert np.isclose(tt_eval(tt, 2, (1, 0)), a[2] * b[1] * c[0])

    def test_eval_matches_contraction(self):
        rng = np.random.default_rng(7)
        tt = tt_random((4, 3, 3), (3, 2), seed=8)
        full = tt_contract_full(tt)
        for _ in range(10):
            i = rng.integers(4)
            mu = (rng.integers(3), rng.integers(3))
            assert np.isclose(tt_eval(tt, i, mu), full[i, mu[0], mu[1]], atol=1e-13)

    def test_dot_vs_dense(self):
        a = tt_random((4, 3, 3), (2, 3), seed=9)
        b = tt_random((4, 3, 3), (3, 2), seed=10)
        dense = float((tt_contract_full(a) * tt_contract_full(b)).sum())
        assert np.isclose(tt_dot(a, b), dense, atol=1e-12 * max(1, abs(dense)))

    def test_dot_left_orthogonal_shortcut(self):
        tt = orthogonalize(tt_random((5, 3, 2), (3, 2), seed=11), "left")
        assert np.isclose(tt_dot(tt, tt), np.linalg.norm(tt.components[0]) ** 2,
                          atol=1e-12)

    def test_add_cancels(self):
        tt = tt_random((4, 2, 2), (2, 2), seed=12)
        zero = tt_add(tt, tt_scale(tt, -1.0))
        assert tt_norm(zero) <= 1e-13 * tt_norm(tt)

    def test_add_ranks_sum(self):
        a = tt_random((4, 2, 3), (2, 2), seed=13)
        b = tt_random((4, 2, 3), (1, 3), seed=14)
        c = tt_add(a, b)
        assert c.ranks == (3, 5)
        assert np.allclose(tt_contract_full(c),
                           tt_contract_full(a) + tt_contract_full(b), atol=1e-13)

    def test_dot_symmetric_bilinear(self):
        a = tt_random((3, 2, 2), (2, 2), seed=15)
        b = tt_random((3, 2, 2), (2, 1), seed=16)
        c = tt_random((3, 2, 2), (1, 2), seed=17)
        assert np.isclose(tt_dot(a, b), tt_dot(b, a), atol=1e-13)
        ab = tt_add(a, b)
        assert np.isclose(tt_dot(ab, c), tt_dot(a, c) + tt_dot(b, c), atol=1e-12)

    def test_dimension_mismatch(self):
        a = tt_random((4, 2, 2), (2, 2), seed=18)
        b = tt_random((4, 3, 2), (2, 2), seed=19)
        with pytest.raises(ValueError):
            tt_dot(a, b)


class TestApply:
    def test_identity_operator(self):
        x = tt_random((5, 3, 2), (2, 2), seed=20)
        y = tt_apply(identity_operator(5, (3, 2)), x)
        assert np.allclose(tt_contract_full(y), tt_contract_full(x), atol=1e-13)

    def test_rank_one_physical_operator(self):
        rng = np.random.default_rng(21)
        mat = rng.standard_normal((5, 5))
        x = tt_random((5, 2, 2), (2, 2), seed=22)
        op = identity_operator(5, (2, 2))
        op.phys[0] = sp.csr_matrix(mat)
        y = tt_apply(op, x)
        expect = np.einsum("ij,jkl->ikl", mat, tt_contract_full(x))
        assert np.allclose(tt_contract_full(y), expect, atol=1e-12)

    def test_apply_matches_dense_kron(self):
        rng = np.random.default_rng(23)
        x = tt_random((8, 2, 2), (2, 2), seed=24)
        phys = [rng.standard_normal((8, 8)) for _ in range(2)]
        cores = [rng.standard_normal((2, 2, 2, 2)), rng.standard_normal((2, 2, 2, 1))]
        op = TTOperator(phys, cores)
        dense_op = ttop_dense(op)
        xx = np.moveaxis(tt_contract_full(x), 0, -1).reshape(-1)
        yy = dense_op @ xx
        y = tt_apply(op, x)
        got = np.moveaxis(tt_contract_full(y), 0, -1).reshape(-1)
        assert np.allclose(got, yy, atol=1e-11)
        assert y.ranks == (4, 4)

    def test_apply_linear(self):
        op_rng = np.random.default_rng(25)
        op = TTOperator([op_rng.standard_normal((4, 4))],
                        [op_rng.standard_normal((1, 3, 3, 1))])
        a = tt_random((4, 3), (2,), seed=26)
        b = tt_random((4, 3), (2,), seed=27)
        lhs = tt_contract_full(tt_apply(op, tt_add(a, b)))
        rhs = tt_contract_full(tt_apply(op, a)) + tt_contract_full(tt_apply(op, b))
        assert np.allclose(lhs, rhs, atol=1e-12)


class TestOrthogonalize:
    def test_values_preserved_both_directions(self):
        tt = tt_random((5, 3, 4), (3, 3), seed=28)
        full = tt_contract_full(tt)
        for direction in ("left", "right"):
            o = orthogonalize(tt, direction)
            assert np.allclose(tt_contract_full(o), full, atol=1e-12)
            assert o.ortho == direction

    def test_idempotent(self):
        tt = tt_random((5, 3, 4), (3, 3), seed=29)
        once = orthogonalize(tt, "left")
        twice = orthogonalize(once, "left")
        assert np.allclose(tt_contract_full(once), tt_contract_full(twice), atol=1e-13)

    def test_norm_invariant(self):
        tt = tt_random((5, 3, 4), (2, 2), seed=30)
        dense = np.linalg.norm(tt_contract_full(tt))
        assert np.isclose(tt_norm(tt), dense, atol=1e-12 * max(1.0, dense))
        assert np.isclose(tt_norm(orthogonalize(tt, "right")), dense,
                          atol=1e-12 * max(1.0, dense))

    def test_left_orthogonality_identity(self):
        tt = orthogonalize(tt_random((5, 3, 4), (3, 3), seed=31), "left")
        for core in tt.components[1:]:
            r0 = core.shape[0]
            mat = core.reshape(r0, -1)
            assert np.allclose(mat @ mat.T, np.eye(r0), atol=1e-13)

    def test_eval_preserved_at_every_index(self):
        tt = tt_random((3, 2, 2), (2, 2), seed=32)
        o = orthogonalize(tt, "left")
        for i in range(3):
            for mu in np.ndindex(2, 2):
                assert np.isclose(tt_eval(tt, i, mu), tt_eval(o, i, mu), atol=1e-13)


class TestRandomPadSlice:
    def test_seed_reproducible(self):
        a = tt_random((4, 3, 2), (2, 2), seed=33)
        b = tt_random((4, 3, 2), (2, 2), seed=33)
        c = tt_random((4, 3, 2), (2, 2), seed=34)
        for x, y in zip(a.components, b.components):
            assert np.array_equal(x, y)
        assert tt_norm(tt_add(a, tt_scale(c, -1.0))) > 0.0

    def test_requested_ranks_respected(self):
        tt = tt_random((4, 3, 2, 2), (3, 4, 2), seed=35)
        assert tt.ranks == (3, 4, 2)

    def test_pad_and_slice(self):
        tt = tt_random((4, 2, 2), (2, 2), seed=36)
        padded = pad_modes(tt, (4, 3))
        assert padded.dims == (4, 3)
        full = tt_contract_full(padded)
        assert np.allclose(full[:, :2, :2], tt_contract_full(tt), atol=1e-14)
        assert np.allclose(full[:, 2:, :], 0.0)
        back = slice_modes(padded, (2, 2))
        assert np.allclose(tt_contract_full(back), tt_contract_full(tt), atol=1e-14)

    def test_max_ranks(self):
        assert tt_max_ranks((5, 2, 3)) == (5, 3)
        assert tt_max_ranks((2, 4, 3)) == (2, 3)


class TestSerialization:
    def test_roundtrip(self):
        tt = tt_random((4, 3, 2), (2, 3), seed=37)
        buf = io.StringIO()
        tt_write(tt, buf)
        buf.seek(0)
        back = tt_read(buf)
        assert back.dims == tt.dims and back.ranks == tt.ranks
        assert np.allclose(tt_contract_full(back), tt_contract_full(tt), atol=0.0)

    def test_m_zero_roundtrip(self):
        tt = TensorTrain([np.arange(5.0)[:, None]])
        buf = io.StringIO()
        tt_write(tt, buf)
        buf.seek(0)
        back = tt_read(buf)
        assert np.array_equal(back.components[0], tt.components[0])
