"""Joint assembly, permutation and BTA scatter against dense oracles."""

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import make_spec, random_spd_sparse
from stinla.bta import BTAMatrix
from stinla.coreg import (
    Coregionalization,
    EnvelopeError,
    PermutationMap,
    assemble_joint_precision,
    build_permutation,
    coupling_positions,
    map_to_bta,
)
from stinla.model import UnivariateHypers, build_univariate_prior


def closed_form_trivariate(q1, q2, q3, sig, lam):
    """Hard-coded 3x3 block closed form of the joint precision."""
    s1, s2, s3 = sig
    l1, l2, l3 = lam
    b = {}
    b[0, 0] = q1 / s1**2 + (l1**2 / s2**2) * q2 + (l3**2 / s3**2) * q3
    b[0, 1] = -(l1 / s2**2) * q2 + (l2 * l3 / s3**2) * q3
    b[0, 2] = -(l3 / s3**2) * q3
    b[1, 1] = q2 / s2**2 + (l2**2 / s3**2) * q3
    b[1, 2] = -(l2 / s3**2) * q3
    b[2, 2] = q3 / s3**2
    rows = []
    for i in range(3):
        rows.append([b[min(i, j), max(i, j)].T if j < i else b[i, j] for j in range(3)])
    return np.block([[blk if isinstance(blk, np.ndarray) else blk for blk in row] for row in rows])


def mixing_oracle(sig, lam):
    """Mixing coefficients built from the row recursion, independent of the
    triangular-substitution implementation."""
    n = len(sig)
    lam_iter = iter(lam)
    rows = np.zeros((n, n))
    rows[0, 0] = sig[0]
    for i in range(1, n):
        row = np.zeros(n)
        row[i] = sig[i]
        for j in range(i - 1, -1, -1):
            row += next(lam_iter) * rows[j]
        rows[i] = row
    return rows


class TestCoregionalization:
    def test_coupling_positions_trivariate(self):
        assert coupling_positions(3) == [(1, 0), (2, 1), (2, 0)]

    def test_mixing_matches_row_recursion_oracle(self, rng):
        for n in (1, 2, 3, 4):
            sig = rng.uniform(0.5, 2.0, size=n)
            lam = rng.normal(size=n * (n - 1) // 2)
            coreg = Coregionalization(sig, lam)
            np.testing.assert_allclose(coreg.mixing(), mixing_oracle(sig, lam), atol=1e-12)
            np.testing.assert_allclose(
                coreg.mixing() @ coreg.mixing_inverse(), np.eye(n), atol=1e-12
            )

    def test_non_positive_scale_rejected(self):
        with pytest.raises(ValueError):
            Coregionalization([1.0, -0.5], [0.3])


class TestAssembleJointPrecision:
    def test_single_process_scaling(self, rng):
        q = random_spd_sparse(rng, 5)
        out = assemble_joint_precision([q], Coregionalization([2.0], []))
        np.testing.assert_allclose(out.toarray(), 0.25 * q.toarray(), atol=1e-14)

    def test_decoupled_processes_block_diagonal(self, rng):
        qs = [random_spd_sparse(rng, 4) for _ in range(3)]
        out = assemble_joint_precision(qs, Coregionalization(np.ones(3), np.zeros(3)))
        expected = sp.block_diag(qs).toarray()
        np.testing.assert_allclose(out.toarray(), expected, atol=1e-14)

    def test_off_diagonal_block_closed_form(self, rng):
        qs = [random_spd_sparse(rng, 3) for _ in range(3)]
        sig = rng.uniform(0.5, 2.0, size=3)
        lam = rng.normal(size=3)
        out = assemble_joint_precision(qs, Coregionalization(sig, lam)).toarray()
        block_01 = out[0:3, 3:6]
        expected = (
            -(lam[0] / sig[1] ** 2) * qs[1].toarray()
            + (lam[1] * lam[2] / sig[2] ** 2) * qs[2].toarray()
        )
        np.testing.assert_allclose(block_01, expected, atol=1e-12)

    def test_all_nine_blocks_match_closed_form(self, rng):
        qs = [random_spd_sparse(rng, 3).toarray() for _ in range(3)]
        sig = rng.uniform(0.5, 2.0, size=3)
        lam = rng.normal(size=3)
        out = assemble_joint_precision(
            [sp.csr_matrix(q) for q in qs], Coregionalization(sig, lam)
        ).toarray()
        expected = closed_form_trivariate(*qs, sig, lam)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_covariance_duality_dense_oracle(self, rng):
        # the inverse of the assembled precision equals the mixed covariance
        qs = [random_spd_sparse(rng, 4) for _ in range(3)]
        sig = rng.uniform(0.5, 2.0, size=3)
        lam = rng.normal(size=3)
        coreg = Coregionalization(sig, lam)
        joint = assemble_joint_precision(qs, coreg).toarray()
        mix = np.kron(mixing_oracle(sig, lam), np.eye(4))
        cov = mix @ sp.block_diag([np.linalg.inv(q.toarray()) for q in qs]) @ mix.T
        np.testing.assert_allclose(np.linalg.inv(joint), cov, atol=1e-10)

    def test_pattern_is_parameter_independent(self, rng):
        qs = [random_spd_sparse(rng, 4) for _ in range(2)]
        a = assemble_joint_precision(qs, Coregionalization([1.0, 1.0], [0.0]))
        b = assemble_joint_precision(qs, Coregionalization([0.7, 1.3], [0.9]))
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.indptr, b.indptr)


class TestPermutation:
    def test_forward_index_examples(self):
        pmap = PermutationMap(n_processes=2, n_spatial=2, n_time=2, n_fixed=1)
        # (process 1, time 0, space 0): old 5 -> new 2
        assert pmap.forward[5] == 2
        # fixed effect (process 0, effect 0): old 4 -> new 8
        assert pmap.forward[4] == 8
        assert sorted(pmap.forward) == list(range(10))

    def test_envelope_dimensions(self):
        spec = make_spec(n_processes=3, n_spatial=4, n_time=5, n_fixed=2)
        pmap = build_permutation(spec)
        assert (pmap.n_blocks, pmap.block_size, pmap.arrow_size) == (5, 12, 6)
        assert pmap.n_blocks * pmap.block_size + pmap.arrow_size == spec.joint_dim

    def test_similarity_transform_dense_oracle(self, rng):
        spec = make_spec(n_processes=3, n_spatial=2, n_time=3, n_fixed=1)
        qs = [
            build_univariate_prior(spec, UnivariateHypers(0.2 * i, -0.1), i)
            for i in range(3)
        ]
        joint = assemble_joint_precision(
            qs, Coregionalization(rng.uniform(0.5, 2, 3), rng.normal(size=3))
        )
        pmap = build_permutation(spec)
        permuted = pmap.permuted_matrix(joint).toarray()
        eig_a = np.sort(np.linalg.eigvalsh(joint.toarray()))
        eig_b = np.sort(np.linalg.eigvalsh(permuted))
        np.testing.assert_allclose(eig_a, eig_b, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(
            np.linalg.slogdet(permuted)[1],
            np.linalg.slogdet(joint.toarray())[1],
            rtol=1e-9,
        )

    def test_vector_round_trip(self, rng):
        pmap = PermutationMap(2, 3, 4, 1)
        x = rng.normal(size=pmap.dim)
        np.testing.assert_array_equal(pmap.restore_vector(pmap.permute_vector(x)), x)


class TestMapToBTA:
    def test_identity_fills_diagonal_blocks(self):
        pmap = PermutationMap(2, 2, 3, 1)
        ws = BTAMatrix(pmap.n_blocks, pmap.block_size, pmap.arrow_size)
        map_to_bta(sp.identity(pmap.dim, format="csr"), pmap, ws)
        np.testing.assert_array_equal(ws.to_dense(), np.eye(pmap.dim))

    def test_round_trip_reproduces_permuted_matrix(self, rng):
        spec = make_spec(n_processes=3, n_spatial=2, n_time=3, n_fixed=1, m_per_process=5)
        qs = [build_univariate_prior(spec, UnivariateHypers(0.1, 0.0), i) for i in range(3)]
        joint = assemble_joint_precision(
            qs, Coregionalization(rng.uniform(0.5, 2, 3), rng.normal(size=3))
        )
        a = sp.block_diag(spec.design, format="csr")
        noise = np.concatenate([np.full(5, 1.7) for _ in range(3)])
        cond = joint + (a.T @ sp.diags(noise) @ a)
        cond = ((cond + cond.T) * 0.5).tocsr()
        pmap = build_permutation(spec)
        ws = BTAMatrix(pmap.n_blocks, pmap.block_size, pmap.arrow_size)
        map_to_bta(cond, pmap, ws)
        assert (pmap.n_blocks, pmap.block_size, pmap.arrow_size) == (3, 6, 3)
        oracle = pmap.permuted_matrix(cond).toarray()
        np.testing.assert_allclose(ws.to_dense(), oracle, atol=1e-14)

    def test_scatter_is_deterministic(self, rng):
        spec = make_spec(n_processes=2, n_spatial=2, n_time=3, n_fixed=1)
        qs = [build_univariate_prior(spec, UnivariateHypers(0.3, 0.1), i) for i in range(2)]
        joint = assemble_joint_precision(qs, Coregionalization([1.0, 2.0], [0.4]))
        pmap = build_permutation(spec)
        ws1 = BTAMatrix(pmap.n_blocks, pmap.block_size, pmap.arrow_size)
        ws2 = BTAMatrix(pmap.n_blocks, pmap.block_size, pmap.arrow_size)
        map_to_bta(joint, pmap, ws1)
        map_to_bta(joint, pmap, ws2)
        assert np.array_equal(ws1.data, ws2.data)

    def test_workspace_reuse_after_factorization_is_clean(self, rng):
        from stinla.bta import factorize

        spec = make_spec(n_processes=2, n_spatial=2, n_time=3, n_fixed=1)
        qs = [build_univariate_prior(spec, UnivariateHypers(0.3, 0.1), i) for i in range(2)]
        joint = assemble_joint_precision(qs, Coregionalization([1.0, 2.0], [0.4]))
        pmap = build_permutation(spec)
        ws = BTAMatrix(pmap.n_blocks, pmap.block_size, pmap.arrow_size)
        map_to_bta(joint, pmap, ws)
        reference = ws.data.copy()
        factorize(ws)  # destroys the workspace values in place
        map_to_bta(joint, pmap, ws)
        assert np.array_equal(ws.data, reference)

    def test_nonzero_outside_envelope_raises(self):
        pmap = PermutationMap(1, 2, 3, 0)
        dense = np.eye(pmap.dim)
        dense[0, 5] = dense[5, 0] = 1.0  # couples time blocks 0 and 2
        ws = BTAMatrix(pmap.n_blocks, pmap.block_size, pmap.arrow_size)
        with pytest.raises(EnvelopeError):
            map_to_bta(sp.csr_matrix(dense), pmap, ws)
