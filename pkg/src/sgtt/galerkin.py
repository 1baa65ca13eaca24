"""Stochastic index sets, orthonormal Legendre machinery, triple products,
TT Galerkin operator/right-hand side assembly and the rank-1 preconditioner."""

from __future__ import annotations

import numpy as np
import scipy.sparse.linalg as spla

from .mesh import assemble_bilinear_p0, assemble_load_p0
from .tensor_train import TensorTrain, TTOperator, tt_add, tt_apply, tt_dot, tt_round


def legendre_orthonormal(n, x):
    """Legendre polynomial of degree n, orthonormal w.r.t. the uniform measure
    lambda/2 on [-1, 1]: value sqrt(2n+1) * P_n(x)."""
    x = np.asarray(x, dtype=float)
    if n == 0:
        vals = np.ones_like(x)
    elif n == 1:
        vals = x.copy()
    else:
        p_prev, p = np.ones_like(x), x.copy()
        for k in range(1, n):
            p_prev, p = p, ((2 * k + 1) * x * p - k * p_prev) / (k + 1)
        vals = p
    out = np.sqrt(2.0 * n + 1.0) * vals
    return float(out) if out.ndim == 0 else out


def legendre_block(max_degree, x):
    """Table of orthonormal Legendre values, shape (len(x), max_degree)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty((len(x), max_degree))
    if max_degree > 0:
        out[:, 0] = 1.0
    if max_degree > 1:
        out[:, 1] = x
    p_prev, p = np.ones_like(x), x.copy()
    for n in range(2, max_degree):
        p_prev, p = p, ((2 * n - 1) * x * p - (n - 1) * p_prev) / n
        out[:, n] = p
    out *= np.sqrt(2.0 * np.arange(max_degree) + 1.0)
    return out


def triple_product(a, b, c):
    """Integral of three orthonormal Legendre polynomials against lambda/2.

    Exact Gauss-Legendre quadrature; zero for odd total degree or when the
    triangle inequality fails.
    """
    if min(a, b, c) < 0:
        raise ValueError("degrees must be nonnegative")
    if (a + b + c) % 2 == 1:
        return 0.0
    hi, lo = max(a, b, c), a + b + c - max(a, b, c)
    if hi > lo:
        return 0.0
    nodes, weights = np.polynomial.legendre.leggauss((a + b + c) // 2 + 1)
    vals = (legendre_orthonormal(a, nodes) * legendre_orthonormal(b, nodes)
            * legendre_orthonormal(c, nodes))
    return float((weights * vals).sum() / 2.0)


def triple_product_table(n_test, n_data, n_trial):
    """beta[nu, mu, kappa] for nu < n_test, mu < n_data, kappa < n_trial."""
    beta = np.zeros((n_test, n_data, n_trial))
    for nu in range(n_test):
        for mu in range(n_data):
            for ka in range(n_trial):
                beta[nu, mu, ka] = triple_product(nu, mu, ka)
    return beta


class MultiIndexSet:
    """Full tensor index set: mu_m in 0 .. caps[m]-1 for each of M dimensions."""

    def __init__(self, caps):
        self.caps = tuple(int(d) for d in caps)
        if any(d < 1 for d in self.caps):
            raise ValueError("every degree cap must be at least 1")

    @property
    def order(self):
        return len(self.caps)

    @property
    def cardinality(self):
        return int(np.prod(self.caps, dtype=np.int64)) if self.caps else 1

    def __contains__(self, mu):
        mu = tuple(mu)
        return len(mu) == self.order and all(0 <= m < c for m, c in zip(mu, self.caps))

    def indices(self):
        """Iterate all multi-indices; only sensible for small sets."""
        return np.ndindex(*self.caps)

    def __eq__(self, other):
        return isinstance(other, MultiIndexSet) and self.caps == other.caps

    def __repr__(self):
        return f"MultiIndexSet{self.caps}"


def coefficient_index_set(lam):
    """Data index set Xi with caps 2*(d_m - 1) + 1, so that 2*mu stays inside."""
    caps = lam.caps if isinstance(lam, MultiIndexSet) else tuple(lam)
    return MultiIndexSet(tuple(2 * (d - 1) + 1 for d in caps))


class PreconditionerH:
    """Rank-1 preconditioner H = H_0 (x) I (x) ... (x) I with H_0 the plain
    P1 stiffness matrix on interior dofs, factorized once per mesh."""

    def __init__(self, mesh, space):
        mats = np.broadcast_to(np.eye(2), (mesh.n_cells, 2, 2)).copy()
        self.space = space
        self.h0 = assemble_bilinear_p0(mesh, mats, space).tocsc()
        self._lu = spla.splu(self.h0)

    def solve(self, rhs):
        """H_0^{-1} applied to a vector or to each column of a matrix."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 1:
            return self._lu.solve(rhs)
        return self._lu.solve(np.ascontiguousarray(rhs))

    def apply(self, tt):
        comps = tt.copy_components()
        comps[0] = self.h0 @ comps[0]
        return TensorTrain(comps)

    def apply_inverse(self, tt):
        comps = tt.copy_components()
        comps[0] = self.solve(comps[0])
        return TensorTrain(comps)


def apply_preconditioner_inverse(h, tt):
    """Solve H_0 on each column of the physical component; stochastic modes
    are untouched."""
    if tt.n_phys != h.h0.shape[0]:
        raise ValueError("physical dimension does not match the preconditioner")
    return h.apply_inverse(tt)


def dual_norm_squared(h, tt):
    """Discrete dual norm: <R, H^{-1} R> of a residual tensor train."""
    return max(float(tt_dot(tt, h.apply_inverse(tt))), 0.0)


class DiscreteOperatorTT:
    """Galerkin operator as a lazy sum of d^2 TT operators, one per entry of
    the 2x2 coefficient matrix."""

    def __init__(self, terms, trial_caps, test_caps):
        self.terms = list(terms)
        self.trial_caps = tuple(trial_caps)
        self.test_caps = tuple(test_caps)

    @property
    def rank(self):
        return sum(t.rank for t in self.terms)

    def apply(self, w, rounding_tol=None):
        """Apply term by term and TT-add; optional rounding of the result."""
        out = None
        for term in self.terms:
            y = tt_apply(term, w)
            out = y if out is None else tt_add(out, y)
        if rounding_tol is not None:
            out, _ = tt_round(out, rounding_tol)
        return out


def assemble_tt_operator(coeff_tts, space1, space0, trial_caps, test_caps=None,
                         require_xi=False):
    """Assemble the TT Galerkin operator from the four coefficient trains.

    coeff_tts: dict (i, j) -> TensorTrain over P0 cells; entry (i, j) weights
    d_j(trial) against d_i(test). Test degree caps default to the Xi set of
    the trial caps. With require_xi the coefficient degree caps must cover
    the Xi set of the trial caps.
    """
    trial = MultiIndexSet(trial_caps) if not isinstance(trial_caps, MultiIndexSet) \
        else trial_caps
    if test_caps is None:
        test = coefficient_index_set(trial)
    else:
        test = MultiIndexSet(test_caps) if not isinstance(test_caps, MultiIndexSet) \
            else test_caps
    mesh = space1.mesh
    xi = coefficient_index_set(trial)
    betas = {}
    terms = []
    for (i, j), a_tt in sorted(coeff_tts.items()):
        if a_tt.n_phys != space0.n_dofs:
            raise ValueError("coefficient physical mode must run over cells")
        if len(a_tt.dims) != trial.order:
            raise ValueError("coefficient order does not match the index set")
        if any(da < 1 for da in a_tt.dims):
            raise ValueError("coefficient degree caps must be positive")
        if require_xi and any(da < c for da, c in zip(a_tt.dims, xi.caps)):
            raise ValueError("coefficient degree cap below the Xi requirement")
        a0 = a_tt.components[0]
        phys = []
        ei_ej = np.zeros((2, 2))
        ei_ej[i, j] = 1.0
        for k in range(a0.shape[1]):
            mats = a0[:, k][:, None, None] * ei_ej[None, :, :]
            phys.append(assemble_bilinear_p0(mesh, mats, space1))
        cores = []
        for m in range(trial.order):
            key = (test.caps[m], a_tt.dims[m], trial.caps[m])
            if key not in betas:
                betas[key] = triple_product_table(*key)
            cores.append(np.einsum("pmq,nmk->pnkq", a_tt.components[m + 1],
                                   betas[key], optimize=True))
        terms.append(TTOperator(phys, cores))
    return DiscreteOperatorTT(terms, trial.caps, test.caps)


def assemble_tt_rhs(f_tt, space1, space0, caps):
    """Right-hand side train: load assembly on the physical component, data
    stochastic components truncated to the requested degree caps."""
    caps = caps.caps if isinstance(caps, MultiIndexSet) else tuple(caps)
    if f_tt.n_phys != space0.n_dofs:
        raise ValueError("forcing physical mode must run over cells")
    if len(f_tt.dims) != len(caps):
        raise ValueError("forcing order does not match the index set")
    if any(df < c for df, c in zip(f_tt.dims, caps)):
        raise ValueError("forcing degree caps are below the requested set")
    mesh = space1.mesh
    f0 = f_tt.components[0]
    F0 = np.column_stack([assemble_load_p0(mesh, f0[:, k], space1)
                          for k in range(f0.shape[1])])
    comps = [F0] + [c[:, :cap, :].copy() for c, cap in zip(f_tt.components[1:], caps)]
    return TensorTrain(comps)
