"""Sample-based tensor-train least squares for the transported coefficient
entries and the forcing.

Given parameter samples y^(k) and per-cell field values b_k, an alternating
sweep fits a functional tensor train W so that contracting its stochastic
modes with orthonormal Legendre values at y^(k) reproduces b_k in the least
squares sense. Sample values may be provided lazily so that large sample sets
never materialize as one dense matrix.
"""

from __future__ import annotations

import warnings

import numpy as np

from .galerkin import legendre_block
from .random_field import field_eval
from .tensor_train import TensorTrain, orthogonalize, tt_max_ranks, tt_random

_CHUNK = 256


class ReconstructionError(RuntimeError):
    pass


class SampleSet:
    """Parameter points with per-sample per-cell values.

    values: array (K, n_outputs) or callable(index array) -> value block.
    """

    def __init__(self, points, values, n_outputs=None, seed=None):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.points.size and np.max(np.abs(self.points)) > 1.0 + 1e-12:
            raise ValueError("parameter points must lie in [-1, 1]^M")
        self.seed = seed
        if callable(values):
            if n_outputs is None:
                raise ValueError("lazy values need an explicit n_outputs")
            self._values = None
            self._evaluate = values
            self.n_outputs = int(n_outputs)
        else:
            self._values = np.asarray(values, dtype=float)
            if self._values.ndim == 1:
                self._values = self._values[:, None]
            if self._values.shape[0] != self.n_samples:
                raise ValueError("one value row per sample required")
            self._evaluate = None
            self.n_outputs = self._values.shape[1]

    @property
    def n_samples(self):
        return self.points.shape[0]

    @property
    def n_dims(self):
        return self.points.shape[1]

    def values_block(self, idx):
        if self._values is not None:
            return self._values[idx]
        return np.atleast_2d(self._evaluate(idx))

    def values_sumsq(self):
        total = 0.0
        for idx in _chunks(self.n_samples):
            total += float((self.values_block(idx) ** 2).sum())
        return total


def _chunks(n, size=_CHUNK):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def draw_parameter_samples(n_dims, n_samples, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(n_samples, n_dims))


_FIELD_QUANTITIES = {
    "a11": lambda fe: fe.diffusion[:, 0, 0],
    "a12": lambda fe: fe.diffusion[:, 0, 1],
    "a21": lambda fe: fe.diffusion[:, 1, 0],
    "a22": lambda fe: fe.diffusion[:, 1, 1],
    "f": lambda fe: fe.forcing,
    "det": lambda fe: fe.det,
}


def field_sample_set(kl, points, quantity, forcing=None):
    """Lazy SampleSet of one transported-data quantity at the given points."""
    if quantity not in _FIELD_QUANTITIES:
        raise ValueError(f"unknown quantity {quantity!r}")
    extract = _FIELD_QUANTITIES[quantity]

    def evaluate(idx):
        out = np.empty((len(idx), kl.mesh.n_cells))
        for row, k in enumerate(idx):
            out[row] = extract(field_eval(kl, points[k], forcing=forcing))
        return out

    return SampleSet(points, evaluate, n_outputs=kl.mesh.n_cells)


def measurement_matrices(points, dims):
    """Orthonormal Legendre values per dimension, list of (K, d_m) tables."""
    points = np.atleast_2d(points)
    return [legendre_block(d, points[:, m]) for m, d in enumerate(dims)]


def _transfer_matrices(core, xi):
    """A_m(y_k) for all samples: (K, r_prev, r_next)."""
    return np.einsum("rmq,km->krq", core, xi, optimize=True)


def _suffix_chain(comps, xis, n_samples):
    """suffix[m] = A_{m+1} ... A_M * 1 for m = 0..M, each (K, r_m)."""
    n_modes = len(comps) - 1
    suffix = [None] * (n_modes + 1)
    suffix[n_modes] = np.ones((n_samples, 1))
    for m in range(n_modes, 0, -1):
        A = _transfer_matrices(comps[m], xis[m - 1])
        suffix[m - 1] = np.einsum("krq,kq->kr", A, suffix[m], optimize=True)
    return suffix


def _training_residual(samples, comps, suffix0, b_sumsq):
    num = 0.0
    v0 = comps[0]
    for idx in _chunks(samples.n_samples):
        pred = suffix0[idx] @ v0.T
        num += float(((pred - samples.values_block(idx)) ** 2).sum())
    return np.sqrt(num / b_sumsq) if b_sumsq > 0.0 else np.sqrt(num)


def reconstruct(samples, dims, max_ranks, sweeps=10, reg=1e-12, seed=0,
                improvement_tol=1e-8):
    """Alternating least-squares fit of a functional tensor train to samples.

    dims: stochastic degree caps (d_1, ..., d_M); max_ranks: scalar or
    per-bond cap; reg: relative ridge added to every local normal matrix.
    Returns the fitted TensorTrain.
    """
    if samples.n_samples < 1:
        raise ValueError("need at least one sample")
    dims = tuple(int(d) for d in dims)
    if len(dims) != samples.n_dims:
        raise ValueError("one degree cap per sampled dimension required")
    n_out = samples.n_outputs
    shape = (n_out,) + dims
    caps = tt_max_ranks(shape)
    if np.ndim(max_ranks) == 0:
        ranks = tuple(min(int(max_ranks), c) for c in caps)
    else:
        ranks = tuple(min(int(r), c) for r, c in zip(max_ranks, caps))

    largest_local = max([n_out * (ranks[0] if ranks else 1)] +
                        [ranks[m - 1] * dims[m - 1] * ranks[m]
                         for m in range(1, len(dims))] +
                        ([ranks[-1] * dims[-1]] if dims else []))
    if samples.n_samples < largest_local / max(n_out, 1):
        warnings.warn("sample count below the local-unknown heuristic; "
                      "the reconstruction may be underdetermined")

    tt = tt_random(shape, ranks, seed=seed)
    comps = orthogonalize(tt, "left").copy_components()
    n_modes = len(dims)
    xis = measurement_matrices(samples.points, dims)
    b_sumsq = samples.values_sumsq()
    K = samples.n_samples

    last = np.inf
    for sweep in range(sweeps):
        suffix = _suffix_chain(comps, xis, K)
        # physical component: shared Gram over the full stochastic chains
        c = suffix[0]  # (K, r0)
        gram0 = c.T @ c
        gram0 += reg * max(np.trace(gram0), 1e-300) * np.eye(gram0.shape[0])
        rhs0 = np.zeros((n_out, c.shape[1]))
        for idx in _chunks(K):
            rhs0 += samples.values_block(idx).T @ c[idx]
        comps[0] = _solve_local(gram0, rhs0.T).T

        # keep the physical component orthonormal during the sweep so that
        # local Gram matrices reduce to design-matrix products
        if n_modes:
            qmat, rmat = np.linalg.qr(comps[0])
            comps[0] = qmat
            comps[1] = np.einsum("ij,jdk->idk", rmat, comps[1])
        r0 = comps[0].shape[1]
        q = np.empty((K, r0))
        for idx in _chunks(K):
            q[idx] = samples.values_block(idx) @ comps[0]
        prefix = np.broadcast_to(np.eye(r0), (K, r0, r0)).copy()

        # stochastic components, left to right, with QR gauge pushing
        for m in range(1, n_modes + 1):
            r_prev, d_m, r_next = comps[m].shape
            xi = xis[m - 1]
            right = suffix[m]  # (K, r_next)
            n_loc = r_prev * d_m * r_next
            gram = np.zeros((n_loc, n_loc))
            rhs = np.zeros(n_loc)
            for idx in _chunks(K):
                design = np.einsum("kxa,kc,ke->kxace", prefix[idx], xi[idx],
                                   right[idx], optimize=True)
                design = design.reshape(len(idx) * r0, n_loc)
                gram += design.T @ design
                rhs += design.T @ q[idx].reshape(-1)
            gram += reg * max(np.trace(gram), 1e-300) * np.eye(n_loc)
            comps[m] = _solve_local(gram, rhs).reshape(r_prev, d_m, r_next)
            if m < n_modes:
                qmat, rmat = np.linalg.qr(comps[m].reshape(r_prev * d_m, r_next))
                comps[m] = qmat.reshape(r_prev, d_m, -1)
                comps[m + 1] = np.einsum("ij,jdk->idk", rmat, comps[m + 1])
            prefix = np.einsum("kxa,kab->kxb", prefix,
                               _transfer_matrices(comps[m], xis[m - 1]),
                               optimize=True)

        suffix = _suffix_chain(comps, xis, K)
        res = _training_residual(samples, comps, suffix[0], b_sumsq)
        if np.isfinite(last) and last - res < improvement_tol * last:
            last = res
            break
        last = res

    out = TensorTrain(comps)
    out.training_residual = last
    return out


def _solve_local(gram, rhs):
    try:
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as err:
        raise ReconstructionError(
            "singular local least-squares system; retry with larger reg") from err


def holdout_error(tt, samples):
    """Relative RMS misfit sqrt(sum ||pred - b||^2 / sum ||b||^2)."""
    if tt.dims != tuple() and len(tt.dims) != samples.n_dims:
        raise ValueError("tensor and sample dimensions differ")
    xis = measurement_matrices(samples.points, tt.dims)
    suffix = _suffix_chain(list(tt.components), xis, samples.n_samples)
    num = 0.0
    den = samples.values_sumsq()
    v0 = tt.components[0]
    for idx in _chunks(samples.n_samples):
        pred = suffix[0][idx] @ v0.T
        num += float(((pred - samples.values_block(idx)) ** 2).sum())
    if den == 0.0:
        return np.sqrt(num)
    return float(np.sqrt(num / den))
