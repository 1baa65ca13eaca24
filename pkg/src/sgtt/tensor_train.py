"""Tensor trains with one physical mode and M stochastic modes, plus TT operators.

A tensor V of shape (N, d_1, ..., d_M) is stored as a matrix component
V_0 (N, r_0) followed by order-3 components V_m (r_{m-1}, d_m, r_m) with
r_M = 1, so that

    V[i, mu] = sum_k V_0[i, k_0] * prod_m V_m[k_{m-1}, mu_m, k_m].

"left"-orthogonal means every stochastic component contracts to the identity
on its left rank index (the non-orthogonal centre sits at component 0);
"right" means the centre sits at the last component.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

_RANK_FLOOR = 1e-14  # relative singular value floor defining numerical rank


class TensorTrain:
    """Immutable tensor-train value; operations return new instances."""

    def __init__(self, components, ortho=None):
        comps = [np.asarray(c, dtype=float) for c in components]
        if not comps or comps[0].ndim != 2:
            raise ValueError("component 0 must be a matrix (N, r0)")
        for m, c in enumerate(comps[1:], start=1):
            if c.ndim != 3:
                raise ValueError(f"component {m} must be an order-3 array")
            if c.shape[0] != comps[m - 1].shape[-1]:
                raise ValueError(f"rank mismatch between components {m - 1} and {m}")
        if comps[-1].shape[-1] != 1:
            raise ValueError("last component must have right rank 1")
        self.components = tuple(comps)
        self.ortho = ortho

    @property
    def n_phys(self):
        return self.components[0].shape[0]

    @property
    def order(self):
        """Number of stochastic modes M."""
        return len(self.components) - 1

    @property
    def dims(self):
        return tuple(c.shape[1] for c in self.components[1:])

    @property
    def ranks(self):
        return tuple(c.shape[-1] for c in self.components[:-1])

    @property
    def n_entries(self):
        return self.n_phys * int(np.prod(self.dims, dtype=np.int64))

    def storage_size(self):
        return sum(c.size for c in self.components)

    def manifold_dim(self):
        """Dimension of the fixed-rank TT manifold at this rank vector."""
        params = sum(c.size for c in self.components)
        gauge = sum(r * r for r in self.ranks)
        return params - gauge

    def copy_components(self):
        return [c.copy() for c in self.components]

    def __repr__(self):
        return (f"TensorTrain(N={self.n_phys}, dims={self.dims}, "
                f"ranks={self.ranks}, ortho={self.ortho})")


def _chop(s, delta):
    """Number of singular values kept under a root-sum-square budget delta."""
    if len(s) == 0:
        return 0, 0.0
    floor = _RANK_FLOOR * s[0]
    tail = np.concatenate([np.sqrt(np.cumsum(s[::-1] ** 2))[::-1], [0.0]])
    keep = len(s)
    while keep > 1 and (tail[keep - 1] <= delta or s[keep - 1] <= floor):
        keep -= 1
    return keep, float(tail[keep])


def tt_from_full(full, tol=0.0):
    """Hierarchical SVD of a dense (N, d_1, ..., d_M) array."""
    if tol < 0.0:
        raise ValueError("tolerance must be nonnegative")
    full = np.asarray(full, dtype=float)
    n_modes = full.ndim - 1
    if n_modes == 0:
        return TensorTrain([full[:, None]], ortho="right")
    shape = full.shape
    norm = np.linalg.norm(full)
    delta = tol * norm / np.sqrt(n_modes) if norm > 0.0 else 0.0
    comps = []
    work = full.reshape(shape[0], -1)
    r_prev = shape[0]
    for m in range(n_modes):
        u, s, vt = np.linalg.svd(work, full_matrices=False)
        keep, _ = _chop(s, delta)
        if m == 0:
            comps.append(u[:, :keep])
        else:
            comps.append(u[:, :keep].reshape(r_prev, shape[m], keep))
        work = s[:keep, None] * vt[:keep]
        r_prev = keep
        if m + 1 < n_modes:
            work = work.reshape(r_prev * shape[m + 1], -1)
        else:
            comps.append(work.reshape(r_prev, shape[m + 1], 1))
    return TensorTrain(comps, ortho="right")


def tt_eval(tt, i, mu=()):
    """Single entry V[i, mu] as a chain of small matrix-vector products."""
    mu = tuple(np.atleast_1d(mu).astype(int)) if np.ndim(mu) else (int(mu),)
    if len(mu) != tt.order:
        raise ValueError("multi-index length does not match mode count")
    vec = tt.components[0][i]
    for m, core in enumerate(tt.components[1:]):
        vec = vec @ core[:, mu[m], :]
    return float(vec[0])


def tt_dot(a, b):
    """Frobenius inner product of the represented tensors."""
    if a.n_phys != b.n_phys or a.dims != b.dims:
        raise ValueError("mode dimensions do not match")
    env = a.components[0].T @ b.components[0]
    for ca, cb in zip(a.components[1:], b.components[1:]):
        env = np.einsum("kml,kj,jmi->li", ca, env, cb, optimize=True)
    return float(env[0, 0])


def tt_norm(a):
    """Frobenius norm, computed on an orthogonalized copy for stability."""
    x = a if a.ortho == "left" else orthogonalize(a, "left")
    return float(np.linalg.norm(x.components[0]))


def tt_scale(a, s):
    comps = a.copy_components()
    comps[0] = comps[0] * float(s)
    return TensorTrain(comps, ortho=None if s == 0.0 else a.ortho)


def tt_add(a, b):
    """Sum of two tensor trains; ranks add."""
    if a.n_phys != b.n_phys or a.dims != b.dims:
        raise ValueError("mode dimensions do not match")
    if a.order == 0:
        return TensorTrain([a.components[0] + b.components[0]])
    comps = [np.hstack([a.components[0], b.components[0]])]
    for m in range(1, a.order + 1):
        ca, cb = a.components[m], b.components[m]
        ra0, d, ra1 = ca.shape
        rb0, _, rb1 = cb.shape
        if m == a.order:
            comps.append(np.concatenate([ca, cb], axis=0))
        else:
            block = np.zeros((ra0 + rb0, d, ra1 + rb1))
            block[:ra0, :, :ra1] = ca
            block[ra0:, :, ra1:] = cb
            comps.append(block)
    return TensorTrain(comps)


def orthogonalize(tt, direction="left"):
    """Re-gauge the chain; represented values are unchanged.

    "left": stochastic components become row-orthonormal (centre at the
    physical component), "right": centre at the last component.
    """
    comps = tt.copy_components()
    n = len(comps)
    if direction == "left":
        for m in range(n - 1, 0, -1):
            r0, d, r1 = comps[m].shape
            q, r = np.linalg.qr(comps[m].reshape(r0, d * r1).T)
            comps[m] = q.T.reshape(-1, d, r1)
            carry = r.T
            if m == 1:
                comps[0] = comps[0] @ carry
            else:
                comps[m - 1] = np.einsum("idj,jk->idk", comps[m - 1], carry)
    elif direction == "right":
        q, r = np.linalg.qr(comps[0])
        comps[0] = q
        if n == 1:
            comps[0] = comps[0] @ r
        else:
            comps[1] = np.einsum("ij,jdk->idk", r, comps[1])
            for m in range(1, n - 1):
                r0, d, r1 = comps[m].shape
                q, r = np.linalg.qr(comps[m].reshape(r0 * d, r1))
                comps[m] = q.reshape(r0, d, -1)
                comps[m + 1] = np.einsum("ij,jdk->idk", r, comps[m + 1])
    else:
        raise ValueError("direction must be 'left' or 'right'")
    return TensorTrain(comps, ortho=direction)


def tt_round(tt, tol=0.0, max_ranks=None):
    """Truncated HSVD of an existing tensor train.

    Returns (rounded TT, error estimate); the estimate is the root-sum-square
    of all discarded singular values and upper-bounds the Frobenius error.
    """
    if tt.order == 0:
        return TensorTrain([tt.components[0].copy()]), 0.0
    x = orthogonalize(tt, "right")
    comps = x.copy_components()
    norm = np.linalg.norm(comps[-1])
    delta = tol * norm / np.sqrt(tt.order) if tol > 0.0 else 0.0
    if max_ranks is None:
        caps = [c.shape[-1] for c in comps[:-1]]
    elif np.ndim(max_ranks) == 0:
        caps = [int(max_ranks)] * tt.order
    else:
        caps = list(max_ranks)
    err2 = 0.0
    for m in range(tt.order, 0, -1):
        r0, d, r1 = comps[m].shape
        u, s, vt = np.linalg.svd(comps[m].reshape(r0, d * r1), full_matrices=False)
        keep, _ = _chop(s, delta)
        keep = min(keep, caps[m - 1])
        err2 += float((s[keep:] ** 2).sum())
        comps[m] = vt[:keep].reshape(keep, d, r1)
        carry = u[:, :keep] * s[:keep]
        if m == 1:
            comps[0] = comps[0] @ carry
        else:
            comps[m - 1] = np.einsum("idj,jk->idk", comps[m - 1], carry)
    return TensorTrain(comps, ortho="left"), float(np.sqrt(err2))


def tt_random(dims, ranks, seed):
    """Seeded standard-normal tensor train: dims = (N, d_1, ..., d_M)."""
    dims = tuple(int(d) for d in dims)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != len(dims) - 1:
        raise ValueError("need one rank per bond, i.e. len(dims) - 1")
    rng = np.random.default_rng(seed)
    comps = [rng.standard_normal((dims[0], ranks[0] if ranks else 1))]
    bonds = list(ranks) + [1]
    for m in range(1, len(dims)):
        comps.append(rng.standard_normal((bonds[m - 1], dims[m], bonds[m])))
    return TensorTrain(comps)


def tt_max_ranks(dims):
    """Largest feasible rank vector for shape dims = (N, d_1, ..., d_M)."""
    dims = [int(d) for d in dims]
    out = []
    for m in range(len(dims) - 1):
        left = int(np.prod(dims[:m + 1], dtype=np.int64))
        right = int(np.prod(dims[m + 1:], dtype=np.int64))
        out.append(min(left, right))
    return tuple(out)


def pad_modes(tt, new_dims):
    """Zero-pad stochastic mode sizes up to new_dims; values are unchanged."""
    if len(new_dims) != tt.order:
        raise ValueError("need one target dimension per stochastic mode")
    comps = tt.copy_components()
    for m, d_new in enumerate(new_dims, start=1):
        r0, d, r1 = comps[m].shape
        if d_new < d:
            raise ValueError("padding cannot shrink a mode")
        if d_new > d:
            block = np.zeros((r0, d_new, r1))
            block[:, :d, :] = comps[m]
            comps[m] = block
    return TensorTrain(comps)


def slice_modes(tt, caps):
    """Restrict stochastic modes to indices below caps (orthogonality is lost)."""
    if len(caps) != tt.order:
        raise ValueError("need one cap per stochastic mode")
    comps = tt.copy_components()
    for m, cap in enumerate(caps, start=1):
        if cap > comps[m].shape[1]:
            raise ValueError("cap exceeds mode dimension")
        comps[m] = comps[m][:, :cap, :]
    return TensorTrain(comps)


class TTOperator:
    """Rank-structured operator: sparse matrices on the physical mode, dense
    order-4 cores (r_{m-1}, t_m, d_m, r_m) coupling test modes t_m to trial
    modes d_m."""

    def __init__(self, phys, cores):
        self.phys = [m.tocsr() if sp.issparse(m) else sp.csr_matrix(m) for m in phys]
        self.cores = [np.asarray(c, dtype=float) for c in cores]
        if not self.phys:
            raise ValueError("operator needs at least one physical slice")
        shapes = {m.shape for m in self.phys}
        if len(shapes) != 1:
            raise ValueError("physical slices must share their shape")
        r = len(self.phys)
        for c in self.cores:
            if c.ndim != 4 or c.shape[0] != r:
                raise ValueError("core rank chain is inconsistent")
            r = c.shape[-1]
        if self.cores and self.cores[-1].shape[-1] != 1:
            raise ValueError("last core must have right rank 1")
        if not self.cores and len(self.phys) != 1:
            raise ValueError("an operator without stochastic cores has rank 1")

    @property
    def shape_phys(self):
        return self.phys[0].shape

    @property
    def rank(self):
        return len(self.phys)

    @property
    def test_dims(self):
        return tuple(c.shape[1] for c in self.cores)

    @property
    def trial_dims(self):
        return tuple(c.shape[2] for c in self.cores)


def tt_apply(op, x):
    """Apply a TTOperator to a TensorTrain; result ranks multiply."""
    if op.shape_phys[1] != x.n_phys:
        raise ValueError("operator and argument physical dimensions differ")
    if op.trial_dims != x.dims:
        raise ValueError("operator trial dimensions do not match the argument")
    r_op = op.rank
    x0 = x.components[0]
    y0 = np.empty((op.shape_phys[0], r_op, x0.shape[1]))
    for a, mat in enumerate(op.phys):
        y0[:, a, :] = mat @ x0
    comps = [y0.reshape(op.shape_phys[0], r_op * x0.shape[1])]
    for oc, xc in zip(op.cores, x.components[1:]):
        block = np.einsum("anmb,kml->aknbl", oc, xc, optimize=True)
        s = block.shape
        comps.append(block.reshape(s[0] * s[1], s[2], s[3] * s[4]))
    return TensorTrain(comps)


def identity_operator(n, dims):
    """Identity TTOperator on shape (n, dims)."""
    phys = [sp.identity(n, format="csr")]
    cores = [np.eye(d)[None, :, :, None] for d in dims]
    return TTOperator(phys, cores)


# -- plain text serialization -----------------------------------------------------


def tt_write(tt, stream):
    stream.write(f"{tt.order}\n")
    stream.write(" ".join(str(d) for d in (tt.n_phys,) + tt.dims) + "\n")
    stream.write(" ".join(str(r) for r in tt.ranks) + "\n")
    for c in tt.components:
        stream.write(" ".join(f"{v:.17g}" for v in c.reshape(-1)) + "\n")


def tt_read(stream):
    order = int(stream.readline())
    dims = [int(t) for t in stream.readline().split()]
    ranks = [int(t) for t in stream.readline().split()]
    assert len(dims) == order + 1 and len(ranks) == order
    bonds = ranks + [1]
    shapes = [(dims[0], bonds[0] if order else 1)]
    shapes += [(bonds[m - 1], dims[m], bonds[m]) for m in range(1, order + 1)]
    comps = []
    for shape in shapes:
        vals = np.array([float(t) for t in stream.readline().split()])
        comps.append(vals.reshape(shape))
    return TensorTrain(comps)
