"""A posteriori error estimation in the TT format: deterministic residual
parts (volume and jumps), stochastic tail, algebraic residual and the
combined bound.

With a P1 solution and P0 data the elementwise divergence of the discrete
flux vanishes identically, so the volume term reduces to the stochastic L2
norm of the forcing and the flux enters through facet jumps only. The
stochastic tail is measured in the discrete dual norm induced by the
preconditioner (H_0^{-1}-weighted residual slices); the literal L2 variant
is available behind a switch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .galerkin import (
    assemble_tt_rhs,
    dual_norm_squared,
    triple_product_table,
)
from .tensor_train import TensorTrain, slice_modes, tt_add, tt_scale


class XiCoverageError(ValueError):
    """The extended index set does not reach the requested tail layer."""


def _rowwise_sq_norm(components, caps=None):
    """sum over multi-indices (below caps) of squared tensor entries, one
    value per physical row; works on any gauge."""
    cores = components[1:]
    if caps is None:
        caps = [c.shape[1] for c in cores]
    env = np.ones((1, 1))
    for core, cap in zip(reversed(cores), reversed(list(caps))):
        sub = core[:, :cap, :]
        env = np.einsum("kma,ab,lmb->kl", sub, env, sub, optimize=True)
    v0 = components[0]
    return np.einsum("ia,ab,ib->i", v0, env, v0, optimize=True)


def eta_volume(w, f_tt, a_tts, mesh, lam_caps):
    """Per-cell volume contributions h_T * ||f restricted to the active set||.

    The flux divergence term vanishes for P1/P0 data, so neither w nor the
    coefficient trains enter; they are part of the interface because the
    general estimator depends on them.
    """
    if f_tt.n_phys != mesh.n_cells:
        raise ValueError("forcing physical mode must run over cells")
    caps = [min(c, d) for c, d in zip(lam_caps, f_tt.dims)]
    sq = np.maximum(_rowwise_sq_norm(list(f_tt.components), caps), 0.0)
    return mesh.cell_diameters * np.sqrt(mesh.areas * sq)


def _gradient_matrices(mesh, space1):
    """Sparse d_x and d_y maps from interior P1 dofs to per-cell gradients."""
    g = mesh.p1_gradients()  # (nc, 3, 2)
    rows = np.repeat(np.arange(mesh.n_cells), 3)
    cols = mesh.cells.reshape(-1)
    mats = []
    for j in range(2):
        full = sp.coo_matrix((g[:, :, j].reshape(-1), (rows, cols)),
                             shape=(mesh.n_cells, mesh.n_vertices)).tocsr()
        mats.append(full[:, space1.interior].tocsr())
    return mats


def flux_tt(w, a_tts, mesh, space1, out_caps):
    """Normal-flux jump train: physical mode runs over interior edges.

    Builds A^TT * grad(w) per matrix entry via triple-product contraction up
    to the requested output degree caps, then differences the adjacent-cell
    slices against the edge normals.
    """
    grads = _gradient_matrices(mesh, space1)
    w0 = w.components[0]
    ii = mesh.interior_edges
    t1, t2 = mesh.edge_cells[ii, 0], mesh.edge_cells[ii, 1]
    normals = mesh.edge_normals[ii]
    betas = {}
    out = None
    for (i, j), a_tt in sorted(a_tts.items()):
        grad_w = grads[j] @ w0  # (nc, r_w)
        a0 = a_tt.components[0]
        phys = np.einsum("lk,lw->lkw", a0, grad_w).reshape(mesh.n_cells, -1)
        jump_phys = normals[:, i][:, None] * (phys[t1] - phys[t2])
        comps = [jump_phys]
        for m, cap in enumerate(out_caps):
            key = (cap, a_tt.dims[m], w.dims[m])
            if key not in betas:
                betas[key] = triple_product_table(*key)
            core = np.einsum("pmq,akb,nmk->panqb", a_tt.components[m + 1],
                             w.components[m + 1], betas[key], optimize=True)
            s = core.shape
            comps.append(core.reshape(s[0] * s[1], s[2], s[3] * s[4]))
        term = TensorTrain(comps)
        out = term if out is None else tt_add(out, term)
    return out


def eta_jump(w, a_tts, mesh, space1, lam_caps, xi_caps=None):
    """Per-edge contributions h_S * (stochastic L2 norm of the normal-flux
    jump restricted to the active set)."""
    jumps = flux_tt(w, a_tts, mesh, space1, tuple(lam_caps))
    sq = np.maximum(_rowwise_sq_norm(list(jumps.components)), 0.0)
    return mesh.edge_lengths[mesh.interior_edges] * np.sqrt(sq)


def eta_total(eta_cells, eta_edges):
    return float(np.sqrt((eta_cells ** 2).sum() + (eta_edges ** 2).sum()))


def residual_xi(w, f_tt, op_xi, space1, space0):
    """Residual F - L w on the extended test set of the given operator."""
    f_ext = assemble_tt_rhs(f_tt, space1, space0, op_xi.test_caps)
    return tt_add(f_ext, tt_scale(op_xi.apply(w), -1.0))


def zeta(w, f_tt, op_xi, h, space1, space0, lam_caps, variant="dual"):
    """Stochastic tail estimators (zeta_m per dimension, their sum, and the
    global tail over the extended set minus the active set)."""
    lam_caps = tuple(lam_caps)
    n_modes = len(lam_caps)
    if n_modes == 0:
        return np.zeros(0), 0.0, 0.0
    test_caps = tuple(op_xi.test_caps)
    for m, (t, d) in enumerate(zip(test_caps, lam_caps)):
        if t <= d:
            raise XiCoverageError(
                f"extended set does not cover the tail layer of dimension {m}")
    if variant == "dual":
        res = residual_xi(w, f_tt, op_xi, space1, space0)
        s_full = dual_norm_squared(h, res)
        s_lam = dual_norm_squared(h, slice_modes(res, lam_caps))
        zeta_global = float(np.sqrt(max(s_full - s_lam, 0.0)))
        zeta_dims = np.empty(n_modes)
        for m in range(n_modes):
            comps = res.copy_components()
            for j in range(n_modes):
                if j == m:
                    comps[j + 1] = comps[j + 1][:, lam_caps[j]:lam_caps[j] + 1, :]
                else:
                    comps[j + 1] = comps[j + 1][:, :lam_caps[j], :]
            zeta_dims[m] = np.sqrt(dual_norm_squared(h, TensorTrain(comps)))
    elif variant == "l2":
        mesh = space0.mesh
        zeta_dims = np.empty(n_modes)
        for m in range(n_modes):
            comps = f_tt.copy_components()
            for j in range(n_modes):
                if j == m:
                    comps[j + 1] = comps[j + 1][:, lam_caps[j]:lam_caps[j] + 1, :]
                else:
                    comps[j + 1] = comps[j + 1][:, :lam_caps[j], :]
            sq = np.maximum(_rowwise_sq_norm(comps), 0.0)
            zeta_dims[m] = np.sqrt((mesh.areas * sq).sum())
        full_sq = (mesh.areas * np.maximum(
            _rowwise_sq_norm(list(f_tt.components), test_caps), 0.0)).sum()
        lam_sq = (mesh.areas * np.maximum(
            _rowwise_sq_norm(list(f_tt.components), lam_caps), 0.0)).sum()
        zeta_global = float(np.sqrt(max(full_sq - lam_sq, 0.0)))
    else:
        raise ValueError("variant must be 'dual' or 'l2'")
    return zeta_dims, float(zeta_dims.sum()), zeta_global


def iota(op_lam, w, f_lam, h):
    """Algebraic residual || H^{-1/2} (L w - F) ||_F on the active set."""
    res = tt_add(op_lam.apply(w), tt_scale(f_lam, -1.0))
    return float(np.sqrt(dual_norm_squared(h, res)))


def combine(eta, zeta_value, iota_value, weights=(1.0, 1.0, 1.0)):
    """Combined bound sqrt((c_eta*eta + c_zeta*zeta + c_iota*iota)^2 + iota^2)."""
    if min(eta, zeta_value, iota_value) < 0.0:
        raise ValueError("estimator contributions must be nonnegative")
    c_eta, c_zeta, c_iota = weights
    lin = c_eta * eta + c_zeta * zeta_value + c_iota * iota_value
    return float(np.sqrt(lin ** 2 + iota_value ** 2))


@dataclass
class EstimatorReport:
    eta_cells: np.ndarray
    eta_edges: np.ndarray
    eta: float
    zeta_dims: np.ndarray
    zeta_sum: float
    zeta: float
    iota: float
    weights: tuple = (1.0, 1.0, 1.0)
    theta: float = field(init=False)

    def __post_init__(self):
        self.theta = combine(self.eta, self.zeta, self.iota, self.weights)

    CSV_HEADER = "iter,dofs,tt_dofs,eta,zeta,iota,theta,refined"

    def csv_row(self, iteration, dofs, tt_dofs, refined):
        return (f"{iteration},{dofs},{tt_dofs},{self.eta:.17g},"
                f"{self.zeta:.17g},{self.iota:.17g},{self.theta:.17g},{refined}")
