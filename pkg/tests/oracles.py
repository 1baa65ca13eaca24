"""Shared brute-force oracles and tiny fixtures for the test suite.

Everything here is deliberately independent of the library's fast paths:
full tensors, dense Kronecker systems and hand assembly only.
"""

import numpy as np

from sgtt.mesh import TriMesh, assemble_bilinear_p0, assemble_load_p0
from sgtt.galerkin import triple_product


def unit_square_mesh(n):
    """Structured triangulation of [0,1]^2 with 2*n^2 cells."""
    grid = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(grid, grid, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])
    cells = []
    for j in range(n):
        for i in range(n):
            a = j * (n + 1) + i
            b = a + 1
            c = a + n + 2
            d = a + n + 1
            cells.append((a, b, c))
            cells.append((a, c, d))
    return TriMesh(vertices, np.asarray(cells))


def assert_conforming(mesh):
    """No vertex may lie in the open interior of any edge."""
    for (a, b) in mesh.edges:
        pa, pb = mesh.vertices[a], mesh.vertices[b]
        d = pb - pa
        L2 = d @ d
        rel = mesh.vertices - pa
        t = (rel @ d) / L2
        on_line = np.abs(rel[:, 0] * d[1] - rel[:, 1] * d[0]) < 1e-12
        inside = (t > 1e-10) & (t < 1.0 - 1e-10)
        hanging = np.flatnonzero(on_line & inside)
        assert hanging.size == 0, f"vertex {hanging} hangs on edge ({a},{b})"


def tt_contract_full(tt):
    """Materialize a TensorTrain as a dense ndarray of shape (N, d_1, ..., d_M)."""
    out = tt.components[0]  # (N, r0)
    for core in tt.components[1:]:
        r_prev, d, r_next = core.shape
        out = np.tensordot(out, core, axes=([out.ndim - 1], [0]))
    return out[..., 0] if tt.order > 0 else out[:, 0]


def ttop_dense(op):
    """Materialize a TTOperator as a dense matrix over (N_out*prod(t), N_in*prod(d))."""
    n_out, n_in = op.phys[0].shape
    acc = np.stack([m.toarray() for m in op.phys], axis=2)  # (N_out, N_in, r0)
    out_dims, in_dims = [n_out], [n_in]
    for core in op.cores:
        r_prev, t, d, r_next = core.shape
        acc = np.einsum("...k,ktdr->...tdr", acc.reshape(acc.shape[:-1] + (r_prev,)), core)
        out_dims.append(t)
        in_dims.append(d)
    acc = acc[..., 0]
    # acc axes: n_out, n_in, t1, d1, t2, d2, ...; flatten mode-major, dof-minor
    n_modes = len(out_dims) - 1
    order = [2 + 2 * m for m in range(n_modes)] + [0] \
        + [3 + 2 * m for m in range(n_modes)] + [1]
    acc = np.transpose(acc, order)
    return acc.reshape(int(np.prod(out_dims)), int(np.prod(in_dims)))


def dense_coefficient(tt, caps):
    """Dense Legendre coefficient array of shape (N0, *caps) from a data TT."""
    full = tt_contract_full(tt)
    slicer = (slice(None),) + tuple(slice(0, c) for c in caps)
    return full[slicer]


def dense_operator(mesh, space, coeff_dense, trial_caps, test_caps):
    """Kronecker-assembled Galerkin matrix for a 2x2 coefficient.

    coeff_dense: dict (i,j) -> array of shape (N0, *data_caps) of Legendre
    coefficients of the matrix entries. Rows run over (interior dof, nu in
    test_caps), columns over (interior dof, kappa in trial_caps).
    """
    data_caps = next(iter(coeff_dense.values())).shape[1:]
    n = space.n_dofs
    n_test = int(np.prod(test_caps))
    n_trial = int(np.prod(trial_caps))
    L = np.zeros((n * n_test, n * n_trial))
    for mu in np.ndindex(*data_caps):
        mats = np.zeros((mesh.n_cells, 2, 2))
        off = False
        for (i, j), c in coeff_dense.items():
            vals = c[(slice(None),) + mu]
            mats[:, i, j] += vals
            off = off or np.any(vals != 0.0)
        if not off:
            continue
        K = assemble_bilinear_p0(mesh, mats, space).toarray()
        for nu_i, nu in enumerate(np.ndindex(*test_caps)):
            for ka_i, ka in enumerate(np.ndindex(*trial_caps)):
                beta = 1.0
                for m in range(len(data_caps)):
                    beta *= triple_product(nu[m], mu[m], ka[m])
                    if beta == 0.0:
                        break
                if beta == 0.0:
                    continue
                L[nu_i * n:(nu_i + 1) * n, ka_i * n:(ka_i + 1) * n] += beta * K
    return L


def dense_rhs(mesh, space, f_dense, test_caps):
    """Dense load over (interior dof, nu in test_caps) from Legendre data."""
    n = space.n_dofs
    n_test = int(np.prod(test_caps))
    F = np.zeros((n, n_test))
    for nu_i, nu in enumerate(np.ndindex(*test_caps)):
        if all(a < b for a, b in zip(nu, f_dense.shape[1:])):
            F[:, nu_i] = assemble_load_p0(mesh, f_dense[(slice(None),) + nu], space)
    return F.reshape(n * n_test, order="F")


def dense_h_matrix(mesh, space):
    mats = np.broadcast_to(np.eye(2), (mesh.n_cells, 2, 2)).copy()
    return assemble_bilinear_p0(mesh, mats, space).toarray()


def dense_eta_volume(mesh, f_dense, lam_caps):
    """Full-tensor volume estimator: h_T sqrt(|T| sum_{nu in Lambda} f_nu^2)."""
    total = np.zeros(mesh.n_cells)
    for nu in np.ndindex(*lam_caps):
        if all(a < b for a, b in zip(nu, f_dense.shape[1:])):
            total += f_dense[(slice(None),) + nu] ** 2
    return mesh.cell_diameters * np.sqrt(mesh.areas * total)


def dense_flux_coefficients(mesh, space, coeff_dense, w_full, out_caps):
    """Legendre coefficients of A grad(w) per cell: (nc, 2, *out_caps)."""
    g = mesh.p1_gradients()
    w_nodal = space.embed(np.moveaxis(w_full, 0, -1).reshape(-1, space.n_dofs).T)
    # w_nodal: (nv, n_lambda) with columns enumerating Lambda in C order
    lam_caps = w_full.shape[1:]
    grads = np.einsum("tav,tan->tvn", g, w_nodal[mesh.cells])  # (nc, 2, n_lam)
    data_caps = next(iter(coeff_dense.values())).shape[1:]
    out = np.zeros((mesh.n_cells, 2) + tuple(out_caps))
    for nu_i, nu in enumerate(np.ndindex(*out_caps)):
        for mu in np.ndindex(*data_caps):
            for ka_i, ka in enumerate(np.ndindex(*lam_caps)):
                beta = 1.0
                for m in range(len(nu)):
                    beta *= triple_product(nu[m], mu[m], ka[m])
                    if beta == 0.0:
                        break
                if beta == 0.0:
                    continue
                for (i, j), c in coeff_dense.items():
                    out[(slice(None), i) + nu] += (
                        beta * c[(slice(None),) + mu] * grads[:, j, ka_i])
    return out


def dense_eta_jump(mesh, flux_coeffs):
    """Full-tensor facet estimator: h_S sqrt(sum_nu jump_nu^2) per interior edge."""
    ii = mesh.interior_edges
    t1, t2 = mesh.edge_cells[ii, 0], mesh.edge_cells[ii, 1]
    n = mesh.edge_normals[ii]
    caps = flux_coeffs.shape[2:]
    total = np.zeros(len(ii))
    for nu in np.ndindex(*caps):
        diff = flux_coeffs[(t1, slice(None)) + nu] - flux_coeffs[(t2, slice(None)) + nu]
        total += (diff * n).sum(axis=1) ** 2
    return mesh.edge_lengths[ii] * np.sqrt(total)


def dense_residual(L, F, u, n_dofs, test_caps, trial_caps):
    """Residual rows F - L u over (dof, nu) as an array (*test_caps, n_dofs)."""
    r = F - L @ u
    return r.reshape(tuple(test_caps) + (n_dofs,))


def dense_group_dual_norm_sq(res_rows, h_dense, group):
    """Sum over multi-indices nu in `group` of r_nu^T H0^{-1} r_nu."""
    total = 0.0
    for nu in group:
        r = res_rows[tuple(nu)]
        total += float(r @ np.linalg.solve(h_dense, r))
    return total


def classical_residual_estimator(mesh, space, f_cells, u_nodal):
    """Independent deterministic residual estimator for -div(grad u) = f with
    P1 solution and P0 forcing: per-cell h_T ||f||_T and per-edge
    h_S^(1/2) || [du/dn] ||_S."""
    eta_t = mesh.cell_diameters * np.sqrt(mesh.areas) * np.abs(f_cells)
    g = mesh.p1_gradients()
    grads = np.einsum("tav,ta->tv", g, u_nodal[mesh.cells])
    ii = mesh.interior_edges
    t1, t2 = mesh.edge_cells[ii, 0], mesh.edge_cells[ii, 1]
    n = mesh.edge_normals[ii]
    jumps = ((grads[t1] - grads[t2]) * n).sum(axis=1)
    h_s = mesh.edge_lengths[ii]
    eta_s = np.sqrt(h_s) * np.abs(jumps) * np.sqrt(h_s)
    return eta_t, eta_s
