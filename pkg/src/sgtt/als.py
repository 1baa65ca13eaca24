"""Preconditioned alternating least squares on the fixed-rank TT manifold.

Each micro-step replaces one component of W by the exact minimizer of
|| H^{-1/2} (L W - F) ||_F with all other components frozen. Orthonormal
frames are maintained by QR gauge moves, so every local normal matrix is the
frame projection of L^T H^{-1} L and symmetric positive definite. Stochastic
components lead to small dense systems; the physical component is solved
directly on small problems and by a preconditioned CG loop (H_0 block
preconditioner) on large ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .galerkin import dual_norm_squared
from .tensor_train import (
    TensorTrain,
    orthogonalize,
    tt_add,
    tt_max_ranks,
    tt_norm,
    tt_random,
    tt_scale,
)


class AlsError(RuntimeError):
    pass


@dataclass
class AlsConfig:
    max_sweeps: int = 15
    tol: float = 1e-6          # relative iota improvement below which we stop
    cg_tol: float = 1e-13
    cg_maxiter: int = 600
    dense_cutoff: int = 600    # direct solve of the physical block below this


@dataclass
class AlsInfo:
    iota_history: np.ndarray   # iota before any sweep, then after each sweep
    converged: bool = False
    n_sweeps: int = 0


def residual_tt(op, w, f):
    return tt_add(op.apply(w), tt_scale(f, -1.0))


def iota_value(op, w, f, h):
    """Preconditioned residual norm || H^{-1/2} (L w - F) ||_F."""
    return float(np.sqrt(dual_norm_squared(h, residual_tt(op, w, f))))


def _phys_products(op, v0, h, f0):
    """Physical-mode contractions shared by all environments.

    Returns z[t] = [S_{t,k} V0]_k stacked (N, r_t, r0), the pairwise bases
    e0[(t,t')] = Z_t^T H^{-1} Z_t' of shape (r_t, r0, r_t', r0), and the
    forcing bases b0[t] = Z_t^T H^{-1} F0 of shape (r_t, r0, rF).
    """
    n, r0 = v0.shape
    z = []
    for term in op.terms:
        zt = np.empty((n, term.rank, r0))
        for k, mat in enumerate(term.phys):
            zt[:, k, :] = mat @ v0
        z.append(zt)
    hf0 = h.solve(f0)
    hz = [h.solve(zt.reshape(n, -1)).reshape(zt.shape) for zt in z]
    e0 = {}
    for t, zt in enumerate(z):
        for tp, hzp in enumerate(hz):
            e0[(t, tp)] = np.einsum("nka,nlb->kalb", zt, hzp, optimize=True)
    b0 = [np.einsum("nka,nc->kac", zt, hf0, optimize=True) for zt in z]
    return z, e0, b0


def _left_step(e_pair, o_t, o_tp, g):
    """Push a pairwise left environment through one stochastic position."""
    xt = np.einsum("pvmk,amx->pavkx", o_t, g, optimize=True)
    xtp = np.einsum("qvnl,bny->qbvly", o_tp, g, optimize=True)
    return np.einsum("paqb,pavkx,qbvly->kxly", e_pair, xt, xtp, optimize=True)


def _left_rhs_step(e_t, o_t, g, f_core):
    return np.einsum("pag,pvmk,amx,gvc->kxc", e_t, o_t, g, f_core, optimize=True)


def _right_step(r_pair, o_t, o_tp, g):
    return np.einsum("kxly,pvmk,amx,qvnl,bny->paqb", r_pair, o_t, g, o_tp, g,
                     optimize=True)


def _right_rhs_step(r_t, o_t, g, f_core):
    return np.einsum("kxc,pvmk,amx,gvc->pag", r_t, o_t, g, f_core, optimize=True)


def _right_env_lists(op, comps, f_comps):
    """Right environments for every position, built from the last core down."""
    n_modes = len(comps) - 1
    n_terms = len(op.terms)
    pair = {}
    for t, term in enumerate(op.terms):
        for tp, termp in enumerate(op.terms):
            pair[(t, tp)] = [None] * (n_modes + 1)
            pair[(t, tp)][n_modes] = np.ones((1, 1, 1, 1))
    rhs = [[None] * (n_modes + 1) for _ in range(n_terms)]
    for t in range(n_terms):
        rhs[t][n_modes] = np.ones((1, 1, 1))
    for m in range(n_modes, 0, -1):
        g = comps[m]
        fc = f_comps[m]
        for t, term in enumerate(op.terms):
            o_t = term.cores[m - 1]
            rhs[t][m - 1] = _right_rhs_step(rhs[t][m], o_t, g, fc)
            for tp, termp in enumerate(op.terms):
                pair[(t, tp)][m - 1] = _right_step(pair[(t, tp)][m], o_t,
                                                   termp.cores[m - 1], g)
    return pair, rhs


def _solve_spd(gram, rhs):
    try:
        c, low = sla.cho_factor(gram, check_finite=False)
    except np.linalg.LinAlgError as err:
        raise AlsError("local ALS system is not symmetric positive definite; "
                       "check operator assembly/symmetry") from err
    return sla.cho_solve((c, low), rhs, check_finite=False)


def _update_stochastic_core(m, comps, op, f_comps, e_pair, e_rhs, r_pair, r_rhs):
    r_prev, d, r_next = comps[m].shape
    n_loc = r_prev * d * r_next
    gram = np.zeros((n_loc, n_loc))
    rhs = np.zeros(n_loc)
    for t, term in enumerate(op.terms):
        o_t = term.cores[m - 1]
        rhs += np.einsum("pag,pvmk,gvc,kxc->amx", e_rhs[t], o_t, f_comps[m],
                         r_rhs[t][m], optimize=True).reshape(-1)
        for tp, termp in enumerate(op.terms):
            block = np.einsum("paqb,pvmk,qvnl,kxly->amxbny", e_pair[(t, tp)],
                              o_t, termp.cores[m - 1], r_pair[(t, tp)][m],
                              optimize=True)
            gram += block.reshape(n_loc, n_loc)
    gram = 0.5 * (gram + gram.T)
    comps[m] = _solve_spd(gram, rhs).reshape(r_prev, d, r_next)


def _update_physical(comps, op, f0, h, r_pair, r_rhs, cfg):
    n, r0 = comps[0].shape
    n_terms = len(op.terms)
    ranks = [term.rank for term in op.terms]
    offsets = np.concatenate([[0], np.cumsum(ranks)]).astype(int)
    n_slices = offsets[-1]
    r0_all = np.zeros((n_slices, r0, n_slices, r0))
    for t in range(n_terms):
        for tp in range(n_terms):
            env = r_pair[(t, tp)][0]
            r0_all[offsets[t]:offsets[t + 1], :, offsets[tp]:offsets[tp + 1], :] = env
    slices = [mat for term in op.terms for mat in term.phys]

    hf0 = h.solve(f0)
    rhs = np.zeros((n, r0))
    for t, term in enumerate(op.terms):
        env = r_rhs[t][0]  # (r_t, r0, rF)
        for k, mat in enumerate(term.phys):
            rhs += (mat.T @ hf0) @ env[k].T  # (N, rF) @ (rF, r0)

    if n * r0 <= cfg.dense_cutoff:
        hd = h.h0.toarray()
        dense = [mat.toarray() for mat in slices]
        hinv_dense = [np.linalg.solve(hd, d) for d in dense]
        a_loc = np.zeros((n, r0, n, r0))
        for s in range(n_slices):
            for sp in range(n_slices):
                block = r0_all[s, :, sp, :]
                if not block.any():
                    continue
                m_ss = dense[s].T @ hinv_dense[sp]
                a_loc += np.einsum("ij,ab->iajb", m_ss, block, optimize=True)
        a_loc = a_loc.reshape(n * r0, n * r0)
        a_loc = 0.5 * (a_loc + a_loc.T)
        comps[0] = _solve_spd(a_loc, rhs.reshape(-1)).reshape(n, r0)
        return

    r0_mat = r0_all.reshape(n_slices * r0, n_slices * r0)

    def matvec(v):
        y = np.empty((n, n_slices, r0))
        for s, mat in enumerate(slices):
            y[:, s, :] = mat @ v
        mixed = (y.reshape(n, -1) @ r0_mat.T).reshape(n, n_slices, r0)
        solved = h.solve(mixed.reshape(n, -1)).reshape(n, n_slices, r0)
        out = np.zeros((n, r0))
        for s, mat in enumerate(slices):
            out += mat.T @ solved[:, s, :]
        return out

    def precond(v):
        return h.solve(v)

    comps[0] = _pcg(matvec, rhs, precond, comps[0].copy(), cfg.cg_tol,
                    cfg.cg_maxiter)


def _pcg(matvec, rhs, precond, x0, tol, maxiter):
    x = x0
    r = rhs - matvec(x)
    z = precond(r)
    p = z.copy()
    rz = float((r * z).sum())
    ref = max(float(np.linalg.norm(rhs)), 1e-300)
    for _ in range(maxiter):
        if np.linalg.norm(r) <= tol * ref:
            break
        ap = matvec(p)
        alpha = rz / float((p * ap).sum())
        x = x + alpha * p
        r = r - alpha * ap
        z = precond(r)
        rz_new = float((r * z).sum())
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


def _push_right(comps, m):
    """QR the left unfolding of component m, absorb R into component m+1."""
    if m == 0:
        q, r = np.linalg.qr(comps[0])
        comps[0] = q
        comps[1] = np.einsum("ij,jdk->idk", r, comps[1])
    else:
        r_prev, d, r_next = comps[m].shape
        q, r = np.linalg.qr(comps[m].reshape(r_prev * d, r_next))
        comps[m] = q.reshape(r_prev, d, -1)
        comps[m + 1] = np.einsum("ij,jdk->idk", r, comps[m + 1])


def _push_left(comps, m):
    """LQ the right unfolding of component m, absorb the factor leftward."""
    r_prev, d, r_next = comps[m].shape
    q, r = np.linalg.qr(comps[m].reshape(r_prev, d * r_next).T)
    comps[m] = q.T.reshape(-1, d, r_next)
    carry = r.T
    if m == 1:
        comps[0] = comps[0] @ carry
    else:
        comps[m - 1] = np.einsum("idj,jk->idk", comps[m - 1], carry)


def als_solve(op, f, w0, h, cfg=None):
    """Minimize || H^{-1/2} (L W - F) ||_F over the fixed-rank manifold of w0.

    Returns (W, AlsInfo); the iota history is asserted nonincreasing.
    """
    cfg = cfg or AlsConfig()
    if w0.dims != tuple(op.trial_caps):
        raise ValueError("initial guess does not match the operator index set")
    if f.dims != w0.dims:
        raise ValueError("right-hand side does not match the index set")
    feasible = tt_max_ranks((w0.n_phys,) + w0.dims)
    if any(r > c for r, c in zip(w0.ranks, feasible)):
        raise ValueError("initial ranks exceed the feasible TT ranks")

    n_modes = w0.order
    f_comps = list(f.components)
    f0 = f.components[0]

    w = orthogonalize(w0, "left")
    comps = w.copy_components()
    iota0 = iota_value(op, TensorTrain(comps), f, h)
    history = [iota0]
    scale = max(iota0, float(np.sqrt(dual_norm_squared(h, f))), 1e-300)
    converged = False
    sweeps_done = 0

    for sweep in range(cfg.max_sweeps):
        # left-to-right half sweep
        r_pair, r_rhs = _right_env_lists(op, comps, f_comps)
        _update_physical(comps, op, f0, h, r_pair, r_rhs, cfg)
        if n_modes:
            _push_right(comps, 0)
            e_pair, e_rhs = _phys_products(op, comps[0], h, f0)[1:]
            e_pair, e_rhs = dict(e_pair), list(e_rhs)
            for m in range(1, n_modes + 1):
                _update_stochastic_core(m, comps, op, f_comps, e_pair, e_rhs,
                                        r_pair, r_rhs)
                if m < n_modes:
                    _push_right(comps, m)
                    g = comps[m]
                    for t, term in enumerate(op.terms):
                        o_t = term.cores[m - 1]
                        e_rhs[t] = _left_rhs_step(e_rhs[t], o_t, g, f_comps[m])
                        for tp, termp in enumerate(op.terms):
                            e_pair[(t, tp)] = _left_step(e_pair[(t, tp)], o_t,
                                                         termp.cores[m - 1], g)

            # right-to-left half sweep: the centre currently sits at the last
            # core, so the left frames are the column-orthonormal L->R cores
            e_pair, e_rhs = _phys_products(op, comps[0], h, f0)[1:]
            e_pair_list = [dict(e_pair)]
            e_rhs_list = [list(e_rhs)]
            for m in range(1, n_modes):
                g = comps[m]
                new_pair, new_rhs = {}, []
                for t, term in enumerate(op.terms):
                    o_t = term.cores[m - 1]
                    new_rhs.append(_left_rhs_step(e_rhs_list[-1][t], o_t, g,
                                                  f_comps[m]))
                    for tp, termp in enumerate(op.terms):
                        new_pair[(t, tp)] = _left_step(
                            e_pair_list[-1][(t, tp)], o_t, termp.cores[m - 1], g)
                e_pair_list.append(new_pair)
                e_rhs_list.append(new_rhs)
            r_pair, r_rhs = _right_env_lists(op, comps, f_comps)
            for m in range(n_modes, 0, -1):
                _update_stochastic_core(m, comps, op, f_comps,
                                        e_pair_list[m - 1], e_rhs_list[m - 1],
                                        r_pair, r_rhs)
                _push_left(comps, m)
                if m > 1:
                    g = comps[m]
                    for t, term in enumerate(op.terms):
                        o_t = term.cores[m - 1]
                        r_rhs[t][m - 1] = _right_rhs_step(r_rhs[t][m], o_t, g,
                                                          f_comps[m])
                        for tp, termp in enumerate(op.terms):
                            r_pair[(t, tp)][m - 1] = _right_step(
                                r_pair[(t, tp)][m], o_t, termp.cores[m - 1], g)
            r_pair, r_rhs = _right_env_lists(op, comps, f_comps)
            _update_physical(comps, op, f0, h, r_pair, r_rhs, cfg)

        sweeps_done = sweep + 1
        iota = iota_value(op, TensorTrain(comps), f, h)
        assert iota <= history[-1] + 1e-12 * scale, \
            "iota increased across an ALS sweep"
        improvement = history[-1] - iota
        history.append(iota)
        if improvement < cfg.tol * max(history[-2], 1e-300):
            converged = True
            break

    out = TensorTrain(comps, ortho="left" if n_modes else None)
    return out, AlsInfo(np.asarray(history), converged, sweeps_done)


def increase_rank(w, seed, scale=1e-3):
    """Append a seeded random rank-1 train scaled to scale * ||W||; every
    bond rank grows by exactly one."""
    rng = np.random.default_rng(seed)
    norm_w = tt_norm(w)
    u0 = rng.standard_normal((w.n_phys, 1))
    u0 /= max(np.linalg.norm(u0), 1e-300)
    comps = [u0 * scale * (norm_w if norm_w > 0.0 else 1.0)]
    for d in w.dims:
        core = rng.standard_normal((1, d, 1))
        core /= max(np.linalg.norm(core), 1e-300)
        comps.append(core)
    return tt_add(w, TensorTrain(comps))
