"""Conforming 2D triangle meshes, P1/P0 spaces, assembly kernels and refinement.

Cells are stored counterclockwise with the newest-vertex-bisection convention:
the refinement edge of cell (v0, v1, v2) is the edge (v1, v2) opposite the
newest vertex v0.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

_LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])  # edge i is opposite vertex i


class TriMesh:
    """Triangle mesh with edge topology.

    vertices : (nv, 2) float array
    cells    : (nc, 3) int array, counterclockwise
    geometry : None or "circle"; circle meshes re-project boundary vertices
               onto the unit circle after refinement.
    """

    def __init__(self, vertices, cells, geometry=None, parent_edges=None,
                 n_parent_vertices=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        self.geometry = geometry
        # refinement provenance: each vertex beyond n_parent_vertices is the
        # midpoint of the parent-mesh edge parent_edges[k]
        self.parent_edges = parent_edges
        self.n_parent_vertices = n_parent_vertices
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ValueError("vertices must have shape (nv, 2)")
        if self.cells.ndim != 2 or self.cells.shape[1] != 3:
            raise ValueError("cells must have shape (nc, 3)")
        self._build_cell_geometry()
        self._build_edges()

    # -- construction helpers -------------------------------------------------

    def _build_cell_geometry(self):
        v = self.vertices[self.cells]  # (nc, 3, 2)
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        area2 = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(area2 <= 0.0):
            bad = int(np.argmin(area2))
            raise ValueError(f"cell {bad} is not counterclockwise / degenerate")
        self.areas = 0.5 * area2
        sides = v[:, [2, 0, 1]] - v[:, [1, 2, 0]]
        self.cell_diameters = np.sqrt((sides ** 2).sum(axis=2)).max(axis=1)

    def _build_edges(self):
        nc = self.n_cells
        raw = self.cells[:, _LOCAL_EDGES].reshape(-1, 2)
        raw_sorted = np.sort(raw, axis=1)
        edges, inverse = np.unique(raw_sorted, axis=0, return_inverse=True)
        ne = len(edges)
        self.edges = edges                      # (ne, 2) sorted vertex pairs
        self.cell_edges = inverse.reshape(nc, 3)  # edge id per (cell, local edge)

        cell_ids = np.repeat(np.arange(nc), 3)
        count = np.bincount(inverse, minlength=ne)
        if np.any(count > 2):
            raise ValueError("an edge is adjacent to more than two cells")
        order = np.argsort(inverse, kind="stable")
        starts = np.cumsum(count) - count
        adj = np.full((ne, 2), -1, dtype=np.int64)
        adj[:, 0] = cell_ids[order[starts]]
        two = count == 2
        adj[two, 1] = cell_ids[order[starts[two] + 1]]
        # order adjacent pair ascending; jump sign convention follows from it
        swap = two & (adj[:, 0] > adj[:, 1])
        adj[swap] = adj[swap][:, ::-1]
        self.edge_cells = adj
        self.boundary_edges = count == 1
        self.interior_edges = np.flatnonzero(count == 2)

        self.boundary_vertices = np.zeros(self.n_vertices, dtype=bool)
        self.boundary_vertices[edges[self.boundary_edges].ravel()] = True

        vec = self.vertices[edges[:, 1]] - self.vertices[edges[:, 0]]
        self.edge_lengths = np.sqrt((vec ** 2).sum(axis=1))
        normals = np.column_stack([vec[:, 1], -vec[:, 0]]) / self.edge_lengths[:, None]
        # point interior normals from the first adjacent cell to the second
        cent = self.vertices[self.cells].mean(axis=1)
        ii = self.interior_edges
        d = cent[adj[ii, 1]] - cent[adj[ii, 0]]
        flip = (normals[ii] * d).sum(axis=1) < 0.0
        normals[ii[flip]] *= -1.0
        self.edge_normals = normals

    # -- basic queries ---------------------------------------------------------

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_cells(self):
        return self.cells.shape[0]

    def p1_gradients(self):
        """Gradients of the three hat functions on each cell, shape (nc, 3, 2)."""
        v = self.vertices[self.cells]
        g = np.empty((self.n_cells, 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            g[:, i, 0] = v[:, j, 1] - v[:, k, 1]
            g[:, i, 1] = v[:, k, 0] - v[:, j, 0]
        g /= (2.0 * self.areas)[:, None, None]
        return g

    def min_angle(self):
        v = self.vertices[self.cells]
        ang = np.inf
        for i in range(3):
            a = v[:, (i + 1) % 3] - v[:, i]
            b = v[:, (i + 2) % 3] - v[:, i]
            cosang = (a * b).sum(axis=1) / np.sqrt((a ** 2).sum(axis=1) * (b ** 2).sum(axis=1))
            ang = min(ang, np.arccos(np.clip(cosang, -1.0, 1.0)).min())
        return ang


class FeSpaceP1:
    """Continuous P1 space with homogeneous Dirichlet dofs eliminated."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.n_vertices = mesh.n_vertices
        self.interior = np.flatnonzero(~mesh.boundary_vertices)
        self.n_dofs = len(self.interior)
        self.dof_of_vertex = np.full(mesh.n_vertices, -1, dtype=np.int64)
        self.dof_of_vertex[self.interior] = np.arange(self.n_dofs)

    def restrict_matrix(self, mat):
        return mat.tocsr()[self.interior][:, self.interior].tocsr()

    def restrict_vector(self, vec):
        return np.asarray(vec)[self.interior]

    def embed(self, dof_values):
        """Interior dof values -> full nodal vector with zero boundary."""
        dof_values = np.asarray(dof_values)
        full = np.zeros((self.n_vertices,) + dof_values.shape[1:])
        full[self.interior] = dof_values
        return full


class FeSpaceP0:
    """Piecewise constant space; one dof per cell."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.n_dofs = mesh.n_cells


# -- assembly -------------------------------------------------------------------


def assemble_bilinear_p0(mesh, per_cell_matrix, space=None):
    """Assemble sum_T |T| (grad phi_row)^T M_T (grad phi_col) as sparse CSR.

    per_cell_matrix may be asymmetric; shape (nc, 2, 2).
    With a FeSpaceP1 given, rows/columns are restricted to interior dofs.
    """
    mats = np.asarray(per_cell_matrix, dtype=float)
    if mats.shape != (mesh.n_cells, 2, 2):
        raise ValueError(f"per-cell matrices must have shape ({mesh.n_cells}, 2, 2)")
    g = mesh.p1_gradients()
    loc = np.einsum("tai,tij,tbj->tab", g, mats, g) * mesh.areas[:, None, None]
    rows = np.repeat(mesh.cells, 3, axis=1).reshape(-1)
    cols = np.tile(mesh.cells, (1, 3)).reshape(-1)
    mat = sp.coo_matrix((loc.reshape(-1), (rows, cols)),
                        shape=(mesh.n_vertices, mesh.n_vertices)).tocsr()
    if space is not None:
        mat = space.restrict_matrix(mat)
    return mat


def assemble_stiffness_p0(mesh, per_cell_matrix, space=None):
    """Stiffness matrix for a symmetric piecewise constant coefficient."""
    mats = np.asarray(per_cell_matrix, dtype=float)
    if mats.shape != (mesh.n_cells, 2, 2):
        raise ValueError(f"per-cell matrices must have shape ({mesh.n_cells}, 2, 2)")
    if not np.allclose(mats[:, 0, 1], mats[:, 1, 0], atol=1e-12, rtol=1e-10):
        raise ValueError("per-cell coefficient matrices must be symmetric")
    return assemble_bilinear_p0(mesh, mats, space)


def assemble_load_p0(mesh, per_cell_value, space=None):
    """Load vector of a piecewise constant forcing: entry i = sum_T f_T |T|/3."""
    vals = np.asarray(per_cell_value, dtype=float)
    if vals.shape != (mesh.n_cells,):
        raise ValueError(f"per-cell values must have shape ({mesh.n_cells},)")
    contrib = np.repeat(vals * mesh.areas / 3.0, 3)
    vec = np.bincount(mesh.cells.reshape(-1), weights=contrib,
                      minlength=mesh.n_vertices)
    if space is not None:
        vec = space.restrict_vector(vec)
    return vec


def edge_jumps(mesh, per_cell_vector):
    """Normal jumps chi|_{T1}.n - chi|_{T2}.n of a piecewise constant vector field.

    Returns one scalar per interior edge, ordered like mesh.interior_edges.
    T1 is the lower adjacent cell index.
    """
    chi = np.asarray(per_cell_vector, dtype=float)
    if chi.shape != (mesh.n_cells, 2):
        raise ValueError(f"per-cell vectors must have shape ({mesh.n_cells}, 2)")
    ii = mesh.interior_edges
    n = mesh.edge_normals[ii]
    t1, t2 = mesh.edge_cells[ii, 0], mesh.edge_cells[ii, 1]
    return ((chi[t1] - chi[t2]) * n).sum(axis=1)


# -- marking and refinement -------------------------------------------------------


def dorfler_mark(indicators, theta):
    """Greedy minimal Doerfler set: sum of marked squared indicators >= theta * total.

    Ties are broken toward the lower index. Returns a sorted index array.
    """
    ind = np.asarray(indicators, dtype=float)
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must be in (0, 1]")
    if np.any(ind < 0.0):
        raise ValueError("indicators must be nonnegative")
    sq = ind ** 2
    total = sq.sum()
    if total <= 0.0:
        raise ValueError("all indicators are zero")
    order = np.lexsort((np.arange(len(sq)), -sq))
    csum = np.cumsum(sq[order])
    k = int(np.searchsorted(csum, theta * total - 1e-14 * total)) + 1
    return np.sort(order[:min(k, len(sq))])


def _nvb_order(vertices, cells):
    """Rotate each cell so its longest edge sits opposite vertex 0."""
    cells = np.asarray(cells, dtype=np.int64)
    v = vertices[cells]
    lengths = np.stack([((v[:, 2] - v[:, 1]) ** 2).sum(axis=1),
                        ((v[:, 0] - v[:, 2]) ** 2).sum(axis=1),
                        ((v[:, 1] - v[:, 0]) ** 2).sum(axis=1)], axis=1)
    peak = lengths.argmax(axis=1)
    out = cells.copy()
    for shift in (1, 2):
        rows = peak == shift
        out[rows] = np.roll(cells[rows], -shift, axis=1)
    return out


def _project_circle_boundary(mesh_vertices, boundary_mask):
    verts = mesh_vertices.copy()
    b = boundary_mask
    norms = np.sqrt((verts[b] ** 2).sum(axis=1))
    verts[b] /= norms[:, None]
    return verts


def refine(mesh, marked_cells):
    """Newest-vertex bisection of the marked cells with conforming closure."""
    marked = np.unique(np.asarray(list(marked_cells), dtype=np.int64))
    if marked.size == 0:
        raise ValueError("marked set is empty")
    if marked.min() < 0 or marked.max() >= mesh.n_cells:
        raise ValueError("marked cell index out of range")

    cells = mesh.cells
    ref_edge = mesh.cell_edges[:, 0]          # edge opposite vertex 0 = (v1, v2)
    split = np.zeros(len(mesh.edges), dtype=bool)
    split[ref_edge[marked]] = True
    while True:                               # closure: cells touching a split
        need = split[mesh.cell_edges].any(axis=1)   # edge split their own edge
        before = split.sum()
        split[ref_edge[need]] = True
        if split.sum() == before:
            break

    n_old = mesh.n_vertices
    split_ids = np.flatnonzero(split)
    mid_of_edge = {}
    new_vertices = [mesh.vertices]
    parent_edges = np.empty((len(split_ids), 2), dtype=np.int64)
    for k, e in enumerate(split_ids):
        a, b = mesh.edges[e]
        mid_of_edge[(a, b)] = n_old + k
        parent_edges[k] = (a, b)
    mids = 0.5 * (mesh.vertices[parent_edges[:, 0]] + mesh.vertices[parent_edges[:, 1]])
    new_vertices.append(mids)
    vertices = np.vstack(new_vertices)

    def midpoint(a, b):
        return mid_of_edge.get((a, b) if a < b else (b, a))

    out = []
    for t in range(mesh.n_cells):
        v0, v1, v2 = cells[t]
        m = midpoint(v1, v2)
        if m is None:
            out.append((v0, v1, v2))
            continue
        for child in ((m, v0, v1), (m, v2, v0)):
            c0, c1, c2 = child
            m2 = midpoint(c1, c2)
            if m2 is None:
                out.append(child)
            else:
                out.append((m2, c0, c1))
                out.append((m2, c2, c0))

    new_mesh = TriMesh(vertices, np.asarray(out, dtype=np.int64),
                       geometry=mesh.geometry, parent_edges=parent_edges,
                       n_parent_vertices=n_old)
    if mesh.geometry == "circle":
        verts = _project_circle_boundary(new_mesh.vertices, new_mesh.boundary_vertices)
        new_mesh = TriMesh(verts, new_mesh.cells, geometry="circle",
                           parent_edges=parent_edges, n_parent_vertices=n_old)
    return new_mesh


def refine_uniform_red(mesh):
    """Regular red refinement: every cell split into four similar children."""
    ne = len(mesh.edges)
    n_old = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mids])
    mid_id = n_old + np.arange(ne)
    m0 = mid_id[mesh.cell_edges[:, 0]]
    m1 = mid_id[mesh.cell_edges[:, 1]]
    m2 = mid_id[mesh.cell_edges[:, 2]]
    v0, v1, v2 = mesh.cells[:, 0], mesh.cells[:, 1], mesh.cells[:, 2]
    cells = np.concatenate([
        np.stack([v0, m2, m1], axis=1),
        np.stack([m2, v1, m0], axis=1),
        np.stack([m1, m0, v2], axis=1),
        np.stack([m0, m1, m2], axis=1),
    ])
    cells = _nvb_order(vertices, cells)
    new_mesh = TriMesh(vertices, cells, geometry=mesh.geometry,
                       parent_edges=mesh.edges.copy(), n_parent_vertices=n_old)
    if mesh.geometry == "circle":
        verts = _project_circle_boundary(new_mesh.vertices, new_mesh.boundary_vertices)
        new_mesh = TriMesh(verts, new_mesh.cells, geometry="circle",
                           parent_edges=mesh.edges.copy(), n_parent_vertices=n_old)
    return new_mesh


def prolongation_matrix(new_mesh):
    """Nodal P1 prolongation from the parent of a refined mesh, (nv_new, nv_old)."""
    if new_mesh.parent_edges is None:
        raise ValueError("mesh carries no refinement provenance")
    n_old = new_mesh.n_parent_vertices
    n_new = new_mesh.n_vertices
    n_add = n_new - n_old
    rows = np.concatenate([np.arange(n_old),
                           np.repeat(np.arange(n_old, n_new), 2)])
    cols = np.concatenate([np.arange(n_old), new_mesh.parent_edges.reshape(-1)])
    vals = np.concatenate([np.ones(n_old), np.full(2 * n_add, 0.5)])
    return sp.coo_matrix((vals, (rows, cols)), shape=(n_new, n_old)).tocsr()


# -- reference domains ----------------------------------------------------------


def make_reference_domain(name, level=0):
    """Initial meshes of the unit circle (16 cells) or L-shape (24 cells),
    uniformly red-refined `level` times."""
    if level < 0:
        raise ValueError("level must be nonnegative")
    if name == "circle":
        angles = 2.0 * np.pi * np.arange(16) / 16.0
        vertices = np.vstack([[0.0, 0.0],
                              np.column_stack([np.cos(angles), np.sin(angles)])])
        cells = np.array([(0, 1 + k, 1 + (k + 1) % 16) for k in range(16)])
        mesh = TriMesh(vertices, _nvb_order(vertices, cells), geometry="circle")
    elif name == "lshape":
        grid = np.linspace(-1.0, 1.0, 5)
        coords = np.array([(x, y) for y in grid for x in grid])
        idx = {tuple(np.round(c, 8)): i for i, c in enumerate(coords)}
        cells = []
        for i in range(4):
            for j in range(4):
                x0, y0 = grid[i], grid[j]
                if x0 >= -1e-12 and y0 <= -0.5 + 1e-12:
                    continue  # square inside the removed quadrant [0,1]x[-1,0]
                a = idx[(round(x0, 8), round(y0, 8))]
                b = idx[(round(x0 + 0.5, 8), round(y0, 8))]
                c = idx[(round(x0 + 0.5, 8), round(y0 + 0.5, 8))]
                d = idx[(round(x0, 8), round(y0 + 0.5, 8))]
                cells.append((a, b, c))
                cells.append((a, c, d))
        cells = np.asarray(cells, dtype=np.int64)
        used = np.unique(cells)
        remap = np.full(len(coords), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        vertices = coords[used]
        cells = remap[cells]
        mesh = TriMesh(vertices, _nvb_order(vertices, cells))
    else:
        raise ValueError(f"unknown reference domain {name!r}")
    for _ in range(level):
        mesh = refine_uniform_red(mesh)
    return mesh


# -- plain-text dumps -------------------------------------------------------------


def dump_mesh(mesh, stream):
    """Header "N_V N_C", vertex lines "x y", then 0-based cell lines "i j k"."""
    stream.write(f"{mesh.n_vertices} {mesh.n_cells}\n")
    for x, y in mesh.vertices:
        stream.write(f"{x:.17g} {y:.17g}\n")
    for i, j, k in mesh.cells:
        stream.write(f"{i} {j} {k}\n")


def dump_field(mesh, values, stream):
    """Mesh dump followed by one value per vertex or per cell."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] not in (mesh.n_vertices, mesh.n_cells):
        raise ValueError("field length matches neither vertices nor cells")
    dump_mesh(mesh, stream)
    for v in values:
        stream.write(f"{v:.17g}\n")


def load_mesh(stream):
    header = stream.readline().split()
    nv, nc = int(header[0]), int(header[1])
    vertices = np.array([[float(t) for t in stream.readline().split()]
                         for _ in range(nv)])
    cells = np.array([[int(t) for t in stream.readline().split()]
                      for _ in range(nc)], dtype=np.int64)
    return TriMesh(vertices, cells)
