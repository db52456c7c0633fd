"""Admissible two-point-flux meshes of 2D polygonal domains.

A :class:`Mesh` stores exactly what a TPFA finite volume scheme needs:
cell areas and centers, interior facets with their length, center
distance and unit normal, and boundary facets. Triangular meshes carry
their vertices and connectivity as well; purely combinatorial
configurations (used for oracles) can be built with :meth:`Mesh.from_tpfa`.

Cell centers are triangle circumcenters unless given explicitly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import MeshError

EMBEDDED_BASE = "embedded"


def _frozen(a, dtype=float):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


def circumcenters(vertices, triangles):
    """Circumcenters of triangles given by vertex coordinates and indices."""
    p = vertices[triangles]
    a, b, c = p[:, 0], p[:, 1], p[:, 2]
    ab = b - a
    ac = c - a
    d = 2.0 * (ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0])
    nab = np.einsum("ij,ij->i", ab, ab)
    nac = np.einsum("ij,ij->i", ac, ac)
    with np.errstate(divide="ignore", invalid="ignore"):
        ux = (ac[:, 1] * nab - ab[:, 1] * nac) / d
        uy = (ab[:, 0] * nac - ac[:, 0] * nab) / d
    return a + np.column_stack([ux, uy])


class Mesh:
    """Immutable TPFA mesh.

    Attributes
    ----------
    areas : (nc,) array
        Cell areas ``m_K``.
    centers : (nc, 2) array
        Cell centers ``x_K``.
    facet_left, facet_right : (nf,) int arrays
        Cells adjacent to each interior facet, ``left < right``.
    facet_length, facet_dist : (nf,) arrays
        ``m_sigma`` and ``d_sigma = |x_right - x_left|``.
    facet_normal : (nf, 2) array
        Geometric unit normal of the facet pointing out of the left cell.
    facet_mid : (nf, 2) array or None
        Facet barycenters.
    bnd_cell, bnd_length, bnd_dist, bnd_normal, bnd_mid
        Boundary facets: owner, length, distance from the owner center to the
        facet line, outward normal, barycenter.
    domain_area : float
        ``m_Omega``, computed from the boundary independently of the cells.
    vertices, triangles
        Geometry of triangular meshes (None for combinatorial ones).
    """

    def __init__(self, *, areas, centers, facet_left, facet_right, facet_length,
                 facet_dist, facet_normal, domain_area, facet_mid=None,
                 facet_vertices=None, bnd_cell=(), bnd_length=(), bnd_dist=(),
                 bnd_normal=None, bnd_mid=None, bnd_vertices=None,
                 vertices=None, triangles=None):
        self.areas = _frozen(areas)
        self.centers = _frozen(centers)
        self.facet_left = _frozen(facet_left, np.int64)
        self.facet_right = _frozen(facet_right, np.int64)
        self.facet_length = _frozen(facet_length)
        self.facet_dist = _frozen(facet_dist)
        self.facet_normal = _frozen(facet_normal)
        self.facet_mid = None if facet_mid is None else _frozen(facet_mid)
        self.facet_vertices = None if facet_vertices is None else _frozen(facet_vertices, np.int64)
        self.bnd_cell = _frozen(bnd_cell, np.int64)
        self.bnd_length = _frozen(bnd_length)
        self.bnd_dist = _frozen(bnd_dist)
        nb = self.bnd_cell.size
        self.bnd_normal = _frozen(np.zeros((nb, 2)) if bnd_normal is None else bnd_normal)
        self.bnd_mid = None if bnd_mid is None else _frozen(bnd_mid)
        self.bnd_vertices = None if bnd_vertices is None else _frozen(bnd_vertices, np.int64)
        self.domain_area = float(domain_area)
        self.vertices = None if vertices is None else _frozen(vertices)
        self.triangles = None if triangles is None else _frozen(triangles, np.int64)
        self._build_adjacency()

    # ------------------------------------------------------------ properties
    @property
    def n_cells(self):
        return self.areas.size

    @property
    def n_facets(self):
        return self.facet_left.size

    @property
    def transmissibility(self):
        """``m_sigma / d_sigma`` per interior facet."""
        return self.facet_length / self.facet_dist

    def cell_facets(self, k):
        """Interior facet indices of cell ``k`` in canonical order."""
        return self._adj_idx[self._adj_ptr[k]:self._adj_ptr[k + 1]]

    def cell_boundary_facets(self, k):
        return self._badj_idx[self._badj_ptr[k]:self._badj_ptr[k + 1]]

    def diameters(self):
        """Cell diameters (longest edge for triangles)."""
        if self.triangles is None:
            raise MeshError("cell diameters need triangle geometry")
        p = self.vertices[self.triangles]
        e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        return np.sqrt(np.einsum("ijk,ijk->ij", e, e)).max(axis=1)

    def size(self):
        """``size(T)``: largest cell diameter."""
        return float(self.diameters().max())

    def _build_adjacency(self):
        nc = self.n_cells
        nf = self.n_facets
        cells = np.concatenate([self.facet_left, self.facet_right])
        fids = np.concatenate([np.arange(nf), np.arange(nf)])
        order = np.lexsort((fids, cells))
        self._adj_idx = _frozen(fids[order], np.int64)
        self._adj_ptr = _frozen(np.concatenate([[0], np.cumsum(np.bincount(cells, minlength=nc))]), np.int64)
        border = np.lexsort((np.arange(self.bnd_cell.size), self.bnd_cell))
        self._badj_idx = _frozen(border, np.int64)
        self._badj_ptr = _frozen(
            np.concatenate([[0], np.cumsum(np.bincount(self.bnd_cell, minlength=nc))]), np.int64)

    # ---------------------------------------------------------- constructors
    @classmethod
    def from_triangles(cls, vertices, triangles, centers=None):
        """Build the TPFA data of a conforming triangulation.

        No admissibility check is made beyond what is needed to define the
        data (positive areas, at most two triangles per edge); use
        :func:`validate_admissible` or :func:`load_mesh` for that.
        """
        vertices = np.asarray(vertices, dtype=float)
        triangles = np.asarray(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must be an (n, 2) array")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise MeshError("triangles must be an (m, 3) array")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise MeshError("triangle vertex index out of range")
        p = vertices[triangles]
        cross = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                 - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
        areas = 0.5 * cross
        if np.any(areas <= 0):
            k = int(np.flatnonzero(areas <= 0)[0])
            raise MeshError(f"triangle {k} is degenerate or clockwise",
                            {"positive_areas": f"cell {k} has signed area {areas[k]:.3e}"})
        if centers is None:
            centers = circumcenters(vertices, triangles)
        centers = np.asarray(centers, dtype=float)

        nc = len(triangles)
        # oriented half-edges (a -> b) of each triangle, counter-clockwise
        ha = triangles[:, [0, 1, 2]].ravel()
        hb = triangles[:, [1, 2, 0]].ravel()
        hcell = np.repeat(np.arange(nc), 3)
        key = np.column_stack([np.minimum(ha, hb), np.maximum(ha, hb)])
        uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inv = inv.ravel()
        if np.any(counts > 2):
            e = uniq[np.flatnonzero(counts > 2)[0]]
            raise MeshError(f"edge {tuple(e)} shared by more than two triangles",
                            {"facet_incidence": f"non-manifold edge {tuple(e)}"})

        order = np.lexsort((hcell, inv))
        inv_s, cell_s, a_s, b_s = inv[order], hcell[order], ha[order], hb[order]
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        interior = counts == 2
        first = starts[interior]
        second = first + 1
        # lexsort puts the lower cell index first
        left = cell_s[first]
        right = cell_s[second]
        pa = vertices[a_s[first]]
        pb = vertices[b_s[first]]
        t = pb - pa
        length = np.hypot(t[:, 0], t[:, 1])
        normal = np.column_stack([t[:, 1], -t[:, 0]]) / length[:, None]
        dvec = centers[right] - centers[left]
        dist = np.hypot(dvec[:, 0], dvec[:, 1])
        fmid = 0.5 * (pa + pb)
        fverts = np.column_stack([a_s[first], b_s[first]])

        bfirst = starts[~interior]
        bcell = cell_s[bfirst]
        qa = vertices[a_s[bfirst]]
        qb = vertices[b_s[bfirst]]
        bt = qb - qa
        blen = np.hypot(bt[:, 0], bt[:, 1])
        bnormal = np.column_stack([bt[:, 1], -bt[:, 0]]) / blen[:, None]
        bmid = 0.5 * (qa + qb)
        bdist = np.abs(np.einsum("ij,ij->i", bmid - centers[bcell], bnormal))
        bverts = np.column_stack([a_s[bfirst], b_s[bfirst]])
        # shoelace over the oriented boundary
        domain_area = 0.5 * float(np.sum(qa[:, 0] * qb[:, 1] - qb[:, 0] * qa[:, 1]))
        del inv_s
        return cls(areas=areas, centers=centers, facet_left=left, facet_right=right,
                   facet_length=length, facet_dist=dist, facet_normal=normal,
                   facet_mid=fmid, facet_vertices=fverts, domain_area=domain_area,
                   bnd_cell=bcell, bnd_length=blen, bnd_dist=bdist, bnd_normal=bnormal,
                   bnd_mid=bmid, bnd_vertices=bverts, vertices=vertices, triangles=triangles)

    @classmethod
    def from_tpfa(cls, areas, left, right, lengths, distances, centers=None):
        """Combinatorial mesh from raw TPFA data (no geometry).

        Facet normals are taken as the normalised center differences when
        ``centers`` is given, so such meshes are orthogonal by construction.
        """
        areas = np.asarray(areas, dtype=float)
        left = np.asarray(left, dtype=np.int64)
        right = np.asarray(right, dtype=np.int64)
        swap = left > right
        left, right = np.where(swap, right, left), np.where(swap, left, right)
        if centers is None:
            centers = np.column_stack([np.arange(areas.size, dtype=float), np.zeros(areas.size)])
            normal = np.tile([1.0, 0.0], (left.size, 1))
        else:
            centers = np.asarray(centers, dtype=float)
            dv = centers[right] - centers[left]
            normal = dv / np.hypot(dv[:, 0], dv[:, 1])[:, None]
        return cls(areas=areas, centers=centers, facet_left=left, facet_right=right,
                   facet_length=lengths, facet_dist=distances, facet_normal=normal,
                   domain_area=float(areas.sum()))

    def with_centers(self, centers):
        """Same triangulation with other cell centers."""
        return Mesh.from_triangles(self.vertices, self.triangles, centers)


# ------------------------------------------------------------------ file I/O

def parse_mesh(text):
    """Parse the line-oriented mesh format into ``(vertices, triangles)``.

    The format is ``vertices N`` followed by N lines ``x y``, then
    ``triangles M`` followed by M lines ``i j k`` (0-based, counter-clockwise).
    Blank lines and ``#`` comments are ignored.
    """
    lines = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append((n, line))
    it = iter(lines)

    def header(name):
        try:
            n, line = next(it)
        except StopIteration:
            raise MeshError(f"missing '{name}' header") from None
        parts = line.split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshError(f"line {n}: expected '{name} <count>', got {line!r}")
        try:
            count = int(parts[1])
        except ValueError:
            raise MeshError(f"line {n}: bad count {parts[1]!r}") from None
        if count < 0:
            raise MeshError(f"line {n}: negative count")
        return count

    def rows(count, width, conv, what):
        out = []
        for _ in range(count):
            try:
                n, line = next(it)
            except StopIteration:
                raise MeshError(f"unexpected end of file while reading {what}") from None
            parts = line.split()
            if len(parts) != width:
                raise MeshError(f"line {n}: expected {width} values for {what}, got {len(parts)}")
            try:
                out.append([conv(v) for v in parts])
            except ValueError:
                raise MeshError(f"line {n}: cannot parse {what} {line!r}") from None
        return out

    nv = header("vertices")
    verts = rows(nv, 2, float, "vertex")
    nt = header("triangles")
    tris = rows(nt, 3, int, "triangle")
    rest = next(it, None)
    if rest is not None:
        raise MeshError(f"line {rest[0]}: trailing content {rest[1]!r}")
    for i, tri in enumerate(tris):
        if min(tri) < 0 or max(tri) >= nv:
            raise MeshError(f"triangle {i}: vertex index out of range 0..{nv - 1}")
    return np.array(verts, dtype=float).reshape(-1, 2), np.array(tris, dtype=np.int64).reshape(-1, 3)


def format_mesh(mesh):
    """Serialise a triangular mesh in the line-oriented format."""
    if mesh.triangles is None:
        raise MeshError("only triangular meshes can be written")
    out = [f"vertices {len(mesh.vertices)}"]
    out += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    out.append(f"triangles {len(mesh.triangles)}")
    out += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    return "\n".join(out) + "\n"


def write_mesh(mesh, path):
    Path(path).write_text(format_mesh(mesh))


def embedded_base_text():
    return resources.files("sqrafp").joinpath("data/base_acute8.mesh").read_text()


def load_mesh(source=EMBEDDED_BASE, validate=True):
    """Read a mesh file (or the embedded acute base) and check admissibility.

    Raises
    ------
    MeshError
        On a parse error, or when ``validate`` is set and an admissibility
        check fails; ``diagnostics`` names the failing checks.
    """
    if isinstance(source, str) and source == EMBEDDED_BASE:
        text = embedded_base_text()
    else:
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise MeshError(f"cannot read mesh file {source}: {exc}") from exc
    vertices, triangles = parse_mesh(text)
    mesh = Mesh.from_triangles(vertices, triangles)
    if validate:
        report = validate_admissible(mesh)
        if not report.passed:
            raise MeshError("mesh is not admissible: " + "; ".join(report.failures().values()),
                            report.failures())
    return mesh


# --------------------------------------------------------------- refinement

def refine_subdivision(mesh, m):
    """Split every triangle into ``m**2`` similar triangles.

    Each edge is cut into ``m`` equal segments and the cut points are joined
    by lines parallel to the edges. Points on shared edges are generated from
    a canonical edge orientation so that neighbouring triangles agree
    bitwise. Circumcenters are recomputed.
    """
    if mesh.triangles is None:
        raise MeshError("subdivision needs a triangular mesh")
    m = int(m)
    if m < 1:
        raise ValueError("subdivision factor must be >= 1")
    if m == 1:
        return Mesh.from_triangles(mesh.vertices, mesh.triangles)
    V = mesh.vertices
    index = {}
    coords = []

    def point(key, xy):
        k = index.get(key)
        if k is None:
            k = index[key] = len(coords)
            coords.append(xy)
        return k

    lattice = [(i, j) for j in range(m + 1) for i in range(m + 1 - j)]
    new_tris = []
    for t, (g0, g1, g2) in enumerate(mesh.triangles.tolist()):
        ids = {}
        for i, j in lattice:
            w = ((g0, m - i - j), (g1, i), (g2, j))
            nz = [(g, l) for g, l in w if l > 0]
            if len(nz) == 1:
                g = nz[0][0]
                key = ("v", g)
                xy = V[g]
            elif len(nz) == 2:
                (ga, la), (gb, lb) = sorted(nz)
                key = ("e", ga, gb, lb)
                xy = V[ga] + (lb / m) * (V[gb] - V[ga])
            else:
                key = ("t", t, i, j)
                xy = V[g0] + (i / m) * (V[g1] - V[g0]) + (j / m) * (V[g2] - V[g0])
            ids[i, j] = point(key, xy)
        for i, j in lattice:
            if i + j <= m - 1:
                new_tris.append((ids[i, j], ids[i + 1, j], ids[i, j + 1]))
            if i + j <= m - 2:
                new_tris.append((ids[i + 1, j], ids[i + 1, j + 1], ids[i, j + 1]))
    return Mesh.from_triangles(np.array(coords), np.array(new_tris, dtype=np.int64))


def _check_square_base(base, tol=1e-12):
    V = base.vertices
    if base.triangles is None:
        raise MeshError("repetition needs a triangular mesh")
    if V.min() < -tol or V.max() > 1 + tol or abs(base.domain_area - 1.0) > tol:
        raise MeshError("repetition needs a base mesh of the unit square")
    bv = np.unique(base.bnd_vertices)
    P = V[bv]
    for axis in (0, 1):
        lo = np.sort(P[np.abs(P[:, axis]) <= tol, 1 - axis])
        hi = np.sort(P[np.abs(P[:, axis] - 1) <= tol, 1 - axis])
        if lo.shape != hi.shape or np.any(lo != hi):
            side = "left/right" if axis == 0 else "bottom/top"
            raise MeshError(f"incompatible boundary trace on {side} sides",
                            {"boundary_trace": f"{side} vertex positions differ"})


def refine_repetition(base, n):
    """Tile the unit square with ``n x n`` copies of ``base`` scaled by ``1/n``.

    The base must mesh the unit square and have translation compatible
    boundary traces (same vertex positions on opposite sides).
    """
    n = int(n)
    if n < 1:
        raise ValueError("repetition count must be >= 1")
    _check_square_base(base)
    V = base.vertices
    index = {}
    coords = []
    tris = []
    for j in range(n):
        for i in range(n):
            local = []
            for x, y in V.tolist():
                xy = ((x + i) / n, (y + j) / n)
                k = index.get(xy)
                if k is None:
                    k = index[xy] = len(coords)
                    coords.append(xy)
                local.append(k)
            local = np.array(local)
            tris.append(local[base.triangles])
    return Mesh.from_triangles(np.array(coords), np.concatenate(tris))


def refine(mesh, kind, level):
    """Refinement used by ladders: level ``l`` means factor ``2**l``."""
    if level < 0:
        raise ValueError("refinement level must be >= 0")
    factor = 2 ** int(level)
    if kind == "subdivision":
        return refine_subdivision(mesh, factor)
    if kind == "repetition":
        return refine_repetition(mesh, factor)
    raise ValueError(f"unknown refinement kind {kind!r}")


# ------------------------------------------------------------- validation

@dataclass
class AdmissibilityReport:
    """Outcome of :func:`validate_admissible`: check name -> (ok, message)."""

    checks: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(ok for ok, _ in self.checks.values())

    def failures(self):
        return {k: msg for k, (ok, msg) in self.checks.items() if not ok}

    def __str__(self):
        return "\n".join(f"{k}: {'ok' if ok else 'FAIL'} {msg}".rstrip()
                         for k, (ok, msg) in self.checks.items())


def validate_admissible(mesh, ortho_tol=1e-10, area_tol=1e-12):
    """Check the TPFA admissibility conditions and report per check."""
    checks = {}
    bad = np.flatnonzero(mesh.areas <= 0)
    checks["positive_areas"] = (bad.size == 0, f"cell {bad[0]} has area {mesh.areas[bad[0]]:.3e}" if bad.size else "")

    total = float(mesh.areas.sum())
    err = abs(total - mesh.domain_area)
    checks["tessellation"] = (err <= area_tol * abs(mesh.domain_area),
                              f"sum of areas {total!r} vs domain {mesh.domain_area!r}")

    nc = mesh.n_cells
    counts = np.bincount(np.concatenate([mesh.facet_left, mesh.facet_right]), minlength=nc)
    deg = np.diff(mesh._adj_ptr)
    same = np.array_equal(counts, deg) and np.all(mesh.facet_left != mesh.facet_right)
    checks["facet_incidence"] = (bool(same), "" if same else "adjacency lists inconsistent with facets")

    msgs = []
    badm = np.flatnonzero(mesh.facet_length <= 0)
    if badm.size:
        msgs.append(f"facet {badm[0]} has m_sigma = {mesh.facet_length[badm[0]]:.3e}")
    badd = np.flatnonzero(~(mesh.facet_dist > 0))
    if badd.size:
        f = badd[0]
        msgs.append(f"d_sigma = {mesh.facet_dist[f]:.3e} across facet {f} "
                    f"(cells {mesh.facet_left[f]}|{mesh.facet_right[f]})")
    if mesh.bnd_length.size and np.any(mesh.bnd_length <= 0):
        msgs.append("boundary facet with zero length")
    checks["positive_facets"] = (not msgs, "; ".join(msgs))

    tree = cKDTree(mesh.centers)
    scale = max(1.0, float(np.abs(mesh.centers).max())) if nc else 1.0
    pairs = tree.query_pairs(r=1e-14 * scale, output_type="ndarray")
    checks["distinct_centers"] = (len(pairs) == 0,
                                  f"cells {pairs[0][0]} and {pairs[0][1]} share a center" if len(pairs) else "")

    with np.errstate(divide="ignore", invalid="ignore"):
        dv = mesh.centers[mesh.facet_right] - mesh.centers[mesh.facet_left]
        dev = np.abs(dv / mesh.facet_dist[:, None] - mesh.facet_normal).max(axis=1) if mesh.n_facets else np.zeros(0)
    dev = np.where(np.isfinite(dev), dev, np.inf)
    worst = int(np.argmax(dev)) if dev.size else -1
    ok = bool(dev.size == 0 or dev[worst] <= ortho_tol)
    checks["orthogonality"] = (ok, "" if ok else
                               f"facet {worst} (cells {mesh.facet_left[worst]}|{mesh.facet_right[worst]}): "
                               f"|(x_L - x_K)/d - n| = {dev[worst]:.3e}")
    return AdmissibilityReport(checks)


# ------------------------------------------------------------------ quality

@dataclass
class MeshQuality:
    """Regularity, isotropy and superadmissibility measures of a mesh."""

    zeta: float
    size: float
    d_min: float
    eps_iso: np.ndarray            # per-cell isotropy defect
    eps_iso_max: float             # max over the designated subset
    iso_subset: np.ndarray         # designated (superadmissible interior) cells
    iso_fraction: float            # area fraction with defect <= iso_threshold
    iso_threshold: float
    superadmissibility_defect: float
    n_cells: int

    def as_dict(self):
        return {
            "n_cells": self.n_cells,
            "zeta": self.zeta,
            "size": self.size,
            "d_min": self.d_min,
            "eps_iso_max_subset": self.eps_iso_max,
            "eps_iso_max_all": float(self.eps_iso.max()),
            "eps_iso_mean": float(self.eps_iso.mean()),
            "iso_subset_cells": int(self.iso_subset.sum()),
            "iso_threshold": self.iso_threshold,
            "iso_fraction": self.iso_fraction,
            "superadmissibility_defect": self.superadmissibility_defect,
        }

    def to_text(self):
        return "\n".join(f"{k} = {_fmt(v)}" for k, v in self.as_dict().items()) + "\n"

    def histogram(self, bins=(0.0, 1e-12, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0, np.inf)):
        """Counts of per-cell isotropy defects between the given bin edges."""
        return np.histogram(self.eps_iso, bins=np.asarray(bins))[0]


def _fmt(v):
    return repr(v) if isinstance(v, int) else f"{v:.17e}"


def _point_triangle_distance(x, tri):
    a, b, c = tri

    def seg(p, q):
        d = q - p
        t = np.clip(np.dot(x - p, d) / np.dot(d, d), 0.0, 1.0)
        return math.hypot(*(x - p - t * d))

    cr = lambda p, q: (q[0] - p[0]) * (x[1] - p[1]) - (q[1] - p[1]) * (x[0] - p[0])  # noqa: E731
    if cr(a, b) >= 0 and cr(b, c) >= 0 and cr(c, a) >= 0:
        return 0.0
    return min(seg(a, b), seg(b, c), seg(c, a))


def isotropy_matrices(mesh):
    """``(1 / 2 m_K) sum m_sigma d_sigma n n^T`` over all facets of each cell.

    Boundary facets use the distance from the center to the facet line.
    """
    M = np.zeros((mesh.n_cells, 2, 2))
    w = mesh.facet_length * mesh.facet_dist
    nn = np.einsum("fi,fj->fij", mesh.facet_normal, mesh.facet_normal) * w[:, None, None]
    np.add.at(M, mesh.facet_left, nn)
    np.add.at(M, mesh.facet_right, nn)
    wb = mesh.bnd_length * mesh.bnd_dist
    nb = np.einsum("fi,fj->fij", mesh.bnd_normal, mesh.bnd_normal) * wb[:, None, None]
    np.add.at(M, mesh.bnd_cell, nb)
    return M / (2.0 * mesh.areas[:, None, None])


def quality_metrics(mesh, iso_threshold=0.05):
    """Compute :class:`MeshQuality` of an admissible triangular mesh."""
    diam = mesh.diameters()
    size = float(diam.max())
    nc = mesh.n_cells

    vol = np.zeros(nc)
    w = mesh.facet_length * mesh.facet_dist / 4.0
    np.add.at(vol, mesh.facet_left, w)
    np.add.at(vol, mesh.facet_right, w)
    r_vol = vol / mesh.areas

    dmin_cell = np.full(nc, np.inf)
    np.minimum.at(dmin_cell, mesh.facet_left, mesh.facet_dist)
    np.minimum.at(dmin_cell, mesh.facet_right, mesh.facet_dist)
    with np.errstate(divide="ignore"):
        r_diam = np.where(np.isfinite(dmin_cell), diam / dmin_cell, 0.0)

    tri_pts = mesh.vertices[mesh.triangles]
    dist_in = np.array([_point_triangle_distance(mesh.centers[k], tri_pts[k]) for k in range(nc)])
    r_center = dist_in / diam

    all_d = np.concatenate([mesh.facet_dist, mesh.bnd_dist])
    r_facet = all_d.max() / size

    zeta = float(max(r_vol.max(), r_diam.max(), r_center.max(), r_facet))

    M = isotropy_matrices(mesh)
    lam = np.linalg.eigvalsh(M)
    eps = np.maximum(np.abs(lam[:, 1] - 1.0), np.abs(1.0 - lam[:, 0]))

    mid_lr = 0.5 * (mesh.centers[mesh.facet_left] + mesh.centers[mesh.facet_right])
    sdef = np.hypot(*(mesh.facet_mid - mid_lr).T) if mesh.n_facets else np.zeros(0)
    cell_sdef = np.zeros(nc)
    np.maximum.at(cell_sdef, mesh.facet_left, sdef)
    np.maximum.at(cell_sdef, mesh.facet_right, sdef)
    touches_bnd = np.zeros(nc, dtype=bool)
    touches_bnd[mesh.bnd_cell] = True
    subset = (~touches_bnd) & (cell_sdef <= 1e-10 * size)
    eps_sub = float(eps[subset].max()) if subset.any() else float("nan")
    frac = float(mesh.areas[eps <= iso_threshold].sum() / mesh.areas.sum())

    return MeshQuality(zeta=zeta, size=size, d_min=float(mesh.facet_dist.min()),
                       eps_iso=eps, eps_iso_max=eps_sub, iso_subset=subset,
                       iso_fraction=frac, iso_threshold=iso_threshold,
                       superadmissibility_defect=float(sdef.max()) if sdef.size else 0.0,
                       n_cells=nc)


def cfl_ratio(tau, mesh):
    """``tau / d_min`` over interior facets."""
    return float(tau) / float(mesh.facet_dist.min())
