"""Tetrahedral mesh container with tagged boundary regions and oriented faces.

The mesh is the geometric backbone of the solver: affine tetrahedra, a global
face table with a deterministic orientation convention (needed so that
normal-continuous vector elements can share face unknowns consistently), and
named boundary regions used to attach boundary conditions.

Orientation convention: every face stores one global unit normal.  For
interior faces it points from the lower-numbered adjacent element into the
higher-numbered one; for boundary faces it points outward.  The convention
depends only on the element numbering, so rebuilding the face table of the
same mesh reproduces identical normals.

Mesh file format (ASCII, ``#`` starts a comment line)::

    vertices <count>
    x y z            # one vertex per line, meters
    tets <count>
    a b c d          # zero-based vertex ids
    faces <count>
    a b c region     # boundary faces only; every boundary face tagged once

Meshes are immutable after construction and safe to share between threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "AffineMap",
    "Mesh",
    "MeshError",
    "MeshFormatError",
    "MeshTopologyError",
    "box_mesh",
    "load_mesh",
]

# Local faces of a tet, ordered so the triple's right-hand normal points
# outward when the tet (v0,v1,v2,v3) has positive signed volume.  Face i is
# opposite local vertex i.
LOCAL_FACES = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))

# Local edges of a tet as sorted local vertex pairs.
LOCAL_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


class MeshError(Exception):
    """Base class for mesh construction failures."""


class MeshFormatError(MeshError):
    """Raised when a mesh file cannot be parsed."""


class MeshTopologyError(MeshError):
    """Raised when mesh connectivity violates an invariant."""


@dataclass(frozen=True)
class AffineMap:
    """Affine geometry of one tetrahedron: x = origin + J @ xi."""

    origin: np.ndarray
    jacobian: np.ndarray
    det: float
    inverse: np.ndarray
    inverse_transpose: np.ndarray

    @property
    def volume(self) -> float:
        return self.det / 6.0


class Mesh:
    """Immutable tetrahedral mesh with boundary tags and a global face table.

    Attributes
    ----------
    vertices : (nv, 3) float array
    tets : (nt, 4) int array, positive signed volume under stored order
    face_vertices : (nf, 3) int array, ordered consistently with face_normals
    face_normals : (nf, 3) unit normals under the global orientation rule
    face_areas : (nf,) face areas
    face_elems : (nf, 2) adjacent element ids, (owner, neighbor or -1)
    face_local : (nf, 2) local face index inside each adjacent element
    elem_faces : (nt, 4) global face id of each local face
    elem_face_signs : (nt, 4) +1 where the element owns the face normal
    boundary_faces : (nb,) global ids of boundary faces
    region_of_face : (nf,) region index per face, -1 for interior
    region_names : tuple of region names, index = region id
    """

    def __init__(self, vertices, tets, boundary_regions):
        """Build the mesh; ``boundary_regions`` maps tag -> (m, 3) vertex triples."""
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.tets = np.ascontiguousarray(tets, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshTopologyError("vertices must be an (n, 3) array")
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise MeshTopologyError("tets must be an (n, 4) array")
        nv = len(self.vertices)
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= nv):
            raise MeshTopologyError(
                f"tet references vertex id outside [0, {nv})"
            )

        self._check_volumes()
        self._build_face_table()
        self._assign_regions(boundary_regions)
        self._edges = None
        self.vertices.setflags(write=False)
        self.tets.setflags(write=False)

    # -- construction ------------------------------------------------------

    def _check_volumes(self):
        v = self.vertices[self.tets]
        d = np.linalg.det(np.stack(
            [v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]], axis=2))
        bad = np.nonzero(d <= 0.0)[0]
        if bad.size:
            raise MeshTopologyError(
                f"tet {bad[0]} has non-positive signed volume (inverted tet)"
            )
        self._tet_volumes = d / 6.0

    def _build_face_table(self):
        nt = len(self.tets)
        # Map sorted vertex triple -> list of (elem, local_face).
        incident: dict[tuple, list] = {}
        for e in range(nt):
            tet = self.tets[e]
            for lf, loc in enumerate(LOCAL_FACES):
                tri = (int(tet[loc[0]]), int(tet[loc[1]]), int(tet[loc[2]]))
                key = tuple(sorted(tri))
                incident.setdefault(key, []).append((e, lf))

        for key, inc in incident.items():
            if len(inc) > 2:
                raise MeshTopologyError(
                    f"face {key} shared by more than two tets"
                )

        # Deterministic face numbering: sort by sorted vertex triple.
        keys = sorted(incident.keys())
        nf = len(keys)
        self.face_vertices = np.empty((nf, 3), dtype=np.int64)
        self.face_normals = np.empty((nf, 3))
        self.face_areas = np.empty(nf)
        self.face_elems = np.full((nf, 2), -1, dtype=np.int64)
        self.face_local = np.full((nf, 2), -1, dtype=np.int64)
        self.elem_faces = np.empty((nt, 4), dtype=np.int64)
        self.elem_face_signs = np.empty((nt, 4), dtype=np.int64)
        boundary = []

        for fid, key in enumerate(keys):
            inc = sorted(incident[key])  # owner = lowest element id
            owner, owner_lf = inc[0]
            self.face_elems[fid, 0] = owner
            self.face_local[fid, 0] = owner_lf
            self.elem_faces[owner, owner_lf] = fid
            self.elem_face_signs[owner, owner_lf] = 1
            if len(inc) == 2:
                nbr, nbr_lf = inc[1]
                self.face_elems[fid, 1] = nbr
                self.face_local[fid, 1] = nbr_lf
                self.elem_faces[nbr, nbr_lf] = fid
                self.elem_face_signs[nbr, nbr_lf] = -1
            else:
                boundary.append(fid)
            # Store the owner's outward-ordered triple; its right-hand normal
            # realizes the global convention (owner -> neighbor / outward).
            tet = self.tets[owner]
            loc = LOCAL_FACES[owner_lf]
            tri = np.array([tet[loc[0]], tet[loc[1]], tet[loc[2]]])
            self.face_vertices[fid] = tri
            p = self.vertices[tri]
            cross = np.cross(p[1] - p[0], p[2] - p[0])
            area2 = np.linalg.norm(cross)
            self.face_normals[fid] = cross / area2
            self.face_areas[fid] = 0.5 * area2

        self.boundary_faces = np.array(boundary, dtype=np.int64)
        for arr in (self.face_vertices, self.face_normals, self.face_areas,
                    self.face_elems, self.face_local, self.elem_faces,
                    self.elem_face_signs, self.boundary_faces):
            arr.setflags(write=False)

    def _assign_regions(self, boundary_regions):
        key_to_fid = {tuple(sorted(tri)): fid
                      for fid, tri in enumerate(self.face_vertices)}
        boundary_set = set(int(f) for f in self.boundary_faces)
        self.region_names = tuple(boundary_regions.keys())
        self.region_of_face = np.full(len(self.face_vertices), -1,
                                      dtype=np.int64)
        for rid, (tag, tris) in enumerate(boundary_regions.items()):
            for tri in np.asarray(tris, dtype=np.int64).reshape(-1, 3):
                key = tuple(sorted(int(v) for v in tri))
                fid = key_to_fid.get(key)
                if fid is None:
                    raise MeshTopologyError(
                        f"region '{tag}' lists face {key} that is not a face "
                        "of any tet (dangling face)"
                    )
                if fid not in boundary_set:
                    raise MeshTopologyError(
                        f"region '{tag}' lists interior face {key}"
                    )
                if self.region_of_face[fid] != -1:
                    raise MeshTopologyError(
                        f"boundary face {key} tagged more than once"
                    )
                self.region_of_face[fid] = rid
        untagged = [int(f) for f in self.boundary_faces
                    if self.region_of_face[f] == -1]
        if untagged:
            tri = tuple(int(v) for v in self.face_vertices[untagged[0]])
            raise MeshTopologyError(
                f"boundary face {tri} carries no region tag"
            )
        self.region_of_face.setflags(write=False)

    # -- queries -----------------------------------------------------------

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_tets(self) -> int:
        return len(self.tets)

    @property
    def num_faces(self) -> int:
        return len(self.face_vertices)

    @property
    def tet_volumes(self) -> np.ndarray:
        return self._tet_volumes

    def region_faces(self, tag: str) -> np.ndarray:
        """Global face ids of the boundary region ``tag``."""
        if tag not in self.region_names:
            raise KeyError(
                f"unknown boundary region '{tag}'; known: {self.region_names}"
            )
        rid = self.region_names.index(tag)
        return np.nonzero(self.region_of_face == rid)[0]

    def element_map(self, elem: int) -> AffineMap:
        """Affine map of tet ``elem``: reference coordinates to physical."""
        tet = self.tets[elem]
        p = self.vertices[tet]
        jac = np.stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]], axis=1)
        det = float(np.linalg.det(jac))
        inv = np.linalg.inv(jac)
        return AffineMap(origin=p[0].copy(), jacobian=jac, det=det,
                         inverse=inv, inverse_transpose=inv.T.copy())

    def element_maps(self):
        """Vectorized Jacobians for all elements: (J, detJ, Jinv)."""
        p = self.vertices[self.tets]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0],
                        p[:, 3] - p[:, 0]], axis=2)
        det = np.linalg.det(jac)
        inv = np.linalg.inv(jac)
        return p[:, 0].copy(), jac, det, inv

    @property
    def edges(self) -> np.ndarray:
        """Unique mesh edges as sorted vertex pairs, lexicographically ordered."""
        if self._edges is None:
            pairs = set()
            for tet in self.tets:
                for a, b in LOCAL_EDGES:
                    va, vb = int(tet[a]), int(tet[b])
                    pairs.add((va, vb) if va < vb else (vb, va))
            edges = np.array(sorted(pairs), dtype=np.int64)
            edges.setflags(write=False)
            self._edges = edges
        return self._edges


def load_mesh(path) -> Mesh:
    """Read a mesh from the ASCII format described in the module docstring."""
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as exc:
        raise MeshFormatError(f"cannot read mesh file {path}: {exc}") from exc

    lines = []
    for lineno, line in enumerate(raw.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if stripped:
            lines.append((lineno, stripped))

    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise MeshFormatError(f"{path}: unexpected end of file")
        item = lines[pos]
        pos += 1
        return item

    def section(name: str) -> int:
        lineno, text = take()
        parts = text.split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshFormatError(
                f"{path}:{lineno}: expected '{name} <count>', got '{text}'"
            )
        try:
            count = int(parts[1])
        except ValueError as exc:
            raise MeshFormatError(
                f"{path}:{lineno}: bad count in '{text}'"
            ) from exc
        if count < 0:
            raise MeshFormatError(f"{path}:{lineno}: negative count")
        return count

    nv = section("vertices")
    vertices = np.empty((nv, 3))
    for i in range(nv):
        lineno, text = take()
        parts = text.split()
        if len(parts) != 3:
            raise MeshFormatError(
                f"{path}:{lineno}: expected 3 coordinates, got '{text}'"
            )
        try:
            vertices[i] = [float(x) for x in parts]
        except ValueError as exc:
            raise MeshFormatError(
                f"{path}:{lineno}: bad coordinate in '{text}'"
            ) from exc

    nt = section("tets")
    tets = np.empty((nt, 4), dtype=np.int64)
    for i in range(nt):
        lineno, text = take()
        parts = text.split()
        if len(parts) != 4:
            raise MeshFormatError(
                f"{path}:{lineno}: expected 4 vertex ids, got '{text}'"
            )
        try:
            tets[i] = [int(x) for x in parts]
        except ValueError as exc:
            raise MeshFormatError(
                f"{path}:{lineno}: bad vertex id in '{text}'"
            ) from exc

    nf = section("faces")
    regions: dict[str, list] = {}
    for i in range(nf):
        lineno, text = take()
        parts = text.split()
        if len(parts) != 4:
            raise MeshFormatError(
                f"{path}:{lineno}: expected 'a b c region', got '{text}'"
            )
        try:
            tri = [int(x) for x in parts[:3]]
        except ValueError as exc:
            raise MeshFormatError(
                f"{path}:{lineno}: bad vertex id in '{text}'"
            ) from exc
        regions.setdefault(parts[3], []).append(tri)

    if pos != len(lines):
        lineno, text = lines[pos]
        raise MeshFormatError(f"{path}:{lineno}: trailing content '{text}'")

    return Mesh(vertices, tets, regions)


def save_mesh(mesh: Mesh, path) -> None:
    """Write ``mesh`` in the ASCII format accepted by :func:`load_mesh`."""
    out = ["# ferromixed tetrahedral mesh"]
    out.append(f"vertices {mesh.num_vertices}")
    for v in mesh.vertices:
        out.append(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    out.append(f"tets {mesh.num_tets}")
    for t in mesh.tets:
        out.append(f"{t[0]} {t[1]} {t[2]} {t[3]}")
    out.append(f"faces {len(mesh.boundary_faces)}")
    for fid in mesh.boundary_faces:
        tri = mesh.face_vertices[fid]
        tag = mesh.region_names[mesh.region_of_face[fid]]
        out.append(f"{tri[0]} {tri[1]} {tri[2]} {tag}")
    Path(path).write_text("\n".join(out) + "\n")


# Even permutations of (0, 1, 2); used to orient the Kuhn cube split.
_PERMS = ((0, 1, 2), (1, 2, 0), (2, 0, 1), (0, 2, 1), (2, 1, 0), (1, 0, 2))
_PERM_SIGN = (1, 1, 1, -1, -1, -1)


def structured_tets(ni: int, nj: int, nk: int, vid) -> np.ndarray:
    """Kuhn split of an (ni x nj x nk)-cell structured grid into 6 tets/cell.

    ``vid(i, j, k)`` maps grid indices to vertex ids.  All six tets of a cell
    share its main diagonal, so the split conforms across neighboring cells
    regardless of the (possibly mapped) vertex positions.
    """
    tets = []
    unit = np.eye(3, dtype=int)
    for i in range(ni):
        for j in range(nj):
            for k in range(nk):
                base = np.array([i, j, k])
                far = base + 1
                for perm, sign in zip(_PERMS, _PERM_SIGN):
                    a = base + unit[perm[0]]
                    b = a + unit[perm[1]]
                    v = [vid(*base), vid(*a), vid(*b), vid(*far)]
                    if sign < 0:
                        v[1], v[2] = v[2], v[1]
                    tets.append(v)
    return np.array(tets, dtype=np.int64)


def box_mesh(n: int, size: float = 1.0) -> Mesh:
    """Structured n x n x n box of edge length ``size``, 6 tets per cube.

    Boundary regions are tagged ``xmin``/``xmax``/``ymin``/``ymax``/``zmin``/
    ``zmax``.  Intended for tests and the built-in scenarios; production
    meshes come from files.
    """
    if n < 1:
        raise ValueError("box_mesh needs n >= 1")
    m = n + 1
    grid = np.linspace(0.0, size, m)
    xs, ys, zs = np.meshgrid(grid, grid, grid, indexing="ij")
    vertices = np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)
    tets = structured_tets(n, n, n, lambda i, j, k: (i * m + j) * m + k)
    return Mesh(vertices, tets, _geometric_box_regions(vertices, tets, size))


def _geometric_box_regions(vertices, tets, size):
    incident = {}
    for e, tet in enumerate(tets):
        for loc in LOCAL_FACES:
            key = tuple(sorted((int(tet[loc[0]]), int(tet[loc[1]]),
                                int(tet[loc[2]]))))
            incident[key] = incident.get(key, 0) + 1
    tol = 1e-12 * max(size, 1.0)
    planes = [("xmin", 0, 0.0), ("xmax", 0, size), ("ymin", 1, 0.0),
              ("ymax", 1, size), ("zmin", 2, 0.0), ("zmax", 2, size)]
    regions = {tag: [] for tag, _, _ in planes}
    for key, count in incident.items():
        if count != 1:
            continue
        pts = vertices[list(key)]
        for tag, axis, value in planes:
            if np.all(np.abs(pts[:, axis] - value) < tol):
                regions[tag].append(list(key))
                break
        else:
            raise MeshTopologyError(f"boundary face {key} lies on no box side")
    return regions
