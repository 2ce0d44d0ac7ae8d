"""Simplicial meshes: loading, fixture generators, validation, graph conversion.

A mesh is a set of nodes, positively oriented simplices (triangles in 2D,
tetrahedra in 3D) and tagged boundary facets. Graphs derived from meshes carry
only relative geometric information on the edges, so everything downstream is
translation invariant by construction.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

TAG_GAMMA1 = "g1"
TAG_GAMMA2 = "g2"
TAG_FREE = "free"
VALID_TAGS = (TAG_GAMMA1, TAG_GAMMA2, TAG_FREE)

MESH_FORMAT_VERSION = 1

# relative volume threshold below which an element counts as degenerate
DEGENERATE_REL_VOLUME = 1e-14


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed."""


class MeshValidationError(ValueError):
    """Raised when mesh data violates a structural invariant."""


@dataclass(frozen=True)
class Mesh:
    """Immutable simplicial mesh with tagged boundary facets.

    coords:          (n_nodes, dim) float64
    elements:        (n_elements, dim+1) int64, positive signed volume
    boundary_facets: (n_facets, dim) int64, each a face of exactly one element
    boundary_tags:   (n_facets,) unicode, tokens from VALID_TAGS
    """

    dim: int
    coords: np.ndarray
    elements: np.ndarray
    boundary_facets: np.ndarray
    boundary_tags: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def tag_set(self) -> set:
        return set(self.boundary_tags.tolist())

    def nodes_with_tag(self, tags) -> np.ndarray:
        """Sorted unique node indices lying on facets carrying any of `tags`."""
        if isinstance(tags, str):
            tags = (tags,)
        mask = np.isin(self.boundary_tags, list(tags))
        if not mask.any():
            return np.empty(0, dtype=np.int64)
        return np.unique(self.boundary_facets[mask])


@dataclass(frozen=True)
class Graph:
    """Directed graph view of a mesh.

    Edges come in opposite-direction pairs; edge k carries the feature
    (x_sender - x_receiver, ||x_sender - x_receiver||).
    """

    n_nodes: int
    senders: np.ndarray
    receivers: np.ndarray
    edge_features: np.ndarray
    node_features: np.ndarray

    @property
    def n_edges(self) -> int:
        return self.senders.shape[0]


def _signed_volumes(coords: np.ndarray, elements: np.ndarray, dim: int) -> np.ndarray:
    p0 = coords[elements[:, 0]]
    edges = coords[elements[:, 1:]] - p0[:, None, :]  # (n_e, dim, dim)
    dets = np.linalg.det(edges)
    factorial = 2.0 if dim == 2 else 6.0
    return dets / factorial


def _bbox_scale(coords: np.ndarray) -> float:
    if coords.shape[0] == 0:
        return 1.0
    extent = coords.max(axis=0) - coords.min(axis=0)
    return float(max(extent.max(), 1e-300))


def _element_faces(elem: np.ndarray) -> list:
    n = elem.shape[0]
    return [tuple(sorted(np.delete(elem, i))) for i in range(n)]


def make_mesh(dim, coords, elements, boundary_facets, boundary_tags,
              validate: bool = True) -> Mesh:
    """Canonicalize element orientation, freeze arrays, optionally validate."""
    coords = np.ascontiguousarray(np.asarray(coords, dtype=np.float64))
    elements = np.ascontiguousarray(np.asarray(elements, dtype=np.int64))
    boundary_facets = np.ascontiguousarray(np.asarray(boundary_facets, dtype=np.int64))
    boundary_tags = np.asarray(boundary_tags, dtype="U8")
    if dim not in (2, 3):
        raise MeshValidationError(f"spatial dimension must be 2 or 3, got {dim}")
    if coords.ndim != 2 or coords.shape[1] != dim:
        raise MeshValidationError(f"coords must have shape (n, {dim})")
    if elements.ndim != 2 or elements.shape[1] != dim + 1:
        raise MeshValidationError(f"elements must have shape (n, {dim + 1})")
    if boundary_facets.ndim != 2 or boundary_facets.shape[1] != dim:
        raise MeshValidationError(f"boundary facets must have shape (n, {dim})")
    if boundary_tags.shape[0] != boundary_facets.shape[0]:
        raise MeshValidationError("one tag per boundary facet required")

    n_nodes = coords.shape[0]
    if elements.size and (elements.min() < 0 or elements.max() >= n_nodes):
        raise MeshValidationError("element references a node index out of range")
    if boundary_facets.size and (boundary_facets.min() < 0
                                 or boundary_facets.max() >= n_nodes):
        raise MeshValidationError("boundary facet references a node index out of range")

    # canonical orientation: swap the last two vertices of inverted simplices
    elements = elements.copy()
    vols = _signed_volumes(coords, elements, dim)
    flipped = vols < 0.0
    if flipped.any():
        elements[flipped, -2], elements[flipped, -1] = (
            elements[flipped, -1].copy(), elements[flipped, -2].copy())
        vols = np.abs(vols)

    mesh = Mesh(dim=dim, coords=coords, elements=elements,
                boundary_facets=boundary_facets, boundary_tags=boundary_tags)
    for arr in (coords, elements, boundary_facets, boundary_tags):
        arr.flags.writeable = False
    if validate:
        _validate(mesh, vols)
    return mesh


def _validate(mesh: Mesh, volumes: np.ndarray) -> None:
    threshold = DEGENERATE_REL_VOLUME * _bbox_scale(mesh.coords) ** mesh.dim
    if volumes.size and volumes.min() <= threshold:
        bad = int(np.argmin(volumes))
        raise MeshValidationError(
            f"element {bad} has (near-)zero volume {volumes[bad]:.3e}")

    bad_tags = set(mesh.boundary_tags.tolist()) - set(VALID_TAGS)
    if bad_tags:
        raise MeshValidationError(f"unknown boundary tags: {sorted(bad_tags)}")

    face_count: dict = {}
    for elem in mesh.elements:
        for face in _element_faces(elem):
            face_count[face] = face_count.get(face, 0) + 1
    exterior = {f for f, c in face_count.items() if c == 1}

    listed = [tuple(sorted(f)) for f in mesh.boundary_facets]
    listed_set = set(listed)
    if len(listed_set) != len(listed):
        raise MeshValidationError("duplicate boundary facet")
    for face in listed:
        if face not in face_count:
            raise MeshValidationError(f"boundary facet {face} is not a face of any element")
        if face not in exterior:
            raise MeshValidationError(f"boundary facet {face} is shared by two elements")
    untagged = exterior - listed_set
    if untagged:
        raise MeshValidationError(
            f"{len(untagged)} exterior faces carry no boundary tag, e.g. {sorted(untagged)[0]}")

    g1 = set(mesh.nodes_with_tag(TAG_GAMMA1).tolist())
    g2 = set(mesh.nodes_with_tag(TAG_GAMMA2).tolist())
    if g1 & g2:
        raise MeshValidationError("Gamma1 and Gamma2 node sets overlap")


def translate(mesh: Mesh, delta) -> Mesh:
    """Rigidly translate all node coordinates; topology and tags unchanged."""
    delta = np.asarray(delta, dtype=np.float64)
    return make_mesh(mesh.dim, mesh.coords + delta, mesh.elements,
                     mesh.boundary_facets, mesh.boundary_tags, validate=False)


# ---------------------------------------------------------------------------
# file format


def load_mesh(path) -> Mesh:
    """Read the line-oriented text mesh format and validate the result."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.readlines()
    lines = []
    for lineno, line in enumerate(raw, start=1):
        stripped = line.split("#", 1)[0].strip()
        if stripped:
            lines.append((lineno, stripped))
    if not lines:
        raise MeshFormatError(f"{path}: empty mesh file")

    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise MeshFormatError(f"{path}: unexpected end of file")
        item = lines[pos]
        pos += 1
        return item

    lineno, header = take()
    parts = header.split()
    if len(parts) != 3 or parts[0] != "pigmesh":
        raise MeshFormatError(f"{path}:{lineno}: expected 'pigmesh <version> <dim>'")
    try:
        version, dim = int(parts[1]), int(parts[2])
    except ValueError as exc:
        raise MeshFormatError(f"{path}:{lineno}: bad header numbers") from exc
    if version != MESH_FORMAT_VERSION:
        raise MeshFormatError(f"{path}:{lineno}: unsupported format version {version}")
    if dim not in (2, 3):
        raise MeshFormatError(f"{path}:{lineno}: dimension must be 2 or 3")

    def section(name):
        lineno, line = take()
        parts = line.split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshFormatError(f"{path}:{lineno}: expected '{name} <count>'")
        try:
            count = int(parts[1])
        except ValueError as exc:
            raise MeshFormatError(f"{path}:{lineno}: bad count in '{line}'") from exc
        if count < 0:
            raise MeshFormatError(f"{path}:{lineno}: negative count")
        return count

    n_nodes = section("nodes")
    coords = np.empty((n_nodes, dim))
    for i in range(n_nodes):
        lineno, line = take()
        parts = line.split()
        if len(parts) != dim:
            raise MeshFormatError(f"{path}:{lineno}: expected {dim} coordinates")
        try:
            coords[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise MeshFormatError(f"{path}:{lineno}: bad coordinate") from exc

    n_elements = section("elements")
    elements = np.empty((n_elements, dim + 1), dtype=np.int64)
    for i in range(n_elements):
        lineno, line = take()
        parts = line.split()
        if len(parts) != dim + 1:
            raise MeshFormatError(f"{path}:{lineno}: expected {dim + 1} node indices")
        try:
            elements[i] = [int(p) for p in parts]
        except ValueError as exc:
            raise MeshFormatError(f"{path}:{lineno}: bad node index") from exc

    n_facets = section("boundary")
    facets = np.empty((n_facets, dim), dtype=np.int64)
    tags = np.empty(n_facets, dtype="U8")
    for i in range(n_facets):
        lineno, line = take()
        parts = line.split()
        if len(parts) != dim + 1:
            raise MeshFormatError(
                f"{path}:{lineno}: expected {dim} indices and a tag token")
        try:
            facets[i] = [int(p) for p in parts[:dim]]
        except ValueError as exc:
            raise MeshFormatError(f"{path}:{lineno}: bad node index") from exc
        if parts[dim] not in VALID_TAGS:
            raise MeshFormatError(
                f"{path}:{lineno}: unknown tag {parts[dim]!r} (want one of {VALID_TAGS})")
        tags[i] = parts[dim]

    if pos != len(lines):
        lineno, line = lines[pos]
        raise MeshFormatError(f"{path}:{lineno}: trailing content {line!r}")
    return make_mesh(dim, coords, elements, facets, tags)


def save_mesh(mesh: Mesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"pigmesh {MESH_FORMAT_VERSION} {mesh.dim}\n")
        fh.write(f"nodes {mesh.n_nodes}\n")
        for row in mesh.coords:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        fh.write(f"elements {mesh.n_elements}\n")
        for row in mesh.elements:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")
        fh.write(f"boundary {mesh.boundary_facets.shape[0]}\n")
        for row, tag in zip(mesh.boundary_facets, mesh.boundary_tags):
            fh.write(" ".join(str(int(v)) for v in row) + f" {tag}\n")


def mesh_manifest(mesh: Mesh, generator: str, params: Sequence) -> dict:
    counts = {}
    for tag in VALID_TAGS:
        counts[tag] = int(np.sum(mesh.boundary_tags == tag))
    return {
        "generator": generator,
        "params": list(params),
        "dim": mesh.dim,
        "n_nodes": mesh.n_nodes,
        "n_elements": mesh.n_elements,
        "n_boundary_facets": int(mesh.boundary_facets.shape[0]),
        "tag_counts": counts,
    }


def save_manifest(manifest: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# graph conversion


def undirected_edges(mesh: Mesh) -> np.ndarray:
    """Unique undirected mesh edges as (n, 2) sorted index pairs."""
    pair_idx = list(itertools.combinations(range(mesh.dim + 1), 2))
    pairs = np.concatenate([mesh.elements[:, list(p)] for p in pair_idx], axis=0)
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)  # lexicographically sorted


def mesh_to_graph(mesh: Mesh, node_features) -> Graph:
    """Convert a mesh to a directed graph with relative-position edge features.

    Every undirected mesh edge yields two directed edges. Edge k between
    sender s and receiver r carries (x_s - x_r, ||x_s - x_r||); node features
    are copied through unchanged.
    """
    node_features = np.ascontiguousarray(np.asarray(node_features, dtype=np.float64))
    if node_features.ndim != 2 or node_features.shape[0] != mesh.n_nodes:
        raise ValueError(
            f"node_features must have {mesh.n_nodes} rows, got shape {node_features.shape}")

    undirected = undirected_edges(mesh)

    n_und = undirected.shape[0]
    senders = np.empty(2 * n_und, dtype=np.int64)
    receivers = np.empty(2 * n_und, dtype=np.int64)
    senders[0::2] = undirected[:, 0]
    receivers[0::2] = undirected[:, 1]
    senders[1::2] = undirected[:, 1]
    receivers[1::2] = undirected[:, 0]

    rel = mesh.coords[senders] - mesh.coords[receivers]
    dist = np.linalg.norm(rel, axis=1, keepdims=True)
    edge_features = np.concatenate([rel, dist], axis=1)

    graph = Graph(n_nodes=mesh.n_nodes, senders=senders, receivers=receivers,
                  edge_features=edge_features, node_features=node_features)
    for arr in (senders, receivers, edge_features, node_features):
        arr.flags.writeable = False
    return graph


def graph_adjacency(graph: Graph) -> list:
    """Neighbor lists (by undirected mesh edge) for each node."""
    neighbors = [[] for _ in range(graph.n_nodes)]
    for s, r in zip(graph.senders.tolist(), graph.receivers.tolist()):
        neighbors[r].append(s)
    return neighbors


# ---------------------------------------------------------------------------
# fixture generators


def generate_mesh(name: str, params: Sequence) -> Mesh:
    """Dispatch to a fixture generator; deterministic for a fixed spec."""
    generators = {
        "rectangle": (rectangle_mesh, 2),
        "annulus": (annulus_mesh, 3),
        "rings2d": (rings2d_mesh, 1),
        "lshape3d": (lshape3d_mesh, 1),
        "elbow3d": (elbow3d_mesh, 1),
    }
    if name not in generators:
        raise ValueError(f"unknown mesh generator {name!r} (want one of {sorted(generators)})")
    fn, n_params = generators[name]
    if len(params) != n_params:
        raise ValueError(f"{name} takes {n_params} parameter(s), got {len(params)}")
    return fn(*params)


def rectangle_mesh(nx: int, ny: int) -> Mesh:
    """Unit square, structured grid, one diagonal per cell.

    Tags: g1 on the x=1 side, g2 on the x=0 side, free on the y sides.
    """
    nx, ny = int(nx), int(ny)
    if nx < 1 or ny < 1:
        raise ValueError("rectangle needs nx >= 1 and ny >= 1")
    xs = np.linspace(0.0, 1.0, nx + 1)
    ys = np.linspace(0.0, 1.0, ny + 1)
    coords = np.array([(x, y) for y in ys for x in xs])

    def node(i, j):
        return j * (nx + 1) + i

    elements = []
    for j in range(ny):
        for i in range(nx):
            a, b = node(i, j), node(i + 1, j)
            c, d = node(i + 1, j + 1), node(i, j + 1)
            elements.append((a, b, c))
            elements.append((a, c, d))

    facets, tags = [], []
    for j in range(ny):
        facets.append((node(0, j), node(0, j + 1)))
        tags.append(TAG_GAMMA2)
        facets.append((node(nx, j), node(nx, j + 1)))
        tags.append(TAG_GAMMA1)
    for i in range(nx):
        facets.append((node(i, 0), node(i + 1, 0)))
        tags.append(TAG_FREE)
        facets.append((node(i, ny), node(i + 1, ny)))
        tags.append(TAG_FREE)
    return make_mesh(2, coords, elements, facets, tags)


def annulus_mesh(r_in: float, r_out: float, n: int) -> Mesh:
    """Annular ring, structured in polar coordinates.

    Tags: g1 on the outer circle, g2 on the inner circle.
    """
    r_in, r_out, n = float(r_in), float(r_out), int(n)
    if r_in <= 0.0 or r_in >= r_out:
        raise ValueError("annulus needs 0 < r_in < r_out")
    if n < 3:
        raise ValueError("annulus needs n >= 3 circumferential segments")
    r_mid = 0.5 * (r_in + r_out)
    nr = max(1, round(n * (r_out - r_in) / (2.0 * np.pi * r_mid)))

    coords = []
    for layer in range(nr + 1):
        r = r_in + (r_out - r_in) * layer / nr
        for k in range(n):
            theta = 2.0 * np.pi * k / n
            coords.append((r * np.cos(theta), r * np.sin(theta)))
    coords = np.array(coords)

    def node(layer, k):
        return layer * n + (k % n)

    elements = []
    for layer in range(nr):
        for k in range(n):
            a, b = node(layer, k), node(layer, k + 1)
            c, d = node(layer + 1, k + 1), node(layer + 1, k)
            elements.append((a, b, c))
            elements.append((a, c, d))

    facets, tags = [], []
    for k in range(n):
        facets.append((node(0, k), node(0, k + 1)))
        tags.append(TAG_GAMMA2)
        facets.append((node(nr, k), node(nr, k + 1)))
        tags.append(TAG_GAMMA1)
    return make_mesh(2, coords, elements, facets, tags)


RINGS2D_WIDTH = 3.0
RINGS2D_HEIGHT = 1.0
RINGS2D_HOLES = ((0.75, 0.5, 0.22), (1.5, 0.5, 0.22), (2.25, 0.5, 0.22))
_RINGS2D_JITTER_SEED = 744101


def rings2d_mesh(level: int) -> Mesh:
    """Non-convex multi-hole plate: 3 x 1 rectangle with three circular holes.

    Interior nodes get a deterministic jitter so every node has a distinct
    local geometry (unstructured-mesh character). Tags: g1 on the right edge,
    g2 on the left edge, free elsewhere including the hole rims.
    """
    level = int(level)
    if level < 1:
        raise ValueError("rings2d needs level >= 1")
    nx, ny = 45 * level, 15 * level
    hx, hy = RINGS2D_WIDTH / nx, RINGS2D_HEIGHT / ny
    xs = np.linspace(0.0, RINGS2D_WIDTH, nx + 1)
    ys = np.linspace(0.0, RINGS2D_HEIGHT, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    coords = np.stack([gx.ravel(), gy.ravel()], axis=1)

    rng = np.random.default_rng(_RINGS2D_JITTER_SEED + level)
    jitter = rng.uniform(-0.12, 0.12, size=coords.shape) * np.array([hx, hy])
    interior = ((coords[:, 0] > 0.0) & (coords[:, 0] < RINGS2D_WIDTH)
                & (coords[:, 1] > 0.0) & (coords[:, 1] < RINGS2D_HEIGHT))
    coords = coords + jitter * interior[:, None]

    def node(i, j):
        return j * (nx + 1) + i

    elements = []
    for j in range(ny):
        for i in range(nx):
            a, b = node(i, j), node(i + 1, j)
            c, d = node(i + 1, j + 1), node(i, j + 1)
            elements.append((a, b, c))
            elements.append((a, c, d))
    elements = np.array(elements, dtype=np.int64)

    centroids = coords[elements].mean(axis=1)
    keep = np.ones(elements.shape[0], dtype=bool)
    for cx, cy, radius in RINGS2D_HOLES:
        dist = np.hypot(centroids[:, 0] - cx, centroids[:, 1] - cy)
        keep &= dist > radius
    elements = elements[keep]

    # drop unreferenced nodes and reindex
    used = np.unique(elements)
    remap = -np.ones(coords.shape[0], dtype=np.int64)
    remap[used] = np.arange(used.shape[0])
    coords = coords[used]
    elements = remap[elements]

    areas = _signed_volumes(coords, elements, 2)
    if np.abs(areas).min() <= 0.1 * hx * hy * 0.5:
        raise MeshValidationError("rings2d jitter produced a near-degenerate element")

    facets, tags = _exterior_facets_2d(coords, elements)
    return make_mesh(2, coords, elements, facets, tags)


def _exterior_facets_2d(coords, elements, x_min=0.0, x_max=RINGS2D_WIDTH, tol=1e-9):
    """Exterior edges of a 2D triangulation, tagged by x-extremes."""
    count: dict = {}
    for elem in elements:
        for face in _element_faces(elem):
            count[face] = count.get(face, 0) + 1
    facets, tags = [], []
    for face, c in sorted(count.items()):
        if c != 1:
            continue
        x = coords[list(face), 0]
        if np.all(np.abs(x - x_min) < tol):
            tags.append(TAG_GAMMA2)
        elif np.all(np.abs(x - x_max) < tol):
            tags.append(TAG_GAMMA1)
        else:
            tags.append(TAG_FREE)
        facets.append(face)
    return facets, tags


# Kuhn subdivision: 6 tetrahedra per cube, all sharing the main diagonal.
# Works across a structured lattice because every square face is cut along
# the diagonal from its lexicographically smallest corner to its largest.
_KUHN_PERMS = list(itertools.permutations(range(3)))


def _kuhn_tets(cell_corner, node_fn):
    i, j, k = cell_corner
    tets = []
    for perm in _KUHN_PERMS:
        path = [(i, j, k)]
        cur = [i, j, k]
        for axis in perm:
            cur = cur.copy()
            cur[axis] += 1
            path.append(tuple(cur))
        tets.append(tuple(node_fn(*p) for p in path))
    return tets


def _lattice_tet_mesh(keep_cell, shape, position, jitter=0.0, jitter_seed=0):
    """Tetrahedralize kept cells of an (nx, ny, nz) cube lattice.

    keep_cell(i, j, k) selects cells; position(i, j, k) maps lattice nodes to
    coordinates. Nodes interior to the kept region can be jittered (fraction
    of a cell, deterministic per seed) so every node has a distinct local
    geometry, as an unstructured mesher would produce. Returns coords,
    elements and the exterior face list with the lattice coordinates of each
    face's nodes (for tagging).
    """
    nx, ny, nz = shape
    node_ids: dict = {}
    coords = []
    lattice_keys = []

    def node(i, j, k):
        key = (i, j, k)
        if key not in node_ids:
            node_ids[key] = len(coords)
            coords.append(position(i, j, k))
            lattice_keys.append(key)
        return node_ids[key]

    elements = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                if keep_cell(i, j, k):
                    elements.extend(_kuhn_tets((i, j, k), node))
    coords = np.array(coords)
    elements = np.array(elements, dtype=np.int64)

    count: dict = {}
    for elem in elements:
        for face in _element_faces(elem):
            count[face] = count.get(face, 0) + 1
    exterior = [face for face, c in sorted(count.items()) if c == 1]

    if jitter > 0.0:
        # nodes on any exterior face stay put so tagged faces remain planar
        surface = np.zeros(coords.shape[0], dtype=bool)
        for face in exterior:
            surface[list(face)] = True
        # local cell size from the shortest incident lattice edge
        h_local = np.full(coords.shape[0], np.inf)
        for elem in elements:
            pts = coords[elem]
            for a in range(4):
                for b in range(a + 1, 4):
                    d = np.linalg.norm(pts[a] - pts[b])
                    h_local[elem[a]] = min(h_local[elem[a]], d)
                    h_local[elem[b]] = min(h_local[elem[b]], d)
        rng = np.random.default_rng(jitter_seed)
        shift = rng.uniform(-jitter, jitter, size=coords.shape)
        coords = coords + shift * np.where(surface, 0.0, h_local)[:, None]

    id_to_lattice = {v: k for k, v in node_ids.items()}
    lattice_faces = [tuple(id_to_lattice[v] for v in face) for face in exterior]
    return coords, elements, exterior, lattice_faces


def lshape3d_mesh(level: int) -> Mesh:
    """L-shaped solid with sharp angles: an x-leg and a z-leg sharing a cube.

    Domain [0,2]x[0,1]x[0,1] union [0,1]x[0,1]x[1,2]. Tags: g1 on the x=2 end
    face, g2 on the z=2 end face, free elsewhere.
    """
    level = int(level)
    if level < 1:
        raise ValueError("lshape3d needs level >= 1")
    n = 8 * level  # cells per unit length
    h = 1.0 / n

    def keep(i, j, k):
        x = (i + 0.5) * h
        z = (k + 0.5) * h
        return z < 1.0 or x < 1.0

    coords, elements, exterior, lattice = _lattice_tet_mesh(
        keep, (2 * n, n, 2 * n), lambda i, j, k: (i * h, j * h, k * h),
        jitter=0.15, jitter_seed=90210 + level)

    facets, tags = [], []
    for face, lat in zip(exterior, lattice):
        if all(p[0] == 2 * n for p in lat):
            tags.append(TAG_GAMMA1)
        elif all(p[2] == 2 * n for p in lat):
            tags.append(TAG_GAMMA2)
        else:
            tags.append(TAG_FREE)
        facets.append(face)
    return make_mesh(3, coords, elements, facets, tags)


ELBOW3D_WIDTH = 1.0
ELBOW3D_BEND_RADIUS = 1.25
ELBOW3D_STRAIGHT = 1.0


def elbow3d_mesh(level: int) -> Mesh:
    """Smooth elbow: square-section tube, straight run, 90-degree bend, straight run.

    Starts along +x, turns into +z. Tags: g2 on the inlet face, g1 on the
    outlet face, free on the tube wall.
    """
    level = int(level)
    if level < 1:
        raise ValueError("elbow3d needs level >= 1")
    w = ELBOW3D_WIDTH
    radius = ELBOW3D_BEND_RADIUS
    straight = ELBOW3D_STRAIGHT
    na = nb = 8 * level
    ns = 32 * level
    arc = 0.5 * np.pi * radius
    total = 2.0 * straight + arc

    def centerline(s):
        # tangent frame: in-plane normal direction at arclength s
        if s <= straight:
            return np.array([s, 0.0, 0.0]), np.array([0.0, 0.0, -1.0])
        if s <= straight + arc:
            phi = (s - straight) / radius
            center = np.array([straight, 0.0, radius])
            radial = np.array([np.sin(phi), 0.0, -np.cos(phi)])
            return center + radius * radial, radial
        t = s - straight - arc
        return (np.array([straight + radius, 0.0, radius + t]),
                np.array([1.0, 0.0, 0.0]))

    def position(i, j, k):
        s = total * i / ns
        point, normal = centerline(s)
        a = (j / na - 0.5) * w
        b = (k / nb - 0.5) * w
        return tuple(point + a * normal + b * np.array([0.0, 1.0, 0.0]))

    coords, elements, exterior, lattice = _lattice_tet_mesh(
        lambda i, j, k: True, (ns, na, nb), position,
        jitter=0.15, jitter_seed=51423 + level)

    facets, tags = [], []
    for face, lat in zip(exterior, lattice):
        if all(p[0] == 0 for p in lat):
            tags.append(TAG_GAMMA2)
        elif all(p[0] == ns for p in lat):
            tags.append(TAG_GAMMA1)
        else:
            tags.append(TAG_FREE)
        facets.append(face)
    return make_mesh(3, coords, elements, facets, tags)
