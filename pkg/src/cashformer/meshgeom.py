"""Template mesh geometry: adjacency, spirals, quadric decimation and pooling.

Everything here is computed once on the registered template and reused for
every subject, since all subject meshes share the template's vertex
correspondence.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

HIERARCHY_MAGIC = b"CSHH"
HIERARCHY_VERSION = 1

# weight of the synthetic planes that pin open boundaries during decimation
BOUNDARY_WEIGHT = 10.0
# condition number above which the quadric is treated as singular
SINGULAR_COND = 1e10
# costs closer than this are ties, broken lexicographically on the pair
TIE_ATOL = 1e-12
TIE_RTOL = 1e-9


class MeshError(ValueError):
    pass


@dataclass
class TemplateMesh:
    """Triangle mesh with counter-clockwise faces.

    Parameters
    ----------
    vertices : (V, 3) float array
    faces : (F, 3) int array of 0-based vertex indices
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "TemplateMesh":
        return TemplateMesh(self.vertices.copy(), self.faces.copy())


# ----------------------------------------------------------------------------
# Mesh file I/O
# ----------------------------------------------------------------------------

def write_mesh(path, mesh: TemplateMesh) -> None:
    """Write the text mesh format. ``repr`` floats round-trip exactly."""
    lines = [f"MESH {mesh.n_vertices} {mesh.n_faces}"]
    lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines += [" ".join(str(int(i)) for i in f) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> TemplateMesh:
    text = Path(path).read_text().split("\n")
    header = text[0].split()
    if len(header) != 3 or header[0] != "MESH":
        raise MeshError(f"{path}: bad header {text[0]!r}")
    nv, nf = int(header[1]), int(header[2])
    body = text[1:1 + nv + nf]
    if len(body) < nv + nf:
        raise MeshError(f"{path}: truncated file")
    try:
        verts = np.array([[float(x) for x in line.split()] for line in body[:nv]]).reshape(nv, 3)
        faces = np.array([[int(x) for x in line.split()] for line in body[nv:]], dtype=np.int64).reshape(nf, 3)
    except ValueError as exc:
        raise MeshError(f"{path}: {exc}") from exc
    return TemplateMesh(verts, faces)


# ----------------------------------------------------------------------------
# Connectivity
# ----------------------------------------------------------------------------

def _edge_face_counts(faces: np.ndarray) -> dict:
    counts: dict = {}
    for f in faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    return counts


def build_adjacency(mesh: TemplateMesh) -> list[np.ndarray]:
    """Sorted neighbor lists per vertex. Rejects edges shared by >2 faces."""
    counts = _edge_face_counts(mesh.faces)
    nbrs: list[set] = [set() for _ in range(mesh.n_vertices)]
    for (a, b), c in counts.items():
        if c > 2:
            raise MeshError(f"non-manifold edge ({a}, {b}) shared by {c} faces")
        nbrs[a].add(b)
        nbrs[b].add(a)
    return [np.array(sorted(s), dtype=np.int64) for s in nbrs]


def _ccw_neighbors(faces_of_vertex, center: int) -> list[int]:
    """Neighbors of ``center`` in counter-clockwise fan order.

    Closed fans start at the smallest index. Open (boundary) fans run from the
    smallest index to the end of the chain and then wrap to the chain head.
    """
    nxt: dict = {}
    for f in faces_of_vertex:
        k = list(f).index(center)
        x, y = f[(k + 1) % 3], f[(k + 2) % 3]
        if x in nxt:
            raise MeshError(f"inconsistent winding around vertex {center}")
        nxt[int(x)] = int(y)
    if not nxt:
        return []
    nodes = set(nxt) | set(nxt.values())
    has_pred = set(nxt.values())
    heads = sorted(nodes - has_pred)
    if len(heads) > 1:
        raise MeshError(f"vertex {center} has a non-manifold fan")
    start = min(nodes)
    order = [start]
    cur = start
    while cur in nxt and nxt[cur] != start:
        cur = nxt[cur]
        order.append(cur)
        if len(order) > len(nodes):
            raise MeshError(f"vertex {center} has a non-manifold fan")
    if heads:
        cur = heads[0]
        while cur != start:
            order.append(cur)
            cur = nxt[cur]
    if len(order) != len(nodes):
        raise MeshError(f"vertex {center} has a non-manifold fan")
    return order


def vertex_faces(mesh: TemplateMesh) -> list[list[np.ndarray]]:
    out: list[list] = [[] for _ in range(mesh.n_vertices)]
    for f in mesh.faces:
        for v in f:
            out[v].append(f)
    return out


def ccw_rings(mesh: TemplateMesh) -> list[list[int]]:
    vf = vertex_faces(mesh)
    return [_ccw_neighbors(vf[i], i) for i in range(mesh.n_vertices)]


@dataclass
class SpiralTable:
    """Per-vertex spiral indices; ``pad`` (== vertex count) marks exhausted slots."""

    indices: np.ndarray
    dilation: int = 1

    @property
    def length(self) -> int:
        return self.indices.shape[1]

    @property
    def pad(self) -> int:
        return self.indices.shape[0]


def _spiral_from_rings(rings, center: int, length: int, dilation: int) -> list[int]:
    need = length * dilation
    seq = [center]
    visited = {center}
    frontier = [center]
    first = True
    while len(seq) < need and frontier:
        new = []
        for u in frontier:
            cyc = rings[u]
            if not cyc:
                continue
            if first:
                order = cyc
            else:
                # continue the walk: begin at the first unvisited neighbor that
                # follows a visited one in the fan
                n = len(cyc)
                start = 0
                for k in range(n):
                    if cyc[k] not in visited and cyc[k - 1] in visited:
                        start = k
                        break
                order = cyc[start:] + cyc[:start]
            for w in order:
                if w not in visited:
                    visited.add(w)
                    new.append(w)
        first = False
        seq.extend(new)
        frontier = new
    return seq[:need][::dilation]


def spiral_sequence(mesh: TemplateMesh, center: int, length: int, dilation: int = 1,
                    rings=None) -> list[int]:
    """Ordered spiral of ``length`` vertices around ``center``.

    The first ring starts at the smallest-index neighbor and proceeds
    counter-clockwise; outer rings follow. With dilation ``d`` every d-th entry
    of the full spiral is kept. Short spirals are padded with ``n_vertices``.
    """
    if length < 1 or dilation < 1:
        raise ValueError("length and dilation must be >= 1")
    if not 0 <= center < mesh.n_vertices:
        raise IndexError(f"center {center} out of range for {mesh.n_vertices} vertices")
    if rings is None:
        rings = ccw_rings(mesh)
    seq = _spiral_from_rings(rings, center, length, dilation)
    return seq + [mesh.n_vertices] * (length - len(seq))


def spiral_table(mesh: TemplateMesh, length: int, dilation: int = 1) -> SpiralTable:
    rings = ccw_rings(mesh)
    idx = np.array([spiral_sequence(mesh, i, length, dilation, rings)
                    for i in range(mesh.n_vertices)], dtype=np.int64)
    return SpiralTable(idx.reshape(mesh.n_vertices, length), dilation)


# ----------------------------------------------------------------------------
# Quadric error decimation
# ----------------------------------------------------------------------------

def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized normals (twice the area vector)."""
    v = vertices[faces]
    return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])


def vertex_quadrics(mesh: TemplateMesh) -> np.ndarray:
    """Garland-Heckbert quadrics (V, 4, 4) incl. boundary penalty planes."""
    Q = np.zeros((mesh.n_vertices, 4, 4))
    nrm = face_normals(mesh.vertices, mesh.faces)
    for f, n in zip(mesh.faces, nrm):
        length = np.linalg.norm(n)
        if length == 0:
            continue
        n = n / length
        p = np.append(n, -n @ mesh.vertices[f[0]])
        K = np.outer(p, p)
        for v in f:
            Q[v] += K
    counts = _edge_face_counts(mesh.faces)
    for f, n in zip(mesh.faces, nrm):
        length = np.linalg.norm(n)
        if length == 0:
            continue
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            if counts[(min(a, b), max(a, b))] != 1:
                continue
            e = mesh.vertices[b] - mesh.vertices[a]
            bn = np.cross(e, n / length)
            bl = np.linalg.norm(bn)
            if bl == 0:
                continue
            bn /= bl
            p = np.append(bn, -bn @ mesh.vertices[a])
            K = BOUNDARY_WEIGHT * np.outer(p, p)
            Q[a] += K
            Q[b] += K
    return Q


def quadric_target(Q: np.ndarray, pa: np.ndarray, pb: np.ndarray) -> tuple[np.ndarray, float]:
    """Optimal contraction point of quadric ``Q`` and its error.

    Falls back to the edge midpoint when the 3x3 system is singular.
    """
    A = Q[:3, :3]
    if np.linalg.cond(A) > SINGULAR_COND:
        x = 0.5 * (pa + pb)
    else:
        x = np.linalg.solve(A, -Q[:3, 3])
    h = np.append(x, 1.0)
    return x, max(float(h @ Q @ h), 0.0)


def _point_error(Q, p) -> float:
    h = np.append(p, 1.0)
    return float(h @ Q @ h)


class _Decimator:
    """Mutable contraction state over a triangle mesh."""

    def __init__(self, mesh: TemplateMesh):
        self.pos = mesh.vertices.copy()
        self.faces = [tuple(int(i) for i in f) for f in mesh.faces]
        self.alive_face = [True] * len(self.faces)
        self.vfaces: list[set] = [set() for _ in range(mesh.n_vertices)]
        for k, f in enumerate(self.faces):
            for v in f:
                self.vfaces[v].add(k)
        self.alive = np.ones(mesh.n_vertices, dtype=bool)
        self.Q = vertex_quadrics(mesh)
        self.cost: dict = {}
        for k, f in enumerate(self.faces):
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                key = (min(a, b), max(a, b))
                if key not in self.cost:
                    self.cost[key] = self._pair_cost(*key)

    def _pair_cost(self, a, b) -> float:
        return quadric_target(self.Q[a] + self.Q[b], self.pos[a], self.pos[b])[1]

    def neighbors(self, v) -> set:
        out = set()
        for k in self.vfaces[v]:
            out.update(self.faces[k])
        out.discard(v)
        return out

    def edge_faces(self, a, b) -> list[int]:
        return [k for k in self.vfaces[a] if b in self.faces[k]]

    def is_boundary_vertex(self, v) -> bool:
        counts: dict = {}
        for k in self.vfaces[v]:
            for w in self.faces[k]:
                if w != v:
                    counts[w] = counts.get(w, 0) + 1
        return any(c == 1 for c in counts.values())

    def survivor(self, a, b) -> tuple[int, int]:
        Q = self.Q[a] + self.Q[b]
        ea, eb = _point_error(Q, self.pos[a]), _point_error(Q, self.pos[b])
        # lower error at the original position survives; ties keep the smaller index
        if eb < ea:
            return b, a
        return a, b

    def valid(self, a, b) -> bool:
        shared = self.edge_faces(a, b)
        if not shared:
            return False
        opposite = set()
        for k in shared:
            opposite.update(self.faces[k])
        opposite -= {a, b}
        if self.neighbors(a) & self.neighbors(b) != opposite:
            return False
        if len(shared) == 2 and self.is_boundary_vertex(a) and self.is_boundary_vertex(b):
            return False
        keep, gone = self.survivor(a, b)
        p = self.pos[keep]
        seen = {frozenset(self.faces[k]) for k in self.vfaces[keep] if gone not in self.faces[k]}
        scale = max(np.ptp(self.pos[self.alive], axis=0).max(), 1e-12) ** 2
        for k in self.vfaces[gone]:
            f = self.faces[k]
            if keep in f:
                continue
            g = tuple(keep if v == gone else v for v in f)
            key = frozenset(g)
            if key in seen:
                return False
            seen.add(key)
            old = np.cross(self.pos[f[1]] - self.pos[f[0]], self.pos[f[2]] - self.pos[f[0]])
            q = [p if v == keep else self.pos[v] for v in g]
            new = np.cross(q[1] - q[0], q[2] - q[0])
            if np.linalg.norm(new) <= 1e-12 * scale:
                return False
            if new @ old <= 0:
                return False
        return True

    def choose(self) -> tuple[int, int] | None:
        ranked = sorted(self.cost.items(), key=lambda kv: (kv[1], kv[0]))
        best = None
        for key, c in ranked:
            if self.valid(*key):
                best = c
                break
        if best is None:
            return None
        limit = best + TIE_ATOL + TIE_RTOL * abs(best)
        tied = sorted(key for key, c in ranked if c <= limit)
        for key in tied:
            if self.valid(*key):
                return key
        return None

    def contract(self, a, b) -> tuple[int, int]:
        keep, gone = self.survivor(a, b)
        for k in list(self.vfaces[gone]):
            f = self.faces[k]
            if keep in f:
                self.alive_face[k] = False
                for v in f:
                    self.vfaces[v].discard(k)
            else:
                self.faces[k] = tuple(keep if v == gone else v for v in f)
                self.vfaces[keep].add(k)
        self.vfaces[gone] = set()
        self.alive[gone] = False
        self.Q[keep] = self.Q[keep] + self.Q[gone]
        for key in [k for k in self.cost if gone in k or keep in k]:
            del self.cost[key]
        for w in self.neighbors(keep):
            key = (min(keep, w), max(keep, w))
            self.cost[key] = self._pair_cost(*key)
        return keep, gone


def decimate_step(mesh: TemplateMesh, n_contractions: int, return_history: bool = False):
    """Contract ``n_contractions`` edges in order of minimal quadric error.

    Returns the coarse mesh and the sorted indices of the retained fine
    vertices (coarse vertex ``i`` is fine vertex ``selection[i]`` and keeps its
    position). With ``return_history`` the contracted pairs are also returned
    as ``(min index, max index)`` tuples in order.
    """
    if n_contractions < 0 or n_contractions >= mesh.n_vertices - 3:
        raise MeshError(f"cannot perform {n_contractions} contractions on {mesh.n_vertices} vertices")
    build_adjacency(mesh)
    state = _Decimator(mesh)
    history = []
    for _ in range(n_contractions):
        pair = state.choose()
        if pair is None:
            raise MeshError("no valid contraction left")
        state.contract(*pair)
        history.append(pair)
    selection = np.flatnonzero(state.alive)
    remap = -np.ones(mesh.n_vertices, dtype=np.int64)
    remap[selection] = np.arange(len(selection))
    faces = np.array([state.faces[k] for k in range(len(state.faces)) if state.alive_face[k]],
                     dtype=np.int64).reshape(-1, 3)
    coarse = TemplateMesh(mesh.vertices[selection], remap[faces])
    if return_history:
        return coarse, selection, history
    return coarse, selection


# ----------------------------------------------------------------------------
# Barycentric up-sampling
# ----------------------------------------------------------------------------

def closest_point_barycentric(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Closest point on each triangle (a[k], b[k], c[k]) to ``p``.

    Vectorized version of the region test in Ericson, Real-Time Collision
    Detection, 5.1.5. Returns (squared distances, barycentric weights (K, 3)).
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    K = len(a)
    w = np.zeros((K, 3))
    done = np.zeros(K, dtype=bool)

    def assign(mask, wa, wb, wc):
        m = mask & ~done
        w[m, 0], w[m, 1], w[m, 2] = wa[m], wb[m], wc[m]
        done[m] = True

    one, zero = np.ones(K), np.zeros(K)
    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), one, zero, zero)
        assign((d3 >= 0) & (d4 <= d3), zero, one, zero)
        t = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1 - t, t, zero)
        assign((d6 >= 0) & (d5 <= d6), zero, zero, one)
        t = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1 - t, zero, t)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), zero, 1 - t, t)
        denom = 1.0 / (va + vb + vc)
        v, ww = vb * denom, vc * denom
        assign(np.ones(K, dtype=bool), 1 - v - ww, v, ww)
    q = w[:, :1] * a + w[:, 1:2] * b + w[:, 2:] * c
    return np.einsum("ij,ij->i", q - p, q - p), w


def upsample_matrix(fine: TemplateMesh, coarse: TemplateMesh, selection: np.ndarray) -> sparse.csr_matrix:
    """Fine x coarse row-stochastic matrix.

    Retained fine vertices copy their coarse counterpart; removed ones take the
    barycentric weights of their closest point on the nearest coarse triangle.
    """
    if coarse.n_faces == 0:
        raise MeshError("coarse mesh has no faces")
    selection = np.asarray(selection, dtype=np.int64)
    retained = -np.ones(fine.n_vertices, dtype=np.int64)
    retained[selection] = np.arange(len(selection))
    tri = coarse.vertices[coarse.faces]
    rows, cols, vals = [], [], []
    for i in range(fine.n_vertices):
        if retained[i] >= 0:
            rows.append(i)
            cols.append(retained[i])
            vals.append(1.0)
            continue
        d2, w = closest_point_barycentric(fine.vertices[i], tri[:, 0], tri[:, 1], tri[:, 2])
        k = int(np.argmin(d2))
        wk = np.clip(w[k], 0.0, None)
        wk = wk / wk.sum()
        for j in range(3):
            if wk[j] > 0:
                rows.append(i)
                cols.append(int(coarse.faces[k, j]))
                vals.append(float(wk[j]))
    U = sparse.coo_matrix((vals, (rows, cols)), shape=(fine.n_vertices, coarse.n_vertices))
    return U.tocsr()


# ----------------------------------------------------------------------------
# Hierarchy
# ----------------------------------------------------------------------------

@dataclass
class MeshLevel:
    mesh: TemplateMesh
    spiral: SpiralTable
    selection: np.ndarray   # indices into the previous (finer) level
    up: sparse.csr_matrix   # (previous level V) x (this level V)
    factor: int = 1


@dataclass
class MeshHierarchy:
    levels: list[MeshLevel]
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    @property
    def vertex_counts(self) -> list[int]:
        return [lv.mesh.n_vertices for lv in self.levels]

    @property
    def template(self) -> TemplateMesh:
        return self.levels[0].mesh

    def normalize(self, vertices: np.ndarray) -> np.ndarray:
        """Map raw coordinates into the template's unit-cube frame."""
        return (np.asarray(vertices, dtype=np.float64) - self.center) / self.scale

    def denormalize(self, vertices: np.ndarray) -> np.ndarray:
        return np.asarray(vertices) * self.scale + self.center

    def to_bytes(self) -> bytes:
        return _serialize_hierarchy(self)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MeshHierarchy":
        return _deserialize_hierarchy(Path(path).read_bytes())


def normalization(vertices: np.ndarray) -> tuple[np.ndarray, float]:
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    scale = float((hi - lo).max())
    return 0.5 * (lo + hi), scale if scale > 0 else 1.0


def precompute_hierarchy(template: TemplateMesh, level_specs) -> MeshHierarchy:
    """Build the pooling hierarchy.

    ``level_specs`` is a sequence of ``(factor, spiral_length, dilation)``.
    Level 0 decimates the (normalized) template by its factor, each later level
    decimates the previous one. A factor ``f`` keeps ``ceil(V / f)`` vertices.
    """
    center, scale = normalization(template.vertices)
    current = TemplateMesh((template.vertices - center) / scale, template.faces)
    levels = []
    for factor, length, dilation in level_specs:
        factor = int(factor)
        if factor < 1:
            raise ValueError("downsampling factor must be >= 1")
        target = -(-current.n_vertices // factor)
        coarse, sel = decimate_step(current, current.n_vertices - target)
        up = upsample_matrix(current, coarse, sel)
        table = spiral_table(coarse, int(length), int(dilation))
        levels.append(MeshLevel(coarse, table, sel, up, factor))
        logger.debug("level %d: %d -> %d vertices", len(levels) - 1, current.n_vertices, coarse.n_vertices)
        current = coarse
    return MeshHierarchy(levels, center, scale)


def _serialize_hierarchy(h: MeshHierarchy) -> bytes:
    blobs = []
    for lv in h.levels:
        b = io.BytesIO()
        m = lv.mesh
        up = lv.up.tocoo()
        order = np.lexsort((up.col, up.row))
        b.write(struct.pack("<6I", m.n_vertices, m.n_faces, lv.spiral.length, lv.spiral.dilation,
                            len(lv.selection), lv.factor))
        b.write(struct.pack("<2I", up.shape[0], up.nnz))
        b.write(m.vertices.astype("<f8").tobytes())
        b.write(m.faces.astype("<u4").tobytes())
        b.write(lv.spiral.indices.astype("<u4").tobytes())
        b.write(np.asarray(lv.selection).astype("<u4").tobytes())
        b.write(up.row[order].astype("<u4").tobytes())
        b.write(up.col[order].astype("<u4").tobytes())
        b.write(up.data[order].astype("<f8").tobytes())
        blobs.append(b.getvalue())
    head = HIERARCHY_MAGIC + struct.pack("<2I", HIERARCHY_VERSION, len(blobs))
    head += np.asarray(h.center, dtype="<f8").tobytes() + struct.pack("<d", h.scale)
    offset = len(head) + 8 * len(blobs)
    offsets = []
    for blob in blobs:
        offsets.append(offset)
        offset += len(blob)
    return head + struct.pack(f"<{len(blobs)}Q", *offsets) + b"".join(blobs)


def _deserialize_hierarchy(data: bytes) -> MeshHierarchy:
    if data[:4] != HIERARCHY_MAGIC:
        raise MeshError("not a hierarchy file")
    version, n_levels = struct.unpack_from("<2I", data, 4)
    if version != HIERARCHY_VERSION:
        raise MeshError(f"unsupported hierarchy version {version}")
    center = np.frombuffer(data, "<f8", 3, 12).copy()
    (scale,) = struct.unpack_from("<d", data, 36)
    offsets = struct.unpack_from(f"<{n_levels}Q", data, 44)
    levels = []
    for off in offsets:
        nv, nf, length, dil, nsel, factor = struct.unpack_from("<6I", data, off)
        n_fine, nnz = struct.unpack_from("<2I", data, off + 24)
        pos = off + 32

        def take(dtype, count, shape=None):
            nonlocal pos
            arr = np.frombuffer(data, dtype, count, pos).copy()
            pos += arr.nbytes
            return arr if shape is None else arr.reshape(shape)

        verts = take("<f8", nv * 3, (nv, 3))
        faces = take("<u4", nf * 3, (nf, 3)).astype(np.int64)
        spiral = take("<u4", nv * length, (nv, length)).astype(np.int64)
        sel = take("<u4", nsel).astype(np.int64)
        rows = take("<u4", nnz).astype(np.int64)
        cols = take("<u4", nnz).astype(np.int64)
        vals = take("<f8", nnz)
        up = sparse.csr_matrix((vals, (rows, cols)), shape=(n_fine, nv))
        levels.append(MeshLevel(TemplateMesh(verts, faces), SpiralTable(spiral, dil), sel, up, factor))
    return MeshHierarchy(levels, center, float(scale))


# ----------------------------------------------------------------------------
# Template construction helpers
# ----------------------------------------------------------------------------

def icosahedron() -> TemplateMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    return TemplateMesh(v, f)


def icosphere(subdivisions: int = 2) -> TemplateMesh:
    mesh = icosahedron()
    verts = list(mesh.vertices)
    faces = mesh.faces.tolist()
    for _ in range(subdivisions):
        cache: dict = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return TemplateMesh(np.array(verts), np.array(faces))


def hippocampus_template(subdivisions: int = 2) -> TemplateMesh:
    """Elongated, bent ellipsoid roughly shaped like a hippocampus, in the unit cube."""
    sphere = icosphere(subdivisions)
    x, y, z = sphere.vertices.T
    # long axis along x, head wider than tail, gentle bend in the x-y plane
    width = 0.55 + 0.2 * x
    v = np.stack([1.6 * x, 0.45 * width * y + 0.35 * x ** 2, 0.35 * width * z], axis=1)
    center, scale = normalization(v)
    return TemplateMesh((v - center) / scale, sphere.faces)
