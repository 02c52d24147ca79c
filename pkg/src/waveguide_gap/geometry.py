"""Cross-sections, caverns and structured meshes.

All meshes are built from tensor-product grids of lowest-order Lagrange
elements (bilinear quads in 2D, trilinear hexahedra in 3D).  Curved
boundaries (the hemispherical cavern, the disk, the truncation sphere of the
half-space problem) are obtained by mapping the grid nodes, so every mesh
keeps a structured topology and the periodic faces stay exactly flat.

Conventions for the cell ``omega x (-1/2, 1/2)``: the cavern sits at the
anchor point ``O = (O', 0)``.  Locally we use the frame ``(s, d, z)`` with
``s`` the arc length along the boundary (counter-clockwise), ``d = -n`` the
depth measured inward along the normal and ``z`` the axial coordinate.  The
stretched coordinates of the boundary-layer problem are
``xi = (n, s, z) / h``, so the cavern occupies ``xi_1 < 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DIRICHLET = 1
PERIODIC_LO = 2
PERIODIC_HI = 3
TRUNCATION = 4

TAG_NAMES = {
    DIRICHLET: "dirichlet",
    PERIODIC_LO: "periodic_lo",
    PERIODIC_HI: "periodic_hi",
    TRUNCATION: "truncation",
}

MESH_FORMAT_VERSION = 1

# local face / edge numbering of the reference elements (outward orientation)
HEX_FACES = np.array(
    [
        [0, 3, 2, 1],
        [4, 5, 6, 7],
        [0, 1, 5, 4],
        [1, 2, 6, 5],
        [2, 3, 7, 6],
        [3, 0, 4, 7],
    ]
)
QUAD_EDGES = np.array([[0, 1], [1, 2], [2, 3], [3, 0]])


class GeometryError(ValueError):
    """Raised when a shape, cavern or mesh request is geometrically invalid."""


class InvalidResolutionError(GeometryError):
    pass


class TruncationTooTightError(GeometryError):
    pass


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossSectionShape:
    """Rectangle ``[0, width] x [0, height]`` or disk of given radius centred at 0.

    ``anchor`` is the boundary point O' around which caverns are placed.  It
    defaults to the midpoint of the bottom side (rectangle) or to the lowest
    point ``(0, -radius)`` (disk).
    """

    kind: str = "rectangle"
    width: float = 1.0
    height: float = 1.0
    radius: float = 1.0
    anchor: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("rectangle", "disk"):
            raise GeometryError(f"unknown cross-section kind {self.kind!r}")
        if self.kind == "rectangle":
            if not (self.width > 0 and self.height > 0):
                raise GeometryError("rectangle needs width > 0 and height > 0")
            if self.anchor is None:
                object.__setattr__(self, "anchor", (0.5 * self.width, 0.0))
        else:
            if not self.radius > 0:
                raise GeometryError("disk needs radius > 0")
            if self.anchor is None:
                object.__setattr__(self, "anchor", (0.0, -self.radius))
        object.__setattr__(self, "anchor", tuple(float(c) for c in self.anchor))
        self._side()  # validates the anchor

    @classmethod
    def rectangle(cls, width=1.0, height=1.0, anchor=None):
        return cls("rectangle", width=width, height=height, anchor=anchor)

    @classmethod
    def disk(cls, radius=1.0, anchor=None):
        return cls("disk", radius=radius, anchor=anchor)

    @property
    def diameter(self) -> float:
        if self.kind == "rectangle":
            return math.hypot(self.width, self.height)
        return 2.0 * self.radius

    @property
    def tol(self) -> float:
        return 1e-10 * self.diameter

    def _side(self):
        """Return (tangent, inward normal, extent behind O', extent ahead of O', depth)."""
        ax, ay = self.anchor
        if self.kind == "disk":
            r = math.hypot(ax, ay)
            if abs(r - self.radius) > 1e-9 * self.radius:
                raise GeometryError("anchor must lie on the disk boundary")
            nu = (-ax / r, -ay / r)
            tangent = (-nu[1], nu[0])  # counter-clockwise
            arc = math.pi * self.radius
            return tangent, nu, arc, arc, 2.0 * self.radius
        a, b = self.width, self.height
        eps = 1e-12 * self.diameter
        sides = []
        if abs(ay) <= eps:
            sides.append(((1.0, 0.0), (0.0, 1.0), ax, a - ax, b))
        if abs(ay - b) <= eps:
            sides.append(((-1.0, 0.0), (0.0, -1.0), a - ax, ax, b))
        if abs(ax) <= eps:
            sides.append(((0.0, -1.0), (1.0, 0.0), b - ay, ay, a))
        if abs(ax - a) <= eps:
            sides.append(((0.0, 1.0), (-1.0, 0.0), ay, b - ay, a))
        if len(sides) != 1:
            raise GeometryError("anchor must lie strictly inside one side of the rectangle")
        t, nu, back, ahead, depth = sides[0]
        if back <= eps or ahead <= eps:
            raise GeometryError("anchor must lie strictly inside one side of the rectangle")
        return t, nu, back, ahead, depth

    @property
    def outward_normal(self) -> np.ndarray:
        return -np.asarray(self._side()[1])

    def frame(self):
        """Anchor, unit tangent and inward unit normal as arrays."""
        t, nu, *_ = self._side()
        return np.asarray(self.anchor), np.asarray(t), np.asarray(nu)

    def scaled(self, factor: float) -> "CrossSectionShape":
        """Dilate the cross-section by ``factor`` (used for period rescaling)."""
        anchor = tuple(factor * c for c in self.anchor)
        if self.kind == "rectangle":
            return CrossSectionShape("rectangle", width=factor * self.width,
                                     height=factor * self.height, anchor=anchor)
        return CrossSectionShape("disk", radius=factor * self.radius, anchor=anchor)


@dataclass(frozen=True)
class CavernSpec:
    """Reference cavern ``theta`` in the half-space ``xi_1 < 0`` and its scale ``h``.

    ``hemisphere`` is the half ball of radius ``radius``; ``box`` is
    ``(-e1, 0) x (-e2, e2) x (-e3, e3)`` for ``extents = (e1, e2, e3)``,
    i.e. depth ``e1`` and half widths ``e2`` (along s) and ``e3`` (along z).
    """

    shape: str = "hemisphere"
    h: float = 0.2
    radius: float = 1.0
    extents: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.shape not in ("hemisphere", "box"):
            raise GeometryError(f"unknown cavern shape {self.shape!r}")
        if not self.h > 0:
            raise GeometryError("cavern scale h must be positive")
        if self.shape == "hemisphere" and not self.radius > 0:
            raise GeometryError("hemisphere radius must be positive")
        if self.shape == "box":
            ext = tuple(float(e) for e in self.extents)
            if len(ext) != 3 or min(ext) <= 0:
                raise GeometryError("box cavern needs three positive half extents")
            object.__setattr__(self, "extents", ext)

    @property
    def r_ref(self) -> float:
        """Radius of a half ball containing the unit-scale cavern."""
        if self.shape == "hemisphere":
            return self.radius
        return math.sqrt(sum(e * e for e in self.extents))

    def half_extents(self) -> np.ndarray:
        """Unit-scale extents of the bounding box along (depth, s, z)."""
        if self.shape == "hemisphere":
            return np.array([self.radius, self.radius, self.radius])
        return np.array(self.extents, dtype=float)

    def with_h(self, h: float) -> "CavernSpec":
        return CavernSpec(self.shape, h=h, radius=self.radius, extents=self.extents)

    def contains(self, xi: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Membership of stretched points ``xi = (xi_1, xi_2, xi_3)`` in the closed cavern."""
        xi = np.atleast_2d(xi)
        if self.shape == "hemisphere":
            return (np.linalg.norm(xi, axis=1) <= self.radius + tol) & (xi[:, 0] <= tol)
        ext = self.half_extents()
        return ((xi[:, 0] >= -ext[0] - tol) & (xi[:, 0] <= tol)
                & (np.abs(xi[:, 1]) <= ext[1] + tol) & (np.abs(xi[:, 2]) <= ext[2] + tol))


# ---------------------------------------------------------------------------
# mesh container
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Mesh:
    """Structured finite-element mesh.

    ``facet_labels`` refine the four boundary tags: ``lateral`` (cylinder
    surface), ``cavern`` (cavern surface), ``flat`` (plane ``xi_1 = 0`` of
    the half-space), ``outer`` (truncation sphere), ``z_lo`` / ``z_hi``
    (periodic faces).  ``element_region`` is 1 for elements filling the
    cavern (only present in meshes built with ``fill_cavern=True``).
    """

    nodes: np.ndarray
    elements: np.ndarray
    facets: np.ndarray
    facet_tags: np.ndarray
    facet_labels: np.ndarray
    periodic_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    element_region: Optional[np.ndarray] = None
    anchor_node: Optional[int] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("nodes", "elements", "facets", "facet_tags", "facet_labels",
                     "periodic_pairs", "element_region"):
            arr = getattr(self, name)
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)
        if self.element_region is None:
            region = np.zeros(len(self.elements), dtype=np.int8)
            region.setflags(write=False)
            object.__setattr__(self, "element_region", region)

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def has_cavern_fill(self) -> bool:
        return bool(np.any(self.element_region == 1))

    def facets_with(self, tag=None, label=None) -> np.ndarray:
        mask = np.ones(len(self.facets), dtype=bool)
        if tag is not None:
            mask &= self.facet_tags == tag
        if label is not None:
            mask &= self.facet_labels == label
        return self.facets[mask]

    def nodes_with(self, tag=None, label=None) -> np.ndarray:
        return np.unique(self.facets_with(tag, label))

    def cavern_nodes(self) -> np.ndarray:
        """Nodes of the closed cavern region of a filled mesh (surface included)."""
        filled = self.elements[self.element_region == 1]
        if len(filled) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.unique(filled)

    def dirichlet_nodes(self, include_cavern: bool = True) -> np.ndarray:
        if include_cavern:
            nodes = self.nodes_with(tag=DIRICHLET)
            return np.union1d(nodes, self.cavern_nodes())
        mask = (self.facet_tags == DIRICHLET) & (self.facet_labels != "cavern")
        return np.unique(self.facets[mask])

    def without_cavern_fill(self) -> "Mesh":
        """Drop the cavern-filling elements and the nodes strictly inside the cavern."""
        keep_el = self.element_region == 0
        if keep_el.all():
            return self
        elements = self.elements[keep_el]
        used = np.zeros(self.n_nodes, dtype=bool)
        used[elements.ravel()] = True
        new_index = -np.ones(self.n_nodes, dtype=np.int64)
        new_index[used] = np.arange(used.sum())
        facet_ok = used[self.facets].all(axis=1)
        pairs = self.periodic_pairs
        if len(pairs):
            pairs = new_index[pairs[used[pairs].all(axis=1)]]
        anchor = self.anchor_node
        if anchor is not None:
            anchor = int(new_index[anchor]) if used[anchor] else None
        return Mesh(
            nodes=self.nodes[used].copy(),
            elements=new_index[elements],
            facets=new_index[self.facets[facet_ok]],
            facet_tags=self.facet_tags[facet_ok].copy(),
            facet_labels=self.facet_labels[facet_ok].copy(),
            periodic_pairs=pairs,
            element_region=np.zeros(len(elements), dtype=np.int8),
            anchor_node=anchor,
            info=dict(self.info, cavern_filled=False),
        )


# ---------------------------------------------------------------------------
# 1D grading and structured grids
# ---------------------------------------------------------------------------


def graded_axis(lo, hi, required=(), window=None, fine=None, coarse=None, growth=1.3):
    """Node coordinates on ``[lo, hi]`` containing every point of ``required``.

    Inside ``window`` the spacing is at most ``fine``; outside it grows
    linearly with the distance to the window (a geometric progression of
    cell sizes with ratio about ``growth``) and is capped at ``coarse``.
    """
    if coarse is None:
        coarse = hi - lo
    if fine is None or window is None:
        fine, window = coarse, (lo, lo)
    wl, wr = window
    samples = np.linspace(lo, hi, 8001)
    dist = np.maximum(np.maximum(wl - samples, samples - wr), 0.0)
    size = np.minimum(coarse, fine + (growth - 1.0) * dist)
    density = 1.0 / size
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * np.diff(samples))])
    pts = sorted({float(lo), float(hi), *[float(p) for p in required if lo <= p <= hi]})
    merged = [pts[0]]
    for p in pts[1:]:
        if p - merged[-1] > 1e-12 * (hi - lo):
            merged.append(p)
    merged[-1] = float(hi)
    out = [merged[0]]
    for a, b in zip(merged[:-1], merged[1:]):
        fa, fb = np.interp([a, b], samples, cum)
        n = max(1, int(math.ceil(fb - fa - 1e-9)))
        inner = np.interp(np.linspace(fa, fb, n + 1)[1:-1], cum, samples)
        out.extend(inner.tolist())
        out.append(b)
    return np.asarray(out)


def symmetric_axis(half_extent, required=(), window=None, fine=None, coarse=None, growth=1.3):
    """Axis on ``[-L, L]`` that is exactly mirror symmetric about 0."""
    req = [abs(p) for p in required if abs(p) <= half_extent]
    win = None if window is None else (0.0, window)
    half = graded_axis(0.0, half_extent, [0.0, *req], win, fine, coarse, growth)
    return np.concatenate([-half[:0:-1], half])


def _tensor_grid(axes):
    """Node array and (quad or hex) connectivity of a tensor-product grid."""
    shape = [len(a) for a in axes]
    grids = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    idx = np.arange(nodes.shape[0]).reshape(shape)
    if len(axes) == 2:
        i0 = idx[:-1, :-1]
        elements = np.stack([i0, idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]], axis=-1).reshape(-1, 4)
    else:
        c = [idx[:-1, :-1, :-1], idx[1:, :-1, :-1], idx[1:, 1:, :-1], idx[:-1, 1:, :-1],
             idx[:-1, :-1, 1:], idx[1:, :-1, 1:], idx[1:, 1:, 1:], idx[:-1, 1:, 1:]]
        elements = np.stack(c, axis=-1).reshape(-1, 8)
    return nodes, elements, idx


def element_faces(elements: np.ndarray) -> np.ndarray:
    """All (outward oriented) faces or edges, shape (E, n_faces, n_face_nodes)."""
    local = HEX_FACES if elements.shape[1] == 8 else QUAD_EDGES
    return elements[:, local]


def _classify_faces(elements, region):
    """Boundary faces (appearing once) and region-interface faces.

    Returns (boundary_faces, boundary_owner, interface_faces); interface faces
    are oriented outward from the region-0 element.
    """
    faces = element_faces(elements)
    n_el, n_f, n_v = faces.shape
    flat = faces.reshape(-1, n_v)
    owner = np.repeat(np.arange(n_el), n_f)
    key = np.sort(flat, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    once = counts[inverse] == 1
    boundary = flat[once]
    boundary_owner = owner[once]
    twice = ~once & (region[owner] == 0)
    cand = np.nonzero(twice)[0]
    # partner of each region-0 face: same key owned by a region-1 element
    other = np.nonzero(~once & (region[owner] == 1))[0]
    in_fill = np.zeros(len(counts), dtype=bool)
    in_fill[inverse[other]] = True
    interface = flat[cand[in_fill[inverse[cand]]]]
    return boundary, boundary_owner, interface


# ---------------------------------------------------------------------------
# cavern maps (local frame: columns are depth, s, z)
# ---------------------------------------------------------------------------


def _inf_norm(local):
    return np.abs(local).max(axis=1)


def _radial_cavern_map(local, r_in, r_out):
    """Map the half cube of radius ``r_in`` onto the half ball of the same radius.

    Shells ``|x|_inf = r`` with ``r <= r_in`` become spheres; between
    ``r_in`` and ``r_out`` the map blends linearly back to the identity.
    The map sends rays to rays and is monotone along each ray.
    """
    rho = _inf_norm(local)
    r2 = np.linalg.norm(local, axis=1)
    safe = np.where(r2 > 0, r2, 1.0)
    t = np.clip((r_out - rho) / (r_out - r_in), 0.0, 1.0)
    factor = (1.0 - t) + t * rho / safe
    factor[r2 == 0] = 1.0
    return local * factor[:, None]


def _sphere_shell_map(local, r_start, r_end):
    """Blend cube shells into spheres between ``r_start`` (identity) and ``r_end``."""
    rho = _inf_norm(local)
    r2 = np.linalg.norm(local, axis=1)
    safe = np.where(r2 > 0, r2, 1.0)
    if r_end <= r_start:
        t = np.ones_like(rho)
    else:
        t = np.clip((rho - r_start) / (r_end - r_start), 0.0, 1.0)
    factor = (1.0 - t) + t * rho / safe
    factor[r2 == 0] = 1.0
    return local * factor[:, None]


def _cavern_box(cavern: CavernSpec) -> np.ndarray:
    """Scaled bounding box of the cavern along (depth, s, z)."""
    return cavern.h * cavern.half_extents()


# ---------------------------------------------------------------------------
# 2D cross-section meshes
# ---------------------------------------------------------------------------


def _disk_patch_params(radius):
    # inner square half width making the bottom patch conformal at O'
    c = radius * (1.0 - math.pi / 4.0)
    return c, radius * math.pi / 4.0, radius - c


def _disk_patch_map(t, r, radius, c):
    """Bottom patch of the five-patch disk: (t, r) in [-1,1] x [0,1] -> plane."""
    inner = np.stack([c * t, -c * np.ones_like(t)], axis=-1)
    ang = 0.25 * math.pi * t
    outer = radius * np.stack([np.sin(ang), -np.cos(ang)], axis=-1)
    return (1.0 - r)[..., None] * inner + r[..., None] * outer


_ROT90 = np.array([[0.0, -1.0], [1.0, 0.0]])


def _disk_quad_mesh(radius, n_tan_bottom, n_tan_other, n_rad, params_bottom=None):
    """Five-patch quad mesh of a disk centred at 0 with O' = (0, -radius).

    ``params_bottom`` optionally supplies the (t, r) parameter axes of the
    bottom patch; the top patch reuses them mirrored so the central square
    stays a tensor grid.  Returns nodes and quads, merged across patches.
    """
    c, _, _ = _disk_patch_params(radius)
    if params_bottom is None:
        tb = np.linspace(-1.0, 1.0, n_tan_bottom + 1)
        rb = np.linspace(0.0, 1.0, n_rad + 1)
    else:
        tb, rb = params_bottom
    to = np.linspace(-1.0, 1.0, n_tan_other + 1)
    all_nodes, all_quads = [], []
    offset = 0
    # bottom (rotation 0), right (90), top (180), left (270)
    for k, (tt, rr) in enumerate([(tb, rb), (to, rb), (tb, rb), (to, rb)]):
        T, R = np.meshgrid(tt, rr, indexing="ij")
        pts = _disk_patch_map(T.ravel(), R.ravel(), radius, c)
        rot = np.linalg.matrix_power(_ROT90, k)
        pts = pts @ rot.T
        _, quads, _ = _tensor_grid([tt, rr])
        # (t, r) with r pointing outward is clockwise in the plane; reverse orientation
        all_nodes.append(pts)
        all_quads.append(quads[:, [0, 3, 2, 1]] + offset)
        offset += len(pts)
    # central square: x uses the left/right tangential axis, y the bottom/top one
    xs = c * tb
    ys = c * to
    cn, cq, _ = _tensor_grid([xs, ys])
    all_nodes.append(cn)
    all_quads.append(cq + offset)
    nodes = np.concatenate(all_nodes)
    quads = np.concatenate(all_quads)
    return _merge_nodes(nodes, quads, 1e-9 * radius)


def _merge_nodes(nodes, elements, tol):
    key = np.round(nodes / tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    # keep the first occurrence order for determinism
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    merged = nodes[first[order]]
    return merged, remap[inverse][elements]


def _ensure_orientation(nodes, elements):
    """Flip elements with negative signed area/volume (corner-based test)."""
    from .fem import corner_jacobians

    det = corner_jacobians(nodes, elements).min(axis=1)
    flip = det < 0
    if np.any(flip):
        perm = [0, 3, 2, 1] if elements.shape[1] == 4 else [0, 3, 2, 1, 4, 7, 6, 5]
        elements = elements.copy()
        elements[flip] = elements[flip][:, perm]
    return elements


def build_cross_section_mesh(shape: CrossSectionShape, resolution: int) -> Mesh:
    """Conforming quad mesh of the cross-section with every boundary edge Dirichlet.

    The rectangle gets ``resolution`` cells along its shorter side; the disk
    a five-patch mesh with ``resolution`` cells along each patch side.  The
    anchor O' is always a mesh node.
    """
    if int(resolution) != resolution or resolution < 2:
        raise InvalidResolutionError(f"resolution must be an integer >= 2, got {resolution}")
    resolution = int(resolution)
    if shape.kind == "rectangle":
        a, b = shape.width, shape.height
        step = min(a, b) / resolution
        xs = np.linspace(0.0, a, max(2, int(round(a / step))) + 1)
        ys = np.linspace(0.0, b, max(2, int(round(b / step))) + 1)
        ax_, ay_ = shape.anchor
        # snap the grid line nearest to O' onto it
        if abs(ay_) < shape.tol or abs(ay_ - b) < shape.tol:
            j = int(np.argmin(np.abs(xs[1:-1] - ax_))) + 1
            xs[j] = ax_
        else:
            j = int(np.argmin(np.abs(ys[1:-1] - ay_))) + 1
            ys[j] = ay_
        nodes, elements, _ = _tensor_grid([xs, ys])
    else:
        n = resolution
        tb = np.linspace(-1.0, 1.0, 2 * (n // 2) + 1 if n % 2 else n + 1)
        nodes, elements = _disk_quad_mesh(shape.radius, None, n, n, (tb, np.linspace(0, 1, n + 1)))
        elements = _ensure_orientation(nodes, elements)
        # rotate so that (0, -R) goes to the anchor
        ang = math.atan2(shape.anchor[1], shape.anchor[0]) + 0.5 * math.pi
        rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
        nodes = nodes @ rot.T
        # put boundary nodes exactly on the circle
        r = np.linalg.norm(nodes, axis=1)
        on = np.abs(r - shape.radius) < 1e-8 * shape.radius
        nodes[on] *= (shape.radius / r[on])[:, None]
    boundary, _, _ = _classify_faces(elements, np.zeros(len(elements), dtype=np.int8))
    anchor_node = int(np.argmin(np.linalg.norm(nodes - np.asarray(shape.anchor), axis=1)))
    if np.linalg.norm(nodes[anchor_node] - shape.anchor) > 1e-9 * shape.diameter:
        raise GeometryError("anchor point is not a mesh node")
    nodes[anchor_node] = shape.anchor
    return Mesh(
        nodes=nodes,
        elements=elements,
        facets=boundary,
        facet_tags=np.full(len(boundary), DIRICHLET, dtype=np.int8),
        facet_labels=np.full(len(boundary), "lateral", dtype=object),
        anchor_node=anchor_node,
        info={"kind": "cross_section", "shape": shape.kind, "resolution": resolution,
              "cross_section": shape},
    )


# ---------------------------------------------------------------------------
# 3D periodicity cell
# ---------------------------------------------------------------------------


def _blend_radius(cavern: CavernSpec, limit: float) -> float:
    """Outer radius of the cavern map, inside the admissible neighbourhood."""
    r_in = float(_cavern_box(cavern).max())
    return min(2.0 * r_in, limit)


def check_cavern_fits(shape: CrossSectionShape, cavern: CavernSpec) -> float:
    """Raise GeometryError unless the scaled cavern fits in the cell.

    Returns the half width of the graded neighbourhood around O.
    """
    _, _, back, ahead, depth = shape._side()
    box = _cavern_box(cavern)
    limit = min(0.5, back, ahead, depth)
    if shape.kind == "disk":
        limit = min(0.5, 0.5 * shape.radius * (math.pi / 4.0), shape.radius - _disk_patch_params(shape.radius)[0])
    outer = _blend_radius(cavern, 0.98 * limit)
    if box.max() >= 0.5:
        raise GeometryError(f"cavern of size {box.max():.3g} would cross the periodic faces z = +-1/2")
    if cavern.shape == "hemisphere" and outer < 1.25 * box.max():
        raise GeometryError(
            f"cavern h={cavern.h:g} too large for the cell: needs a neighbourhood of "
            f"{1.25 * box.max():.3g}, only {outer:.3g} available")
    if box[0] >= depth or box[1] >= min(back, ahead):
        raise GeometryError("cavern does not fit inside the cross-section")
    return outer


def _local_axes(extent_back, extent_ahead, depth, cavern, outer, coarse, fine):
    """(depth, s, z) node axes of the cell in the local frame."""
    if cavern is None:
        d_ax = graded_axis(0.0, depth, [], None, None, coarse)
        if abs(extent_back - extent_ahead) < 1e-12:
            s_ax = symmetric_axis(extent_back, [], None, None, coarse)
        else:
            s_ax = graded_axis(-extent_back, extent_ahead, [0.0], None, None, coarse)
        z_ax = symmetric_axis(0.5, [], None, None, coarse)
        return d_ax, s_ax, z_ax
    box = _cavern_box(cavern)
    d_ax = graded_axis(0.0, depth, [box[0], outer], (0.0, outer), fine, coarse)
    req_s = [box[1], outer]
    if abs(extent_back - extent_ahead) < 1e-12:
        s_ax = symmetric_axis(extent_back, req_s, outer, fine, coarse)
    else:
        s_ax = graded_axis(-extent_back, extent_ahead, [-outer, -box[1], 0.0, box[1], outer],
                           (-outer, outer), fine, coarse)
    z_ax = symmetric_axis(0.5, [box[2], outer], outer, fine, coarse)
    return d_ax, s_ax, z_ax


def _carve(local, elements, cavern, outer):
    """Apply the cavern map in the local frame and mark cavern-filling elements."""
    box = _cavern_box(cavern)
    tol = 1e-9
    inside = ((local[:, 0] <= box[0] * (1 + tol)) & (np.abs(local[:, 1]) <= box[1] * (1 + tol))
              & (np.abs(local[:, 2]) <= box[2] * (1 + tol)))
    region = inside[elements].all(axis=1).astype(np.int8)
    if cavern.shape == "hemisphere":
        local = _radial_cavern_map(local, box.max(), outer)
    return local, region


def build_cell_mesh(shape: CrossSectionShape, cavern: Optional[CavernSpec] = None,
                    refinement_levels: int = 2, resolution: int = 8,
                    fill_cavern: bool = False) -> Mesh:
    """Hexahedral mesh of the periodicity cell, minus the cavern.

    ``resolution`` cells span the shorter side of the rectangle (or each side
    of a disk patch); around the anchor the cell size is halved
    ``refinement_levels`` times.  With ``fill_cavern`` the cavern itself is
    meshed too (elements with region 1), which gives the unperturbed cell on
    the same mesh once the cavern constraints are dropped.
    """
    if int(resolution) != resolution or resolution < 2:
        raise InvalidResolutionError(f"resolution must be an integer >= 2, got {resolution}")
    if refinement_levels < 0:
        raise GeometryError("refinement_levels must be nonnegative")
    outer = check_cavern_fits(shape, cavern) if cavern is not None else None
    if shape.kind == "disk":
        mesh = _disk_cell_mesh(shape, cavern, refinement_levels, int(resolution), outer)
    else:
        mesh = _rectangle_cell_mesh(shape, cavern, refinement_levels, int(resolution), outer)
    if cavern is not None and not fill_cavern:
        mesh = mesh.without_cavern_fill()
    return mesh


def _finish_cell(nodes, elements, region, z_index, cavern, shape, info):
    """Tag faces, build periodic pairing and assemble the Mesh."""
    boundary, _, interface = _classify_faces(elements, region)
    zmin, zmax = nodes[:, 2].min(), nodes[:, 2].max()
    tol = 1e-10
    fz = nodes[boundary][:, :, 2]
    on_lo = np.all(np.abs(fz - zmin) < tol, axis=1)
    on_hi = np.all(np.abs(fz - zmax) < tol, axis=1)
    tags = np.full(len(boundary), DIRICHLET, dtype=np.int8)
    labels = np.full(len(boundary), "lateral", dtype=object)
    tags[on_lo], labels[on_lo] = PERIODIC_LO, "z_lo"
    tags[on_hi], labels[on_hi] = PERIODIC_HI, "z_hi"
    facets = np.concatenate([boundary, interface])
    tags = np.concatenate([tags, np.full(len(interface), DIRICHLET, dtype=np.int8)])
    labels = np.concatenate([labels, np.full(len(interface), "cavern", dtype=object)])
    lo = z_index[..., 0].ravel()
    hi = z_index[..., -1].ravel()
    pairs = np.stack([lo, hi], axis=1)
    anchor = np.array([*shape.anchor, 0.0])
    anchor_node = int(np.argmin(np.linalg.norm(nodes - anchor, axis=1)))
    if np.linalg.norm(nodes[anchor_node] - anchor) > 1e-9:
        anchor_node = None
    return Mesh(nodes=nodes, elements=elements, facets=facets, facet_tags=tags,
                facet_labels=labels, periodic_pairs=pairs, element_region=region,
                anchor_node=anchor_node, info=info)


def _rectangle_cell_mesh(shape, cavern, levels, resolution, outer):
    a, b = shape.width, shape.height
    coarse = min(a, b) / resolution
    fine = coarse / 2 ** levels
    _, _, back, ahead, depth = shape._side()
    d_ax, s_ax, z_ax = _local_axes(back, ahead, depth, cavern, outer, coarse, fine)
    local, elements, idx = _tensor_grid([d_ax, s_ax, z_ax])
    region = np.zeros(len(elements), dtype=np.int8)
    if cavern is not None:
        local, region = _carve(local, elements, cavern, outer)
    origin, tangent, nu = shape.frame()
    xy = origin[None, :] + local[:, 1:2] * tangent[None, :] + local[:, 0:1] * nu[None, :]
    nodes = np.column_stack([xy, local[:, 2]])
    # (depth, s) -> (nu, t) has determinant -1: restore positive orientation
    elements = elements[:, [0, 3, 2, 1, 4, 7, 6, 5]]
    # snap boundary nodes exactly onto the rectangle sides
    for col, val in ((0, 0.0), (0, a), (1, 0.0), (1, b)):
        near = np.abs(nodes[:, col] - val) < 1e-12 * shape.diameter
        nodes[near, col] = val
    info = {"kind": "cell", "shape": "rectangle", "resolution": resolution,
            "refinement_levels": levels, "h": 0.0 if cavern is None else cavern.h,
            "cavern": None if cavern is None else cavern.shape,
            "cavern_filled": cavern is not None, "blend_radius": outer}
    return _finish_cell(nodes, elements, region, idx, cavern, shape, info)


def _disk_cell_mesh(shape, cavern, levels, resolution, outer):
    """Disk cell: five-patch cross-section mesh extruded in z.

    The cavern is carved in the parameter plane of the patch containing O',
    scaled so that the patch map is an isometry at O'; the physical cavern is
    therefore exact up to O(h^2) position errors.
    """
    R = shape.radius
    c, s_scale, d_scale = _disk_patch_params(R)
    coarse = 0.5 * math.pi * R / resolution
    fine = coarse / 2 ** levels
    if cavern is None:
        tb = np.linspace(-1.0, 1.0, resolution + 1)
        rb = np.linspace(0.0, 1.0, resolution + 1)
        z_ax = symmetric_axis(0.5, [], None, None, coarse)
    else:
        box = _cavern_box(cavern)
        s_ax = symmetric_axis(s_scale, [box[1], outer], outer, fine, coarse)
        d_ax = graded_axis(0.0, d_scale, [box[0], outer], (0.0, outer), fine, coarse)
        tb = s_ax / s_scale
        rb = (1.0 - d_ax / d_scale)[::-1]
        z_ax = symmetric_axis(0.5, [box[2], outer], outer, fine, coarse)
    nodes2, quads = _disk_quad_mesh(R, None, resolution, None, (tb, rb))
    quads = _ensure_orientation(nodes2, quads)
    n2 = len(nodes2)
    nz = len(z_ax)
    nodes = np.column_stack([np.tile(nodes2, (nz, 1)), np.repeat(z_ax, n2)])
    layer = np.arange(nz - 1)[:, None, None] * n2
    hexes = np.concatenate([quads[None] + layer, quads[None] + layer + n2], axis=2).reshape(-1, 8)
    z_index = np.arange(nz * n2).reshape(nz, n2).T[:, None, :]
    region = np.zeros(len(hexes), dtype=np.int8)
    if cavern is not None:
        # local frame of the bottom patch: invert the patch map by parameters
        box = _cavern_box(cavern)
        cent = nodes2.copy()
        # parameters of bottom-patch nodes (t, r) recovered from construction
        T, Rr = np.meshgrid(tb, rb, indexing="ij")
        pts = _disk_patch_map(T.ravel(), Rr.ravel(), R, c)
        key_pts = np.round(pts / (1e-9 * R)).astype(np.int64)
        key_all = np.round(cent / (1e-9 * R)).astype(np.int64)
        lookup = {tuple(k): i for i, k in enumerate(key_all)}
        ids = np.array([lookup[tuple(k)] for k in key_pts])
        s_par = T.ravel() * s_scale
        d_par = (1.0 - Rr.ravel()) * d_scale
        in_patch = np.zeros(n2, dtype=bool)
        in_patch[ids] = True
        loc2 = np.zeros((n2, 2))
        loc2[ids, 0] = d_par
        loc2[ids, 1] = s_par
        local = np.column_stack([np.tile(loc2, (nz, 1)), np.repeat(z_ax, n2)])
        mask = np.tile(in_patch, nz)
        inside = ((local[:, 0] <= box[0] * (1 + 1e-9)) & (np.abs(local[:, 1]) <= box[1] * (1 + 1e-9))
                  & (np.abs(local[:, 2]) <= box[2] * (1 + 1e-9)) & mask)
        region = inside[hexes].all(axis=1).astype(np.int8)
        if cavern.shape == "hemisphere":
            moved = _radial_cavern_map(local[mask], box.max(), outer)
            # map the moved parameters back through the patch
            tt = moved[:, 1] / s_scale
            rr = 1.0 - moved[:, 0] / d_scale
            xy = _disk_patch_map(tt, rr, R, c)
            nodes[mask, :2] = xy
            nodes[mask, 2] = moved[:, 2]
    ang = math.atan2(shape.anchor[1], shape.anchor[0]) + 0.5 * math.pi
    rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
    nodes[:, :2] = nodes[:, :2] @ rot.T
    r = np.linalg.norm(nodes[:, :2], axis=1)
    on = np.abs(r - R) < 1e-8 * R
    nodes[on, :2] *= (R / r[on])[:, None]
    hexes = _ensure_orientation(nodes, hexes)
    info = {"kind": "cell", "shape": "disk", "resolution": resolution,
            "refinement_levels": levels, "h": 0.0 if cavern is None else cavern.h,
            "cavern": None if cavern is None else cavern.shape,
            "cavern_filled": cavern is not None, "blend_radius": outer}
    return _finish_cell(nodes, hexes, region, z_index, cavern, shape, info)


# ---------------------------------------------------------------------------
# half-space exterior domain
# ---------------------------------------------------------------------------


def build_halfspace_mesh(cavern: CavernSpec, truncation_radius: float, resolution: int = 4,
                         fit_radii: Sequence[float] = (), growth: float = 1.25,
                         max_cell: Optional[float] = None) -> Mesh:
    """Mesh of ``{|xi| < R, xi_1 < 0}`` minus the unit-scale cavern.

    ``resolution`` is the number of cells per cavern radius next to the
    cavern; cells grow geometrically away from it up to ``max_cell``
    (default: the cavern radius).  Every radius in
    ``fit_radii`` is a mesh shell (a sphere) so that surface moments can be
    integrated over exact mesh faces.  Coordinates are ``xi`` directly.
    """
    if int(resolution) != resolution or resolution < 1:
        raise InvalidResolutionError(f"resolution must be a positive integer, got {resolution}")
    R = float(truncation_radius)
    if R < 4.0 * cavern.r_ref:
        raise TruncationTooTightError(
            f"truncation radius {R:g} < 4 x R_ref = {4 * cavern.r_ref:g}")
    unit = cavern.with_h(1.0)
    box = unit.half_extents()  # (normal, s, z)
    r_in = float(box.max())
    fine = r_in / resolution
    coarse = r_in if max_cell is None else float(max_cell)
    radii = sorted(float(r) for r in fit_radii)
    if cavern.shape == "hemisphere":
        r_sphere = r_in
    else:
        r_sphere = min(radii) if radii else R
        if box.max() > 0.25 * r_sphere:
            raise GeometryError("box cavern too elongated for the requested fit radii")
    req = [*box.tolist(), *radii, R]
    a1 = -graded_axis(0.0, R, req, (0.0, r_in), fine, coarse, growth)[::-1]
    a2 = symmetric_axis(R, req, r_in, fine, coarse, growth)
    local, elements, _ = _tensor_grid([a1, a2, a2])
    tol = 1e-9
    inside = ((local[:, 0] >= -box[0] * (1 + tol)) & (np.abs(local[:, 1]) <= box[1] * (1 + tol))
              & (np.abs(local[:, 2]) <= box[2] * (1 + tol)))
    keep = ~inside[elements].all(axis=1)
    elements = elements[keep]
    pre = local.copy()
    if cavern.shape == "hemisphere":
        nodes = _sphere_shell_map(local, 0.0, 0.0)
    else:
        nodes = _sphere_shell_map(local, r_in, r_sphere)
    used = np.zeros(len(nodes), dtype=bool)
    used[elements.ravel()] = True
    new_index = -np.ones(len(nodes), dtype=np.int64)
    new_index[used] = np.arange(used.sum())
    nodes, pre, elements = nodes[used], pre[used], new_index[elements]
    boundary, _, _ = _classify_faces(elements, np.zeros(len(elements), dtype=np.int8))
    fpre = pre[boundary]
    flat = np.all(np.abs(fpre[:, :, 0]) < 1e-12, axis=1)
    outer = np.all(np.abs(fpre).max(axis=2) > R * (1 - 1e-12), axis=1)
    tags = np.full(len(boundary), DIRICHLET, dtype=np.int8)
    labels = np.full(len(boundary), "cavern", dtype=object)
    labels[flat] = "flat"
    tags[outer], labels[outer] = TRUNCATION, "outer"
    # mesh shells at the requested radii (node sets), for moment extraction
    rho_pre = np.abs(pre).max(axis=1)
    shells = {}
    for r in radii:
        shells[r] = np.nonzero(np.abs(rho_pre - r) < 1e-9 * R)[0]
    # snap nodes on the cavern and the outer sphere exactly
    if cavern.shape == "hemisphere":
        on_c = np.abs(rho_pre - r_in) < 1e-12 * R
        nodes[on_c] *= (r_in / np.linalg.norm(nodes[on_c], axis=1))[:, None]
    on_o = np.abs(rho_pre - R) < 1e-12 * R
    nodes[on_o] *= (R / np.linalg.norm(nodes[on_o], axis=1))[:, None]
    nodes[np.abs(pre[:, 0]) < 1e-14, 0] = 0.0
    info = {"kind": "halfspace", "cavern": cavern.shape, "truncation_radius": R,
            "resolution": int(resolution), "shell_pre_radius": rho_pre,
            "shells": shells, "r_ref": cavern.r_ref}
    return Mesh(nodes=nodes, elements=elements, facets=boundary, facet_tags=tags,
                facet_labels=labels, info=info)


# ---------------------------------------------------------------------------
# validation and text I/O
# ---------------------------------------------------------------------------


def check_mesh(mesh: Mesh) -> dict:
    """Scan element Jacobians and periodic pairing; raise GeometryError on failure."""
    from .fem import corner_jacobians

    det = corner_jacobians(mesh.nodes, mesh.elements)
    min_det = float(det.min())
    if min_det <= 0:
        bad = int(np.sum(det.min(axis=1) <= 0))
        raise GeometryError(f"{bad} elements with nonpositive Jacobian (min {min_det:.3e})")
    report = {"min_jacobian": min_det, "n_nodes": mesh.n_nodes, "n_elements": mesh.n_elements}
    pairs = mesh.periodic_pairs
    if len(pairs):
        lo, hi = pairs[:, 0], pairs[:, 1]
        if len(np.unique(lo)) != len(lo) or len(np.unique(hi)) != len(hi):
            raise GeometryError("periodic pairing is not a bijection")
        diff = mesh.nodes[hi] - mesh.nodes[lo]
        if np.abs(diff[:, :2]).max() > 0 or np.abs(diff[:, 2] - 1.0).max() > 1e-12:
            raise GeometryError("paired nodes differ by more than a unit z shift")
        lo_face = mesh.nodes_with(tag=PERIODIC_LO)
        if not np.array_equal(np.sort(lo), lo_face):
            raise GeometryError("pairing does not cover the z = -1/2 face")
        report["n_pairs"] = len(pairs)
    return report


def save_mesh(mesh: Mesh, path) -> None:
    """Write a mesh in the versioned debugging text format."""
    kind = "hex" if mesh.elements.shape[1] == 8 else "quad"
    with open(path, "w") as fh:
        fh.write(f"waveguide-gap-mesh {MESH_FORMAT_VERSION}\n")
        fh.write(f"dim {mesh.dim}\n")
        fh.write(f"nodes {mesh.n_nodes}\n")
        for p in mesh.nodes:
            fh.write(" ".join(repr(float(c)) for c in p) + "\n")
        fh.write(f"elements {mesh.n_elements} {kind}\n")
        for e, r in zip(mesh.elements, mesh.element_region):
            fh.write(f"{int(r)} " + " ".join(str(int(i)) for i in e) + "\n")
        fh.write(f"facets {len(mesh.facets)}\n")
        for f, t, lab in zip(mesh.facets, mesh.facet_tags, mesh.facet_labels):
            fh.write(f"{TAG_NAMES[int(t)]} {lab} " + " ".join(str(int(i)) for i in f) + "\n")
        fh.write(f"periodic {len(mesh.periodic_pairs)}\n")
        for lo, hi in mesh.periodic_pairs:
            fh.write(f"{int(lo)} {int(hi)}\n")
        fh.write(f"anchor {-1 if mesh.anchor_node is None else mesh.anchor_node}\n")


def load_mesh(path) -> Mesh:
    names = {v: k for k, v in TAG_NAMES.items()}
    with open(path) as fh:
        lines = iter(fh.read().splitlines())
    head = next(lines).split()
    if head[0] != "waveguide-gap-mesh" or int(head[1]) != MESH_FORMAT_VERSION:
        raise GeometryError(f"unsupported mesh file header {' '.join(head)!r}")
    dim = int(next(lines).split()[1])
    n = int(next(lines).split()[1])
    nodes = np.array([[float(c) for c in next(lines).split()] for _ in range(n)]).reshape(n, dim)
    ne = int(next(lines).split()[1])
    rows = [[int(c) for c in next(lines).split()] for _ in range(ne)]
    region = np.array([r[0] for r in rows], dtype=np.int8)
    elements = np.array([r[1:] for r in rows], dtype=np.int64)
    nf = int(next(lines).split()[1])
    tags, labels, facets = [], [], []
    for _ in range(nf):
        parts = next(lines).split()
        tags.append(names[parts[0]])
        labels.append(parts[1])
        facets.append([int(c) for c in parts[2:]])
    npairs = int(next(lines).split()[1])
    pairs = np.array([[int(c) for c in next(lines).split()] for _ in range(npairs)],
                     dtype=np.int64).reshape(npairs, 2)
    anchor = int(next(lines).split()[1])
    width = 4 if dim == 3 else 2
    return Mesh(nodes=nodes, elements=elements,
                facets=np.array(facets, dtype=np.int64).reshape(nf, width),
                facet_tags=np.array(tags, dtype=np.int8),
                facet_labels=np.array(labels, dtype=object),
                periodic_pairs=pairs, element_region=region,
                anchor_node=None if anchor < 0 else anchor)
