"""Skeleton-derived coronary trees: graph construction, features, branch labeling.

The right tree is a single RCA region. The left tree is split into LM, LAD and
LCx: the trunk from the inflow to the first major bifurcation is LM, and a
logistic-regression classifier over (angle, radius, subtree length) picks the
LAD continuation among the children there; exactly one child becomes LAD.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import EmptyMaskError, GraphError
from .morphology import connected_components, edt, neighbor_counts, skeletonize_3d
from .volume import ElementKind, TerritoryCode, Volume

UNSET = TerritoryCode.BACKGROUND  # edges start unlabeled

_OFFSETS_26 = np.array([(dx, dy, dz)
                        for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
                        if (dx, dy, dz) != (0, 0, 0)], dtype=np.int64)


@dataclass(eq=False)
class GraphNode:
    id: int
    position: np.ndarray  # (3,) world mm
    kind: str             # "root" | "endpoint" | "junction"


@dataclass(eq=False)
class GraphEdge:
    id: int
    from_node: int
    to_node: int
    path: np.ndarray      # (k, 3) world mm, ordered from from_node to to_node
    length_mm: float
    mean_radius_mm: float
    direction_in: np.ndarray
    direction_out: np.ndarray
    label: TerritoryCode = UNSET
    virtual: bool = False


@dataclass
class VesselGraph:
    nodes: list[GraphNode] = field(default_factory=list)
    edges: list[GraphEdge] = field(default_factory=list)
    root_id: int = -1

    def node(self, node_id: int) -> GraphNode:
        return self.nodes[node_id]

    def out_edges(self, node_id: int) -> list[GraphEdge]:
        return [e for e in self.edges if e.from_node == node_id]

    def in_edge(self, node_id: int):
        for e in self.edges:
            if e.to_node == node_id:
                return e
        return None

    def edge_by_id(self, edge_id: int) -> GraphEdge:
        for e in self.edges:
            if e.id == edge_id:
                return e
        raise GraphError(f"no edge with id {edge_id}")

    def subtree_length(self, edge: GraphEdge) -> float:
        total = edge.length_mm
        for child in self.out_edges(edge.to_node):
            total += self.subtree_length(child)
        return total

    def labeled_path_points(self):
        """All path points with their edge labels, as (points (n,3), codes (n,))."""
        pts, codes = [], []
        for e in self.edges:
            pts.append(e.path)
            codes.append(np.full(len(e.path), int(e.label), dtype=np.uint8))
        if not pts:
            return np.zeros((0, 3)), np.zeros(0, dtype=np.uint8)
        return np.vstack(pts), np.concatenate(codes)


# ---------------------------------------------------------------------------
# Component bridging
# ---------------------------------------------------------------------------

def _line_voxels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Voxel rasterization of the segment a-b (26-connected), endpoints included."""
    steps = int(np.abs(b - a).max())
    if steps == 0:
        return a[None, :]
    t = np.linspace(0.0, 1.0, steps + 1)
    pts = np.rint(a[None, :] + t[:, None] * (b - a)[None, :]).astype(np.int64)
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = (pts[1:] != pts[:-1]).any(axis=1)
    return pts[keep]


def bridge_components(vessels: Volume, seed, max_gap_mm: float = 10.0) -> Volume:
    """Merge fragmented vessel components by rasterizing straight bridges.

    Starting from the component nearest the seed point, greedily absorbs the
    component with the smallest inter-component world distance while that
    distance stays within max_gap_mm; everything else is dropped. Bridge voxel
    indices are recorded in the result's meta["bridge_voxels"].
    """
    comps = connected_components(vessels, 26)
    if comps.count == 0:
        raise EmptyMaskError("vessel mask is empty")
    grid = vessels.grid
    spacing = np.asarray(grid.spacing)
    comp_voxels = [np.argwhere(comps.labels == lab) for lab in range(1, comps.count + 1)]
    comp_world = [v * spacing + np.asarray(grid.origin) for v in comp_voxels]
    seed_w = np.asarray(seed, dtype=np.float64)

    seed_dists = [float(np.linalg.norm(w - seed_w, axis=1).min()) for w in comp_world]
    start = int(np.argmin(seed_dists))
    if seed_dists[start] > max_gap_mm:
        raise GraphError(f"no vessel component within {max_gap_mm} mm of the seed point")

    accepted = {start}
    trees = {i: cKDTree(comp_world[i]) for i in range(comps.count)}
    bridges: list[np.ndarray] = []
    while True:
        best = None  # (dist, comp, accepted_voxel, comp_voxel)
        for i in range(comps.count):
            if i in accepted:
                continue
            for j in sorted(accepted):
                d, idx = trees[j].query(comp_world[i])
                k = int(np.argmin(d))
                cand = (float(d[k]), i, comp_voxels[j][idx[k]], comp_voxels[i][k])
                if best is None or cand[0] < best[0]:
                    best = cand
        if best is None or best[0] > max_gap_mm:
            break
        _, i, va, vb = best
        accepted.add(i)
        bridges.append(_line_voxels(np.asarray(va), np.asarray(vb)))

    out = np.zeros(grid.dims, dtype=np.uint8)
    for i in accepted:
        out[tuple(comp_voxels[i].T)] = 1
    bridge_list = []
    for line in bridges:
        new = line[out[tuple(line.T)] == 0]
        out[tuple(line.T)] = 1
        bridge_list.extend(map(tuple, new.tolist()))
    return Volume(grid, ElementKind.MASK, out, meta={"bridge_voxels": bridge_list})


# ---------------------------------------------------------------------------
# Skeleton graph
# ---------------------------------------------------------------------------

def _tangent(path: np.ndarray, at_start: bool) -> np.ndarray:
    # Three-point one-sided tangent; falls back to the chord on short paths.
    if len(path) >= 3:
        v = path[2] - path[0] if at_start else path[-1] - path[-3]
    else:
        v = path[-1] - path[0]
    norm = np.linalg.norm(v)
    if norm == 0:
        return np.array([0.0, 0.0, 1.0])
    return v / norm


def _path_length(path: np.ndarray) -> float:
    if len(path) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(path, axis=0), axis=1).sum())


def build_skeleton_graph(vessels: Volume, root_point) -> VesselGraph:
    """Skeletonize a one-component vessel mask and trace it into a rooted graph.

    Skeleton voxels with one 26-neighbor become endpoints; clusters of voxels
    with three or more become junction nodes at their centroid. Simple chains
    between special voxels become edges. Cycles left by thinning are broken by
    dropping the longest edge in each (minimum spanning forest), then edges
    are oriented by breadth-first traversal from the node nearest root_point.
    """
    skel_vol = skeletonize_3d(vessels)
    skel = skel_vol.bool_mask()
    if not skel.any():
        raise EmptyMaskError("empty skeleton")
    grid = vessels.grid
    spacing = np.asarray(grid.spacing)
    origin = np.asarray(grid.origin)
    radius_map = edt(vessels, to="background").data

    counts = neighbor_counts(skel)
    voxels = np.argwhere(skel)
    flat_order = np.argsort(np.ravel_multi_index(voxels.T, skel.shape, order="F"))
    voxels = voxels[flat_order]
    vox_index = {tuple(v): i for i, v in enumerate(voxels)}
    deg = counts[tuple(voxels.T)]

    # Node assignment: junction clusters (26-cc of deg >= 3) and single endpoints.
    junction_mask = np.zeros_like(skel)
    junction_mask[tuple(voxels[deg >= 3].T)] = True
    jlabels, jcount = ndimage.label(junction_mask, structure=np.ones((3, 3, 3), bool))

    node_of_voxel = np.full(len(voxels), -1, dtype=np.int64)
    nodes: list[GraphNode] = []
    for lab in range(1, jcount + 1):
        cluster = np.argwhere(jlabels == lab)
        centroid = (cluster * spacing + origin).mean(axis=0)
        nid = len(nodes)
        nodes.append(GraphNode(nid, centroid, "junction"))
        for v in cluster:
            node_of_voxel[vox_index[tuple(v)]] = nid
    for i, v in enumerate(voxels):
        if deg[i] <= 1 and node_of_voxel[i] < 0:
            nid = len(nodes)
            nodes.append(GraphNode(nid, v * spacing + origin, "endpoint"))
            node_of_voxel[i] = nid

    def neighbors(v):
        out = []
        for off in _OFFSETS_26:
            w = tuple(v + off)
            idx = vox_index.get(w)
            if idx is not None:
                out.append(idx)
        return out

    # Trace chains between special voxels; each chain voxel is consumed once.
    edges: list[GraphEdge] = []
    chain_done = np.zeros(len(voxels), dtype=bool)
    contact_seen = set()

    def add_edge(idx_path: list[int]) -> None:
        path = voxels[idx_path] * spacing + origin
        a, b = node_of_voxel[idx_path[0]], node_of_voxel[idx_path[-1]]
        edges.append(GraphEdge(
            id=len(edges), from_node=int(a), to_node=int(b), path=path,
            length_mm=_path_length(path),
            mean_radius_mm=float(radius_map[tuple(voxels[idx_path].T)].mean()),
            direction_in=_tangent(path, True), direction_out=_tangent(path, False)))

    def walk_chain(start: int, first: int) -> list[int]:
        # Follow degree-2 voxels from `first` until the next special voxel.
        idx_path = [start, first]
        chain_done[first] = True
        prev, cur = start, first
        while True:
            cand = [k for k in neighbors(voxels[cur]) if k != prev]
            cand = [k for k in cand if node_of_voxel[k] >= 0 or not chain_done[k]]
            if not cand:
                break
            k = cand[0]
            idx_path.append(k)
            if node_of_voxel[k] >= 0:
                break
            chain_done[k] = True
            prev, cur = cur, k
        return idx_path

    special = [i for i in range(len(voxels)) if node_of_voxel[i] >= 0]
    for i in special:
        for j in neighbors(voxels[i]):
            if node_of_voxel[j] >= 0:
                if node_of_voxel[j] != node_of_voxel[i]:
                    key = (min(i, j), max(i, j))
                    if key not in contact_seen:
                        contact_seen.add(key)
                        add_edge([i, j])
                continue
            if chain_done[j]:
                continue
            idx_path = walk_chain(i, j)
            if node_of_voxel[idx_path[-1]] < 0:
                # Severed chain artifact: close it with a synthetic endpoint.
                tail = idx_path[-1]
                nid = len(nodes)
                nodes.append(GraphNode(nid, voxels[tail] * spacing + origin, "endpoint"))
                node_of_voxel[tail] = nid
            add_edge(idx_path)

    # Chains that touch no special voxel are thinning rings; open each at its
    # first voxel in scan order so the region still appears in the graph.
    for i in range(len(voxels)):
        if node_of_voxel[i] < 0 and not chain_done[i]:
            nid = len(nodes)
            nodes.append(GraphNode(nid, voxels[i] * spacing + origin, "endpoint"))
            node_of_voxel[i] = nid
            chain_done[i] = True
            for j in neighbors(voxels[i]):
                if node_of_voxel[j] < 0 and not chain_done[j]:
                    add_edge(walk_chain(i, j))

    graph = VesselGraph(nodes=nodes, edges=edges)
    _break_cycles(graph)
    root = _nearest_node(graph, np.asarray(root_point, dtype=np.float64))
    _orient_from_root(graph, root)
    _mark_virtual(graph, vessels)
    return graph


def _nearest_node(graph: VesselGraph, point: np.ndarray) -> int:
    best = None
    for node in graph.nodes:
        d = float(np.linalg.norm(node.position - point))
        key = (d, tuple(node.position))
        if best is None or key < best[0]:
            best = (key, node.id)
    return best[1]


def _break_cycles(graph: VesselGraph) -> None:
    # Kruskal on ascending length keeps a spanning forest, i.e. removes the
    # longest edge of every cycle. Self-loops always fall.
    parent = list(range(len(graph.nodes)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    kept = []
    for edge in sorted(graph.edges, key=lambda e: (e.length_mm, e.id)):
        ra, rb = find(edge.from_node), find(edge.to_node)
        if ra == rb:
            continue
        parent[ra] = rb
        kept.append(edge)
    kept.sort(key=lambda e: e.id)
    for i, e in enumerate(kept):
        e.id = i
    graph.edges = kept


def _orient_from_root(graph: VesselGraph, root: int) -> None:
    graph.root_id = root
    graph.nodes[root].kind = "root"
    adjacency: dict[int, list[GraphEdge]] = {n.id: [] for n in graph.nodes}
    for e in graph.edges:
        adjacency[e.from_node].append(e)
        adjacency[e.to_node].append(e)
    seen = {root}
    queue = [root]
    ordered = []
    while queue:
        nid = queue.pop(0)
        for e in sorted(adjacency[nid], key=lambda e: e.id):
            other = e.to_node if e.from_node == nid else e.from_node
            if other in seen:
                continue
            if e.from_node != nid:
                e.from_node, e.to_node = e.to_node, e.from_node
                e.path = e.path[::-1].copy()
                e.direction_in = _tangent(e.path, True)
                e.direction_out = _tangent(e.path, False)
            seen.add(other)
            queue.append(other)
            ordered.append(e)
    if len(ordered) != len(graph.edges):
        raise GraphError("graph has edges unreachable from the root; "
                         "is the vessel mask a single component?")
    graph.edges = ordered
    for i, e in enumerate(graph.edges):
        e.id = i


def _mark_virtual(graph: VesselGraph, vessels: Volume) -> None:
    bridge = vessels.meta.get("bridge_voxels")
    if not bridge:
        return
    spacing = np.asarray(vessels.grid.spacing)
    origin = np.asarray(vessels.grid.origin)
    bridge_world = np.asarray(bridge, dtype=np.float64) * spacing + origin
    tree = cKDTree(bridge_world)
    tol = 0.51 * float(min(vessels.grid.spacing))
    for e in graph.edges:
        d, _ = tree.query(e.path)
        if (np.asarray(d) <= tol).any():
            e.virtual = True


# ---------------------------------------------------------------------------
# Branch features and classifier
# ---------------------------------------------------------------------------

@dataclass
class BranchFeatures:
    angle_deg: float   # relative angle between parent outgoing and child incoming
    radius_mm: float   # child mean radius
    length_mm: float   # total length of the child's downstream subtree

    def as_array(self) -> np.ndarray:
        return np.array([self.angle_deg, self.radius_mm, self.length_mm], dtype=np.float64)


@dataclass
class BranchClassifier:
    weights: np.ndarray         # (4,) bias + 3 standardized feature weights
    feature_means: np.ndarray   # (3,)
    feature_scales: np.ndarray  # (3,)


def extract_branch_features(graph: VesselGraph, parent_edge: int, child_edge: int) -> BranchFeatures:
    parent = graph.edge_by_id(parent_edge)
    child = graph.edge_by_id(child_edge)
    if child.from_node != parent.to_node:
        raise GraphError(f"edge {child_edge} does not start at the end of edge {parent_edge}")
    cosang = float(np.clip(np.dot(parent.direction_out, child.direction_in), -1.0, 1.0))
    return BranchFeatures(
        angle_deg=math.degrees(math.acos(cosang)),
        radius_mm=child.mean_radius_mm,
        length_mm=graph.subtree_length(child))


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _design_matrix(features: np.ndarray, means: np.ndarray, scales: np.ndarray) -> np.ndarray:
    z = (features - means) / scales
    return np.hstack([np.ones((len(z), 1)), z])


def penalized_log_likelihood(weights, design, targets, l2: float = 1e-3) -> float:
    """Bernoulli log-likelihood with an L2 penalty on all weights (bias included)."""
    z = design @ weights
    # log p / log (1-p) written via logaddexp for numerical stability
    ll = float(np.sum(targets * -np.logaddexp(0.0, -z) + (1 - targets) * -np.logaddexp(0.0, z)))
    return ll - 0.5 * l2 * float(np.dot(weights, weights))


def log_likelihood_gradient(weights, design, targets, l2: float = 1e-3) -> np.ndarray:
    p = _sigmoid(design @ weights)
    return design.T @ (targets - p) - l2 * np.asarray(weights)


def fit_branch_classifier(samples, l2: float = 1e-3, tol: float = 1e-8,
                          max_iter: int = 200) -> BranchClassifier:
    """Fit P(LAD) by iteratively reweighted least squares on standardized features.

    `samples` is a sequence of (BranchFeatures, label) with label LAD or LCX.
    """
    feats = np.array([f.as_array() for f, _ in samples], dtype=np.float64)
    labels = np.array([1.0 if lab == TerritoryCode.LAD else 0.0 for _, lab in samples])
    for _, lab in samples:
        if lab not in (TerritoryCode.LAD, TerritoryCode.LCX):
            raise ValueError(f"labels must be LAD or LCX, got {lab}")
    if len(samples) < 4:
        raise ValueError(f"need at least 4 samples, got {len(samples)}")
    if labels.min() == labels.max():
        raise ValueError("training data contains a single class")

    means = feats.mean(axis=0)
    scales = feats.std(axis=0)
    scales[scales == 0.0] = 1.0
    design = _design_matrix(feats, means, scales)

    w = np.zeros(design.shape[1])
    eye = np.eye(design.shape[1])
    for _ in range(max_iter):
        p = _sigmoid(design @ w)
        grad = design.T @ (labels - p) - l2 * w
        curvature = np.clip(p * (1.0 - p), 1e-12, None)
        hessian = design.T @ (curvature[:, None] * design) + l2 * eye
        step = np.linalg.solve(hessian, grad)
        w = w + step
        if float(np.abs(step).max()) < tol:
            break
    return BranchClassifier(weights=w, feature_means=means, feature_scales=scales)


def classify_branch(classifier: BranchClassifier, features: BranchFeatures):
    """Return (label, probability of LAD); p >= 0.5 decides LAD."""
    design = _design_matrix(features.as_array()[None, :],
                            classifier.feature_means, classifier.feature_scales)
    p = float(_sigmoid(design @ classifier.weights)[0])
    label = TerritoryCode.LAD if p >= 0.5 else TerritoryCode.LCX
    return label, p


# Built-in training set for the default classifier: LAD rows are thick, long,
# near-straight continuations; LCx rows branch off at a wide angle.
_DEFAULT_TRAINING = [
    (BranchFeatures(6.0, 2.1, 42.0), TerritoryCode.LAD),
    (BranchFeatures(12.0, 2.0, 38.0), TerritoryCode.LAD),
    (BranchFeatures(18.0, 1.9, 35.0), TerritoryCode.LAD),
    (BranchFeatures(24.0, 2.2, 40.0), TerritoryCode.LAD),
    (BranchFeatures(15.0, 1.8, 30.0), TerritoryCode.LAD),
    (BranchFeatures(28.0, 2.0, 33.0), TerritoryCode.LAD),
    (BranchFeatures(62.0, 1.6, 22.0), TerritoryCode.LCX),
    (BranchFeatures(70.0, 1.5, 18.0), TerritoryCode.LCX),
    (BranchFeatures(78.0, 1.7, 24.0), TerritoryCode.LCX),
    (BranchFeatures(85.0, 1.4, 15.0), TerritoryCode.LCX),
    (BranchFeatures(66.0, 1.6, 20.0), TerritoryCode.LCX),
    (BranchFeatures(74.0, 1.5, 17.0), TerritoryCode.LCX),
]

_default_classifier_cache = None


def default_branch_classifier() -> BranchClassifier:
    global _default_classifier_cache
    if _default_classifier_cache is None:
        _default_classifier_cache = fit_branch_classifier(_DEFAULT_TRAINING)
    return _default_classifier_cache


def save_classifier(classifier: BranchClassifier, path) -> None:
    payload = {"weights": classifier.weights.tolist(),
               "feature_means": classifier.feature_means.tolist(),
               "feature_scales": classifier.feature_scales.tolist()}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_classifier(path) -> BranchClassifier:
    with open(path) as fh:
        payload = json.load(fh)
    return BranchClassifier(weights=np.asarray(payload["weights"], dtype=np.float64),
                            feature_means=np.asarray(payload["feature_means"], dtype=np.float64),
                            feature_scales=np.asarray(payload["feature_scales"], dtype=np.float64))


def load_training_csv(path):
    """Read samples from a CSV with header angle_deg,radius_mm,length_mm,label."""
    samples = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            samples.append((
                BranchFeatures(float(row["angle_deg"]), float(row["radius_mm"]),
                               float(row["length_mm"])),
                TerritoryCode[row["label"].strip().upper()]))
    return samples


# ---------------------------------------------------------------------------
# Tree labeling
# ---------------------------------------------------------------------------

def label_tree(graph: VesselGraph, side: str, classifier: BranchClassifier | None = None) -> VesselGraph:
    """Assign a territory to every edge.

    Right side: everything is RCA. Left side: walk from the root until the
    first junction whose children include at least two with radius >= half the
    thickest child; that trunk is LM. There the child with the highest LAD
    probability becomes LAD, the rest LCx, and descendants inherit their stem.
    """
    if graph.root_id < 0:
        raise GraphError("graph is not rooted")
    if side == "right":
        for e in graph.edges:
            e.label = TerritoryCode.RCA
        return graph
    if side != "left":
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    if classifier is None:
        classifier = default_branch_classifier()

    def label_subtree(edge: GraphEdge, code: TerritoryCode) -> None:
        edge.label = code
        for child in graph.out_edges(edge.to_node):
            label_subtree(child, code)

    node = graph.root_id
    incoming: GraphEdge | None = None
    while True:
        children = graph.out_edges(node)
        if not children:
            break
        radii = [c.mean_radius_mm for c in children]
        major = [c for c, r in zip(children, radii) if r >= 0.5 * max(radii)]
        if len(children) >= 2 and len(major) >= 2:
            # LM bifurcation: classify every child stem, exactly one takes LAD.
            probs = []
            for child in children:
                if incoming is not None:
                    feats = extract_branch_features(graph, incoming.id, child.id)
                else:
                    feats = BranchFeatures(0.0, child.mean_radius_mm,
                                           graph.subtree_length(child))
                probs.append(classify_branch(classifier, feats)[1])
            lad_index = int(np.argmax(probs))
            for k, child in enumerate(children):
                label_subtree(child, TerritoryCode.LAD if k == lad_index else TerritoryCode.LCX)
            break
        # Trunk continues through the thickest child; minor spurs before the
        # main bifurcation stay LM.
        trunk = max(children, key=lambda c: (c.mean_radius_mm, -c.id))
        trunk.label = TerritoryCode.LM
        for child in children:
            if child is not trunk:
                label_subtree(child, TerritoryCode.LM)
        incoming = trunk
        node = trunk.to_node

    # Everything on the walked trunk (and a no-junction graph) is LM.
    for e in graph.edges:
        if e.label == UNSET:
            e.label = TerritoryCode.LM
    return graph


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def graph_to_dict(graph: VesselGraph) -> dict:
    return {
        "root": graph.root_id,
        "nodes": [{"id": n.id, "position": [float(v) for v in n.position], "kind": n.kind}
                  for n in graph.nodes],
        "edges": [{"id": e.id, "from": e.from_node, "to": e.to_node,
                   "path": [[float(v) for v in p] for p in e.path],
                   "length_mm": e.length_mm, "mean_radius_mm": e.mean_radius_mm,
                   "direction_in": [float(v) for v in e.direction_in],
                   "direction_out": [float(v) for v in e.direction_out],
                   "label": TerritoryCode(e.label).name, "virtual": e.virtual}
                  for e in graph.edges],
    }


def graph_to_dot(graph: VesselGraph) -> str:
    lines = ["digraph vessels {"]
    for n in graph.nodes:
        lines.append(f'  n{n.id} [label="{n.id}:{n.kind}"];')
    for e in graph.edges:
        name = TerritoryCode(e.label).name
        lines.append(f'  n{e.from_node} -> n{e.to_node} '
                     f'[label="{name} {e.length_mm:.1f}mm"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
