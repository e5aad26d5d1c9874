"""Synthetic navigable worlds with planted landmarks and grounded episodes.

A world is a jittered grid of viewpoints joined by undirected edges.  Every
edge may carry one landmark placed near its midpoint; the landmark shows up
in the panoramas of the viewpoints nearest to it (two for objects, three for
scenes).  Episodes follow shortest paths and come with templated
instructions whose entity spans and landmark boxes are known exactly.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ActionError, ParamError, UnreachableError
from .model import HEADINGS, N_VIEWS, STOP_SLOT, Panorama, view_elevations, view_headings

CELL_W = 1.0 / HEADINGS
CELL_H = 1.0 / 3.0
CELL_AREA = CELL_W * CELL_H
CAMERA_HEIGHT = 1.5
BOX_CHANNELS = 4  # trailing view channels holding the covering landmark's box (x, y, w, h)
TWO_PI = 2.0 * math.pi


# vocabulary ---------------------------------------------------------------------------

SPECIALS = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"]
VERBS = ["go", "walk", "head", "move"]
DIRECTIONS = ["straight", "left", "right", "around"]
PREPS = ["toward", "past", "to", "by"]
CONNECTORS = ["then", "and", "stop", "at", "the"]
ADJECTIVES = ["red", "blue", "white", "black", "green", "wooden", "large", "small", "round", "tall", "grey", "brown"]
CLASS_NOUNS = {
    1: ["chair", "seat", "stool"],
    2: ["table", "desk", "counter"],
    3: ["lamp", "light", "chandelier"],
    4: ["plant", "vase", "flowerpot"],
    5: ["kitchen", "pantry", "galley"],
    6: ["bedroom", "bed", "dormitory"],
    7: ["hallway", "corridor", "passage"],
    8: ["stairs", "staircase", "steps"],
}
OBJECT_CLASSES = (1, 2, 3, 4)
SCENE_CLASSES = (5, 6, 7, 8)
VOCAB_SIZE = 256


def build_vocab() -> list[str]:
    words = SPECIALS + VERBS + DIRECTIONS + PREPS + CONNECTORS + ADJECTIVES
    for c in sorted(CLASS_NOUNS):
        words += CLASS_NOUNS[c]
    words += [f"w{i}" for i in range(VOCAB_SIZE - len(words))]
    return words


VOCAB = build_vocab()
WORD_ID = {w: i for i, w in enumerate(VOCAB)}
GENERIC_NOUNS = frozenset(n for nouns in CLASS_NOUNS.values() for n in nouns)


def category_of(class_id: int) -> str:
    return "object" if class_id in OBJECT_CLASSES else "scene"


# types -------------------------------------------------------------------------------------

@dataclass(frozen=True)
class WorldParams:
    n_viewpoints: int = 42
    n_landmarks: int = 400
    path_len: tuple[int, int] = (5, 7)
    entities_per_instruction: tuple[int, int] = (3, 5)
    noise_sigma: float = 0.1
    seed: int = 0
    n_episodes: int = 200
    view_feature_dim: int = 16
    n_classes: int = 8
    spacing: float = 4.0
    signature_gain: float = 1.5
    box_gain: float = 1.0
    val_episodes: int = 0

    def __post_init__(self):
        ints = [self.n_viewpoints, self.n_landmarks, self.n_episodes, self.view_feature_dim, self.n_classes]
        if min(ints) < 1 or self.noise_sigma <= 0 or self.spacing <= 0 or self.signature_gain <= 0 or self.box_gain <= 0:
            raise ParamError("world parameters must be positive")
        lo, hi = self.path_len
        if lo < 2 or hi < lo:
            raise ParamError(f"path_len range {self.path_len} invalid (need 2 <= lo <= hi)")
        elo, ehi = self.entities_per_instruction
        if elo < 1 or ehi < elo:
            raise ParamError(f"entities_per_instruction range {self.entities_per_instruction} invalid")
        if self.view_feature_dim <= BOX_CHANNELS:
            raise ParamError(f"view_feature_dim must exceed the {BOX_CHANNELS} box channels")
        if self.n_classes != len(CLASS_NOUNS):
            raise ParamError(f"the closed vocabulary provides {len(CLASS_NOUNS)} landmark classes")
        if not 0 <= self.val_episodes <= self.n_episodes:
            raise ParamError("val_episodes must lie in [0, n_episodes]")

    @property
    def signature_dim(self) -> int:
        return self.view_feature_dim - BOX_CHANNELS


@dataclass
class LandmarkInstance:
    id: int
    class_id: int
    adjective: str
    anchor: tuple[float, float, float]
    size: tuple[float, float]  # physical width, height in metres
    base_height: float
    signature: np.ndarray
    boxes: dict[int, tuple[float, float, float, float]] = field(default_factory=dict)

    @property
    def category(self) -> str:
        return category_of(self.class_id)


@dataclass
class WorldGraph:
    positions: dict[int, np.ndarray]
    edges: dict[int, dict[int, float]]
    landmarks: list[LandmarkInstance] = field(default_factory=list)
    params: WorldParams = field(default_factory=WorldParams)
    scan: str = "synthetic"
    edge_landmark: dict[tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        self._noise_cache: dict[int, np.ndarray] = {}
        self._visible: dict[int, list[LandmarkInstance]] = {v: [] for v in self.positions}
        for lm in self.landmarks:
            for v in lm.boxes:
                self._visible[v].append(lm)

    @property
    def viewpoints(self) -> list[int]:
        return sorted(self.positions)

    def neighbors(self, v: int) -> list[int]:
        return sorted(self.edges[v])

    def distance(self, a: int, b: int) -> float:
        return float(np.linalg.norm(self.positions[a] - self.positions[b]))

    def heading_to(self, a: int, b: int) -> float:
        d = self.positions[b] - self.positions[a]
        return math.atan2(d[0], d[1]) % TWO_PI

    def visible_landmarks(self, v: int) -> list[LandmarkInstance]:
        return self._visible[v]

    def landmark(self, lid: int) -> LandmarkInstance:
        return self.landmarks[lid]

    def noise(self, v: int) -> np.ndarray:
        """Background features of viewpoint ``v`` in the absolute (0-degree) column frame."""
        if v not in self._noise_cache:
            rng = np.random.default_rng([self.params.seed, 7919, v])
            self._noise_cache[v] = rng.normal(0.0, self.params.noise_sigma, size=(N_VIEWS, self.params.signature_dim))
        return self._noise_cache[v]

    def to_json(self) -> dict:
        p = self.params
        return {
            "version": "gela-world-1",
            "scan": self.scan,
            "params": {
                **{k: getattr(p, k) for k in p.__dataclass_fields__},
                "path_len": list(p.path_len),
                "entities_per_instruction": list(p.entities_per_instruction),
            },
            "viewpoints": [{"id": v, "position": [float(c) for c in self.positions[v]]} for v in self.viewpoints],
            "edges": [[a, b, self.edges[a][b]] for a in self.viewpoints for b in self.neighbors(a) if a < b],
            "landmarks": [
                {
                    "id": lm.id,
                    "class_id": lm.class_id,
                    "adjective": lm.adjective,
                    "category": lm.category,
                    "anchor": list(lm.anchor),
                    "size": list(lm.size),
                    "base_height": lm.base_height,
                    "signature": [float(s) for s in lm.signature],
                    "boxes": [{"viewpoint": v, "box": list(b)} for v, b in sorted(lm.boxes.items())],
                }
                for lm in self.landmarks
            ],
            "edge_landmark": [[a, b, lid] for (a, b), lid in sorted(self.edge_landmark.items())],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WorldGraph":
        raw = dict(obj["params"])
        raw["path_len"] = tuple(raw["path_len"])
        raw["entities_per_instruction"] = tuple(raw["entities_per_instruction"])
        params = WorldParams(**raw)
        positions = {int(v["id"]): np.array(v["position"], dtype=np.float64) for v in obj["viewpoints"]}
        edges: dict[int, dict[int, float]] = {v: {} for v in positions}
        for a, b, w in obj["edges"]:
            edges[int(a)][int(b)] = float(w)
            edges[int(b)][int(a)] = float(w)
        landmarks = [
            LandmarkInstance(
                id=int(l["id"]),
                class_id=int(l["class_id"]),
                adjective=l["adjective"],
                anchor=tuple(l["anchor"]),
                size=tuple(l["size"]),
                base_height=float(l["base_height"]),
                signature=np.array(l["signature"], dtype=np.float64),
                boxes={int(b["viewpoint"]): tuple(b["box"]) for b in l["boxes"]},
            )
            for l in obj["landmarks"]
        ]
        edge_landmark = {(int(a), int(b)): int(lid) for a, b, lid in obj.get("edge_landmark", [])}
        return cls(positions, edges, landmarks, params, obj.get("scan", "synthetic"), edge_landmark)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "WorldGraph":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class EntitySpec:
    label: str
    span: tuple[int, int]
    category: str
    text: str


@dataclass
class LandmarkBox:
    label: str
    viewpoint: int
    box: tuple[float, float, float, float]
    category: str
    split_group: str | None = None


@dataclass
class EpisodeSpec:
    id: str
    scan: str
    path: list[int]
    heading: float
    tokens: list[int]
    sub_instruction_spans: list[tuple[int, int]]
    entities: list[EntitySpec]
    landmarks: list[LandmarkBox]
    split: str = "train"
    trajectory_id: str | None = None

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "scan": self.scan,
            "split": self.split,
            "trajectory_id": self.trajectory_id or self.id,
            "path": list(self.path),
            "heading": self.heading,
            "instruction": {
                "tokens": list(self.tokens),
                "sub_instruction_spans": [list(s) for s in self.sub_instruction_spans],
            },
            "entities": [
                {"label": e.label, "span": list(e.span), "category": e.category, "text": e.text} for e in self.entities
            ],
            "landmarks": [],
        }
        for lb in self.landmarks:
            item = {"label": lb.label, "viewpoint": lb.viewpoint, "box": list(lb.box), "category": lb.category}
            if lb.split_group is not None:
                item["split_group"] = lb.split_group
            rec["landmarks"].append(item)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "EpisodeSpec":
        return cls(
            id=rec["id"],
            scan=rec["scan"],
            path=[int(v) for v in rec["path"]],
            heading=float(rec.get("heading", 0.0)),
            tokens=list(rec["instruction"]["tokens"]),
            sub_instruction_spans=[tuple(s) for s in rec["instruction"].get("sub_instruction_spans", [])],
            entities=[EntitySpec(e["label"], tuple(e["span"]), e["category"], e["text"]) for e in rec["entities"]],
            landmarks=[
                LandmarkBox(l["label"], int(l["viewpoint"]), tuple(l["box"]), l["category"], l.get("split_group"))
                for l in rec["landmarks"]
            ],
            split=rec.get("split", "train"),
            trajectory_id=rec.get("trajectory_id"),
        )


# geometry helpers --------------------------------------------------------------------------------

def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, TWO_PI)
    if a <= 0:
        a += TWO_PI
    return a - math.pi


def interval_overlap(a0: float, a1: float, b0: float, b1: float) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def cell_overlaps(box: Sequence[float]) -> np.ndarray:
    """Area of ``box`` (centre form, x wrapping at 1) inside each of the 36 view cells.

    Column k spans x in [(k - 0.5)/12, (k + 0.5)/12) mod 1; row r (elevation
    index) spans the vertical band for elevation -30, 0, +30 degrees with
    y = 0 at the top of the panorama.
    """
    x, y, w, h = box
    x0, x1 = x - w / 2, x + w / 2
    y0, y1 = y - h / 2, y + h / 2
    col = np.zeros(HEADINGS)
    for k in range(HEADINGS):
        c0, c1 = (k - 0.5) * CELL_W, (k + 0.5) * CELL_W
        col[k] = sum(interval_overlap(x0 + s, x1 + s, c0, c1) for s in (-1.0, 0.0, 1.0))
    row = np.zeros(3)
    for r in range(3):
        top = (2 - r) * CELL_H
        row[r] = interval_overlap(y0, y1, top, top + CELL_H)
    return np.outer(row, col).reshape(-1)


def covered_cells(box: Sequence[float], threshold: float = 0.25) -> np.ndarray:
    """Binary 36-vector of cells whose overlap reaches ``threshold`` of min(cell, box) area.

    Falls back to the single cell containing the box centre when no cell
    qualifies.
    """
    ov = cell_overlaps(box)
    area = box[2] * box[3]
    cells = (ov >= threshold * min(CELL_AREA, area) - 1e-15) & (ov > 0)
    if not cells.any():
        cells = np.zeros(N_VIEWS, dtype=bool)
        cells[center_cell(box)] = True
    return cells.astype(np.float64)


def center_cell(box: Sequence[float]) -> int:
    x, y = box[0], box[1]
    col = int(math.floor(x * HEADINGS + 0.5)) % HEADINGS
    r = 2 - min(2, int(y / CELL_H))
    return r * HEADINGS + col


def to_ego_frame(box: Sequence[float], agent_heading: float) -> tuple[float, float, float, float]:
    x, y, w, h = box
    return ((x - agent_heading / TWO_PI) % 1.0, y, w, h)


def to_centred_frame(box: Sequence[float], agent_heading: float) -> tuple[float, float, float, float]:
    """Box coordinates in a panorama centred on the agent's heading (x = 0.5 straight ahead).

    Centring on the direction of travel keeps the landmark ahead away from the
    image seam.
    """
    x, y, w, h = box
    return ((x - agent_heading / TWO_PI + 0.5) % 1.0, y, w, h)


def box_target(box: Sequence[float], agent_heading: float) -> tuple[float, float, float, float]:
    """Regression target for a 0-degree-frame box: the largest in-image piece in the centred frame."""
    pieces = split_wrapping(to_centred_frame(box, agent_heading))
    return tuple(float(c) for c in max(pieces, key=lambda p: p[2] * p[3]))


def merge_pieces(boxes: Sequence[Sequence[float]]) -> tuple[float, float, float, float]:
    """Rejoin the two pieces of a box split at the 0-degree seam (single boxes pass through)."""
    if len(boxes) == 1:
        return tuple(boxes[0])
    right = [b for b in boxes if b[0] + b[2] / 2 >= 1.0 - 1e-9]
    left = [b for b in boxes if b[0] - b[2] / 2 <= 1e-9]
    if len(boxes) != 2 or len(right) != 1 or len(left) != 1 or right[0] is left[0]:
        return tuple(max(boxes, key=lambda b: b[2] * b[3]))
    (rx, y, rw, h), (lx, _, lw, _) = right[0], left[0]
    x0 = rx - rw / 2
    w = rw + lw
    return ((x0 + w / 2) % 1.0, y, w, h)


def heading_to_slot(rel_heading: float, elevation_row: int = 1) -> int:
    col = int(math.floor(rel_heading / (TWO_PI / HEADINGS) + 0.5)) % HEADINGS
    return elevation_row * HEADINGS + col


def split_wrapping(box: Sequence[float]) -> list[tuple[float, float, float, float]]:
    """Split a centre-form box crossing x = 0 or x = 1 into in-image pieces."""
    x, y, w, h = box
    x0, x1 = x - w / 2, x + w / 2
    if x0 >= 0.0 and x1 <= 1.0:
        return [tuple(box)]
    if x1 > 1.0:
        pieces = [(x0, 1.0), (0.0, x1 - 1.0)]
    else:
        pieces = [(x0 + 1.0, 1.0), (0.0, x1)]
    return [((a + b) / 2, y, b - a, h) for a, b in pieces if b - a > 0]


# graph algorithms ------------------------------------------------------------------------------------

def shortest_path(world: WorldGraph, a: int, b: int) -> tuple[float, list[int]]:
    """Dijkstra over edge lengths; ties broken by viewpoint id."""
    if a not in world.positions or b not in world.positions:
        raise KeyError(f"unknown viewpoint in ({a}, {b})")
    dist = {a: 0.0}
    prev: dict[int, int] = {}
    heap = [(0.0, a)]
    done = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == b:
            break
        for v, w in sorted(world.edges[u].items()):
            nd = d + w
            if v not in dist or nd < dist[v]:
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    if b not in done:
        raise UnreachableError(f"viewpoint {b} unreachable from {a}")
    path = [b]
    while path[-1] != a:
        path.append(prev[path[-1]])
    return dist[b], path[::-1]


def all_pairs_geodesic(world: WorldGraph) -> dict[int, dict[int, float]]:
    return {a: {b: shortest_path(world, a, b)[0] for b in world.viewpoints} for a in world.viewpoints}


def is_connected(world: WorldGraph) -> bool:
    vs = world.viewpoints
    if not vs:
        return True
    seen = {vs[0]}
    stack = [vs[0]]
    while stack:
        u = stack.pop()
        for v in world.edges[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == len(vs)


# agent state ------------------------------------------------------------------------------------------

@dataclass
class NavState:
    viewpoint: int
    heading: float
    trajectory: list[int]
    length: float = 0.0
    terminal: bool = False


def start_state(episode: EpisodeSpec) -> NavState:
    return NavState(episode.path[0], episode.heading, [episode.path[0]])


def candidates(world: WorldGraph, state: NavState) -> dict[int, int]:
    """Map of action slot -> neighbouring viewpoint for the agent's egocentric panorama."""
    out = {}
    for v in world.neighbors(state.viewpoint):
        rel = (world.heading_to(state.viewpoint, v) - state.heading) % TWO_PI
        out[heading_to_slot(rel)] = v
    return out


def step(world: WorldGraph, state: NavState, action: int | str) -> NavState:
    if state.terminal:
        raise ActionError("episode already terminated")
    if action == "STOP" or action == STOP_SLOT:
        return NavState(state.viewpoint, state.heading, list(state.trajectory), state.length, True)
    cand = candidates(world, state)
    if action not in cand:
        raise ActionError(f"slot {action} is not navigable from viewpoint {state.viewpoint}")
    nxt = cand[action]
    return NavState(
        nxt,
        world.heading_to(state.viewpoint, nxt),
        state.trajectory + [nxt],
        state.length + world.edges[state.viewpoint][nxt],
    )


def expert_action(world: WorldGraph, state: NavState, goal: int) -> int:
    """Slot of the next viewpoint on a shortest path to ``goal`` (STOP when there)."""
    if state.viewpoint == goal:
        return STOP_SLOT
    _, path = shortest_path(world, state.viewpoint, goal)
    for slot, v in candidates(world, state).items():
        if v == path[1]:
            return slot
    raise ActionError("shortest path leaves through a non-navigable edge")


def path_action(world: WorldGraph, state: NavState, nxt: int) -> int:
    for slot, v in candidates(world, state).items():
        if v == nxt:
            return slot
    raise ActionError(f"{nxt} is not a neighbour of {state.viewpoint}")


def slot_angles(slot: int) -> tuple[float, float]:
    """Relative (heading, elevation) of an action slot; STOP has no direction and maps to (0, 0)."""
    if slot == STOP_SLOT:
        return 0.0, 0.0
    return float(view_headings()[slot]), float(view_elevations()[slot])


# observation ----------------------------------------------------------------------------------------

def observe(world: WorldGraph, viewpoint: int, agent_heading: float) -> Panorama:
    """Egocentric panorama: column 0 looks along ``agent_heading``.

    Signature channels sum every covering landmark; the box channels of a cell
    describe the landmark with the largest coverage there, as a region
    detector reports one box per region.
    """
    p = world.params
    shift = int(math.floor(agent_heading / (TWO_PI / HEADINGS) + 0.5))
    cols = (np.arange(HEADINGS) + shift) % HEADINGS
    abs_index = (np.arange(3)[:, None] * HEADINGS + cols[None, :]).reshape(-1)
    feats = np.zeros((N_VIEWS, p.view_feature_dim))
    feats[:, : p.signature_dim] = world.noise(viewpoint)[abs_index]
    best = np.zeros(N_VIEWS)
    for lm in world.visible_landmarks(viewpoint):
        cover, geo = landmark_coverage(lm.boxes[viewpoint], agent_heading)
        feats[:, : p.signature_dim] += p.signature_gain * cover[:, None] * lm.signature[None, :]
        wins = cover > best
        feats[wins, p.signature_dim :] = p.box_gain * geo[wins]
        best = np.maximum(best, cover)
    return Panorama(feats)


def landmark_coverage(box: Sequence[float], agent_heading: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell coverage in [0, 1] of a 0-degree-frame box and its box channels.

    Coverage is the overlap relative to min(cell area, box area), zero outside
    the covered-cell mask.  Every covered cell reports the landmark's
    regression target (see ``box_target``) in its box channels.
    """
    ego = to_ego_frame(box, agent_heading)
    cells = covered_cells(ego)
    cover = np.minimum(1.0, cell_overlaps(ego) / min(CELL_AREA, ego[2] * ego[3])) * cells
    geo = np.zeros((N_VIEWS, BOX_CHANNELS))
    geo[cells > 0] = box_target(box, agent_heading)
    return cover, geo


def region_targets(world: WorldGraph, viewpoint: int, agent_heading: float) -> np.ndarray:
    """Per-view class distributions (36 x C): landmark coverage, uniform where empty."""
    C = world.params.n_classes
    out = np.zeros((N_VIEWS, C))
    for lm in world.visible_landmarks(viewpoint):
        cover, _ = landmark_coverage(lm.boxes[viewpoint], agent_heading)
        out[:, lm.class_id - 1] += cover
    empty = out.sum(axis=1) == 0
    out[empty] = 1.0 / C
    return out / out.sum(axis=1, keepdims=True)


# generation -------------------------------------------------------------------------------------------

def _angles_ok(world_edges, positions, u: int, v: int, min_sep: float) -> bool:
    def heading(a, b):
        d = positions[b] - positions[a]
        return math.atan2(d[0], d[1])

    for a, b in ((u, v), (v, u)):
        h = heading(a, b)
        for n in world_edges[a]:
            if abs(wrap_angle(heading(a, n) - h)) < min_sep:
                return False
    return True


def _grid_graph(params: WorldParams, rng: np.random.Generator):
    n = params.n_viewpoints
    cols = int(math.ceil(math.sqrt(n)))
    positions = {}
    for i in range(n):
        r, c = divmod(i, cols)
        jitter = rng.uniform(-0.075, 0.075, size=2) * params.spacing
        positions[i] = np.array([c * params.spacing + jitter[0], r * params.spacing + jitter[1], 0.0])
    edges: dict[int, dict[int, float]] = {i: {} for i in range(n)}
    min_sep = math.radians(31.0)

    def connect(a, b):
        w = float(np.linalg.norm(positions[a] - positions[b]))
        edges[a][b] = w
        edges[b][a] = w

    for i in range(n):
        r, c = divmod(i, cols)
        if c + 1 < cols and i + 1 < n:
            connect(i, i + 1)
        if i + cols < n:
            connect(i, i + cols)
    diagonals = []
    for i in range(n):
        r, c = divmod(i, cols)
        for j in (i + cols + 1 if c + 1 < cols else None, i + cols - 1 if c > 0 else None):
            if j is not None and j < n:
                diagonals.append((i, j))
    for i, j in diagonals:
        if rng.random() < 0.35 and len(edges[i]) < 8 and len(edges[j]) < 8 and _angles_ok(edges, positions, i, j, min_sep):
            connect(i, j)
    return positions, edges


def _place_landmarks(params: WorldParams, positions, edges, rng):
    dim = params.signature_dim
    class_proto = rng.normal(size=(params.n_classes, dim))
    adj_proto = rng.normal(size=(len(ADJECTIVES), dim)) * 0.6
    edge_list = sorted((a, b) for a in edges for b in edges[a] if a < b)
    order = rng.permutation(len(edge_list))[: min(params.n_landmarks, len(edge_list))]
    chosen = sorted(edge_list[i] for i in order)
    landmarks: list[LandmarkInstance] = []
    edge_landmark = {}
    at_vp: dict[int, set] = {v: set() for v in positions}
    vps = sorted(positions)
    for a, b in chosen:
        pa, pb = positions[a], positions[b]
        along = pb - pa
        normal = np.array([along[1], -along[0], 0.0]) / max(np.linalg.norm(along), 1e-9)
        t = rng.uniform(0.4, 0.6)
        anchor = pa + t * along + normal * rng.uniform(-0.35, 0.35)
        class_id = int(rng.integers(1, params.n_classes + 1))
        adj = int(rng.integers(len(ADJECTIVES)))
        for _ in range(10):
            if (class_id, adj) not in at_vp[a] | at_vp[b]:
                break
            class_id = int(rng.integers(1, params.n_classes + 1))
            adj = int(rng.integers(len(ADJECTIVES)))
        scene = class_id in SCENE_CLASSES
        if scene:
            size = (float(rng.uniform(2.0, 3.2)), float(rng.uniform(2.2, 2.8)))
            base = 0.0
        else:
            size = (float(rng.uniform(0.7, 1.1)), float(rng.uniform(0.6, 1.2)))
            base = float(rng.uniform(0.3, 0.8))
        sig = class_proto[class_id - 1] + adj_proto[adj] + 0.25 * rng.normal(size=dim)
        sig = sig / np.linalg.norm(sig) * math.sqrt(dim)
        lm = LandmarkInstance(len(landmarks), class_id, ADJECTIVES[adj], tuple(float(c) for c in anchor), size, base, sig)
        seen_from = [a, b]
        if scene:
            others = sorted((v for v in vps if v not in (a, b)), key=lambda v: (np.linalg.norm(positions[v] - anchor), v))
            seen_from += others[:1]
        for v in seen_from:
            lm.boxes[v] = _box_from(positions[v], lm)
            at_vp[v].add((class_id, adj))
        landmarks.append(lm)
        edge_landmark[(a, b)] = lm.id
    return landmarks, edge_landmark


def _box_from(p: np.ndarray, lm: LandmarkInstance) -> tuple[float, float, float, float]:
    """Panorama box (0-degree frame, centre form) of landmark ``lm`` seen from position ``p``."""
    d = np.array(lm.anchor) - p
    r = max(float(np.hypot(d[0], d[1])), 0.5)
    heading = math.atan2(d[0], d[1]) % TWO_PI
    width, height = lm.size
    ang_w = 2.0 * math.atan(width / (2.0 * r))
    top = math.atan((lm.base_height + height - CAMERA_HEIGHT) / r)
    bottom = math.atan((lm.base_height - CAMERA_HEIGHT) / r)
    y_top = 0.5 - top / math.pi
    y_bot = 0.5 - bottom / math.pi
    w = min(ang_w / TWO_PI, 0.5)
    return (heading / TWO_PI, (y_top + y_bot) / 2, w, y_bot - y_top)


def _direction_word(rel: float) -> str:
    deg = math.degrees(wrap_angle(rel))
    if abs(deg) <= 25:
        return "straight"
    if abs(deg) >= 135:
        return "around"
    return "right" if deg > 0 else "left"


def _make_episode(world: WorldGraph, idx: int, path: list[int], heading: float, rng) -> EpisodeSpec | None:
    params = world.params
    moves = len(path) - 1
    lo, hi = params.entities_per_instruction
    n_ent = min(int(rng.integers(lo, hi + 1)), moves)
    mention = set(rng.choice(moves, size=n_ent, replace=False).tolist())
    words = [VERBS[int(rng.integers(len(VERBS)))]]
    subs = []
    entities: list[EntitySpec] = []
    boxes: list[LandmarkBox] = []
    texts: dict[str, str] = {}
    h = heading
    on_path = set(path)
    for k in range(moves):
        u, v = path[k], path[k + 1]
        start = len(words) if k else 0
        hdg = world.heading_to(u, v)
        words.append(_direction_word(hdg - h))
        lid = world.edge_landmark.get((min(u, v), max(u, v)))
        if k in mention and lid is not None:
            lm = world.landmark(lid)
            nouns = list(CLASS_NOUNS[lm.class_id])
            rng.shuffle(nouns)
            label = f"L{lid}"
            text = None
            for noun in nouns:
                cand = f"{lm.adjective} {noun}"
                if texts.get(cand, label) == label:
                    text = cand
                    break
            if text is not None:
                words.append(PREPS[int(rng.integers(2))])
                span = (len(words), len(words) + 2)
                words.extend(text.split())
                texts[text] = label
                entities.append(EntitySpec(label, span, lm.category, text))
                for vp, box in sorted(lm.boxes.items()):
                    if vp not in on_path:
                        continue
                    pieces = split_wrapping(box)
                    group = f"{label}@{vp}" if len(pieces) > 1 else None
                    boxes.extend(LandmarkBox(label, vp, piece, lm.category, group) for piece in pieces)
            else:
                words.append("then")
        else:
            words.append("then")
        if k == moves - 1:
            words.append("stop")
        subs.append((start, len(words)))
        h = hdg
    if not entities:
        return None
    return EpisodeSpec(
        id=f"ep{idx:05d}",
        scan=world.scan,
        path=list(path),
        heading=heading,
        tokens=[WORD_ID[w] for w in words],
        sub_instruction_spans=subs,
        entities=entities,
        landmarks=boxes,
    )


def build_world(params: WorldParams) -> WorldGraph:
    rng = np.random.default_rng([params.seed, 1])
    positions, edges = _grid_graph(params, rng)
    landmarks, edge_landmark = _place_landmarks(params, positions, edges, rng)
    return WorldGraph(positions, edges, landmarks, params, f"synth{params.seed:04d}", edge_landmark)


def generate_world(params: WorldParams | None = None) -> tuple[WorldGraph, list[EpisodeSpec]]:
    params = params or WorldParams()
    lo, hi = params.path_len
    if params.n_viewpoints < lo:
        raise ParamError(f"{params.n_viewpoints} viewpoints cannot host paths of {lo} viewpoints")
    world = build_world(params)
    rng = np.random.default_rng([params.seed, 2])
    pairs_by_len: dict[int, list[tuple[int, int, list[int]]]] = {}
    vps = world.viewpoints
    for a in vps:
        for b in vps:
            if a != b:
                _, p = shortest_path(world, a, b)
                if lo <= len(p) <= hi:
                    pairs_by_len.setdefault(len(p), []).append((a, b, p))
    lengths = [n for n in range(lo, hi + 1) if pairs_by_len.get(n)]
    if not lengths:
        raise ParamError(f"no shortest path with {lo}..{hi} viewpoints exists in a {params.n_viewpoints}-viewpoint world")
    episodes: list[EpisodeSpec] = []
    attempts = 0
    while len(episodes) < params.n_episodes:
        attempts += 1
        if attempts > 50 * params.n_episodes:
            raise ParamError("could not generate enough grounded episodes")
        n = lengths[int(rng.integers(len(lengths)))]
        a, b, path = pairs_by_len[n][int(rng.integers(len(pairs_by_len[n])))]
        heading = float(rng.integers(HEADINGS)) * TWO_PI / HEADINGS
        ep = _make_episode(world, len(episodes), path, heading, rng)
        if ep is not None:
            episodes.append(ep)
    for ep in episodes[len(episodes) - params.val_episodes:] if params.val_episodes else []:
        ep.split = "val_seen"
    return world, episodes


def random_world(n_nodes: int, seed: int, extent: float = 10.0, extra_edge_prob: float = 0.3) -> WorldGraph:
    """Small connected random graph without landmarks (used for metric oracles)."""
    rng = np.random.default_rng(seed)
    positions = {i: np.array([*rng.uniform(0, extent, size=2), 0.0]) for i in range(n_nodes)}
    edges: dict[int, dict[int, float]] = {i: {} for i in range(n_nodes)}

    def connect(a, b):
        w = float(np.linalg.norm(positions[a] - positions[b]))
        edges[a][b] = w
        edges[b][a] = w

    order = rng.permutation(n_nodes).tolist()
    for k in range(1, n_nodes):
        connect(order[k], order[int(rng.integers(k))])
    for a in range(n_nodes):
        for b in range(a + 1, n_nodes):
            if b not in edges[a] and rng.random() < extra_edge_prob and len(edges[a]) < 8 and len(edges[b]) < 8:
                connect(a, b)
    return WorldGraph(positions, edges, [], WorldParams(n_viewpoints=n_nodes, seed=seed), f"rand{seed}")
