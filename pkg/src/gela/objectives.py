"""Training objectives: the three grounding losses and the five proxy losses.

Grounding losses operate on encoder outputs plus masks built from the
annotations:

* entity phrase prediction (EPP): pooled landmark patches -> distribution over
  token positions, supervised by the uniform distribution on the entity span;
* landmark box prediction (LBP): pooled entity tokens -> sigmoid box,
  SmoothL1 + lambda * (1 - GIoU);
* entity-landmark semantic alignment (ELSA): symmetric contrastive loss over
  patch/token dot products at temperature tau.

Proxy losses: masked language modelling, masked region classification,
instruction-trajectory matching, single-step action prediction and spatial
relation prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import difftensor as dt
from .difftensor import Tensor
from .errors import BoxError, ContractError, DataError, LengthError, MaskError, ShuffleError, SkipSignal
from .model import MASK_ID, MASK_NEG, N_SLOTS, N_VIEWS, STOP_SLOT, CLS_ID, PAD_ID, Instruction, NavModel, Panorama
from .world import EpisodeSpec, box_target, covered_cells, merge_pieces, to_ego_frame, wrap_angle

Head = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class GelaWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    lam: float = 1.0
    tau: float = 0.07

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.lam, self.tau) <= 0:
            raise ValueError("all GELA weights must be > 0")


@dataclass
class GroundedPair:
    """One (entity mention, viewpoint) supervision triple."""

    label: str
    viewpoint: int
    entity_mask: np.ndarray  # length L+1, classification slot 0
    landmark_mask: np.ndarray  # length 37, stop slot 0
    box: tuple[float, float, float, float]  # heading-centred panorama frame, centre form
    span: tuple[int, int]  # rows of Z

    def positive_pairs(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i in np.flatnonzero(self.landmark_mask) for j in np.flatnonzero(self.entity_mask)]


# masks --------------------------------------------------------------------------------

def check_entity_mask(m_z) -> np.ndarray:
    m = np.asarray(m_z, dtype=np.float64)
    if m.ndim != 1 or not np.isin(m, (0.0, 1.0)).all():
        raise MaskError("entity mask must be a binary vector")
    if m[0] != 0:
        raise MaskError("entity mask must not select the classification slot")
    if m[1:].sum() < 1:
        raise MaskError("entity mask selects no token")
    return m


def check_landmark_mask(m_s) -> np.ndarray:
    m = np.asarray(m_s, dtype=np.float64)
    if m.shape != (N_SLOTS,) or not np.isin(m, (0.0, 1.0)).all():
        raise MaskError(f"landmark mask must be a binary vector of length {N_SLOTS}")
    if m[STOP_SLOT] != 0:
        raise MaskError("landmark mask must not select the stop slot")
    if m[:N_VIEWS].sum() < 1:
        raise MaskError("landmark mask selects no view")
    return m


def entity_target(m_z) -> np.ndarray:
    m = check_entity_mask(m_z)
    return m / m.sum()


def build_masks(
    episode: EpisodeSpec,
    viewpoint: int,
    agent_heading: float,
    text_len: int,
    threshold: float = 0.25,
) -> list[GroundedPair]:
    """Grounded (entity, landmark) supervision available at ``viewpoint``.

    The landmark mask lives in the agent's egocentric cell grid (column 0 =
    heading).  The box target is expressed in the panorama centred on the
    heading; pieces of a wrap-split annotation are rejoined first.
    """
    by_label: dict[str, list[tuple[float, float, float, float]]] = {}
    for lb in episode.landmarks:
        if lb.viewpoint == viewpoint:
            by_label.setdefault(lb.label, []).append(lb.box)
    out = []
    for ent in episode.entities:
        boxes = by_label.get(ent.label)
        if not boxes:
            continue
        s, e = ent.span
        if e + 1 > text_len:
            raise LengthError(f"entity span {ent.span} does not fit {text_len} text slots")
        m_z = np.zeros(text_len)
        m_z[s + 1 : e + 1] = 1.0
        box = merge_pieces(boxes)
        m_s = np.zeros(N_SLOTS)
        m_s[:N_VIEWS] = covered_cells(to_ego_frame(box, agent_heading), threshold)
        out.append(GroundedPair(ent.label, viewpoint, m_z, m_s, box_target(box, agent_heading), (s + 1, e + 1)))
    return out


def elsa_pairs(pairs: Iterable[GroundedPair]) -> list[tuple[int, int]]:
    return sorted({pp for p in pairs for pp in p.positive_pairs()})


# grounding losses -----------------------------------------------------------------------

def _token_additive(token_mask, n: int) -> np.ndarray | None:
    if token_mask is None:
        return None
    m = np.asarray(token_mask)
    if m.shape != (n,):
        raise MaskError(f"token mask length {m.shape} != {n}")
    return None if m.all() else np.where(m > 0, 0.0, MASK_NEG)


def epp_logits(S: Tensor, m_s, head: Head) -> Tensor:
    pooled = dt.masked_mean(S, check_landmark_mask(m_s))
    return head(pooled)


def epp_loss(S: Tensor, m_s, m_z, head: Head, token_mask=None) -> Tensor:
    """Soft-target cross entropy between predicted token positions and the entity span."""
    target = entity_target(m_z)
    scores = epp_logits(S, m_s, head)
    if scores.shape != target.shape:
        raise MaskError(f"head emits {scores.shape} positions, entity mask has {target.shape}")
    additive = _token_additive(token_mask, target.shape[0])
    if additive is not None:
        scores = scores + additive
    return -dt.sum(dt.log_softmax(scores) * target)


def box_corners(box):
    x, y, w, h = box
    return x - w / 2, y - h / 2, x + w / 2, y + h / 2


def smooth_l1(pred: Tensor, target) -> Tensor:
    """SmoothL1 with transition point 1, summed over coordinates."""
    t = np.asarray(target, dtype=np.float64)
    d = pred - t
    quad = np.abs(d.data) < 1.0
    return dt.sum(dt.scale(d * d, 0.5) * quad.astype(float) + (dt.abs(d) - 0.5) * (~quad).astype(float))


def giou(pred: Tensor, target) -> Tensor:
    """Generalised IoU of two centre-form boxes (differentiable in ``pred``)."""
    t = np.asarray(target, dtype=np.float64)
    t0 = t[:2] - t[2:] / 2
    t1 = t[:2] + t[2:] / 2
    half = dt.scale(pred[2:], 0.5)
    p0 = pred[:2] - half
    p1 = pred[:2] + half
    wh = dt.relu(dt.minimum(p1, t1) - dt.maximum(p0, t0))
    inter = wh[0] * wh[1]
    area_p = pred[2] * pred[3]
    union = area_p + float(t[2] * t[3]) - inter
    hull_wh = dt.maximum(p1, t1) - dt.minimum(p0, t0)
    hull = hull_wh[0] * hull_wh[1]
    return inter / union - (hull - union) / hull


def giou_value(a, b) -> float:
    return giou(Tensor(a), b).item()


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = box_corners(a)
    bx0, by0, bx1, by1 = box_corners(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union


def lbp_predict(Z: Tensor, m_z, head: Head) -> Tensor:
    return dt.sigmoid(head(dt.masked_mean(Z, check_entity_mask(m_z))))


def lbp_loss(Z: Tensor, m_z, target, head: Head, lam: float = 1.0) -> tuple[Tensor, Tensor]:
    t = np.asarray(target, dtype=np.float64)
    if t.shape != (4,) or t[2] <= 0 or t[3] <= 0:
        raise BoxError(f"degenerate target box {tuple(t)}")
    pred = lbp_predict(Z, m_z, head)
    loss = smooth_l1(pred, t) + dt.scale(1.0 - giou(pred, t), lam)
    return loss, pred


def elsa_loss(Z: Tensor, S: Tensor, positive_pairs: Iterable[tuple[int, int]], tau: float = 0.07, token_mask=None, cosine: bool = False) -> Tensor:
    """Mean of the patch->token and token->patch contrastive losses.

    Each direction sums over the annotated anchors and averages over that
    anchor's positives.  ``positive_pairs`` holds (patch index, token index).
    Similarities are raw dot products over ``tau``; with ``cosine`` the rows
    of ``Z`` and ``S`` are L2-normalised first, which bounds the logits by
    ``1/tau`` and keeps the term from swamping the other losses early on.
    """
    if tau <= 0:
        raise ContractError("temperature must be positive")
    pairs = sorted(set((int(i), int(j)) for i, j in positive_pairs))
    if not pairs:
        raise MaskError("no positive patch/token pair")
    n_tok, n_patch = Z.shape[0], S.shape[0]
    for i, j in pairs:
        if not (0 <= i < n_patch and 0 <= j < n_tok):
            raise MaskError(f"pair ({i}, {j}) out of range")
        if i == STOP_SLOT or j == 0:
            raise MaskError("classification and stop slots cannot be positives")
    pos = np.zeros((n_patch, n_tok))
    for i, j in pairs:
        pos[i, j] = 1.0
    w_s = pos / np.maximum(pos.sum(axis=1, keepdims=True), 1.0)
    w_z = pos.T / np.maximum(pos.T.sum(axis=1, keepdims=True), 1.0)
    if cosine:
        S, Z = dt.l2_normalize(S), dt.l2_normalize(Z)
    sim = dt.scale(S @ dt.transpose(Z), 1.0 / tau)
    additive = _token_additive(token_mask, n_tok)
    sim_s = sim if additive is None else sim + additive
    l_s = -dt.sum(dt.log_softmax(sim_s) * w_s)
    l_z = -dt.sum(dt.log_softmax(dt.transpose(sim)) * w_z)
    return dt.scale(l_s + l_z, 0.5)


def gela_loss(epp, lbp, elsa, weights: GelaWeights = GelaWeights()):
    return weights.alpha * epp + weights.beta * lbp + weights.gamma * elsa


# proxy losses -----------------------------------------------------------------------------

def mask_tokens(instr: Instruction, rng: np.random.Generator, rate: float = 0.15) -> tuple[Instruction, list[int], list[int]]:
    """Replace each real word with ``[MASK]`` with probability ``rate`` (at least one)."""
    maskable = [i for i, (t, m) in enumerate(zip(instr.tokens, instr.mask)) if m and t not in (CLS_ID, PAD_ID)]
    if not maskable:
        raise SkipSignal("instruction has no maskable token")
    draws = rng.random(len(maskable))
    chosen = [i for i, r in zip(maskable, draws) if r < rate]
    if not chosen:
        chosen = [maskable[int(rng.integers(len(maskable)))]]
    tokens = list(instr.tokens)
    originals = [tokens[i] for i in chosen]
    for i in chosen:
        tokens[i] = MASK_ID
    return instr.with_tokens(tokens), chosen, originals


def nll_of(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits``."""
    logp = dt.log_softmax(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(targets)), list(targets)] = 1.0
    return dt.scale(-dt.sum(logp * onehot), 1.0 / len(targets))


def mlm_loss(model: NavModel, masked: Instruction, positions: Sequence[int], originals: Sequence[int], history, pano) -> Tensor:
    if not positions:
        raise SkipSignal("no masked position")
    return mlm_from_outputs(model, model.forward(masked, history, pano), positions, originals)


def mlm_from_outputs(model: NavModel, out, positions: Sequence[int], originals: Sequence[int]) -> Tensor:
    logits = model.head("mlm", out.Z[np.asarray(positions)])
    return nll_of(logits, originals)


def zero_views(pano: Panorama, rng: np.random.Generator, rate: float = 0.15) -> tuple[Panorama, list[int]]:
    draws = rng.random(N_VIEWS)
    idx = np.flatnonzero(draws < rate).tolist()
    if not idx:
        idx = [int(rng.integers(N_VIEWS))]
    feats = pano.features.copy()
    feats[idx] = 0.0
    return Panorama(feats, pano.headings, pano.elevations), idx


def check_distributions(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if (P < 0).any() or not np.allclose(P.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
        raise ContractError("target rows must be probability vectors")
    return P


def kl_divergence(P, logq: Tensor) -> Tensor:
    """Mean over rows of KL(P || Q) given log Q; 0 log 0 = 0."""
    P = check_distributions(P)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0)), 0.0)
    rows = P.shape[0] if P.ndim == 2 else 1
    return dt.scale(float(plogp.sum()) - dt.sum(logq * P), 1.0 / rows)


def mrc_loss(model: NavModel, instr: Instruction, history, zeroed: Panorama, indices: Sequence[int], targets) -> Tensor:
    targets = check_distributions(targets)
    if not len(indices):
        raise SkipSignal("no zeroed view")
    return mrc_from_outputs(model, model.forward(instr, history, zeroed), indices, targets)


def mrc_from_outputs(model: NavModel, out, indices: Sequence[int], targets) -> Tensor:
    targets = check_distributions(targets)
    logq = dt.log_softmax(model.head("mrc", out.S[np.asarray(indices)]))
    return kl_divergence(targets[np.asarray(indices)], logq)


def itm_nce(scores: Tensor) -> Tensor:
    """-log softmax(scores)[0]; the positive score comes first."""
    return -dt.log_softmax(scores)[0]


def shuffle_trajectory(steps: Sequence, rng: np.random.Generator, tries: int = 10) -> list:
    n = len(steps)
    for _ in range(tries):
        perm = rng.permutation(n)
        if (perm != np.arange(n)).any():
            return [steps[i] for i in perm]
    raise ShuffleError(f"could not reorder a {n}-step trajectory in {tries} tries")


def itm_negatives(positive: Sequence, others: Sequence[Sequence], rng: np.random.Generator) -> list[list]:
    """Two trajectories borrowed from other batch items plus two temporal shuffles."""
    if len(others) < 2:
        raise ContractError("ITM needs at least two other trajectories in the batch")
    if len(positive) < 2:
        raise ShuffleError("positive trajectory is too short to reorder")
    picks = rng.choice(len(others), size=2, replace=False)
    return [list(others[int(k)]) for k in picks] + [shuffle_trajectory(positive, rng) for _ in range(2)]


def _trajectory_inputs(traj: Sequence):
    """A trajectory is a list of (Panorama, action angles); the last panorama is the observation."""
    return list(traj[:-1]), traj[-1][0]


def itm_inputs(positive: Sequence, others: Sequence[Sequence], rng: np.random.Generator) -> list[tuple]:
    """(history, observation) for the positive trajectory followed by its four negatives."""
    return [_trajectory_inputs(t) for t in [list(positive)] + itm_negatives(positive, others, rng)]


def itm_from_outputs(model: NavModel, outs: Sequence) -> Tensor:
    return itm_nce(dt.concat([model.itm_score(o) for o in outs]))


def itm_loss(model: NavModel, instr: Instruction, positive: Sequence, others: Sequence[Sequence], rng: np.random.Generator) -> Tensor:
    inputs = itm_inputs(positive, others, rng)
    outs = model.forward_batch([instr] * len(inputs), [h for h, _ in inputs], [p for _, p in inputs])
    return itm_from_outputs(model, outs)


def sap_loss(log_probs: Tensor, expert: int, candidates: Iterable[int]) -> Tensor:
    allowed = set(int(c) for c in candidates) | {STOP_SLOT}
    if int(expert) not in allowed:
        raise DataError(f"expert slot {expert} is not a candidate {sorted(allowed)}")
    return -log_probs[int(expert)]


def relative_angles(pano: Panorama, i: int, j: int) -> tuple[float, float]:
    return wrap_angle(pano.headings[j] - pano.headings[i]), float(pano.elevations[j] - pano.elevations[i])


def sprel_loss(pred: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=np.float64)
    d = pred - t
    return dt.sum(d * d)


def sprel_dropout(pano: Panorama, views: Sequence[int], rng: np.random.Generator, rate: float = 0.3) -> Panorama:
    """With probability ``rate`` zero either the visual or the angle input of each chosen view."""
    feats = pano.features.copy()
    heads = pano.headings.copy()
    elevs = pano.elevations.copy()
    drop_angle = np.zeros(N_VIEWS, dtype=bool)
    for v in views:
        if rng.random() < rate:
            if rng.random() < 0.5:
                feats[v] = 0.0
            else:
                drop_angle[v] = True
    return Panorama(feats, heads, elevs, drop_angle)


def sprel_prepare(pano: Panorama, rng: np.random.Generator, rate: float = 0.3) -> tuple[Panorama, int, int, tuple[float, float]]:
    """Pick two distinct views, record their true relative angles, then corrupt their inputs."""
    i, j = (int(v) for v in rng.choice(N_VIEWS, size=2, replace=False))
    target = relative_angles(pano, i, j)
    return sprel_dropout(pano, (i, j), rng, rate), i, j, target


def sprel_from_outputs(model: NavModel, out, i: int, j: int, target) -> Tensor:
    pred = model.head("sprel", dt.concat([out.S[i], out.S[j]]))
    return sprel_loss(pred, target)


def sprel_example(model: NavModel, instr: Instruction, history, pano: Panorama, rng: np.random.Generator, rate: float = 0.3) -> Tensor:
    dropped, i, j, target = sprel_prepare(pano, rng, rate)
    return sprel_from_outputs(model, model.forward(instr, history, dropped), i, j, target)
