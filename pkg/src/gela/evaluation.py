"""Rollouts, navigation metrics, effective-attention analysis and heatmap export."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sps

from . import difftensor as dt
from . import objectives as obj
from .errors import ContractError
from .model import N_SLOTS, STOP_SLOT, Instruction, NavModel
from .world import (
    EpisodeSpec,
    NavState,
    WorldGraph,
    candidates,
    observe,
    shortest_path,
    slot_angles,
    start_state,
    step,
)

Policy = Callable[[NavState, dict], int]


# rollouts -----------------------------------------------------------------------------------

@dataclass
class RolloutRecord:
    episode_id: str
    visited: list[int]
    actions: list[int] = field(default_factory=list)
    action_probs: list[np.ndarray] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)  # (L+1) x 37 per step
    terminal: bool = False
    truncated: bool = False
    length: float = 0.0


def run_episode(
    model: NavModel | None,
    world: WorldGraph,
    episode: EpisodeSpec,
    mode: str = "greedy",
    step_cap: int = 15,
    rng: np.random.Generator | None = None,
    policy: Policy | None = None,
) -> RolloutRecord:
    """Roll out one episode; ``policy`` (state, candidates -> slot) overrides the model's choice."""
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if model is None and policy is None:
        raise ContractError("need a model or a policy")
    if episode.path[0] not in world.positions:
        raise ContractError(f"start viewpoint {episode.path[0]} is not in the world")
    if mode == "sample" and rng is None:
        rng = np.random.default_rng(0)
    instr = Instruction.from_words(episode.tokens, model.config.max_instruction_len) if model is not None else None
    state = start_state(episode)
    rec = RolloutRecord(episode.id, [state.viewpoint])
    history = []
    while not state.terminal:
        if len(rec.actions) >= step_cap:
            rec.truncated = True
            break
        cand = candidates(world, state)
        pano = observe(world, state.viewpoint, state.heading)
        if model is not None:
            with dt.no_grad():
                out = model.forward(instr, history, pano)
                probs = model.predict_action(out.S, out.Z, list(cand)).data
            rec.action_probs.append(probs)
            if out.text_to_visual is not None:
                rec.attention.append(out.text_to_panorama())
        if policy is not None:
            action = int(policy(state, cand))
        elif mode == "greedy":
            action = int(np.argmax(probs))
        else:
            action = int(rng.choice(N_SLOTS, p=probs / probs.sum()))
        rec.actions.append(action)
        state = step(world, state, action)
        if not state.terminal:
            history.append((pano, slot_angles(action)))
        if not state.terminal:
            rec.visited.append(state.viewpoint)
    rec.terminal = state.terminal
    rec.length = state.length
    return rec


def stop_policy(state, cand) -> int:
    return STOP_SLOT


def expert_policy(world: WorldGraph, goal: int) -> Policy:
    from .world import expert_action

    return lambda state, cand: expert_action(world, state, goal)


# metrics -------------------------------------------------------------------------------------

METRIC_FIELDS = ("TL", "NE", "SR", "SPL", "GP")


@dataclass
class MetricsReport:
    rows: list[dict]
    aggregate: dict

    def to_csv(self) -> str:
        lines = ["episode_id," + ",".join(METRIC_FIELDS)]
        for r in self.rows + [{"episode_id": "mean", **self.aggregate}]:
            lines.append(r["episode_id"] + "," + ",".join(repr(float(r[k])) for k in METRIC_FIELDS))
        return "\n".join(lines) + "\n"


def episode_metrics(rec: RolloutRecord, world: WorldGraph, ep: EpisodeSpec, success_radius: float) -> dict:
    start, goal = ep.path[0], ep.path[-1]
    final = rec.visited[-1]
    tl = 0.0
    for a, b in zip(rec.visited, rec.visited[1:]):
        tl += world.edges[a][b]
    ne = world.distance(final, goal)
    sr = 1.0 if (ne <= success_radius and not rec.truncated) else 0.0
    l, _ = shortest_path(world, start, goal)
    spl = sr * l / max(tl, l) if l > 0 else sr
    remaining, _ = shortest_path(world, final, goal)
    return {"episode_id": ep.id, "TL": tl, "NE": ne, "SR": sr, "SPL": spl, "GP": l - remaining}


def compute_metrics(records: Sequence[RolloutRecord], world: WorldGraph, episodes: Sequence[EpisodeSpec], success_radius: float = 3.0) -> MetricsReport:
    by_id = {ep.id: ep for ep in episodes}
    rec_ids = [r.episode_id for r in records]
    if len(set(rec_ids)) != len(rec_ids) or set(rec_ids) != set(by_id) or len(by_id) != len(episodes):
        raise ContractError("records and episodes must match one to one")
    rows = sorted((episode_metrics(r, world, by_id[r.episode_id], success_radius) for r in records), key=lambda r: r["episode_id"])
    n = len(rows)
    aggregate = {k: (math.fsum(r[k] for r in rows) / n if n else 0.0) for k in METRIC_FIELDS}
    return MetricsReport(rows, aggregate)


def evaluate(model: NavModel, world: WorldGraph, episodes: Sequence[EpisodeSpec], step_cap: int = 15, success_radius: float = 3.0) -> tuple[MetricsReport, list[RolloutRecord]]:
    records = [run_episode(model, world, ep, "greedy", step_cap) for ep in episodes]
    return compute_metrics(records, world, episodes, success_radius), records


# teacher-forced probes -------------------------------------------------------------------------

def sap_accuracy(model: NavModel, corpus) -> float:
    """Share of teacher-forced steps where the argmax action equals the reference action."""
    hits = total = 0
    with dt.no_grad():
        for item in corpus.items:
            for t, st in enumerate(item.steps):
                out = model.forward(item.instr, item.history(t), st.pano)
                probs = model.predict_action(out.S, out.Z, st.candidates).data
                hits += int(np.argmax(probs) == st.action)
                total += 1
    return hits / total if total else 0.0


@dataclass
class GroundingReport:
    gela_loss: float
    epp_accuracy: float
    lbp_iou: float
    n_steps: int
    n_pairs: int


def grounding_metrics(model: NavModel, corpus, weights: obj.GelaWeights = obj.GelaWeights(), cosine: bool = True, chunk: int = 16) -> GroundingReport:
    """Mean per-step L_GELA, EPP argmax accuracy and LBP IoU over every grounded step."""
    epp_head = lambda x: model.head("epp", x)  # noqa: E731
    lbp_head = lambda x: model.head("lbp", x)  # noqa: E731
    jobs = [(item, t) for item in corpus.items for t in item.grounded_steps()]
    losses, hits, ious = [], [], []
    with dt.no_grad():
        for k in range(0, len(jobs), chunk):
            part = jobs[k : k + chunk]
            outs = model.forward_batch([i.instr for i, _ in part], [i.history(t) for i, t in part], [i.steps[t].pano for i, t in part])
            for (item, t), out in zip(part, outs):
                st = item.steps[t]
                pad = np.where(np.asarray(item.instr.mask) > 0, 0.0, -np.inf)
                e, l = [], []
                for p in st.pairs:
                    e.append(obj.epp_loss(out.S, p.landmark_mask, p.entity_mask, epp_head, item.instr.mask).item())
                    lv, box = obj.lbp_loss(out.Z, p.entity_mask, p.box, lbp_head, weights.lam)
                    l.append(lv.item())
                    scores = obj.epp_logits(out.S, p.landmark_mask, epp_head).data + pad
                    hits.append(p.entity_mask[int(np.argmax(scores))] > 0)
                    ious.append(obj.box_iou(box.data, p.box))
                a = obj.elsa_loss(out.Z, out.S, obj.elsa_pairs(st.pairs), weights.tau, item.instr.mask, cosine).item()
                losses.append(obj.gela_loss(float(np.mean(e)), float(np.mean(l)), a, weights))
    return GroundingReport(
        float(np.mean(losses)) if losses else 0.0,
        float(np.mean(hits)) if hits else 0.0,
        float(np.mean(ious)) if ious else 0.0,
        len(losses),
        len(hits),
    )


# effective attention ---------------------------------------------------------------------------

@dataclass
class EAReport:
    e2l: list[float]
    l2e: list[float]
    e2l_cell_mean: list[float]
    l2e_token_mean: list[float]
    skipped: int

    def means(self) -> dict:
        f = lambda xs: float(np.mean(xs)) if xs else 0.0  # noqa: E731
        return {
            "e2l": f(self.e2l),
            "l2e": f(self.l2e),
            "e2l_cell_mean": f(self.e2l_cell_mean),
            "l2e_token_mean": f(self.l2e_token_mean),
        }

    def to_dict(self) -> dict:
        return {
            "n_tokens": len(self.e2l),
            "n_cells": len(self.l2e),
            "skipped": self.skipped,
            "means": self.means(),
            "e2l": self.e2l,
            "l2e": self.l2e,
            "e2l_cell_mean": self.e2l_cell_mean,
            "l2e_token_mean": self.l2e_token_mean,
        }


def ea_scores(t2p: np.ndarray, p2t: np.ndarray, pair: obj.GroundedPair) -> tuple[list, list, list, list]:
    """EA contributions of one grounded pair.

    ``t2p`` is the (L+1) x 37 text->panorama attention, ``p2t`` the 37 x (L+1)
    panorama->text attention.  Each entity token scores the attention mass it
    puts on the landmark cells; each landmark cell the mass it puts on the
    entity tokens.
    """
    cells = np.flatnonzero(pair.landmark_mask)
    tokens = np.flatnonzero(pair.entity_mask)
    e2l = [float(t2p[j, cells].sum()) for j in tokens]
    l2e = [float(p2t[i, tokens].sum()) for i in cells]
    return e2l, l2e, [v / len(cells) for v in e2l], [v / len(tokens) for v in l2e]


def effective_attention(model: NavModel, corpus, viewpoints: Sequence[int] | None = None) -> EAReport:
    """Teacher-forced EA over every grounded (entity, viewpoint) pair of ``corpus``.

    Annotated viewpoints absent from the followed path are skipped and counted.
    """
    report = EAReport([], [], [], [], 0)
    with dt.no_grad():
        for item in corpus.items:
            on_path = set(item.spec.path)
            report.skipped += sum(1 for lb in item.spec.landmarks if lb.viewpoint not in on_path)
            for t in item.grounded_steps():
                st = item.steps[t]
                out = model.forward(item.instr, item.history(t), st.pano)
                t2p, p2t = out.text_to_panorama(), out.panorama_to_text()
                for pair in st.pairs:
                    for acc, vals in zip((report.e2l, report.l2e, report.e2l_cell_mean, report.l2e_token_mean), ea_scores(t2p, p2t, pair)):
                        acc.extend(vals)
    return report


def compare_ea(treated: Sequence[float], baseline: Sequence[float]) -> dict:
    """Welch two-sample t-test; ``p_greater`` tests mean(treated) > mean(baseline)."""
    a, b = np.asarray(treated, dtype=float), np.asarray(baseline, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ContractError("each sample needs at least two scores")
    res = sps.ttest_ind(a, b, equal_var=False)
    greater = sps.ttest_ind(a, b, equal_var=False, alternative="greater")
    return {
        "mean_treated": float(a.mean()),
        "mean_baseline": float(b.mean()),
        "n_treated": int(len(a)),
        "n_baseline": int(len(b)),
        "t": float(res.statistic),
        "p_two_sided": float(res.pvalue),
        "p_greater": float(greater.pvalue),
    }


def ea_report_json(report: EAReport, baseline: EAReport | None = None) -> str:
    payload = {"model": report.to_dict()}
    if baseline is not None:
        payload["baseline"] = baseline.to_dict()
        payload["comparison"] = {d: compare_ea(getattr(report, d), getattr(baseline, d)) for d in ("e2l", "l2e")}
    return json.dumps(payload, indent=1, sort_keys=True) + "\n"


# heatmaps ------------------------------------------------------------------------------------

def minmax_normalize(m: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant matrix maps to zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def write_pgm(path, m: np.ndarray) -> None:
    """Binary greyscale PGM of a [0, 1] matrix (1 = white)."""
    px = np.round(np.clip(m, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_attention_heatmap(record: RolloutRecord, step_index: int, prefix) -> tuple[Path, Path]:
    """Write the step's (L+1) x 37 text->panorama attention, min-max normalised, as CSV and PGM."""
    if not 0 <= step_index < len(record.attention):
        raise IndexError(f"step {step_index} not recorded (have {len(record.attention)})")
    m = minmax_normalize(record.attention[step_index])
    prefix = Path(prefix)
    csv_path = prefix.with_name(prefix.name + ".csv")
    pgm_path = prefix.with_name(prefix.name + ".pgm")
    csv_path.write_text("\n".join(",".join(f"{v:.6f}" for v in row) for row in m) + "\n")
    write_pgm(pgm_path, m)
    return csv_path, pgm_path
