"""Acceptance criteria: one printed PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -s`` to see the summary lines.  The two
training criteria take several CPU minutes each.
"""

import math
import time

import numpy as np
import pytest

from gela import evaluation as ev
from gela import experiments, geldata, gradsuite
from gela import objectives as obj
from gela import world as W
from gela.cli import main
from gela.difftensor import Tensor
from gela.model import N_SLOTS, STOP_SLOT, Instruction, ModelConfig, NavModel, Panorama


def report(name: str, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})")


def test_gradient_suite():
    t0 = time.perf_counter()
    results = gradsuite.run_suite(seeds=range(20), tol=1e-4)
    seconds = time.perf_counter() - t0
    failed = {n: sum(not r.passed for r in rs) for n, rs in results.items() if any(not r.passed for r in rs)}
    worst = max(r.max_rel_error for rs in results.values() for r in rs)
    ok = not failed and seconds < 120 and sorted(results) == sorted(gradsuite.OBJECTIVES)
    report("gradient-suite", ok, f"8 objectives x 20 seeds, worst rel err {worst:.2e}, {seconds:.1f}s, failures {failed}")
    assert ok


def _uniform_model(*heads):
    model = NavModel(ModelConfig())
    for name in heads:
        for k in (f"{name}.w", f"{name}.b"):
            model.params[k].data[...] = 0.0
    return model


def test_closed_form_values():
    rng = np.random.default_rng(0)
    pano = Panorama(rng.normal(size=(36, 16)))
    instr = Instruction.from_words([10, 20, 30, 40, 50], 24)
    values = {}

    S = Tensor(rng.normal(size=(N_SLOTS, 8)))
    m_s = np.zeros(N_SLOTS)
    m_s[[4, 5]] = 1
    m_z = np.zeros(10)
    m_z[[3, 4]] = 1
    values["EPP ln10"] = (obj.epp_loss(S, m_s, m_z, lambda x: Tensor(np.zeros(10)) + 0.0 * x[0]).item(), math.log(10))

    m = _uniform_model("head.itm")
    positive = [(Panorama(rng.normal(size=(36, 16))), (0.5 * k, 0.0)) for k in range(3)]
    others = [[(Panorama(rng.normal(size=(36, 16))), (0.0, 0.0)) for _ in range(2)] for _ in range(2)]
    values["ITM ln5"] = (obj.itm_loss(m, instr, positive, others, np.random.default_rng(1)).item(), math.log(5))

    m = _uniform_model("head.mlm.2")
    masked, pos, orig = obj.mask_tokens(instr, np.random.default_rng(2))
    values["MLM ln256"] = (obj.mlm_loss(m, masked, pos, orig, [], pano).item(), math.log(256))

    m = _uniform_model("head.sap.2")
    out = m.forward(instr, [], pano)
    for n in (1, 3, 6):
        cand = sorted(rng.choice(36, size=n, replace=False).tolist())
        logp = m.action_log_probs(out.S, out.Z, cand)
        values[f"SAP ln{n + 1}"] = (obj.sap_loss(logp, STOP_SLOT, cand).item(), math.log(n + 1))

    errors = {k: abs(v - ref) for k, (v, ref) in values.items()}
    corner = 1.0 - obj.giou_value((0.95, 0.95, 0.1, 0.1), (0.05, 0.05, 0.1, 0.1))
    same = obj.lbp_loss(Tensor(np.zeros((3, 4))), np.array([0, 1, 0.0]), (0.3, 0.4, 0.2, 0.1), lambda x: Tensor(np.log(np.array([0.3, 0.4, 0.2, 0.1]) / (1 - np.array([0.3, 0.4, 0.2, 0.1])))) + 0.0 * x[0])[0].item()
    ok = max(errors.values()) <= 1e-9 and abs(corner - 1.98) <= 1e-12 and abs(same) <= 1e-12
    report("closed-forms", ok, f"max |ln N error| {max(errors.values()):.1e}, 1-GIoU corner {corner!r}, identical-box loss {same!r}")
    assert ok


def _enumerated_geodesic(world, a, b):
    best, stack = math.inf, [(a, (a,), 0.0)]
    while stack:
        u, path, d = stack.pop()
        if u == b:
            best = min(best, d)
            continue
        for v in world.neighbors(u):
            if v not in path:
                stack.append((v, path + (v,), d + world.edges[u][v]))
    return best


def test_metric_oracle():
    mismatches, n_rows = 0, 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        n = int(rng.integers(2, 11))
        world = W.random_world(n, seed)
        recs, eps, want = [], [], {}
        for k in range(5):
            start, goal = (int(v) for v in rng.choice(n, size=2, replace=False))
            visited = [start]
            for _ in range(int(rng.integers(0, 6))):
                visited.append(int(rng.choice(world.neighbors(visited[-1]))))
            truncated = bool(rng.random() < 0.2)
            eid = f"e{k}"
            eps.append(W.EpisodeSpec(eid, "s", [start, goal], 0.0, [4], [], [], []))
            recs.append(ev.RolloutRecord(eid, visited, truncated=truncated, terminal=not truncated))
            tl = 0.0
            for a, b in zip(visited, visited[1:]):
                tl += world.edges[a][b]
            ne = float(np.linalg.norm(world.positions[visited[-1]] - world.positions[goal]))
            sr = float(ne <= 3.0 and not truncated)
            geo = _enumerated_geodesic(world, start, goal)
            want[eid] = (tl, ne, sr, sr * geo / max(tl, geo))
        for row in ev.compute_metrics(recs, world, eps, 3.0).rows:
            tl, ne, sr, spl = want[row["episode_id"]]
            n_rows += 1
            if row["SR"] != sr or row["SPL"] != spl or abs(row["NE"] - ne) > 1e-9 or abs(row["TL"] - tl) > 1e-9:
                mismatches += 1
    ok = mismatches == 0
    report("metric-oracle", ok, f"{n_rows} episodes on 50 random worlds, {mismatches} mismatches")
    assert ok


def test_validator_mutation():
    _, eps = W.generate_world(W.WorldParams(n_episodes=20, seed=11))
    records = [e.to_record() for e in eps]
    clean = geldata.validate(geldata.AnnotationFile(records))

    def alignment(ep):
        ep["landmarks"] = [l for l in ep["landmarks"] if l["label"] != ep["entities"][0]["label"]]

    def unique(ep):
        extra = dict(next(l for l in ep["landmarks"] if "split_group" not in l))
        extra["box"] = [0.5, 0.5, 0.05, 0.05]
        ep["landmarks"].append(extra)

    def coref(ep):
        ep["entities"][1]["text"] = ep["entities"][0]["text"].upper()

    def structural(ep):
        ep["landmarks"][0]["box"] = [0.5, 0.5, 1.5, 0.1]

    planted = {}
    for k, (rule, mutate) in enumerate([("Alignment", alignment), ("UniqueLandmark", unique), ("TextCoreference", coref), ("Structural", structural)]):
        target = records[2 * k + 1]
        mutate(target)
        planted[target["id"]] = rule
    found = geldata.hard_violations(geldata.validate(geldata.AnnotationFile(records)))
    got = sorted((v.episode, v.rule) for v in found)
    ok = clean == [] and got == sorted(planted.items())
    report("validator-mutation", ok, f"planted {sorted(planted.values())}, detected {[r for _, r in got]}")
    assert ok


def test_overfit_sanity():
    res = experiments.overfit(seed=0, n_episodes=50)
    ok = res.loss_ratio < 0.3 and res.final.epp_accuracy >= 0.9 and res.final.lbp_iou >= 0.75 and res.seconds <= 600
    report(
        "overfit",
        ok,
        f"L_GELA {res.initial.gela_loss:.3f} -> {res.final.gela_loss:.3f} (ratio {res.loss_ratio:.3f}), "
        f"EPP acc {res.final.epp_accuracy:.3f}, LBP IoU {res.final.lbp_iou:.3f}, {res.seconds:.0f}s",
    )
    assert ok


def test_directional_grounding_gain():
    res = experiments.directional(seed=0)
    cmp = res.comparison
    ok = (
        res.sap_gela >= res.sap_baseline
        and cmp["mean_treated"] > cmp["mean_baseline"]
        and cmp["p_greater"] < 0.05
        and cmp["n_treated"] >= 200
        and res.seconds <= 1200
    )
    report(
        "directional-grounding",
        ok,
        f"held-out SAP gela {res.sap_gela:.3f} vs baseline {res.sap_baseline:.3f}; "
        f"EA {cmp['mean_treated']:.4f} vs {cmp['mean_baseline']:.4f}, t {cmp['t']:.2f}, p {cmp['p_greater']:.2e}, "
        f"n {cmp['n_treated']}; {res.seconds:.0f}s",
    )
    assert ok


def _cli_outputs(root):
    root.mkdir()
    w, d = str(root / "world.json"), str(root / "episodes.json")
    (root / "t.cfg").write_text("batch_size=2\nsnapshot_every=2\nft_batch_size=2\n")
    steps = [
        ["gen-world", "--seed", "5", "--episodes", "6", "--viewpoints", "20", "--out", str(root)],
        ["stats", d, "--out", str(root)],
        ["pretrain", "--world", w, "--data", d, "--seed", "2", "--config", str(root / "t.cfg"), "--iterations", "4", "--out", str(root / "p")],
        ["finetune", "--world", w, "--data", d, "--seed", "2", "--config", str(root / "t.cfg"), "--iterations", "2", "--ckpt", str(root / "p" / "model.ckpt"), "--out", str(root / "f")],
        ["eval", "--world", w, "--data", d, "--ckpt", str(root / "f" / "policy.ckpt"), "--step-cap", "4", "--out", str(root / "e")],
        ["ea-report", "--world", w, "--data", d, "--ckpt", str(root / "f" / "policy.ckpt"), "--out", str(root / "a")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.suffix in (".csv", ".json")}


def test_determinism(tmp_path):
    a, b = _cli_outputs(tmp_path / "a"), _cli_outputs(tmp_path / "b")
    differing = [k for k in a if a[k] != b.get(k)]
    ok = set(a) == set(b) and not differing and len(a) >= 8
    report("determinism", ok, f"{len(a)} CSV/JSON files compared, differing {differing}")
    assert ok


def test_corpus_ratio_shape():
    _, eps = W.generate_world(W.WorldParams())
    row = geldata.stats(geldata.from_episode_specs(eps))[-1]
    p_i, b_i = float(row.p_per_i), float(row.b_per_i)
    ok = abs(p_i - 4.0) <= 0.8 and abs(b_i - 8.5) <= 1.7
    report("corpus-ratio-shape", ok, f"P/I {row.row()['P/I']}, B/I {row.row()['B/I']} over {row.instructions} instructions")
    assert ok
