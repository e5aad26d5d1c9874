import json
import math
from fractions import Fraction

import numpy as np
import pytest

from gela import evaluation as ev
from gela import objectives as obj
from gela import world as W
from gela.errors import ContractError
from gela.model import N_SLOTS, STOP_SLOT, ModelConfig, NavModel
from gela.trainer import Corpus

SMALL_CFG = ModelConfig(d_model=16, n_heads=2, ffn_hidden=24, n_layers_text=1, n_layers_cross=1, max_instruction_len=24)


def _episode(eid, start, goal):
    return W.EpisodeSpec(eid, "s", [start, goal], 0.0, [4], [], [], [])


# brute-force oracle ---------------------------------------------------------------------------

def _enumerated_geodesic(world, a, b):
    """Shortest length over every simple path, each summed in path order."""
    best = math.inf
    stack = [(a, (a,), 0.0)]
    while stack:
        u, path, d = stack.pop()
        if u == b:
            best = min(best, d)
            continue
        for v in world.neighbors(u):
            if v not in path:
                stack.append((v, path + (v,), d + world.edges[u][v]))
    return best


def _enumerated_optimal_path(world, a, b):
    best, best_path = math.inf, None
    stack = [(a, (a,), 0.0)]
    while stack:
        u, path, d = stack.pop()
        if u == b:
            if d < best:
                best, best_path = d, list(path)
            continue
        for v in world.neighbors(u):
            if v not in path:
                stack.append((v, path + (v,), d + world.edges[u][v]))
    return best_path


def _oracle_row(world, visited, truncated, start, goal, radius):
    tl = 0.0
    for a, b in zip(visited, visited[1:]):
        tl += world.edges[a][b]
    final = visited[-1]
    ne = float(np.linalg.norm(world.positions[final] - world.positions[goal]))
    sr = int(ne <= radius and not truncated)
    l = _enumerated_geodesic(world, start, goal)
    # SPL as an exact rational of the two float lengths
    spl = Fraction(sr) * (Fraction(l) / max(Fraction(tl), Fraction(l))) if l > 0 else Fraction(sr)
    return {"TL": tl, "NE": ne, "SR": sr, "SPL": spl, "GP": l - _enumerated_geodesic(world, final, goal)}


def _random_walk(world, start, rng, max_len):
    path = [start]
    for _ in range(int(rng.integers(0, max_len + 1))):
        path.append(int(rng.choice(world.neighbors(path[-1]))))
    return path


@pytest.mark.parametrize("seed", range(50))
def test_metrics_agree_with_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 11))
    world = W.random_world(n, seed)
    radius = 3.0
    records, episodes, expected = [], [], {}
    for k in range(6):
        start, goal = (int(v) for v in rng.choice(n, size=2, replace=n < 2))
        if k == 0:
            visited, truncated = _enumerated_optimal_path(world, start, goal), False
        else:
            visited, truncated = _random_walk(world, start, rng, 6), bool(rng.random() < 0.2)
        eid = f"e{k}"
        episodes.append(_episode(eid, start, goal))
        records.append(ev.RolloutRecord(eid, visited, terminal=not truncated, truncated=truncated))
        expected[eid] = _oracle_row(world, visited, truncated, start, goal, radius)
    report = ev.compute_metrics(records, world, episodes, radius)
    for row in report.rows:
        want = expected[row["episode_id"]]
        assert row["SR"] == want["SR"]
        assert Fraction(row["SPL"]) == want["SPL"] or row["SPL"] == float(want["SPL"])
        assert abs(row["NE"] - want["NE"]) <= 1e-9
        assert abs(row["TL"] - want["TL"]) <= 1e-9
        assert abs(row["GP"] - want["GP"]) <= 1e-9
        assert 0 <= row["SPL"] <= row["SR"] <= 1
    optimal = next(r for r in report.rows if r["episode_id"] == "e0")
    assert (optimal["SR"], optimal["SPL"], optimal["NE"]) == (1.0, 1.0, 0.0)
    for key in ev.METRIC_FIELDS:
        assert report.aggregate[key] == pytest.approx(np.mean([r[key] for r in report.rows]), abs=1e-12)


def test_spl_formula_examples():
    positions = {i: np.array([float(i) * 3.0, 0.0, 0.0]) for i in range(3)}
    edges = {0: {1: 3.0}, 1: {0: 3.0, 2: 3.0}, 2: {1: 3.0}}
    world = W.WorldGraph(positions, edges, [], W.WorldParams(n_viewpoints=3))
    ep = _episode("a", 0, 2)
    # l = 6, p = 12 (walk there, back, and there again)
    rec = ev.RolloutRecord("a", [0, 1, 2, 1, 2], terminal=True)
    row = ev.compute_metrics([rec], world, [ep]).rows[0]
    assert (row["TL"], row["SR"], row["SPL"]) == (12.0, 1.0, 0.5)
    exact = ev.compute_metrics([ev.RolloutRecord("a", [0, 1, 2], terminal=True)], world, [ep]).rows[0]
    assert exact["SPL"] == 1.0
    fail = ev.compute_metrics([ev.RolloutRecord("a", [0, 1, 0, 1, 0], terminal=True)], world, [ep], 1.0).rows[0]
    assert fail["SR"] == 0.0 and fail["SPL"] == 0.0


def test_truncated_record_counts_as_failure():
    world = W.random_world(5, 0)
    goal = world.viewpoints[-1]
    path = W.shortest_path(world, 0, goal)[1]
    rec = ev.RolloutRecord("a", path, truncated=True)
    row = ev.compute_metrics([rec], world, [_episode("a", 0, goal)]).rows[0]
    assert row["NE"] == 0.0 and row["SR"] == 0.0


def test_record_episode_mismatch_raises():
    world = W.random_world(4, 0)
    with pytest.raises(ContractError):
        ev.compute_metrics([ev.RolloutRecord("x", [0])], world, [_episode("y", 0, 1)])
    with pytest.raises(ContractError):
        ev.compute_metrics([ev.RolloutRecord("y", [0]), ev.RolloutRecord("y", [0])], world, [_episode("y", 0, 1)])


def test_metrics_csv_layout():
    world = W.random_world(4, 1)
    rep = ev.compute_metrics([ev.RolloutRecord("a", [0])], world, [_episode("a", 0, 2)])
    lines = rep.to_csv().splitlines()
    assert lines[0] == "episode_id,TL,NE,SR,SPL,GP"
    assert lines[-1].startswith("mean,")


# rollouts -------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    world, eps = W.generate_world(W.WorldParams(n_episodes=6, seed=4))
    return world, eps, NavModel(SMALL_CFG)


def test_stop_policy_metrics(toy):
    world, eps, model = toy
    recs = [ev.run_episode(model, world, ep, policy=ev.stop_policy) for ep in eps]
    rep = ev.compute_metrics(recs, world, eps)
    for row, ep in zip(rep.rows, sorted(eps, key=lambda e: e.id)):
        assert row["TL"] == 0.0 and row["GP"] == 0.0
        assert row["NE"] == world.distance(ep.path[0], ep.path[-1])


def test_expert_policy_succeeds(toy):
    world, eps, model = toy
    recs = [ev.run_episode(model, world, ep, policy=ev.expert_policy(world, ep.path[-1])) for ep in eps]
    rep = ev.compute_metrics(recs, world, eps)
    assert rep.aggregate["SR"] == 1.0 and rep.aggregate["NE"] == 0.0 and rep.aggregate["SPL"] == 1.0
    for rec, ep in zip(recs, eps):
        assert len(rec.actions) == len(ep.path)  # k moves plus STOP
        assert rec.visited == ep.path


def test_greedy_rollout_is_deterministic_and_recorded(toy):
    world, eps, model = toy
    a = ev.run_episode(model, world, eps[0], "greedy", step_cap=4)
    b = ev.run_episode(model, world, eps[0], "greedy", step_cap=4)
    assert a.visited == b.visited and a.actions == b.actions
    assert len(a.attention) == len(a.actions) == len(a.action_probs)
    assert a.terminal != a.truncated
    for att, probs in zip(a.attention, a.action_probs):
        assert att.shape == (SMALL_CFG.text_len, N_SLOTS)
        np.testing.assert_allclose(att.sum(axis=1), 1.0, atol=1e-9)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_step_cap_truncates(toy):
    world, eps, model = toy
    circle = lambda state, cand: min(cand)  # noqa: E731  never stops
    rec = ev.run_episode(model, world, eps[0], policy=circle, step_cap=3)
    assert rec.truncated and not rec.terminal and len(rec.actions) == 3


def test_sample_mode_uses_rng(toy):
    world, eps, model = toy
    a = ev.run_episode(model, world, eps[1], "sample", 5, rng=np.random.default_rng(3))
    b = ev.run_episode(model, world, eps[1], "sample", 5, rng=np.random.default_rng(3))
    assert a.actions == b.actions
    with pytest.raises(ValueError):
        ev.run_episode(model, world, eps[1], "beam")


# effective attention ------------------------------------------------------------------------------

def _pair(cells, tokens, L=6):
    lm = np.zeros(N_SLOTS)
    lm[cells] = 1
    em = np.zeros(L)
    em[tokens] = 1
    return obj.GroundedPair("A", 0, em, lm, (0.5, 0.5, 0.1, 0.1), (min(tokens), max(tokens) + 1))


def test_uniform_attention_gives_cell_fraction():
    t2p = np.full((6, N_SLOTS), 1 / N_SLOTS)
    p2t = np.full((N_SLOTS, 6), 1 / 6)
    e2l, l2e, e2l_mean, _ = ev.ea_scores(t2p, p2t, _pair([3, 4, 5, 6], [2]))
    assert e2l == [pytest.approx(4 / 37, abs=1e-15)]
    assert e2l[0] == pytest.approx(0.1081, abs=1e-4)
    assert l2e == [pytest.approx(1 / 6)] * 4
    assert e2l_mean == [pytest.approx(1 / 37)]


def test_focused_attention_scores_one():
    t2p = np.zeros((6, N_SLOTS))
    t2p[:, [3, 4]] = 0.5
    e2l, *_ = ev.ea_scores(t2p, np.full((N_SLOTS, 6), 1 / 6), _pair([3, 4], [1, 2]))
    assert e2l == [1.0, 1.0]


def test_ea_over_all_cells_sums_to_one(toy):
    world, eps, model = toy
    corpus = Corpus(world, eps, SMALL_CFG)
    item = corpus.items[0]
    t = item.grounded_steps()[0]
    out = model.forward(item.instr, item.history(t), item.steps[t].pano)
    t2p = out.text_to_panorama()
    full = _pair(list(range(N_SLOTS)), [1], SMALL_CFG.text_len)
    e2l, *_ = ev.ea_scores(t2p, out.panorama_to_text(), full)
    assert e2l[0] == pytest.approx(1.0, abs=1e-9)
    report = ev.effective_attention(model, corpus)
    assert report.e2l and all(0 <= v <= 1 for v in report.e2l + report.l2e)


def test_compare_ea_detects_shift():
    rng = np.random.default_rng(0)
    res = ev.compare_ea(rng.normal(0.3, 0.05, 300), rng.normal(0.2, 0.05, 300))
    assert res["t"] > 0 and res["p_greater"] < 1e-6
    with pytest.raises(ContractError):
        ev.compare_ea([0.1], [0.2, 0.3])


def test_ea_report_json_is_stable():
    rep = ev.EAReport([0.1, 0.2, 0.4], [0.3, 0.5], [0.05, 0.1, 0.2], [0.3, 0.5], 1)
    base = ev.EAReport([0.1, 0.15, 0.2], [0.2, 0.25], [0.05, 0.07, 0.1], [0.2, 0.25], 0)
    text = ev.ea_report_json(rep, base)
    assert text == ev.ea_report_json(rep, base)
    data = json.loads(text)
    assert data["model"]["n_tokens"] == 3 and set(data["comparison"]) == {"e2l", "l2e"}


# heatmaps ---------------------------------------------------------------------------------------

def test_minmax_constant_is_zero():
    assert np.array_equal(ev.minmax_normalize(np.full((3, 4), 0.2)), np.zeros((3, 4)))
    m = ev.minmax_normalize(np.array([[1.0, 3.0], [2.0, 5.0]]))
    assert m.min() == 0.0 and m.max() == 1.0


def test_heatmap_export(toy, tmp_path):
    world, eps, model = toy
    rec = ev.run_episode(model, world, eps[0], step_cap=3)
    csv_path, pgm_path = ev.export_attention_heatmap(rec, 0, tmp_path / "h")
    rows = [list(map(float, line.split(","))) for line in csv_path.read_text().splitlines()]
    assert len(rows) == SMALL_CFG.text_len and all(len(r) == N_SLOTS for r in rows)
    vals = np.array(rows)
    assert vals.min() >= 0.0 and vals.max() <= 1.0
    px = ev.read_pgm(pgm_path)
    assert px.shape == (SMALL_CFG.text_len, N_SLOTS)
    np.testing.assert_array_equal(px, np.round(vals * 255).astype(np.uint8))
    with pytest.raises(IndexError):
        ev.export_attention_heatmap(rec, len(rec.attention), tmp_path / "bad")


def test_stop_slot_is_last():
    assert STOP_SLOT == N_SLOTS - 1
