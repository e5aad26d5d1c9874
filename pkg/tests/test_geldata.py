import copy
import json
import math
from fractions import Fraction

import pytest

from gela import geldata as G
from gela import world as W
from gela.errors import DataError, ParseError, SchemaError


def _episode(eid="e1", **over):
    ep = {
        "id": eid,
        "scan": "s",
        "path": [1, 2, 3],
        "instruction": {"tokens": list(range(4, 16)), "sub_instruction_spans": [[0, 6], [6, 12]]},
        "entities": [
            {"label": "A", "span": [1, 3], "category": "object", "text": "red chair"},
            {"label": "B", "span": [7, 9], "category": "scene", "text": "large kitchen"},
        ],
        "landmarks": [
            {"label": "A", "viewpoint": 1, "box": [0.5, 0.5, 0.1, 0.2], "category": "object"},
            {"label": "A", "viewpoint": 2, "box": [0.4, 0.5, 0.1, 0.2], "category": "object"},
            {"label": "B", "viewpoint": 3, "box": [0.3, 0.5, 0.3, 0.4], "category": "scene"},
        ],
    }
    ep.update(over)
    return ep


def _file(*eps):
    return G.AnnotationFile(list(eps))


# loading ------------------------------------------------------------------------------------

def test_empty_file_is_valid_with_zero_stats():
    f = G.loads('{"version": "gel-v1", "episodes": []}')
    assert G.validate(f) == []
    row = G.stats(f)[-1]
    assert row.instructions == 0 and row.p_per_i is None
    assert row.row()["P/I"] == "-"


def test_malformed_json_reports_byte_offset():
    text = '{"version": "gel-v1", "épisodes": [}'
    with pytest.raises(ParseError) as info:
        G.loads(text.encode())
    assert info.value.offset == len(text.encode()) - 1


def test_unknown_field_rejected_with_json_path():
    obj = {"version": "gel-v1", "episodes": [_episode(colour="blue")]}
    with pytest.raises(SchemaError) as info:
        G.from_json(obj)
    assert info.value.path.startswith("$.episodes[0]")


def test_inverted_span_rejected():
    ep = _episode()
    ep["entities"][0]["span"] = [3, 3]
    with pytest.raises(SchemaError) as info:
        G.from_json({"version": "gel-v1", "episodes": [ep]})
    assert info.value.path == "$.episodes[0].entities[0].span"


def test_bad_category_rejected():
    ep = _episode()
    ep["landmarks"][0]["category"] = "thing"
    with pytest.raises(SchemaError):
        G.from_json({"version": "gel-v1", "episodes": [ep]})


def test_round_trip_is_identity(tmp_path):
    f = _file(_episode(), _episode("e2"))
    G.save(f, tmp_path / "a.json")
    again = G.load(tmp_path / "a.json")
    assert again.to_json() == f.to_json()
    G.save(again, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


# validation -----------------------------------------------------------------------------------

def test_clean_episode_has_no_violations():
    assert G.validate(_file(_episode())) == []


def _mutations():
    """One planted violation per machine-checkable rule."""

    def alignment(ep):
        ep["landmarks"] = [l for l in ep["landmarks"] if l["label"] != "B"]

    def unique(ep):
        ep["landmarks"].append({"label": "A", "viewpoint": 1, "box": [0.7, 0.5, 0.1, 0.2], "category": "object"})

    def coref(ep):
        ep["entities"][1]["text"] = "Red chair "

    def structural(ep):
        ep["landmarks"][2]["box"] = [0.3, 1.5, 0.3, 0.4]

    return {"Alignment": alignment, "UniqueLandmark": unique, "TextCoreference": coref, "Structural": structural}


@pytest.mark.parametrize("rule", sorted(_mutations()))
def test_each_planted_violation_found_exactly_once(rule):
    clean = [_episode(f"e{i}") for i in range(4)]
    mutated = copy.deepcopy(clean)
    _mutations()[rule](mutated[2])
    found = G.hard_violations(G.validate(_file(*mutated)))
    assert [(v.rule, v.episode) for v in found] == [(rule, "e2")]


def test_all_mutations_together_on_generated_corpus():
    _, eps = W.generate_world(W.WorldParams(n_episodes=12, seed=2))
    records = [e.to_record() for e in eps]
    assert G.validate(_file(*records)) == []
    planted = {}
    for i, (rule, mutate) in enumerate(sorted(_mutations().items())):
        ep = _episode(f"planted{i}")
        mutate(ep)
        records.append(ep)
        planted[f"planted{i}"] = rule
    found = G.hard_violations(G.validate(_file(*records)))
    assert sorted((v.episode, v.rule) for v in found) == sorted(planted.items())


def test_alignment_detects_both_directions():
    ep = _episode()
    ep["landmarks"].append({"label": "C", "viewpoint": 2, "box": [0.1, 0.5, 0.1, 0.2], "category": "object"})
    ep["entities"].pop(0)
    ep["landmarks"] = [l for l in ep["landmarks"] if l["label"] != "A"]
    found = G.validate(_file(ep))
    assert [v.rule for v in found] == ["Alignment"]
    assert "C" in found[0].detail


def test_split_group_is_exempt_from_unique_landmark():
    ep = _episode()
    ep["landmarks"][0:1] = [
        {"label": "A", "viewpoint": 1, "box": [0.975, 0.5, 0.05, 0.2], "category": "object", "split_group": "g"},
        {"label": "A", "viewpoint": 1, "box": [0.025, 0.5, 0.05, 0.2], "category": "object", "split_group": "g"},
    ]
    assert G.validate(_file(ep)) == []


def test_structural_checks():
    ep = _episode()
    ep["instruction"]["sub_instruction_spans"][1] = [6, 13]
    ep["landmarks"][0]["viewpoint"] = 9
    ep["entities"][0]["span"] = [1, 8]
    found = G.validate(_file(ep, _episode()))
    rules = [v.rule for v in found]
    assert rules.count("Structural") == 4  # span range, overlap, off-path viewpoint, duplicate id
    assert all(r == "Structural" for r in rules)


def test_bare_class_word_is_only_a_warning():
    ep = _episode()
    ep["entities"][0]["text"] = "chair"
    found = G.validate(_file(ep))
    assert [(v.rule, v.severity) for v in found] == [("FreeText", "warning")]
    assert G.hard_violations(found) == []


# statistics ----------------------------------------------------------------------------------

def _counted(n_phr, n_box, eid):
    ents = [{"label": f"L{k}", "span": [2 * k, 2 * k + 1], "category": "object", "text": f"x{k}"} for k in range(n_phr)]
    boxes = [{"label": f"L{k % n_phr}", "viewpoint": k, "box": [0.5, 0.5, 0.1, 0.1], "category": "object"} for k in range(n_box)]
    return {"id": eid, "scan": "s", "path": list(range(n_box)), "instruction": {"tokens": list(range(20))}, "entities": ents, "landmarks": boxes}


def test_stats_arithmetic():
    f = _file(_counted(4, 9, "a"), _counted(4, 8, "b"))
    row = G.stats(f)[-1]
    assert (row.instructions, row.phrases, row.boxes) == (2, 8, 17)
    assert row.p_per_i == Fraction(4) and row.b_per_i == Fraction(17, 2)
    assert row.row()["P/I"] == "4.00" and row.row()["B/I"] == "8.50"


def test_object_boxes_per_phrase():
    f = _file(_counted(3, 6, "a"))
    assert G.stats(f)[-1].object_b_per_p == 2
    assert G.stats(f)[-1].row()["object_P/B"] == "2.00"


def test_split_pieces_count_once():
    ep = _counted(1, 1, "a")
    ep["landmarks"] = [dict(ep["landmarks"][0], split_group="g"), dict(ep["landmarks"][0], split_group="g")]
    assert G.stats(_file(ep))[-1].boxes == 1


def test_ratios_round_half_up():
    assert G.round_half_up(Fraction(1, 8)) == "0.13"
    assert G.round_half_up(Fraction(5, 8)) == "0.63"
    assert G.round_half_up(Fraction(2, 3)) == "0.67"


def test_per_split_rows_and_formats():
    a, b = _counted(2, 3, "a"), _counted(3, 3, "b")
    b["split"] = "val"
    a["split"] = "train"
    rows = G.stats(_file(a, b), by_split=True)
    assert [r.split for r in rows] == ["train", "val", "total"]
    csv_text = G.format_csv(rows)
    assert csv_text.splitlines()[0].startswith("split,trajectories,instructions")
    assert len(G.format_table(rows).splitlines()) == 4


def test_stats_is_deterministic():
    f = _file(_counted(4, 9, "a"), _counted(3, 5, "b"))
    assert G.format_csv(G.stats(f)) == G.format_csv(G.stats(G.loads(f.dumps())))


# transforms ---------------------------------------------------------------------------------

def test_globalize_spans_offsets_and_is_idempotent():
    subs = [[0, 7], [7, 15]]
    ents = [{"label": "A", "span": [2, 4], "sub_index": 0}, {"label": "B", "span": [2, 4], "sub_index": 1}]
    out = G.globalize_spans(subs, ents)
    assert [e["span"] for e in out] == [[2, 4], [9, 11]]
    assert G.globalize_spans(subs, out) == out
    assert out[0]["span"][1] <= out[1]["span"][0]


def test_globalize_rejects_crossing_span():
    with pytest.raises(DataError):
        G.globalize_spans([[0, 3], [3, 8]], [{"label": "A", "span": [2, 4], "sub_index": 0}])


def test_normalize_box_heading_examples():
    assert G.normalize_box_heading((0.3, 0.5, 0.1, 0.2), 0.0) == [(0.3, 0.5, 0.1, 0.2)]
    halves = G.normalize_box_heading((0.5, 0.5, 0.1, 0.2), math.pi)
    assert len(halves) == 2  # the centre lands on the seam
    assert W.merge_pieces(halves)[0] % 1.0 == pytest.approx(0.0, abs=1e-12)
    pieces = G.normalize_box_heading((0.95, 0.5, 0.2, 0.1), 0.0)
    assert [pytest.approx(p) for p in pieces] == [(0.925, 0.5, 0.15, 0.1), (0.025, 0.5, 0.05, 0.1)]
    assert sum(p[2] * p[3] for p in pieces) == pytest.approx(0.02, abs=1e-12)


@pytest.mark.parametrize("heading", [0.3, 1.7, 3.9, 6.0])
def test_normalize_box_heading_conserves_area(heading):
    for box in [(0.1, 0.4, 0.3, 0.2), (0.9, 0.6, 0.25, 0.1), (0.5, 0.5, 0.05, 0.05)]:
        pieces = G.normalize_box_heading(box, heading)
        assert abs(sum(p[2] * p[3] for p in pieces) - box[2] * box[3]) < 1e-12
        assert all(p[1:] == box[1:] or p[2] < box[2] for p in pieces)


def test_to_pixels():
    assert G.to_pixels((0.5, 0.5, 0.25, 0.5)) == (1024.0, 512.0, 512.0, 512.0)


def test_generated_records_load_back(tmp_path):
    _, eps = W.generate_world(W.WorldParams(n_episodes=6, seed=1))
    G.save(G.from_episode_specs(eps), tmp_path / "e.json")
    f = G.load(tmp_path / "e.json")
    again = [W.EpisodeSpec.from_record(r) for r in json.loads(f.dumps())["episodes"]]
    assert [e.to_record() for e in again] == [e.to_record() for e in eps]
