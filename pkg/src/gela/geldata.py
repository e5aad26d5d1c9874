"""Grounded entity-landmark annotation files: schema, rules, statistics, transforms.

Files use the ``gel-v1`` JSON layout::

    {"version": "gel-v1",
     "episodes": [{"id", "scan", "path", "instruction": {"tokens", "sub_instruction_spans"},
                   "entities": [{"label", "span", "category", "text"}],
                   "landmarks": [{"label", "viewpoint", "box", "category", "split_group"?}],
                   "split"?, "trajectory_id"?, "heading"?}]}

Boxes are centre-form ``[x, y, w, h]`` normalised to the 2048x1024
panorama; spans are half-open token ranges into ``instruction.tokens``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema

from .errors import DataError, ParseError, SchemaError

FORMAT_VERSION = "gel-v1"
PANORAMA_SIZE = (2048, 1024)
RULES = ("Alignment", "FreeText", "TextCoreference", "UniqueLandmark", "Structural")
CATEGORIES = ("object", "scene")

_ID = {"type": ["integer", "string"]}
_SPAN = {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "episodes"],
    "properties": {
        "version": {"const": FORMAT_VERSION},
        "episodes": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "scan", "path", "instruction", "entities", "landmarks"],
                "properties": {
                    "id": {"type": "string"},
                    "scan": {"type": "string"},
                    "split": {"type": "string"},
                    "trajectory_id": {"type": "string"},
                    "heading": {"type": "number"},
                    "path": {"type": "array", "items": _ID, "minItems": 1},
                    "instruction": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["tokens"],
                        "properties": {
                            "tokens": {"type": "array", "items": {"type": ["integer", "string"]}},
                            "sub_instruction_spans": {"type": "array", "items": _SPAN},
                        },
                    },
                    "entities": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["label", "span", "category", "text"],
                            "properties": {
                                "label": {"type": "string"},
                                "span": _SPAN,
                                "category": {"enum": list(CATEGORIES)},
                                "text": {"type": "string"},
                            },
                        },
                    },
                    "landmarks": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["label", "viewpoint", "box", "category"],
                            "properties": {
                                "label": {"type": "string"},
                                "viewpoint": _ID,
                                "box": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                                "category": {"enum": list(CATEGORIES)},
                                "split_group": {"type": "string"},
                            },
                        },
                    },
                },
            },
        },
    },
}

# single-token class names that violate the free-text guideline when used alone
GENERIC_CLASS_WORDS = frozenset(
    """chair seat stool table desk counter lamp light chandelier plant vase flowerpot kitchen pantry galley
    bedroom bed dormitory hallway corridor passage stairs staircase steps door room window sofa couch
    picture painting rug tv bathroom""".split()
)


@dataclass
class AnnotationFile:
    episodes: list[dict] = field(default_factory=list)
    version: str = FORMAT_VERSION

    def to_json(self) -> dict:
        return {"version": self.version, "episodes": self.episodes}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"


@dataclass(frozen=True, order=True)
class RuleViolation:
    episode: str
    rule: str
    detail: str
    severity: str = "error"

    def __str__(self) -> str:
        return f"{self.severity.upper()} [{self.rule}] {self.episode}: {self.detail}"


# loading ----------------------------------------------------------------------------------------

def loads(text: str | bytes) -> AnnotationFile:
    raw = text.decode("utf-8") if isinstance(text, bytes) else text
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        offset = len(raw[: exc.pos].encode("utf-8"))
        raise ParseError(f"malformed JSON: {exc.msg}", offset) from exc
    return from_json(obj)


def load(path) -> AnnotationFile:
    return loads(Path(path).read_bytes())


def from_json(obj) -> AnnotationFile:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(obj), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise SchemaError(err.message, err.json_path)
    for i, ep in enumerate(obj["episodes"]):
        for j, ent in enumerate(ep["entities"]):
            s, e = ent["span"]
            if e <= s:
                raise SchemaError(f"span end {e} <= start {s}", f"$.episodes[{i}].entities[{j}].span")
        for j, (s, e) in enumerate(ep["instruction"].get("sub_instruction_spans", [])):
            if e <= s:
                raise SchemaError(f"span end {e} <= start {s}", f"$.episodes[{i}].instruction.sub_instruction_spans[{j}]")
    return AnnotationFile(obj["episodes"], obj["version"])


def save(file: AnnotationFile, path) -> None:
    Path(path).write_text(file.dumps())


def from_episode_specs(specs: Iterable) -> AnnotationFile:
    return AnnotationFile([s.to_record() for s in specs])


# validation --------------------------------------------------------------------------------------

def validate(file: AnnotationFile) -> list[RuleViolation]:
    """Machine-checkable annotation rules; returns sorted violations (warnings included)."""
    out: list[RuleViolation] = []
    seen_ids: set[str] = set()
    for ep in file.episodes:
        out.extend(_validate_episode(ep, ep["id"] in seen_ids))
        seen_ids.add(ep["id"])
    return sorted(out)


def hard_violations(violations: Sequence[RuleViolation]) -> list[RuleViolation]:
    return [v for v in violations if v.severity == "error"]


def _validate_episode(ep: dict, duplicate_id: bool) -> list[RuleViolation]:
    eid = ep["id"]
    out = []

    def flag(rule, detail, severity="error"):
        out.append(RuleViolation(eid, rule, detail, severity))

    if duplicate_id:
        flag("Structural", "duplicate episode id")
    n_tok = len(ep["instruction"]["tokens"])
    path = set(ep["path"])

    spans = []
    for ent in ep["entities"]:
        s, e = ent["span"]
        if e > n_tok:
            flag("Structural", f"entity {ent['label']} span [{s},{e}) exceeds {n_tok} tokens")
        spans.append((s, e, ent["label"]))
    spans.sort()
    for (s0, e0, l0), (s1, e1, l1) in zip(spans, spans[1:]):
        if s1 < e0:
            flag("Structural", f"entity spans [{s0},{e0}) ({l0}) and [{s1},{e1}) ({l1}) overlap")
    for s, e in ep["instruction"].get("sub_instruction_spans", []):
        if e > n_tok:
            flag("Structural", f"sub-instruction span [{s},{e}) exceeds {n_tok} tokens")

    for lm in ep["landmarks"]:
        x, y, w, h = lm["box"]
        if not (0 <= x <= 1 and 0 <= y <= 1 and 0 < w <= 1 and 0 < h <= 1):
            flag("Structural", f"landmark {lm['label']} at {lm['viewpoint']} box {lm['box']} out of range")
        if lm["viewpoint"] not in path:
            flag("Structural", f"landmark {lm['label']} viewpoint {lm['viewpoint']} not on the path")

    entity_labels = {e["label"] for e in ep["entities"]}
    landmark_labels = {l["label"] for l in ep["landmarks"]}
    for label in sorted(entity_labels - landmark_labels):
        flag("Alignment", f"entity label {label} has no landmark box")
    for label in sorted(landmark_labels - entity_labels):
        flag("Alignment", f"landmark label {label} has no entity phrase")

    boxes = defaultdict(set)
    for i, lm in enumerate(ep["landmarks"]):
        boxes[(lm["label"], str(lm["viewpoint"]))].add(lm.get("split_group") or f"#{i}")
    for (label, vp), groups in sorted(boxes.items()):
        if len(groups) > 1:
            flag("UniqueLandmark", f"label {label} has {len(groups)} boxes at viewpoint {vp}")

    by_text = defaultdict(set)
    for ent in ep["entities"]:
        by_text[ent["text"].strip().lower()].add(ent["label"])
    for text, labels in sorted(by_text.items()):
        if len(labels) > 1:
            flag("TextCoreference", f"text '{text}' carries labels {sorted(labels)}")

    for ent in ep["entities"]:
        words = ent["text"].strip().lower().split()
        if len(words) == 1 and words[0] in GENERIC_CLASS_WORDS:
            flag("FreeText", f"entity {ent['label']} is the bare class word '{words[0]}'", "warning")
    return out


# statistics ----------------------------------------------------------------------------------------

def round_half_up(q: Fraction, places: int = 2) -> str:
    exact = Decimal(q.numerator) / Decimal(q.denominator)
    return str(exact.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


def _ratio(a: int, b: int) -> Fraction | None:
    return Fraction(a, b) if b else None


@dataclass
class DatasetStats:
    split: str
    trajectories: int = 0
    instructions: int = 0
    phrases: int = 0
    boxes: int = 0
    object_phrases: int = 0
    object_boxes: int = 0
    scene_phrases: int = 0
    scene_boxes: int = 0

    @property
    def p_per_i(self):
        return _ratio(self.phrases, self.instructions)

    @property
    def b_per_i(self):
        return _ratio(self.boxes, self.instructions)

    @property
    def b_per_p(self):
        return _ratio(self.boxes, self.phrases)

    @property
    def object_b_per_p(self):
        return _ratio(self.object_boxes, self.object_phrases)

    @property
    def scene_b_per_p(self):
        return _ratio(self.scene_boxes, self.scene_phrases)

    def row(self) -> dict[str, str]:
        def fmt(q):
            return "-" if q is None else round_half_up(q)

        return {
            "split": self.split,
            "trajectories": str(self.trajectories),
            "instructions": str(self.instructions),
            "phrases": str(self.phrases),
            "P/I": fmt(self.p_per_i),
            "boxes": str(self.boxes),
            "B/I": fmt(self.b_per_i),
            "object_phrases": str(self.object_phrases),
            "object_boxes": str(self.object_boxes),
            "object_P/B": fmt(self.object_b_per_p),
            "scene_phrases": str(self.scene_phrases),
            "scene_boxes": str(self.scene_boxes),
            "scene_P/B": fmt(self.scene_b_per_p),
        }


def stats(file: AnnotationFile, by_split: bool = False) -> list[DatasetStats]:
    """Counts and ratios overall (last row) and, optionally, per split first.

    ``P/B`` follows the dataset-table convention: boxes per entity phrase.
    Pieces of a wrap-split box (shared ``split_group``) count as one box.
    """
    groups: dict[str, list[dict]] = defaultdict(list)
    for ep in file.episodes:
        groups[ep.get("split", "all")].append(ep)
    rows = [_stats_for(name, groups[name]) for name in sorted(groups)] if by_split else []
    rows.append(_stats_for("total", file.episodes))
    return rows


def _stats_for(name: str, episodes: Sequence[dict]) -> DatasetStats:
    st = DatasetStats(name)
    st.trajectories = len({ep.get("trajectory_id", ep["id"]) for ep in episodes})
    st.instructions = len(episodes)
    for ep in episodes:
        for ent in ep["entities"]:
            st.phrases += 1
            if ent["category"] == "object":
                st.object_phrases += 1
            else:
                st.scene_phrases += 1
        seen = set()
        for i, lm in enumerate(ep["landmarks"]):
            key = lm.get("split_group") or f"#{i}"
            if key in seen:
                continue
            seen.add(key)
            st.boxes += 1
            if lm["category"] == "object":
                st.object_boxes += 1
            else:
                st.scene_boxes += 1
    return st


def format_table(rows: Sequence[DatasetStats]) -> str:
    dicts = [r.row() for r in rows]
    cols = list(dicts[0])
    widths = {c: max(len(c), *(len(d[c]) for d in dicts)) for c in cols}
    lines = ["  ".join(c.rjust(widths[c]) for c in cols)]
    lines += ["  ".join(d[c].rjust(widths[c]) for c in cols) for d in dicts]
    return "\n".join(lines) + "\n"


def format_csv(rows: Sequence[DatasetStats]) -> str:
    buf = io.StringIO()
    dicts = [r.row() for r in rows]
    writer = csv.DictWriter(buf, fieldnames=list(dicts[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(dicts)
    return buf.getvalue()


# coordinate transforms -----------------------------------------------------------------------------------

def globalize_spans(sub_instruction_spans: Sequence[Sequence[int]], entities: Sequence[dict]) -> list[dict]:
    """Shift entity spans given relative to a sub-instruction into global token positions.

    Entities carrying ``sub_index`` are local to that sub-instruction; the
    key is dropped in the output, so a second call leaves them unchanged.
    """
    out = []
    for ent in entities:
        ent = dict(ent)
        k = ent.pop("sub_index", None)
        if k is not None:
            start, end = sub_instruction_spans[k]
            s, e = ent["span"]
            if e > end - start:
                raise DataError(
                    f"span [{s},{e}) crosses the end of sub-instruction {k} (length {end - start})"
                )
            ent["span"] = [s + start, e + start]
        out.append(ent)
    return out


def normalize_box_heading(box: Sequence[float], panorama_center_heading: float) -> list[tuple[float, float, float, float]]:
    """Move a centre-form box into the panorama frame that starts at 0 degrees.

    The x coordinate shifts by ``panorama_center_heading / 2pi`` modulo 1;
    a box straddling the seam comes back as two pieces.
    """
    x, y, w, h = box
    shifted = ((x + panorama_center_heading / (2 * math.pi)) % 1.0, y, w, h)
    x0, x1 = shifted[0] - w / 2, shifted[0] + w / 2
    if x0 >= 0.0 and x1 <= 1.0:
        return [shifted]
    if x1 > 1.0:
        pieces = [(x0, 1.0), (0.0, x1 - 1.0)]
    else:
        pieces = [(x0 + 1.0, 1.0), (0.0, x1)]
    return [((a + b) / 2, y, b - a, h) for a, b in pieces if b > a]


def to_pixels(box: Sequence[float]) -> tuple[float, float, float, float]:
    W, H = PANORAMA_SIZE
    x, y, w, h = box
    return (x * W, y * H, w * W, h * H)
