"""Adaptive pre-training, IL+RL fine-tuning, optimisers and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import difftensor as dt
from . import objectives as obj
from .difftensor import Tensor
from .errors import ContractError, NumericError, ParamError, ParseError, SkipSignal, UnreachableError, VersionError
from .model import STOP_SLOT, EncoderOutputs, Instruction, ModelConfig, NavModel, Panorama, param_shapes
from .world import (
    EpisodeSpec,
    WorldGraph,
    candidates,
    expert_action,
    observe,
    path_action,
    region_targets,
    shortest_path,
    slot_angles,
    start_state,
    step,
)

log = logging.getLogger(__name__)

GELA_TASKS = ("epp", "lbp", "elsa")
PROXY_TASKS = ("mlm", "mrc", "itm", "sap", "sprel")
TASKS = PROXY_TASKS + GELA_TASKS
CHECKPOINT_VERSION = "gela-ckpt-1"

PRESETS = {
    "desk": dict(lr=1e-3, iterations=2000, batch_size=8, ft_lr=1e-3, ft_iterations=300),
    "paper-scale": dict(lr=5e-5, iterations=200_000, batch_size=64, ft_lr=1e-5, ft_iterations=100_000),
}


# configuration -------------------------------------------------------------------------------

@dataclass
class TrainConfig:
    preset: str = "desk"
    iterations: int = 2000
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    mix: dict = field(default_factory=lambda: {t: 1.0 for t in TASKS})
    gela: obj.GelaWeights = field(default_factory=obj.GelaWeights)
    elsa_cosine: bool = True
    optimizer: str = "adam"
    momentum: float = 0.9
    clip: float = 1.0
    mlm_rate: float = 0.15
    mrc_rate: float = 0.15
    sprel_dropout: float = 0.3
    mask_threshold: float = 0.25
    snapshot_every: int = 0
    ft_iterations: int = 300
    ft_lr: float = 1e-3
    ft_batch_size: int = 4
    il_weight: float = 1.0
    rl_weight: float = 1.0
    max_steps: int = 15
    success_radius: float = 3.0
    warmup: int = 0
    schedule: str = "constant"

    def __post_init__(self):
        if self.iterations < 1 or self.ft_iterations < 1:
            raise ParamError("iterations must be >= 1")
        if self.batch_size < 1 or self.ft_batch_size < 1:
            raise ParamError("batch sizes must be >= 1")
        unknown = set(self.mix) - set(TASKS)
        if unknown:
            raise ParamError(f"unknown tasks in mix: {sorted(unknown)}")
        if any(w < 0 for w in self.mix.values()) or sum(self.mix.values()) <= 0:
            raise ParamError("at least one task needs a positive mix weight")
        if self.schedule not in ("constant", "linear"):
            raise ParamError(f"unknown learning-rate schedule {self.schedule!r}")
        if self.warmup < 0:
            raise ParamError("warmup must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ParamError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.ft_lr <= 0 or self.clip <= 0:
            raise ParamError("learning rates and clip must be > 0")
        if self.il_weight < 0 or self.rl_weight < 0 or self.il_weight + self.rl_weight == 0:
            raise ParamError("IL/RL weights must be >= 0 and not both zero")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ParamError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(preset=name, **{**PRESETS[name], **overrides})

    def enabled_tasks(self) -> list[str]:
        return [t for t in TASKS if self.mix.get(t, 0.0) > 0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mix"] = {t: float(self.mix.get(t, 0.0)) for t in TASKS}
        return d

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, dict):
                lines += [f"{k}.{kk}={vv}" for kk, vv in v.items()]
            else:
                lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"


def _coerce(kind, text: str):
    if kind is bool:
        return text.lower() in ("1", "true", "yes")
    return kind(text)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Read a flat ``key=value`` file; ``mix.<task>`` and ``gela.<weight>`` address nested fields.

    A ``preset`` key, if present, is applied first.
    """
    pairs = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {n}: expected key=value", n)
        k, v = (s.strip() for s in line.split("=", 1))
        pairs.append((k, v))
    preset = dict(pairs).get("preset")
    cfg = TrainConfig.from_preset(preset) if preset else (base or TrainConfig())
    types = {f.name: type(getattr(cfg, f.name)) for f in fields(cfg)}
    top, mix, gela = {}, dict(cfg.mix), asdict(cfg.gela)
    for k, v in pairs:
        if k == "preset":
            top[k] = v
        elif k.startswith("mix."):
            mix[k[4:]] = float(v)
        elif k.startswith("gela."):
            if k[5:] not in gela:
                raise ParamError(f"unknown GELA weight {k}")
            gela[k[5:]] = float(v)
        elif k in types:
            top[k] = _coerce(types[k], v)
        else:
            raise ParamError(f"unknown config key {k!r}")
    return replace(cfg, mix=mix, gela=obj.GelaWeights(**gela), **top)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


# data --------------------------------------------------------------------------------------

@dataclass
class StepRecord:
    viewpoint: int
    heading: float
    pano: Panorama
    action: int  # slot taken from here (STOP_SLOT at the goal)
    candidates: tuple[int, ...]
    pairs: list  # GroundedPair list (empty for augmented data)


@dataclass
class EpisodeData:
    spec: EpisodeSpec
    instr: Instruction
    steps: list[StepRecord]
    mrc_targets: list[np.ndarray]

    def history(self, t: int) -> list:
        return [(s.pano, slot_angles(s.action)) for s in self.steps[:t]]

    def trajectory(self) -> list:
        return [(s.pano, slot_angles(s.action)) for s in self.steps]

    def grounded_steps(self) -> list[int]:
        return [t for t, s in enumerate(self.steps) if s.pairs]


class Corpus:
    """Episodes of one world plus their teacher-forced observations.

    ``tag`` is ``grounded`` (annotations feed the grounding tasks) or
    ``augmented`` (proxy tasks only).
    """

    def __init__(self, world: WorldGraph, episodes: Sequence[EpisodeSpec], config: ModelConfig, tag: str = "grounded", threshold: float = 0.25):
        if tag not in ("grounded", "augmented"):
            raise ParamError(f"unknown data tag {tag!r}")
        self.world = world
        self.tag = tag
        self.items = [self._prepare(ep, config, threshold) for ep in episodes]
        if not self.items:
            raise ContractError("corpus has no episodes")

    def _prepare(self, ep: EpisodeSpec, config: ModelConfig, threshold: float) -> EpisodeData:
        instr = Instruction.from_words(ep.tokens, config.max_instruction_len)
        state = start_state(ep)
        steps, targets = [], []
        for t, vp in enumerate(ep.path):
            nxt = ep.path[t + 1] if t + 1 < len(ep.path) else None
            action = STOP_SLOT if nxt is None else path_action(self.world, state, nxt)
            pairs = obj.build_masks(ep, vp, state.heading, config.text_len, threshold) if self.tag == "grounded" else []
            steps.append(
                StepRecord(vp, state.heading, observe(self.world, vp, state.heading), action, tuple(sorted(candidates(self.world, state))), pairs)
            )
            targets.append(region_targets(self.world, vp, state.heading))
            if nxt is not None:
                state = step(self.world, state, action)
        return EpisodeData(ep, instr, steps, targets)

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class Sample:
    corpus: Corpus
    index: int
    t: int

    @property
    def item(self) -> EpisodeData:
        return self.corpus.items[self.index]

    @property
    def step(self) -> StepRecord:
        return self.item.steps[self.t]


def draw_sample(task: str, corpora: Sequence[Corpus], rng: np.random.Generator) -> Sample:
    """Pick a source, an episode and a step; grounding tasks only see grounded sources."""
    if task in GELA_TASKS:
        pool = [c for c in corpora if c.tag == "grounded"]
        if not pool:
            raise ContractError(f"task {task} needs grounded data")
    else:
        pool = list(corpora)
    sizes = np.array([len(c) for c in pool], dtype=float)
    c = pool[int(rng.choice(len(pool), p=sizes / sizes.sum()))]
    i = int(rng.integers(len(c)))
    item = c.items[i]
    steps = item.grounded_steps() if task in GELA_TASKS else list(range(len(item.steps)))
    if not steps:
        # resample deterministically from episodes that have grounded steps
        options = [(k, s) for k, it in enumerate(c.items) for s in it.grounded_steps()]
        if not options:
            raise ContractError("no grounded step in corpus")
        i, t = options[int(rng.integers(len(options)))]
        return Sample(c, i, t)
    return Sample(c, i, steps[int(rng.integers(len(steps)))])


def _head(model: NavModel, name: str):
    return lambda x: model.head(name, x)


@dataclass
class Request:
    """Encoder inputs a task needs plus the map from their outputs to the loss."""

    inputs: list[tuple[Instruction, list, Panorama]]
    finish: Callable[[list[EncoderOutputs]], Tensor]


def task_request(model: NavModel, task: str, sample: Sample, corpora: Sequence[Corpus], rng: np.random.Generator, cfg: TrainConfig) -> Request:
    """Draw the task's random corruption for one sample; all randomness is consumed here."""
    item, st, t = sample.item, sample.step, sample.t
    history = item.history(t)
    plain = [(item.instr, history, st.pano)]
    if task == "epp":
        def finish(outs):
            S = outs[0].S
            losses = [obj.epp_loss(S, p.landmark_mask, p.entity_mask, _head(model, "epp"), item.instr.mask) for p in st.pairs]
            return dt.scale(_total(losses), 1.0 / len(losses))
        return Request(plain, finish)
    if task == "lbp":
        def finish(outs):
            Z = outs[0].Z
            losses = [obj.lbp_loss(Z, p.entity_mask, p.box, _head(model, "lbp"), cfg.gela.lam)[0] for p in st.pairs]
            return dt.scale(_total(losses), 1.0 / len(losses))
        return Request(plain, finish)
    if task == "elsa":
        pairs = obj.elsa_pairs(st.pairs)
        return Request(plain, lambda outs: obj.elsa_loss(outs[0].Z, outs[0].S, pairs, cfg.gela.tau, item.instr.mask, cfg.elsa_cosine))
    if task == "mlm":
        masked, pos, orig = obj.mask_tokens(item.instr, rng, cfg.mlm_rate)
        return Request([(masked, history, st.pano)], lambda outs: obj.mlm_from_outputs(model, outs[0], pos, orig))
    if task == "mrc":
        zeroed, idx = obj.zero_views(st.pano, rng, cfg.mrc_rate)
        targets = item.mrc_targets[t]
        return Request([(item.instr, history, zeroed)], lambda outs: obj.mrc_from_outputs(model, outs[0], idx, targets))
    if task == "itm":
        others = [c.items[k].trajectory() for c in corpora for k in range(len(c)) if not (c is sample.corpus and k == sample.index)]
        inputs = obj.itm_inputs(item.trajectory(), others, rng)
        return Request([(item.instr, h, p) for h, p in inputs], lambda outs: obj.itm_from_outputs(model, outs))
    if task == "sap":
        def finish(outs):
            logp = model.action_log_probs(outs[0].S, outs[0].Z, st.candidates)
            return obj.sap_loss(logp, st.action, st.candidates)
        return Request(plain, finish)
    if task == "sprel":
        dropped, i, j, target = obj.sprel_prepare(st.pano, rng, cfg.sprel_dropout)
        return Request([(item.instr, history, dropped)], lambda outs: obj.sprel_from_outputs(model, outs[0], i, j, target))
    raise ParamError(f"unknown task {task!r}")


def run_requests(model: NavModel, requests: Sequence[Request]) -> list[Tensor]:
    """One padded encoder pass over every request's inputs, then each request's loss."""
    inputs = [x for r in requests for x in r.inputs]
    outs = model.forward_batch([x[0] for x in inputs], [x[1] for x in inputs], [x[2] for x in inputs])
    losses, k = [], 0
    for r in requests:
        losses.append(r.finish(outs[k : k + len(r.inputs)]))
        k += len(r.inputs)
    return losses


def task_loss(model: NavModel, task: str, sample: Sample, corpora: Sequence[Corpus], rng: np.random.Generator, cfg: TrainConfig) -> Tensor:
    """Loss of one sample for ``task``; this is what the training loop differentiates."""
    return run_requests(model, [task_request(model, task, sample, corpora, rng, cfg)])[0]


def _total(losses: Sequence[Tensor]) -> Tensor:
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total


# optimisation ------------------------------------------------------------------------------

class Optimizer:
    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr

    def direction(self, name: str, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, clip: float | None = None) -> float:
        """Apply one update from the accumulated grads; returns the pre-clip gradient norm."""
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        if not math.isfinite(norm):
            raise NumericError("non-finite gradient norm")
        scale = clip / norm if clip is not None and norm > clip else 1.0
        for k, p in self.params.items():
            p.data = p.data - self.lr * self.direction(k, grads[k] * scale)
            p.grad = None
        return norm


class SGD(Optimizer):
    """Gradient descent with heavy-ball momentum."""

    def __init__(self, params, lr, momentum: float = 0.9):
        super().__init__(params, lr)
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def direction(self, name, g):
        v = self.momentum * self.velocity[name] + g
        self.velocity[name] = v
        return v


class Adam(Optimizer):
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, clip=None):
        self.t += 1
        return super().step(clip)

    def direction(self, name, g):
        self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
        self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
        mhat = self.m[name] / (1 - self.b1**self.t)
        vhat = self.v[name] / (1 - self.b2**self.t)
        return mhat / (np.sqrt(vhat) + self.eps)


def lr_at(base: float, it: int, total: int, warmup: int = 0, schedule: str = "constant") -> float:
    """Learning rate of 1-based iteration ``it``: linear warm-up, then constant or linear decay to zero."""
    scale = min(1.0, it / warmup) if warmup else 1.0
    if schedule == "linear" and it > warmup:
        scale *= (total - it + 1) / (total - warmup + 1)
    return base * scale


def make_optimizer(model: NavModel, cfg: TrainConfig, lr: float) -> Optimizer:
    if cfg.optimizer == "sgd":
        return SGD(model.params, lr, cfg.momentum)
    return Adam(model.params, lr)


# logging -----------------------------------------------------------------------------------

@dataclass
class LogEntry:
    iteration: int
    task: str
    loss: float
    wall: float


@dataclass
class TrainLog:
    entries: list[LogEntry] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)

    def append(self, iteration: int, task: str, loss: float, wall: float = 0.0) -> None:
        if self.entries and iteration < self.entries[-1].iteration:
            raise ContractError("log iterations must be non-decreasing")
        self.entries.append(LogEntry(iteration, task, float(loss), wall))

    def losses(self, task: str | None = None) -> list[float]:
        return [e.loss for e in self.entries if task is None or e.task == task]

    def to_csv(self) -> str:
        """Deterministic CSV; wall-clock time is kept in memory only."""
        rows = ["iteration,task,loss"] + [f"{e.iteration},{e.task},{e.loss!r}" for e in self.entries]
        return "\n".join(rows) + "\n"

    def snapshots_json(self) -> str:
        return json.dumps(self.snapshots, indent=1, sort_keys=True) + "\n"

    def write(self, prefix) -> tuple[Path, Path]:
        prefix = Path(prefix)
        csv_path = prefix.with_name(prefix.name + "_log.csv")
        json_path = prefix.with_name(prefix.name + "_snapshots.json")
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.snapshots_json())
        return csv_path, json_path


# training loops ----------------------------------------------------------------------------

def adaptive_pretrain(
    model: NavModel,
    corpora: Sequence[Corpus],
    cfg: TrainConfig,
    snapshot: Callable[[NavModel], dict] | None = None,
    checkpoint_path=None,
) -> tuple[NavModel, TrainLog]:
    """Sample one task per iteration by mix weight, average its loss over a batch, clip, update."""
    tasks = cfg.enabled_tasks()
    if any(t in GELA_TASKS for t in tasks) and not any(c.tag == "grounded" for c in corpora):
        tasks = [t for t in tasks if t not in GELA_TASKS]
        if not tasks:
            raise ContractError("only grounding tasks enabled but no grounded corpus given")
    weights = np.array([cfg.mix[t] for t in tasks], dtype=float)
    weights /= weights.sum()
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(model, cfg, cfg.lr)
    trainlog = TrainLog()
    t0 = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        task = tasks[int(rng.choice(len(tasks), p=weights))]
        requests = []
        for _ in range(cfg.batch_size):
            sample = draw_sample(task, corpora, rng)
            try:
                requests.append(task_request(model, task, sample, corpora, rng, cfg))
            except SkipSignal:
                continue
        if not requests:
            continue
        losses = run_requests(model, requests)
        loss = dt.scale(_total(losses), 1.0 / len(losses))
        try:
            dt.backward(loss)
            opt.lr = lr_at(cfg.lr, it, cfg.iterations, cfg.warmup, cfg.schedule)
            opt.step(cfg.clip)
        except NumericError:
            model.zero_grad()
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
            raise
        trainlog.append(it, task, loss.item(), time.perf_counter() - t0)
        if snapshot is not None and cfg.snapshot_every and it % cfg.snapshot_every == 0:
            trainlog.snapshots.append({"iteration": it, **snapshot(model)})
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
    return model, trainlog


@dataclass
class Decision:
    log_prob: Tensor
    action: int
    reward: float = 0.0


def _rollout(model: NavModel, world: WorldGraph, ep: EpisodeSpec, instr: Instruction, cfg: TrainConfig, rng, expert: bool) -> list[Decision]:
    goal = ep.path[-1]
    state = start_state(ep)
    d0, _ = shortest_path(world, state.viewpoint, goal)
    history = []
    decisions = []
    while not state.terminal and len(decisions) < cfg.max_steps:
        pano = observe(world, state.viewpoint, state.heading)
        cand = sorted(candidates(world, state))
        out = model.forward(instr, history, pano)
        logp = model.action_log_probs(out.S, out.Z, cand)
        if expert:
            action = expert_action(world, state, goal)
        else:
            probs = np.exp(logp.data)
            action = int(rng.choice(len(probs), p=probs / probs.sum()))
        before, _ = shortest_path(world, state.viewpoint, goal)
        new = step(world, state, action)
        after, _ = shortest_path(world, new.viewpoint, goal)
        reward = (before - after) / d0 if d0 > 0 else 0.0
        if new.terminal and world.distance(new.viewpoint, goal) <= cfg.success_radius:
            reward += 1.0
        decisions.append(Decision(logp[action], action, reward))
        if not new.terminal:
            history.append((pano, slot_angles(action)))
        state = new
    return decisions


def il_loss(model, world, ep, instr, cfg, rng) -> tuple[Tensor, int]:
    """Sum of expert-action negative log-likelihoods along an expert rollout."""
    ds = _rollout(model, world, ep, instr, cfg, rng, expert=True)
    return -_total([d.log_prob for d in ds]), len(ds)


def rl_loss(model, world, ep, instr, cfg, rng) -> tuple[Tensor, float]:
    """Likelihood-ratio policy gradient with a learned scalar baseline (plus its squared error)."""
    ds = _rollout(model, world, ep, instr, cfg, rng, expert=False)
    returns = np.cumsum([d.reward for d in ds][::-1])[::-1]
    b = model["head.baseline"]
    terms = []
    for d, g in zip(ds, returns):
        adv = float(g - b.data[0])
        terms.append(dt.scale(d.log_prob, -adv))
        err = b - float(g)
        terms.append(dt.sum(err * err))
    return _total(terms), float(returns[0]) if len(returns) else 0.0


def finetune(model: NavModel, world: WorldGraph, episodes: Sequence[EpisodeSpec], cfg: TrainConfig) -> tuple[NavModel, TrainLog]:
    """IL pass then RL pass on each batch episode; both gradient sets summed, one update."""
    usable = []
    for ep in episodes:
        try:
            shortest_path(world, ep.path[0], ep.path[-1])
            usable.append(ep)
        except UnreachableError:
            log.warning("skipping episode %s: goal unreachable", ep.id)
    if not usable:
        raise ContractError("no usable episode for fine-tuning")
    instrs = {ep.id: Instruction.from_words(ep.tokens, model.config.max_instruction_len) for ep in usable}
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(model, cfg, cfg.ft_lr)
    trainlog = TrainLog()
    t0 = time.perf_counter()
    for it in range(1, cfg.ft_iterations + 1):
        batch = [usable[int(k)] for k in rng.choice(len(usable), size=min(cfg.ft_batch_size, len(usable)), replace=False)]
        terms = []
        il_total = rl_total = 0.0
        for ep in batch:
            if cfg.il_weight > 0:
                l, _ = il_loss(model, world, ep, instrs[ep.id], cfg, rng)
                il_total += l.item()
                terms.append(dt.scale(l, cfg.il_weight / len(batch)))
            if cfg.rl_weight > 0:
                l, _ = rl_loss(model, world, ep, instrs[ep.id], cfg, rng)
                rl_total += l.item()
                terms.append(dt.scale(l, cfg.rl_weight / len(batch)))
        loss = _total(terms)
        dt.backward(loss)
        opt.lr = lr_at(cfg.ft_lr, it, cfg.ft_iterations, cfg.warmup, cfg.schedule)
        opt.step(cfg.clip)
        wall = time.perf_counter() - t0
        if cfg.il_weight > 0:
            trainlog.append(it, "il", il_total / len(batch), wall)
        if cfg.rl_weight > 0:
            trainlog.append(it, "rl", rl_total / len(batch), wall)
    return model, trainlog


# checkpoints -------------------------------------------------------------------------------

def save_checkpoint(model: NavModel, path) -> None:
    """8-byte little-endian header length, JSON header, then raw float64 arrays."""
    arrays, offset, blobs = [], 0, []
    for name in sorted(model.params):
        a = np.ascontiguousarray(model.params[name].data, dtype="<f8")
        arrays.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"version": CHECKPOINT_VERSION, "config": asdict(model.config), "arrays": arrays}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> NavModel:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ParseError("checkpoint shorter than its length prefix", len(raw))
    (n,) = struct.unpack("<Q", raw[:8])
    if 8 + n > len(raw):
        raise ParseError("checkpoint header is truncated", len(raw))
    try:
        header = json.loads(raw[8 : 8 + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"checkpoint header is not JSON: {exc}", 8) from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {header.get('version')!r}, expected {CHECKPOINT_VERSION!r}")
    config = ModelConfig(**header["config"])
    data = raw[8 + n :]
    params = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start, end = entry["offset"], entry["offset"] + 8 * count
        if end > len(data):
            raise ParseError(f"array {entry['name']} is truncated", 8 + n + len(data))
        params[entry["name"]] = dt.parameter(np.frombuffer(data[start:end], dtype="<f8").reshape(shape).astype(np.float64))
    if set(params) != set(param_shapes(config)):
        raise ParseError("checkpoint arrays do not match the model layout", 8)
    return NavModel(config, params)
