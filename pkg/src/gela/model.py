"""Miniature four-encoder navigation transformer.

Language, history and vision encoders feed an LXMERT-style cross-modal
encoder whose outputs are the text sequence ``Z`` (row 0 is the
classification token), the history sequence ``Y`` (row 0 is the global slot)
and the visual state ``S`` (36 views plus the stop slot in row 36).
All prediction heads used by the training objectives live in the same
parameter dictionary so a checkpoint captures the whole model.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import difftensor as dt
from .difftensor import Tensor
from .errors import LengthError, ShapeError

PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
N_VIEWS = 36
N_SLOTS = N_VIEWS + 1
STOP_SLOT = N_VIEWS
HEADINGS = 12
ELEVATIONS = (-math.pi / 6, 0.0, math.pi / 6)
MASK_NEG = -1e30


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers_text: int = 2
    n_layers_cross: int = 2
    n_heads: int = 4
    max_instruction_len: int = 24
    view_feature_dim: int = 16
    ffn_hidden: int = 128
    seed: int = 0
    n_layers_history: int = 1
    max_history: int = 24
    n_classes: int = 8

    def __post_init__(self):
        counts = {k: v for k, v in asdict(self).items() if k not in ("seed", "n_layers_cross")}
        bad = [k for k, v in counts.items() if v < 1]
        if bad or self.n_layers_cross < 0:
            raise ValueError(f"ModelConfig counts must be >= 1: {bad or ['n_layers_cross']}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def text_len(self) -> int:
        return self.max_instruction_len + 1


@dataclass
class Instruction:
    """Token ids with the classification token at position 0.

    ``mask`` is 1 for real tokens and 0 for padding.
    """

    tokens: list[int]
    mask: list[int] | None = None

    def __post_init__(self):
        self.tokens = [int(t) for t in self.tokens]
        if self.mask is None:
            self.mask = [0 if t == PAD_ID else 1 for t in self.tokens]
        if len(self.mask) != len(self.tokens):
            raise ShapeError(f"mask length {len(self.mask)} != token length {len(self.tokens)}")

    @classmethod
    def from_words(cls, word_ids: Sequence[int], max_len: int | None = None) -> "Instruction":
        """Prefix the classification token and pad to ``max_len + 1`` slots."""
        tokens = [CLS_ID] + [int(w) for w in word_ids]
        if max_len is not None:
            if len(word_ids) > max_len:
                raise LengthError(f"instruction has {len(word_ids)} tokens, limit is {max_len}")
            pad = max_len + 1 - len(tokens)
            return cls(tokens + [PAD_ID] * pad, [1] * len(tokens) + [0] * pad)
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def with_tokens(self, tokens: Sequence[int]) -> "Instruction":
        return Instruction(list(tokens), list(self.mask))


@dataclass
class Panorama:
    """36 views ordered elevation-major: index = elevation_row * 12 + heading_col."""

    features: np.ndarray
    headings: np.ndarray = field(default_factory=lambda: view_headings())
    elevations: np.ndarray = field(default_factory=lambda: view_elevations())
    angle_dropped: np.ndarray | None = None  # views whose orientation input is zeroed

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.headings = np.asarray(self.headings, dtype=np.float64)
        self.elevations = np.asarray(self.elevations, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != N_VIEWS:
            raise ShapeError(f"panorama needs {N_VIEWS} views, got feature shape {self.features.shape}")
        if self.headings.shape != (N_VIEWS,) or self.elevations.shape != (N_VIEWS,):
            raise ShapeError("panorama orientation arrays must have 36 entries")

    def orientation_features(self) -> np.ndarray:
        return orientation_features(self.headings, self.elevations)

    def inputs(self) -> np.ndarray:
        orient = self.orientation_features()
        if self.angle_dropped is not None:
            orient = orient * (~np.asarray(self.angle_dropped, dtype=bool))[:, None]
        return np.concatenate([self.features, orient], axis=1)


def view_headings() -> np.ndarray:
    return np.tile(np.arange(HEADINGS) * (2 * math.pi / HEADINGS), len(ELEVATIONS))


def view_elevations() -> np.ndarray:
    return np.repeat(np.array(ELEVATIONS), HEADINGS)


def orientation_features(heading, elevation) -> np.ndarray:
    heading = np.asarray(heading, dtype=np.float64)
    elevation = np.asarray(elevation, dtype=np.float64)
    return np.stack([np.sin(heading), np.cos(heading), np.sin(elevation), np.cos(elevation)], axis=-1)


@dataclass
class EncoderOutputs:
    Z: Tensor
    Y: Tensor
    S: Tensor
    text_to_visual: np.ndarray | None = None
    visual_to_text: np.ndarray | None = None

    @property
    def z_cls(self) -> Tensor:
        return self.Z[0]

    @property
    def h_cls(self) -> Tensor:
        return self.Y[0]

    def text_to_panorama(self) -> np.ndarray:
        """Head-averaged text->view attention restricted to the 37 panorama slots.

        Rows are renormalised over those slots so each row sums to one.
        """
        if self.text_to_visual is None:
            raise ValueError("no cross-attention recorded (n_layers_cross = 0)")
        a = self.text_to_visual.mean(axis=0)[:, -N_SLOTS:]
        return a / a.sum(axis=1, keepdims=True)

    def panorama_to_text(self) -> np.ndarray:
        if self.visual_to_text is None:
            raise ValueError("no cross-attention recorded (n_layers_cross = 0)")
        return self.visual_to_text.mean(axis=0)[-N_SLOTS:, :]


HistoryStep = tuple  # (Panorama, (heading, elevation) of the action taken)


class NavModel:
    """Parameters plus the forward passes of every encoder and head."""

    def __init__(self, config: ModelConfig | None = None, params: dict[str, Tensor] | None = None):
        self.config = config or ModelConfig()
        self.params = params if params is not None else init_params(self.config)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "NavModel":
        return NavModel(self.config, {k: dt.parameter(v.data.copy()) for k, v in self.params.items()})

    # encoders -----------------------------------------------------------------------

    def encode_instruction(self, instr: Instruction) -> Tensor:
        return self._encode_text([instr])[0]

    def encode_observation(self, pano: Panorama) -> Tensor:
        return self._encode_obs([pano])[0]

    def encode_history(self, steps: Sequence[HistoryStep]) -> Tensor:
        return self._encode_hist([steps])[0][0]

    def _encode_text(self, instrs: Sequence[Instruction]) -> Tensor:
        cfg = self.config
        n = len(instrs[0].tokens)
        for instr in instrs:
            if len(instr.tokens) > cfg.text_len:
                raise LengthError(f"instruction has {len(instr.tokens)} slots, limit is {cfg.text_len}")
            if len(instr.tokens) != n:
                raise ShapeError("instructions in one batch must share a padded length")
            if max(instr.tokens) >= cfg.vocab_size or min(instr.tokens) < 0:
                raise ShapeError(f"token ids must lie in [0, {cfg.vocab_size})")
        p = self.params
        tokens = np.array([i.tokens for i in instrs])
        x = dt.embedding(p["text.tok"], tokens) + dt.embedding(p["text.pos"], np.arange(n))
        x = _affine_ln(x, p, "text.ln")
        key_mask = _key_mask(np.array([i.mask for i in instrs]))
        for i in range(cfg.n_layers_text):
            x = _self_layer(x, p, f"text.l{i}", cfg.n_heads, key_mask)
        return x

    def _encode_obs(self, panos: Sequence[Panorama]) -> Tensor:
        for pano in panos:
            if not isinstance(pano, Panorama):
                raise ShapeError("encode_observation needs a Panorama")
            if pano.features.shape[1] != self.config.view_feature_dim:
                raise ShapeError(f"view feature dim {pano.features.shape[1]} != {self.config.view_feature_dim}")
        p = self.params
        x = _linear(Tensor(np.stack([pano.inputs() for pano in panos])), p, "obs.proj")
        x = _affine_ln(x, p, "obs.ln")
        stop = dt.reshape(p["obs.stop"], (1, -1)) + np.zeros((len(panos), 1, self.config.d_model))
        return dt.concat([x, stop], axis=1)

    def _encode_hist(self, batch: Sequence[Sequence[HistoryStep]]) -> tuple[Tensor, np.ndarray]:
        """Padded history encodings (B, T+1, d) and the key mask of real rows."""
        cfg = self.config
        p = self.params
        lens = [len(steps) for steps in batch]
        B, T = len(batch), max(lens)
        if T > cfg.max_history:
            raise LengthError(f"history of {T} steps exceeds max_history {cfg.max_history}")
        mask = np.zeros((B, T + 1))
        for b, t in enumerate(lens):
            mask[b, : t + 1] = 1.0
        h_cls = dt.reshape(p["hist.cls"], (1, -1)) + np.zeros((B, 1, cfg.d_model))
        if T == 0:
            x = h_cls
        else:
            views = np.zeros((B, T, N_VIEWS, cfg.view_feature_dim + 4))
            acts = np.zeros((B, T, 4))
            for b, steps in enumerate(batch):
                for i, (pano, a) in enumerate(steps):
                    views[b, i] = pano.inputs()
                    acts[b, i] = orientation_features(a[0], a[1])
            v = _affine_ln(_linear(Tensor(views), p, "hist.view"), p, "hist.view_ln")
            scores = dt.scale(v @ p["hist.query"], 1.0 / math.sqrt(cfg.d_model))
            w = dt.reshape(dt.softmax(scores), (B, T, 1, N_VIEWS))
            pooled = dt.reshape(w @ v, (B, T, cfg.d_model))
            step = pooled + _linear(Tensor(acts), p, "hist.act") + dt.embedding(p["hist.pos"], np.arange(T))
            x = dt.concat([h_cls, _affine_ln(step, p, "hist.ln")], axis=1)
        key_mask = _key_mask(mask)
        for i in range(cfg.n_layers_history):
            x = _self_layer(x, p, f"hist.l{i}", cfg.n_heads, key_mask)
        return x, mask

    def cross_modal_encode(self, text_emb: Tensor, text_mask, history_emb: Tensor, obs_emb: Tensor) -> EncoderOutputs:
        """Single-sample cross-modal pass over unpadded encoder outputs."""
        if obs_emb.shape[0] != N_SLOTS:
            raise ShapeError(f"observation embedding must have {N_SLOTS} rows, got {obs_emb.shape}")
        t1 = history_emb.shape[0]
        return self._cross(
            dt.reshape(text_emb, (1,) + text_emb.shape),
            np.asarray(text_mask, dtype=float).reshape(1, -1),
            dt.reshape(history_emb, (1,) + history_emb.shape),
            np.ones((1, t1)),
            dt.reshape(obs_emb, (1,) + obs_emb.shape),
        )[0]

    def _cross(self, txt: Tensor, text_mask: np.ndarray, hist: Tensor, hist_mask: np.ndarray, obs: Tensor) -> list[EncoderOutputs]:
        cfg = self.config
        B, t1 = hist_mask.shape
        rows = [int(r) for r in hist_mask.sum(axis=1)]
        if cfg.n_layers_cross == 0:
            return [EncoderOutputs(txt[b], hist[b, : rows[b]], obs[b]) for b in range(B)]
        p = self.params
        vis = dt.concat([hist, obs], axis=1)
        text_key_mask = _key_mask(text_mask)
        vis_key_mask = _key_mask(np.concatenate([hist_mask, np.ones((B, N_SLOTS))], axis=1))
        a_tv = a_vt = None
        for i in range(cfg.n_layers_cross):
            pre = f"cross.l{i}"
            t_att, a_tv = _attention(txt, vis, p, f"{pre}.t2v", cfg.n_heads, vis_key_mask)
            v_att, a_vt = _attention(vis, txt, p, f"{pre}.v2t", cfg.n_heads, text_key_mask)
            txt = _affine_ln(txt + t_att, p, f"{pre}.t_ln1")
            vis = _affine_ln(vis + v_att, p, f"{pre}.v_ln1")
            txt = _self_layer(txt, p, f"{pre}.t_self", cfg.n_heads, text_key_mask)
            vis = _self_layer(vis, p, f"{pre}.v_self", cfg.n_heads, vis_key_mask)
        return [
            EncoderOutputs(
                Z=txt[b],
                Y=vis[b, : rows[b]],
                S=vis[b, t1:],
                text_to_visual=a_tv[b],
                visual_to_text=a_vt[b],
            )
            for b in range(B)
        ]

    def forward(self, instr: Instruction, history: Sequence[HistoryStep], pano: Panorama) -> EncoderOutputs:
        return self.forward_batch([instr], [history], [pano])[0]

    def forward_batch(self, instrs: Sequence[Instruction], histories: Sequence[Sequence[HistoryStep]], panos: Sequence[Panorama]) -> list[EncoderOutputs]:
        """One padded pass over several samples; per-sample outputs match ``forward``."""
        if not (len(instrs) == len(histories) == len(panos)) or not instrs:
            raise ShapeError("forward_batch needs equally many instructions, histories and panoramas")
        lengths = sorted({len(i.tokens) for i in instrs})
        if len(lengths) > 1:
            outs: list = [None] * len(instrs)
            for n in lengths:
                idx = [k for k, i in enumerate(instrs) if len(i.tokens) == n]
                for k, o in zip(idx, self.forward_batch([instrs[k] for k in idx], [histories[k] for k in idx], [panos[k] for k in idx])):
                    outs[k] = o
            return outs
        hist, hist_mask = self._encode_hist(histories)
        return self._cross(
            self._encode_text(instrs),
            np.array([i.mask for i in instrs], dtype=float),
            hist,
            hist_mask,
            self._encode_obs(panos),
        )

    # heads -----------------------------------------------------------------------------

    def head(self, name: str, x: Tensor) -> Tensor:
        """Two-layer feed-forward head ``W2 gelu(W1 x + b1) + b2``."""
        return _linear(dt.gelu(_linear(x, self.params, f"head.{name}.1")), self.params, f"head.{name}.2")

    def action_log_probs(self, S: Tensor, Z: Tensor, candidates: Sequence[int]) -> Tensor:
        """Log-probabilities over the 37 slots; non-candidates get log-prob -1e30."""
        if S.shape[0] != N_SLOTS:
            raise ShapeError(f"S must have {N_SLOTS} rows, got {S.shape}")
        cand = sorted(set(int(c) for c in candidates) | {STOP_SLOT})
        scores = dt.reshape(self.head("sap", S * Z[0]), (N_SLOTS,))
        additive = np.full(N_SLOTS, MASK_NEG)
        additive[cand] = 0.0
        return dt.log_softmax(scores + additive)

    def predict_action(self, S: Tensor, Z: Tensor, candidates: Sequence[int]) -> Tensor:
        logp = self.action_log_probs(S, Z, candidates)
        cand = sorted(set(int(c) for c in candidates) | {STOP_SLOT})
        keep = np.zeros(N_SLOTS)
        keep[cand] = 1.0
        return dt.exp(logp) * keep

    def itm_score(self, out: EncoderOutputs) -> Tensor:
        p = self.params
        return dt.reshape(out.z_cls @ (p["head.itm.w"] @ out.h_cls), (1,)) + p["head.itm.b"]


# building blocks -------------------------------------------------------------------------

def _key_mask(mask: np.ndarray) -> np.ndarray | None:
    """Additive key mask (B, m) from a 0/1 mask; ``None`` when nothing is masked."""
    m = np.asarray(mask)
    if m.all():
        return None
    return np.where(m > 0, 0.0, MASK_NEG)


def _linear(x: Tensor, p, name: str) -> Tensor:
    return x @ p[f"{name}.w"] + p[f"{name}.b"]


def _affine_ln(x: Tensor, p, name: str) -> Tensor:
    return dt.layer_norm(x) * p[f"{name}.g"] + p[f"{name}.b"]


def _attention(q_in: Tensor, kv_in: Tensor, p, name: str, n_heads: int, key_mask):
    """Multi-head attention over batched rows: (B, n, d) x (B, m, d)."""
    B, n, d = q_in.shape
    m = kv_in.shape[1]
    dh = d // n_heads

    def heads(x, rows):
        return dt.transpose(dt.reshape(x, (B, rows, n_heads, dh)), (0, 2, 1, 3))

    q = heads(_linear(q_in, p, f"{name}.q"), n)
    k = heads(_linear(kv_in, p, f"{name}.k"), m)
    v = heads(_linear(kv_in, p, f"{name}.v"), m)
    scores = dt.scale(q @ dt.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    if key_mask is not None:
        scores = scores + np.broadcast_to(key_mask[:, None, None, :], scores.shape)
    attn = dt.softmax(scores)
    ctx = dt.reshape(dt.transpose(attn @ v, (0, 2, 1, 3)), (B, n, d))
    return _linear(ctx, p, f"{name}.o"), attn.data


def _self_layer(x: Tensor, p, name: str, n_heads: int, key_mask) -> Tensor:
    att, _ = _attention(x, x, p, f"{name}.att", n_heads, key_mask)
    x = _affine_ln(x + att, p, f"{name}.ln1")
    ff = _linear(dt.gelu(_linear(x, p, f"{name}.ff1")), p, f"{name}.ff2")
    return _affine_ln(x + ff, p, f"{name}.ln2")


# parameters ------------------------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.ffn_hidden
    shapes: dict[str, tuple[int, ...]] = {}

    def lin(name, fan_in, fan_out):
        shapes[f"{name}.w"] = (fan_in, fan_out)
        shapes[f"{name}.b"] = (fan_out,)

    def ln(name):
        shapes[f"{name}.g"] = (d,)
        shapes[f"{name}.b"] = (d,)

    def attn(name):
        for part in "qkvo":
            lin(f"{name}.{part}", d, d)

    def self_layer(name):
        attn(f"{name}.att")
        ln(f"{name}.ln1")
        lin(f"{name}.ff1", d, f)
        lin(f"{name}.ff2", f, d)
        ln(f"{name}.ln2")

    shapes["text.tok"] = (cfg.vocab_size, d)
    shapes["text.pos"] = (cfg.text_len, d)
    ln("text.ln")
    for i in range(cfg.n_layers_text):
        self_layer(f"text.l{i}")

    view_in = cfg.view_feature_dim + 4
    lin("obs.proj", view_in, d)
    ln("obs.ln")
    shapes["obs.stop"] = (d,)

    shapes["hist.cls"] = (d,)
    lin("hist.view", view_in, d)
    ln("hist.view_ln")
    shapes["hist.query"] = (d,)
    lin("hist.act", 4, d)
    shapes["hist.pos"] = (cfg.max_history, d)
    ln("hist.ln")
    for i in range(cfg.n_layers_history):
        self_layer(f"hist.l{i}")

    for i in range(cfg.n_layers_cross):
        pre = f"cross.l{i}"
        attn(f"{pre}.t2v")
        attn(f"{pre}.v2t")
        ln(f"{pre}.t_ln1")
        ln(f"{pre}.v_ln1")
        self_layer(f"{pre}.t_self")
        self_layer(f"{pre}.v_self")

    heads = {
        "sap": (d, 1),
        "epp": (d, cfg.text_len),
        "lbp": (d, 4),
        "mlm": (d, cfg.vocab_size),
        "mrc": (d, cfg.n_classes),
        "sprel": (2 * d, 2),
    }
    for name, (fan_in, fan_out) in heads.items():
        lin(f"head.{name}.1", fan_in, f)
        lin(f"head.{name}.2", f, fan_out)
    shapes["head.itm.w"] = (d, d)
    shapes["head.itm.b"] = (1,)
    shapes["head.baseline"] = (1,)
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf == "b" or name == "head.baseline":
            arr = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 and leaf == "w" else shape[-1]
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = dt.parameter(arr)
    return params
