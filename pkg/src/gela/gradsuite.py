"""Finite-difference checks of all eight objectives on small seeded instances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import difftensor as dt
from . import objectives as obj
from .model import N_SLOTS, N_VIEWS, STOP_SLOT, Instruction, ModelConfig, NavModel, Panorama

OBJECTIVES = ("epp", "lbp", "elsa", "mlm", "mrc", "itm", "sap", "sprel")

SMALL = ModelConfig(
    vocab_size=32,
    d_model=8,
    n_layers_text=1,
    n_layers_cross=1,
    n_heads=2,
    max_instruction_len=7,
    view_feature_dim=6,
    ffn_hidden=12,
    n_layers_history=1,
    max_history=4,
    n_classes=4,
)

HEADS = {
    "epp": ("head.epp",),
    "lbp": ("head.lbp",),
    "elsa": (),
    "mlm": ("head.mlm",),
    "mrc": ("head.mrc",),
    "itm": ("head.itm",),
    "sap": ("head.sap",),
    "sprel": ("head.sprel",),
}


@dataclass
class Case:
    loss: Callable[[], dt.Tensor]
    params: list[dt.Tensor]


def _pano(rng, cfg) -> Panorama:
    return Panorama(rng.normal(size=(N_VIEWS, cfg.view_feature_dim)))


def _instr(rng, cfg) -> Instruction:
    n = int(rng.integers(3, cfg.max_instruction_len + 1))
    return Instruction.from_words(rng.integers(4, cfg.vocab_size, size=n).tolist(), cfg.max_instruction_len)


def _history(rng, cfg, n) -> list:
    return [(_pano(rng, cfg), (float(rng.uniform(0, 6.28)), float(rng.choice([-0.52, 0.0, 0.52])))) for _ in range(n)]


def _masks(rng, instr: Instruction, cfg):
    real = int(sum(instr.mask)) - 1
    s = int(rng.integers(1, real + 1))
    e = int(min(real + 1, s + rng.integers(1, 3)))
    m_z = np.zeros(cfg.text_len)
    m_z[s:e] = 1.0
    m_s = np.zeros(N_SLOTS)
    m_s[rng.choice(N_VIEWS, size=int(rng.integers(1, 5)), replace=False)] = 1.0
    return m_s, m_z


def build_case(name: str, seed: int, cfg: ModelConfig = SMALL) -> Case:
    """A scalar loss closure over a freshly initialised small model."""
    rng = np.random.default_rng([seed, OBJECTIVES.index(name)])
    model = NavModel(ModelConfig(**{**cfg.__dict__, "seed": seed}))
    instr = _instr(rng, cfg)
    history = _history(rng, cfg, int(rng.integers(0, 3)))
    pano = _pano(rng, cfg)
    m_s, m_z = _masks(rng, instr, cfg)
    head = lambda n: (lambda x: model.head(n, x))  # noqa: E731
    call_seed = int(rng.integers(1 << 30))

    if name == "epp":
        loss = lambda: obj.epp_loss(model.forward(instr, history, pano).S, m_s, m_z, head("epp"), instr.mask)  # noqa: E731
    elif name == "lbp":
        box = (rng.uniform(0.2, 0.8), rng.uniform(0.3, 0.7), rng.uniform(0.05, 0.3), rng.uniform(0.1, 0.4))
        loss = lambda: obj.lbp_loss(model.forward(instr, history, pano).Z, m_z, box, head("lbp"))[0]  # noqa: E731
    elif name == "elsa":
        pairs = [(int(i), int(j)) for i in np.flatnonzero(m_s) for j in np.flatnonzero(m_z)]

        def loss():
            out = model.forward(instr, history, pano)
            return obj.elsa_loss(out.Z, out.S, pairs, 0.07, instr.mask)
    elif name == "mlm":
        masked, pos, orig = obj.mask_tokens(instr, np.random.default_rng(call_seed))
        loss = lambda: obj.mlm_loss(model, masked, pos, orig, history, pano)  # noqa: E731
    elif name == "mrc":
        zeroed, idx = obj.zero_views(pano, np.random.default_rng(call_seed))
        logits = rng.normal(size=(N_VIEWS, cfg.n_classes))
        targets = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        loss = lambda: obj.mrc_loss(model, instr, history, zeroed, idx, targets)  # noqa: E731
    elif name == "itm":
        positive = _history(rng, cfg, 3)
        others = [_history(rng, cfg, 2), _history(rng, cfg, 3)]
        loss = lambda: obj.itm_loss(model, instr, positive, others, np.random.default_rng(call_seed))  # noqa: E731
    elif name == "sap":
        cand = sorted(int(c) for c in rng.choice(N_VIEWS, size=3, replace=False))
        expert = int(rng.choice(cand + [STOP_SLOT]))

        def loss():
            out = model.forward(instr, history, pano)
            return obj.sap_loss(model.action_log_probs(out.S, out.Z, cand), expert, cand)
    elif name == "sprel":
        loss = lambda: obj.sprel_example(model, instr, history, pano, np.random.default_rng(call_seed))  # noqa: E731
    else:
        raise KeyError(f"unknown objective {name!r}")
    return Case(loss, _probe_params(model, name, rng))


def _probe_params(model: NavModel, name: str, rng, n_body: int = 10) -> list[dt.Tensor]:
    """The objective's head tensors plus a random sample of encoder tensors."""
    heads = [k for k in sorted(model.params) if any(k.startswith(h) for h in HEADS[name])]
    body = [k for k in sorted(model.params) if not k.startswith("head.")]
    picked = [body[i] for i in sorted(rng.choice(len(body), size=min(n_body, len(body)), replace=False))]
    return [model.params[k] for k in heads + picked]


def check(name: str, seed: int, tol: float = 1e-4, max_coords: int = 2) -> dt.GradCheckReport:
    case = build_case(name, seed)
    return dt.grad_check(lambda _: case.loss(), case.params, tol=tol, max_coords=max_coords, rng=np.random.default_rng(seed))


def run_suite(names=OBJECTIVES, seeds=range(20), tol: float = 1e-4) -> dict[str, list[dt.GradCheckReport]]:
    return {n: [check(n, s, tol) for s in seeds] for n in names}
