"""Seeded desk-scale experiments behind the acceptance checks.

``overfit`` trains the three grounding objectives on a small corpus and
reports how far L_GELA, EPP accuracy and LBP IoU move.  ``directional`` trains
a proxy-only baseline and a GELA model from the same initialisation on the
same data and compares held-out SAP accuracy and effective attention.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

from . import evaluation as ev
from .model import ModelConfig, NavModel
from .trainer import GELA_TASKS, PROXY_TASKS, Corpus, TrainConfig, adaptive_pretrain
from .world import WorldParams, generate_world


@dataclass
class OverfitResult:
    initial: ev.GroundingReport
    final: ev.GroundingReport
    seconds: float

    @property
    def loss_ratio(self) -> float:
        return self.final.gela_loss / self.initial.gela_loss


def overfit_config(seed: int = 0, iterations: int = 4500) -> TrainConfig:
    return TrainConfig(
        seed=seed,
        iterations=iterations,
        lr=5e-4,
        batch_size=8,
        warmup=200,
        schedule="linear",
        mix={"epp": 1.0, "lbp": 3.0, "elsa": 1.0},
    )


def overfit(seed: int = 0, n_episodes: int = 50, cfg: TrainConfig | None = None) -> OverfitResult:
    """Adaptive pre-training on the grounding tasks only, measured on its own training set."""
    world, episodes = generate_world(WorldParams(seed=seed, n_episodes=n_episodes))
    model = NavModel(ModelConfig(seed=seed))
    corpus = Corpus(world, episodes, model.config)
    t0 = time.perf_counter()
    initial = ev.grounding_metrics(model, corpus)
    adaptive_pretrain(model, [corpus], cfg or overfit_config(seed))
    final = ev.grounding_metrics(model, corpus)
    return OverfitResult(initial, final, time.perf_counter() - t0)


@dataclass
class DirectionalResult:
    sap_baseline: float
    sap_gela: float
    ea_baseline: ev.EAReport
    ea_gela: ev.EAReport
    comparison: dict
    seconds: float
    config: dict = field(default_factory=dict)


GROUNDING_MIX = {"epp": 1.0, "lbp": 3.0, "elsa": 1.0}


def directional_config(seed: int = 0, iterations: int = 1500) -> TrainConfig:
    """Baseline schedule; the GELA arm is derived from it by ``gela_arm``."""
    return TrainConfig(
        seed=seed,
        iterations=iterations,
        lr=5e-4,
        batch_size=8,
        warmup=100,
        schedule="linear",
        mix={t: (1.0 if t in PROXY_TASKS else 0.0) for t in PROXY_TASKS + GELA_TASKS},
    )


def gela_arm(cfg: TrainConfig, grounding: dict | None = None) -> TrainConfig:
    """Add the grounding tasks on top of ``cfg`` while keeping the expected proxy-task updates fixed.

    Proxy weights are kept, grounding weights are added, and the iteration
    count (and warmup) grow by the ratio of total to proxy weight.
    """
    grounding = GROUNDING_MIX if grounding is None else grounding
    proxy = {t: cfg.mix.get(t, 0.0) for t in PROXY_TASKS}
    mix = {**proxy, **grounding}
    scale = sum(mix.values()) / sum(proxy.values())
    return replace(cfg, mix=mix, iterations=round(cfg.iterations * scale), warmup=round(cfg.warmup * scale))


def directional(seed: int = 0, n_train: int = 80, n_heldout: int = 40, cfg: TrainConfig | None = None) -> DirectionalResult:
    """Proxy-only baseline versus proxy + grounding tasks from the same initialisation on the same data.

    Both arms perform the same expected number of proxy-task updates; the GELA
    arm additionally trains EPP, LBP and ELSA.  Held-out SAP accuracy and
    entity-to-landmark EA are compared.
    """
    world, episodes = generate_world(WorldParams(seed=seed, n_episodes=n_train + n_heldout, val_episodes=n_heldout))
    model_cfg = ModelConfig(seed=seed)
    train = Corpus(world, [e for e in episodes if e.split == "train"], model_cfg)
    held = Corpus(world, [e for e in episodes if e.split != "train"], model_cfg)
    cfg = cfg or directional_config(seed)
    t0 = time.perf_counter()
    runs = {}
    for name, run_cfg in (("baseline", cfg), ("gela", gela_arm(cfg))):
        model, _ = adaptive_pretrain(NavModel(model_cfg), [train], run_cfg)
        runs[name] = (ev.sap_accuracy(model, held), ev.effective_attention(model, held))
    (sap_b, ea_b), (sap_g, ea_g) = runs["baseline"], runs["gela"]
    return DirectionalResult(
        sap_b, sap_g, ea_b, ea_g, ev.compare_ea(ea_g.e2l, ea_b.e2l), time.perf_counter() - t0, asdict(cfg)
    )
