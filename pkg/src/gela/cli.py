"""Command-line entry point: ``gela <subcommand> ...``.

Exit codes: 0 success, 1 validation failure (or failed gradient check),
2 runtime or usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from . import geldata, gradsuite, plots
from .errors import GelaError
from .model import ModelConfig, NavModel
from .trainer import Corpus, TrainConfig, adaptive_pretrain, finetune, load_checkpoint, load_config, save_checkpoint
from .world import EpisodeSpec, WorldGraph, WorldParams, generate_world

log = logging.getLogger("gela")


def _outdir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_config(args) -> TrainConfig:
    from dataclasses import replace

    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "iterations", None):
        cfg = replace(cfg, iterations=args.iterations, ft_iterations=args.iterations)
    return cfg


def _episodes(path, split: str | None = None) -> list[EpisodeSpec]:
    file = geldata.load(path)
    eps = [EpisodeSpec.from_record(r) for r in file.episodes]
    return [e for e in eps if split is None or e.split == split]


def _model_for(world: WorldGraph, seed: int | None) -> NavModel:
    p = world.params
    return NavModel(ModelConfig(view_feature_dim=p.view_feature_dim, n_classes=p.n_classes, seed=seed or 0))


# subcommands -------------------------------------------------------------------------------

def cmd_gen_world(args) -> int:
    params = WorldParams(
        seed=args.seed or 0,
        n_episodes=args.episodes,
        val_episodes=args.val_episodes,
        n_viewpoints=args.viewpoints,
    )
    world, episodes = generate_world(params)
    out = _outdir(args)
    world.save(out / "world.json")
    geldata.save(geldata.from_episode_specs(episodes), out / "episodes.json")
    print(f"wrote {out / 'world.json'} and {out / 'episodes.json'} ({len(episodes)} episodes)")
    return 0


def cmd_validate(args) -> int:
    violations = geldata.validate(geldata.load(args.file))
    for v in violations:
        print(v)
    hard = geldata.hard_violations(violations)
    print(f"{len(hard)} error(s), {len(violations) - len(hard)} warning(s)")
    return 1 if hard else 0


def cmd_stats(args) -> int:
    rows = geldata.stats(geldata.load(args.file), by_split=args.split)
    print(geldata.format_csv(rows) if args.csv else geldata.format_table(rows), end="")
    if args.out:
        path = _outdir(args) / "stats.csv"
        path.write_text(geldata.format_csv(rows))
    return 0


def _snapshot(corpus):
    def snap(model):
        ea = ev.effective_attention(model, corpus).means()
        return {"sap_accuracy": ev.sap_accuracy(model, corpus), "ea_e2l": ea["e2l"], "ea_l2e": ea["l2e"]}

    return snap


def cmd_pretrain(args) -> int:
    cfg = _train_config(args)
    world = WorldGraph.load(args.world)
    model = load_checkpoint(args.init) if args.init else _model_for(world, cfg.seed)
    corpora = [Corpus(world, _episodes(args.data, args.split), model.config, "grounded", cfg.mask_threshold)]
    if args.augmented:
        corpora.append(Corpus(world, _episodes(args.augmented), model.config, "augmented"))
    out = _outdir(args)
    model, trainlog = adaptive_pretrain(model, corpora, cfg, snapshot=_snapshot(corpora[0]), checkpoint_path=out / "model.ckpt")
    save_checkpoint(model, out / "model.ckpt")
    trainlog.write(out / "pretrain")
    series = {}
    for e in trainlog.entries:
        series.setdefault(e.task, []).append((e.iteration, e.loss))
    plots.training_curves(series, out / "pretrain_curves.png")
    print(f"pretrained {cfg.iterations} iterations; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _train_config(args)
    world = WorldGraph.load(args.world)
    model = load_checkpoint(args.ckpt) if args.ckpt else _model_for(world, cfg.seed)
    model, trainlog = finetune(model, world, _episodes(args.data, args.split), cfg)
    out = _outdir(args)
    save_checkpoint(model, out / "policy.ckpt")
    trainlog.write(out / "finetune")
    series = {}
    for e in trainlog.entries:
        series.setdefault(e.task, []).append((e.iteration, e.loss))
    plots.training_curves(series, out / "finetune_curves.png")
    print(f"fine-tuned {cfg.ft_iterations} iterations; checkpoint {out / 'policy.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    world = WorldGraph.load(args.world)
    model = load_checkpoint(args.ckpt)
    episodes = _episodes(args.data, args.split)
    report, _ = ev.evaluate(model, world, episodes, args.step_cap, args.success_radius)
    text = report.to_csv()
    print(text, end="")
    if args.out:
        out = _outdir(args)
        (out / "metrics.csv").write_text(text)
        agg = report.aggregate
        plots.comparison_bars({"model": {k: agg[k] for k in ("SR", "SPL")}}, out / "metrics.png", "navigation")
    return 0


def cmd_ea_report(args) -> int:
    world = WorldGraph.load(args.world)
    model = load_checkpoint(args.ckpt)
    corpus = Corpus(world, _episodes(args.data, args.split), model.config)
    report = ev.effective_attention(model, corpus)
    baseline = ev.effective_attention(load_checkpoint(args.baseline), corpus) if args.baseline else None
    text = ev.ea_report_json(report, baseline)
    print(text, end="")
    if args.out:
        out = _outdir(args)
        (out / "ea_report.json").write_text(text)
        bars = {"model": report.means()}
        if baseline is not None:
            bars["baseline"] = baseline.means()
        plots.comparison_bars({k: {m: v[m] for m in ("e2l", "l2e")} for k, v in bars.items()}, out / "ea_report.png", "effective attention")
    return 0


def cmd_heatmap(args) -> int:
    world = WorldGraph.load(args.world)
    model = load_checkpoint(args.ckpt)
    episodes = {e.id: e for e in _episodes(args.data)}
    if args.episode not in episodes:
        raise GelaError(f"episode {args.episode!r} not found")
    ep = episodes[args.episode]
    record = ev.run_episode(model, world, ep, "greedy", args.step_cap)
    out = _outdir(args)
    prefix = out / f"heatmap_{args.episode}_step{args.step}"
    csv_path, pgm_path = ev.export_attention_heatmap(record, args.step, prefix)
    from .world import VOCAB

    tokens = ["[CLS]"] + [VOCAB[t] for t in ep.tokens] + ["[PAD]"] * (model.config.max_instruction_len - len(ep.tokens))
    plots.attention_heatmap(ev.minmax_normalize(record.attention[args.step]), prefix.with_suffix(".png"), tokens, f"{ep.id} step {args.step}")
    print(csv_path.read_text(), end="")
    return 0


def cmd_grad_check(args) -> int:
    names = gradsuite.OBJECTIVES if args.all or not args.objective else [args.objective]
    seeds = range(args.seed or 0, (args.seed or 0) + args.seeds)
    ok = True
    for name in names:
        reports = [gradsuite.check(name, s, args.tol) for s in seeds]
        passed = all(r.passed for r in reports)
        worst = max(r.max_rel_error for r in reports)
        ok &= passed
        print(f"{name},{'PASS' if passed else 'FAIL'},{len(reports)},{worst:.3e}")
    return 0 if ok else 1


# parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", help="key=value training config file")
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="gela", description="Grounded entity-landmark navigation workbench")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    s = sub.add_parser("gen-world", parents=[common], help="generate a synthetic world and episode corpus")
    s.add_argument("--episodes", type=int, default=200)
    s.add_argument("--val-episodes", type=int, default=0)
    s.add_argument("--viewpoints", type=int, default=42)
    s.set_defaults(func=cmd_gen_world)

    s = sub.add_parser("validate", parents=[common], help="check annotation rules")
    s.add_argument("file")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("stats", parents=[common], help="per-split corpus statistics (P/I, B/I, P/B)")
    s.add_argument("file")
    s.add_argument("--split", action="store_true", help="one row per split")
    s.add_argument("--csv", action="store_true", help="print CSV instead of a table")
    s.set_defaults(func=cmd_stats)

    def data_args(s, ckpt_required=False):
        s.add_argument("--world", required=True, help="world.json")
        s.add_argument("--data", required=True, help="episode annotation file")
        s.add_argument("--split", default=None, help="restrict to one split")
        s.add_argument("--ckpt", required=ckpt_required, help="model checkpoint")

    s = sub.add_parser("pretrain", parents=[common], help="adaptive pre-training")
    data_args(s)
    s.add_argument("--augmented", help="extra episodes used only by the proxy tasks")
    s.add_argument("--init", help="checkpoint to start from")
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="IL + RL fine-tuning")
    data_args(s)
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_finetune)

    for name, func in (("eval", cmd_eval), ("ea-report", cmd_ea_report)):
        s = sub.add_parser(name, parents=[common], help="navigation metrics" if name == "eval" else "effective attention report")
        data_args(s, ckpt_required=True)
        s.add_argument("--step-cap", type=int, default=15)
        s.add_argument("--success-radius", type=float, default=3.0)
        if name == "ea-report":
            s.add_argument("--baseline", help="checkpoint to compare against")
        s.set_defaults(func=func)

    s = sub.add_parser("heatmap", parents=[common], help="export one step's cross-attention")
    data_args(s, ckpt_required=True)
    s.add_argument("--episode", required=True)
    s.add_argument("--step", type=int, default=0)
    s.add_argument("--step-cap", type=int, default=15)
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the objectives")
    s.add_argument("--all", action="store_true")
    s.add_argument("--objective", choices=gradsuite.OBJECTIVES)
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (GelaError, OSError, KeyError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
