"""Command-line entry points: ``bosa <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import agent, augment, dataset, density, envs, harness, metrics

log = logging.getLogger("bosa")


def _gen_data(a) -> int:
    overrides = {"mass_scale": a.mass_scale, "joint_noise": a.joint_noise, "actuator_gain": a.actuator_gain}
    spec = envs.make_spec(a.family, **overrides)
    data = dataset.collect(spec, envs.BehaviorSpec(a.tier, a.noise_std), a.n, a.seed, a.tag)
    if a.fraction < 1.0:
        data = dataset.subsample(data, a.fraction, a.seed)
    data.save(a.out)
    print(f"{a.out}: {len(data)} transitions, sha256 {data.content_hash()[:16]}")
    return 0


def _mix(a) -> int:
    m = dataset.mix(dataset.OfflineDataset.load(a.target), dataset.OfflineDataset.load(a.source))
    m.save(a.out)
    print(f"{a.out}: {m.tag_counts()}")
    return 0


def _train_density(a) -> int:
    data = dataset.OfflineDataset.load(a.data)
    cfg = density.DensityConfig(hidden_dim=a.hidden, depth=a.depth, iterations=a.iterations, ensemble_size=a.k, kl_weight=a.kl_weight)
    rng = np.random.default_rng(a.seed)
    out = Path(a.out)
    if a.role == "behavior":
        model = density.fit_behavior(data, cfg, rng)
        density.save_cvae(model, out, "behavior")
    else:
        ens = density.fit_transition_ensemble(data, cfg, rng)
        density.save_ensemble(ens, out)
    print(f"{a.role} density written to {out}")
    return 0


def _augment(a) -> int:
    data = dataset.OfflineDataset.load(a.data)
    rng = np.random.default_rng(a.seed)
    if a.mode == "noise":
        amp = a.amplitude if a.amplitude is not None else a.amplitude_scale * augment.natural_next_state_scale(data)
        out = augment.noise_augment(data, augment.NoiseSpec(amp), a.n, rng)
    else:
        cfg = density.DensityConfig(hidden_dim=a.hidden)
        r_fit, r_gen = rng.spawn(2)
        model = augment.fit_pseudo_model(data, cfg, a.model_budget, r_fit)
        out = augment.model_augment(data, model, a.n, r_gen)
    out.save(a.out)
    print(f"{a.out}: {len(out)} generated transitions")
    return 0


def _train(a) -> int:
    cfg = harness.load_config(a.config)
    if a.steps is not None:
        cfg = replace(cfg, steps=a.steps)
    cfg = replace(cfg, variants=[a.variant], seeds=[a.seed], train_on=[a.train_on], sweep={})
    cache = harness.Cache(cfg.output_dir)
    data = harness.build_datasets(cfg, cache)
    dens = harness.build_densities(cfg, data, cache)
    ds = data.by_name(a.train_on)
    acfg = cfg.agent_config(a.variant)
    rng = np.random.default_rng([a.seed, 7])
    r_init, r_filter, r_train, r_eval = rng.spawn(4)
    ac = agent.init_state(ds.state_dim, ds.action_dim, acfg, r_init, ds.state_mean, ds.state_std)
    support = None
    if acfg.uses_filter:
        support = agent.SupportFilter(dens.transition, acfg.transition_threshold, ds, acfg.filter_samples, int(r_filter.integers(2**31)))
    out = Path(a.out)
    agent.train(
        ac, acfg, agent.TrainingData.from_mix(ds), dens.behavior.get(a.train_on), support, cfg.steps, r_train,
        log_path=out / "diagnostics.csv", checkpoint_dir=out / "checkpoints",
    )
    agent.save_state(ac, out / "final")
    res = metrics.evaluate(ac, envs.make_spec(cfg.family, **cfg.target_env), cfg.eval_episodes, r_eval, a.seed, a.variant, a.train_on)
    (out / "eval.json").write_text(json.dumps(metrics.result_to_dict(res), sort_keys=True, indent=1))
    print(f"{a.variant} seed {a.seed}: normalized score {res.score:.2f}")
    return 0


def _report(a) -> int:
    runs = sorted(Path(a.runs).rglob("eval.json"))
    if not runs:
        print(f"no eval.json files under {a.runs}", file=sys.stderr)
        return 1
    results = [metrics.result_from_dict(json.loads(p.read_text())) for p in runs]
    out = Path(a.out)
    metrics.write_report(results, out / "report.csv")
    deltas = harness.transfer_summary(results)
    if deltas:
        metrics.write_deltas(deltas, out / "deltas.csv")
        metrics.scatter_svg(deltas, out / "deltas.svg")
    print(f"report for {len(results)} runs written to {out}")
    return 0


def _run(a) -> int:
    cfg = harness.load_config(a.config)
    if not a.resume:
        harness.clear_runs(cfg.output_dir)
    try:
        report = harness.run_pipeline(cfg, jobs=a.jobs)
    except (harness.StageError, harness.ProvenanceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    for (label, ds), (m, s) in sorted(harness.group_scores(report.results).items()):
        print(f"{label:40s} {ds:12s} {m:8.2f} +- {s:.2f}")
    print(f"cache hits {report.cache_hits}, misses {report.cache_misses}; outputs in {report.output_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bosa", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="collect an offline dataset from a scripted behavior tier")
    g.add_argument("--family", default=envs.POINT_MASS, choices=sorted(envs.FAMILIES))
    g.add_argument("--tier", default="medium", choices=envs.TIERS)
    g.add_argument("--n", type=int, default=100_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mass-scale", type=float, default=1.0)
    g.add_argument("--joint-noise", type=float, default=0.0)
    g.add_argument("--actuator-gain", type=float, default=1.0)
    g.add_argument("--noise-std", type=float, default=envs.BehaviorSpec().noise_std)
    g.add_argument("--tag", default="target", choices=dataset.TAGS)
    g.add_argument("--fraction", type=float, default=1.0, help="keep this share of episodes")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_gen_data)

    m = sub.add_parser("mix", help="concatenate a target and a source dataset")
    m.add_argument("--target", required=True)
    m.add_argument("--source", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(fn=_mix)

    d = sub.add_parser("train-density", help="fit a behavior density or a transition ensemble")
    d.add_argument("--data", required=True)
    d.add_argument("--role", choices=("behavior", "transition"), default="behavior")
    d.add_argument("--k", type=int, default=5)
    d.add_argument("--iterations", type=int, default=100_000)
    d.add_argument("--hidden", type=int, default=750)
    d.add_argument("--depth", type=int, default=3)
    d.add_argument("--kl-weight", type=float, default=0.5)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=_train_density)

    t = sub.add_parser("train", help="train one agent variant from an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--variant", default="full", choices=agent.VARIANTS)
    t.add_argument("--train-on", default="mix", choices=harness.TRAIN_ON)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=_train)

    a = sub.add_parser("augment", help="generate source data from target data")
    a.add_argument("--mode", choices=("model", "noise"), required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--n", type=int, default=100_000)
    a.add_argument("--amplitude", type=float)
    a.add_argument("--amplitude-scale", type=float, default=5.0, help="multiple of the natural next-state scale")
    a.add_argument("--model-budget", type=int, default=500)
    a.add_argument("--hidden", type=int, default=750)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=_augment)

    r = sub.add_parser("report", help="collect eval.json files into report tables")
    r.add_argument("--runs", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=_report)

    e = sub.add_parser("run", help="run a full experiment pipeline")
    e.add_argument("--config", required=True)
    e.add_argument("--resume", action="store_true", help="keep finished agent runs")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(fn=_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
