"""Config-driven experiment pipeline with content-hash caching.

Stages run in order: datasets, densities, agent runs, report.  Every artifact
lives under ``<output_dir>/cache/<stage>-<key>`` where the key hashes the code
version, the config stanza that produced it and the hashes of its inputs, so
reruns and sweeps reuse whatever did not change.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__, agent, augment, dataset, density, envs, metrics, nn_core
from .agent import BosaConfig
from .dataset import OfflineDataset
from .density import DensityConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TRAIN_ON = ("mix", "target", "target-full")


class StageError(RuntimeError):
    def __init__(self, stage: str, inputs: dict, cause: BaseException):
        self.stage, self.inputs = stage, inputs
        super().__init__(f"stage {stage!r} failed (inputs {inputs}): {cause!r}")


class ProvenanceError(AssertionError):
    pass


@dataclass
class ExperimentConfig:
    output_dir: str
    family: str = envs.POINT_MASS
    target_env: dict = field(default_factory=dict)
    source_env: dict = field(default_factory=lambda: {"mass_scale": 0.5})
    target_data: dict = field(default_factory=lambda: {"tier": "medium", "n": 100_000, "seed": 11})
    source_data: dict = field(default_factory=lambda: {"tier": "medium", "n": 100_000, "seed": 13})
    target_fraction: float = 0.1
    subsample_seed: int = 12
    density: dict = field(default_factory=dict)
    density_seed: int = 0
    agent: dict = field(default_factory=dict)
    steps: int = 100_000
    eval_episodes: int = 10
    variants: list = field(default_factory=lambda: ["full"])
    train_on: list = field(default_factory=lambda: ["mix"])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    sweep: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema {self.schema_version}, expected {SCHEMA_VERSION}")
        if not 0.0 < self.target_fraction <= 1.0:
            raise ValueError("target_fraction must lie in (0, 1]")
        if not self.seeds:
            raise ValueError("seed list must be non-empty")
        for v in self.variants:
            if v not in agent.VARIANTS:
                raise ValueError(f"unknown variant {v!r}")
        for t in self.train_on:
            if t not in TRAIN_ON:
                raise ValueError(f"train_on entries must be in {TRAIN_ON}, got {t!r}")
        for name, stanza in (("target_data", self.target_data), ("source_data", self.source_data)):
            if "path" not in stanza and "tier" not in stanza and "augment" not in stanza:
                raise ValueError(f"{name} needs a generation stanza (tier/augment) or a path")
            if "path" in stanza and not Path(stanza["path"]).exists():
                raise ValueError(f"{name} path {stanza['path']} does not exist")
        if "augment" in self.target_data:
            raise ValueError("target data cannot be augmented")
        for key in self.sweep:
            if key not in {f for f in BosaConfig.__dataclass_fields__}:
                raise ValueError(f"cannot sweep unknown agent field {key!r}")
        DensityConfig(**self.density)
        BosaConfig(**self.agent)
        envs.make_spec(self.family, **self.target_env)
        envs.make_spec(self.family, **self.source_env)

    @property
    def density_config(self) -> DensityConfig:
        return DensityConfig(**self.density)

    def agent_config(self, variant: str, point: dict | None = None) -> BosaConfig:
        return BosaConfig(**{**self.agent, **(point or {}), "variant": variant})

    def sweep_points(self) -> list[dict]:
        if not self.sweep:
            return [{}]
        keys = sorted(self.sweep)
        return [dict(zip(keys, vals)) for vals in itertools.product(*(self.sweep[k] for k in keys))]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(yaml.safe_load(fh) or {})


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path


# -- caching -------------------------------------------------------------------


def cache_key(stage: str, stanza, inputs: dict | None = None) -> str:
    blob = json.dumps({"code": __version__, "stage": stage, "stanza": stanza, "inputs": inputs or {}}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class Cache:
    def __init__(self, root):
        self.root = Path(root) / "cache"
        self.hits = 0
        self.misses = 0

    def dir(self, stage: str, key: str) -> Path:
        return self.root / f"{stage}-{key}"

    def ready(self, stage: str, key: str) -> bool:
        done = (self.dir(stage, key) / "DONE").exists()
        if done:
            self.hits += 1
        else:
            self.misses += 1
        return done

    def begin(self, stage: str, key: str) -> Path:
        d = self.dir(stage, key)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        return d

    def commit(self, stage: str, key: str) -> None:
        (self.dir(stage, key) / "DONE").write_text("ok\n")


def clear_runs(output_dir) -> int:
    """Drop cached agent runs (datasets and densities stay)."""
    root = Path(output_dir) / "cache"
    dropped = 0
    if root.exists():
        for d in root.glob("run-*"):
            shutil.rmtree(d)
            dropped += 1
    return dropped


def _stage(name: str, inputs: dict):
    """Decorator-free wrapper: re-raise any failure as StageError."""

    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, et, ev, tb):
            if ev is not None and not isinstance(ev, (StageError, ProvenanceError)):
                raise StageError(name, inputs, ev) from ev
            return False

    return _Ctx()


# -- datasets --------------------------------------------------------------------


def _data_key(cfg: ExperimentConfig) -> str:
    stanza = {
        "family": cfg.family,
        "target_env": cfg.target_env,
        "source_env": cfg.source_env,
        "target_data": cfg.target_data,
        "source_data": cfg.source_data,
        "target_fraction": cfg.target_fraction,
        "subsample_seed": cfg.subsample_seed,
        "density": cfg.density if "augment" in cfg.source_data else None,
    }
    files = {
        name: hashlib.sha256(Path(st["path"]).read_bytes()).hexdigest()
        for name, st in (("target", cfg.target_data), ("source", cfg.source_data))
        if "path" in st
    }
    return cache_key("data", stanza, files)


@dataclass
class Datasets:
    target_full: OfflineDataset
    target: OfflineDataset
    source: OfflineDataset
    mix: OfflineDataset

    def by_name(self, name: str) -> OfflineDataset:
        return {"mix": self.mix, "target": self.target, "target-full": self.target_full}[name]


def _collect(cfg: ExperimentConfig, stanza: dict, env_overrides: dict, tag: str) -> OfflineDataset:
    if "path" in stanza:
        return OfflineDataset.load(stanza["path"])
    spec = envs.make_spec(cfg.family, **env_overrides)
    behavior = envs.BehaviorSpec(stanza["tier"], stanza.get("noise_std", envs.BehaviorSpec().noise_std))
    return dataset.collect(spec, behavior, int(stanza["n"]), int(stanza["seed"]), tag)


def build_datasets(cfg: ExperimentConfig, cache: Cache) -> Datasets:
    key = _data_key(cfg)
    names = ("target_full", "target", "source", "mix")
    if cache.ready("data", key):
        d = cache.dir("data", key)
        return Datasets(*(OfflineDataset.load(d / f"{n}.bin") for n in names))
    with _stage("data", {"stanza": key}):
        full = _collect(cfg, cfg.target_data, cfg.target_env, "target")
        tgt = dataset.subsample(full, cfg.target_fraction, cfg.subsample_seed)
        if "augment" in cfg.source_data:
            src = _augment_source(cfg, tgt)
        else:
            src = _collect(cfg, cfg.source_data, cfg.source_env, "source")
        mixed = dataset.mix(tgt, src)
        out = cache.begin("data", key)
        for n, ds in zip(names, (full, tgt, src, mixed)):
            ds.save(out / f"{n}.bin")
        cache.commit("data", key)
    return Datasets(full, tgt, src, mixed)


def _augment_source(cfg: ExperimentConfig, tgt: OfflineDataset) -> OfflineDataset:
    st = cfg.source_data
    rng = np.random.default_rng(int(st.get("seed", 0)))
    n = int(st.get("n", len(tgt)))
    if st["augment"] == "noise":
        amp = st.get("amplitude")
        if amp is None:
            amp = float(st.get("amplitude_scale", 5.0)) * augment.natural_next_state_scale(tgt)
        return augment.noise_augment(tgt, augment.NoiseSpec(float(amp)), n, rng)
    if st["augment"] == "model":
        r_fit, r_gen = nn_core.spawn(rng, 2)
        model = augment.fit_pseudo_model(tgt, cfg.density_config, int(st.get("budget", 500)), r_fit)
        return augment.model_augment(tgt, model, n, r_gen)
    raise ValueError(f"unknown augmentation mode {st['augment']!r}")


# -- densities -------------------------------------------------------------------


@dataclass
class Densities:
    behavior: dict  # train_on name -> CvaeModel
    transition: density.DensityEnsemble
    hashes: dict


def _needs_behavior(cfg: ExperimentConfig) -> bool:
    return any(v != "behavior-clone" for v in cfg.variants)


def build_densities(cfg: ExperimentConfig, data: Datasets, cache: Cache) -> Densities:
    """Behavior density per training set (D_mix for mix runs), transition ensemble on D_target."""
    dc = cfg.density_config
    stanza = {"density": asdict(dc), "seed": cfg.density_seed}
    rng_b, rng_t = nn_core.spawn(np.random.default_rng(cfg.density_seed), 2)
    b_streams = dict(zip(TRAIN_ON, nn_core.spawn(rng_b, len(TRAIN_ON))))
    behavior, hashes = {}, {}
    if _needs_behavior(cfg):
        for name in cfg.train_on:
            ds = data.by_name(name)
            h = ds.content_hash()
            key = cache_key("behavior", stanza, {"data": h})
            if cache.ready("behavior", key):
                model = density.load_cvae(cache.dir("behavior", key), "behavior")
            else:
                with _stage("behavior", {"data": h}):
                    model = density.fit_behavior(ds, dc, b_streams[name])
                    out = cache.begin("behavior", key)
                    density.save_cvae(model, out, "behavior")
                    cache.commit("behavior", key)
            behavior[name] = model
            hashes[f"behavior/{name}"] = key
    h = data.target.content_hash()
    key = cache_key("transition", stanza, {"data": h})
    if cache.ready("transition", key):
        ens = density.load_ensemble(cache.dir("transition", key))
    else:
        with _stage("transition", {"data": h}):
            ens = density.fit_transition_ensemble(data.target, dc, rng_t)
            out = cache.begin("transition", key)
            density.save_ensemble(ens, out)
            cache.commit("transition", key)
    hashes["transition"] = key
    dens = Densities(behavior, ens, hashes)
    check_provenance(dens, data)
    return dens


def check_provenance(dens: Densities, data: Datasets) -> None:
    """Behavior models were fit on their training set, transitions on D_target only."""
    for name, model in dens.behavior.items():
        want = data.by_name(name).content_hash()
        if model.meta.get("dataset_hash") != want:
            raise ProvenanceError(f"behavior density for {name!r} was not fit on that dataset")
    want = data.target.content_hash()
    for m in dens.transition.members:
        if m.meta.get("dataset_hash") != want:
            raise ProvenanceError("transition ensemble member was not fit on D_target")


# -- agent runs --------------------------------------------------------------------


@dataclass
class RunSpec:
    variant: str
    train_on: str
    seed: int
    point: dict

    @property
    def label(self) -> str:
        if not self.point:
            return self.variant
        extra = ",".join(f"{k}={v}" for k, v in sorted(self.point.items()))
        return f"{self.variant}[{extra}]"


def _run_key(cfg: ExperimentConfig, rs: RunSpec, ds_hashes: dict, dens: Densities) -> str:
    stanza = {
        "agent": cfg.agent_config(rs.variant, rs.point).to_dict(),
        "seed": rs.seed,
        "steps": cfg.steps,
        "eval": cfg.eval_episodes,
        "family": cfg.family,
        "target_env": cfg.target_env,
    }
    return cache_key("run", stanza, {"data": ds_hashes[rs.train_on], **dens.hashes})


def run_specs(cfg: ExperimentConfig) -> list[RunSpec]:
    return [
        RunSpec(v, t, s, p)
        for t in cfg.train_on
        for v in cfg.variants
        for p in cfg.sweep_points()
        for s in cfg.seeds
    ]


def _run_one(args) -> dict:
    """One (variant, dataset, seed, sweep point) training run plus evaluation."""
    import torch

    torch.set_num_threads(1)
    cfg_d, rs_d, paths, out_dir = args
    cfg = ExperimentConfig.from_dict(cfg_d)
    rs = RunSpec(**rs_d)
    ds = OfflineDataset.load(paths["data"])
    ens = density.load_ensemble(paths["transition"])
    beh = density.load_cvae(paths["behavior"], "behavior") if paths.get("behavior") else None
    acfg = cfg.agent_config(rs.variant, rs.point)
    rng = np.random.default_rng([rs.seed, 7])
    r_init, r_filter, r_train, r_eval = nn_core.spawn(rng, 4)
    ac = agent.init_state(ds.state_dim, ds.action_dim, acfg, r_init, ds.state_mean, ds.state_std)
    support = None
    if acfg.uses_filter:
        support = agent.SupportFilter(ens, acfg.transition_threshold, ds, acfg.filter_samples, int(r_filter.integers(2**31)))
    out = Path(out_dir)
    diags = agent.train(
        ac, acfg, agent.TrainingData.from_mix(ds), beh, support, cfg.steps, r_train,
        log_path=out / "diagnostics.csv", log_every=max(1, min(1000, cfg.steps // 20)),
    )
    agent.save_state(ac, out / "final")
    spec = envs.make_spec(cfg.family, **cfg.target_env)
    res = metrics.evaluate(ac, spec, cfg.eval_episodes, r_eval, rs.seed, rs.label, rs.train_on)
    res.meta.update(
        lam=ac.lam,
        lam_peak=ac.lam_peak,
        pass_rate=float(np.nanmean([d.pass_rate for d in diags])) if diags else math.nan,
        starved=int(sum(d.starved for d in diags)),
    )
    if beh is not None:
        res.meta["support_satisfaction"] = support_satisfaction(ac, beh, ds, acfg, np.random.default_rng(rs.seed))
    (out / "eval.json").write_text(json.dumps(metrics.result_to_dict(res), sort_keys=True, indent=1))
    return metrics.result_to_dict(res)


def support_satisfaction(ac, behavior, data: OfflineDataset, cfg: BosaConfig, rng, n: int = 2000) -> float:
    """Fraction of D_mix states where log pi_beta(act(s) | s) exceeds the threshold."""
    idx = rng.choice(len(data), size=min(n, len(data)), replace=False)
    s = data.states[idx]
    ll = density.log_likelihood_np(behavior, s, agent.act(ac, s), rng, cfg.likelihood_samples)
    return float(np.mean(ll > cfg.policy_log_threshold))


@dataclass
class ExperimentReport:
    output_dir: Path
    results: list
    dataset_hashes: dict
    density_hashes: dict
    ablation: dict
    deltas: dict
    cache_hits: int = 0
    cache_misses: int = 0
    files: list = field(default_factory=list)


def run_pipeline(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    cache = Cache(out)
    data = build_datasets(cfg, cache)
    ds_hashes = {n: data.by_name(n).content_hash() for n in TRAIN_ON}
    ds_hashes["source"] = data.source.content_hash()
    dens = build_densities(cfg, data, cache)

    pending, results, keys = [], {}, []
    for rs in run_specs(cfg):
        key = _run_key(cfg, rs, ds_hashes, dens)
        keys.append(key)
        rd = cache.dir("run", key)
        if cache.ready("run", key):
            results[key] = json.loads((rd / "eval.json").read_text())
            continue
        cache.begin("run", key)
        behavior_key = dens.hashes.get(f"behavior/{rs.train_on}")
        paths = {
            "data": str(cache.dir("data", _data_key(cfg)) / f"{rs.train_on.replace('-', '_')}.bin"),
            "transition": str(cache.dir("transition", dens.hashes["transition"])),
            "behavior": str(cache.dir("behavior", behavior_key)) if behavior_key else None,
        }
        pending.append((key, (cfg.to_dict(), asdict(rs), paths, str(rd)), rs))

    def finish(key, rs, res):
        results[key] = res
        cache.commit("run", key)

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {key: (pool.submit(_run_one, a), rs) for key, a, rs in pending}
            for key, (fut, rs) in futs.items():
                try:
                    finish(key, rs, fut.result())
                except Exception as e:
                    raise StageError("run", {"run": key, "label": rs.label, "seed": rs.seed}, e) from e
    else:
        for key, a, rs in pending:
            with _stage("run", {"run": key, "label": rs.label, "seed": rs.seed}):
                finish(key, rs, _run_one(a))

    ordered = [metrics.result_from_dict(results[k]) for k in keys]
    report = ExperimentReport(out, ordered, ds_hashes, dens.hashes, {}, {}, cache.hits, cache.misses)
    write_outputs(report)
    return report


# -- summaries ---------------------------------------------------------------------


def group_scores(results) -> dict:
    """(label, train_on) -> (mean, std) over seeds."""
    groups: dict = {}
    for r in results:
        groups.setdefault((r.variant, r.dataset), []).append(r)
    return {k: metrics.aggregate(v) for k, v in groups.items()}


def ablation_table(results, train_on: str = "mix") -> dict:
    """Percentage change of each variant's mean score versus the full variant."""
    scores = {label: m for (label, ds), (m, _) in group_scores(results).items() if ds == train_on}
    if "full" not in scores:
        raise ValueError("ablation table needs the full variant")
    base = scores["full"]
    denom = abs(base) if base != 0 else 1.0
    return {label: 100.0 * (m - base) / denom for label, m in sorted(scores.items())}


def run_ablation_suite(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    if "full" not in cfg.variants:
        raise ValueError("ablation suite needs the full variant")
    report = run_pipeline(cfg, jobs)
    return report.ablation


def transfer_summary(results) -> dict:
    """Transfer deltas for the full variant, when all three training sets were run."""
    g = group_scores(results)
    have = {ds for (_, ds) in g}
    if not {"mix", "target", "target-full"} <= have or ("full", "target") not in g or ("full", "mix") not in g:
        return {}
    best_100 = max(m for (label, ds), (m, _) in g.items() if ds == "target-full")
    return {"full": metrics.transfer_deltas(g[("full", "target")][0], g[("full", "mix")][0], best_100)}


def write_outputs(report: ExperimentReport) -> None:
    out = report.output_dir
    files = [out / "config.yaml"]
    if report.results:
        files.append(metrics.write_report(report.results, out / "report.csv"))
        if any(r.variant == "full" and r.dataset == "mix" for r in report.results):
            report.ablation = ablation_table(report.results)
            p = out / "ablation.csv"
            p.write_text("variant,percent_change_vs_full\n" + "".join(f"{k},{v:.6f}\n" for k, v in report.ablation.items()))
            files.append(p)
        report.deltas = transfer_summary(report.results)
        if report.deltas:
            files.append(metrics.write_deltas(report.deltas, out / "deltas.csv"))
            files.append(metrics.scatter_svg(report.deltas, out / "deltas.svg"))
    art = {"datasets": report.dataset_hashes, "densities": report.density_hashes}
    p = out / "artifacts.json"
    p.write_text(json.dumps(art, sort_keys=True, indent=1) + "\n")
    files.append(p)
    report.files = files
