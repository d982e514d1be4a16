"""Experiment pipeline: data, per-model samples, maps, chains, MBE replicates, artifacts.

Every artifact is written through :class:`_Artifacts`, which records a
checksum for the manifest. Randomness is keyed on ``(config.seed, stage, ...)``
so an identical config reproduces identical CSV files.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, config_hash, config_to_dict
from .estimators import mbe_from_samples, running_occupancy, write_replicates_csv
from .groundtruth import GroundTruth, chain_occupancy, ground_truth
from .layout import SaturatedLayout
from .posterior import _to_free, sample_posterior
from .reference import STANDARD_NORMAL, GaussianReference
from .samplers import (
    ChainConfig,
    CTRJProposal,
    GaussianIndependence,
    IndependenceProposal,
    JumpDistribution,
    RandomWalk,
    TRJProposal,
    format_model,
    lopes_proposal,
    run_chain,
)
from .targets import (
    AugmentedTarget,
    Dataset,
    ResidualMixture,
    fa_target,
    gaussian_toy,
    sas_exact_maps,
    sas_target,
    simulate_fa_data,
    simulate_vs_data,
    toy_exact_maps,
    vs_layout,
    vs_target,
)
from .training import fit_flow
from .transport import ComposedMap, IdentityConditionalMap, LogPositiveMap, fit_affine, load_map, save_map

__all__ = [
    "RunManifest",
    "StageError",
    "build_target",
    "validate_config",
    "draw_samples",
    "build_proposal",
    "run_experiment",
    "run_ground_truth",
    "chain_ground_truth",
    "code_version",
]

log = logging.getLogger(__name__)

# stage tags for seed derivation
_TRAIN, _TEST, _CHAIN, _MBE, _AUX, _GT = range(1, 7)


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    artifacts: dict = field(default_factory=dict)  # relative path -> sha256
    stages: dict = field(default_factory=dict)  # stage -> wall-clock seconds
    status: str = "running"
    failed_stage: str = None
    error: str = None
    dry_run: bool = False

    def to_dict(self):
        return dataclasses.asdict(self)

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def code_version():
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Artifacts:
    def __init__(self, root, manifest):
        self.root = Path(root)
        self.manifest = manifest

    def path(self, rel):
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, rel):
        self.manifest.artifacts[str(rel)] = _sha256(self.root / rel)

    def csv(self, rel, header, rows):
        with open(self.path(rel), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        self.record(rel)

    def json(self, rel, obj):
        self.path(rel).write_text(json.dumps(obj, indent=1, sort_keys=True))
        self.record(rel)


# --- targets and validation ------------------------------------------------------


def _dataset(cfg):
    d = cfg.data
    if cfg.experiment == "fa":
        if d.source == "file":
            return Dataset.from_csv(d.path)
        return simulate_fa_data(d.k_true, d.loadings, d.variances, d.n_obs, d.seed)
    if d.source == "file":
        return Dataset.from_csv(d.path, covariates=True)
    return simulate_vs_data(d.seed)


def build_target(cfg: ExperimentConfig):
    if cfg.experiment == "sas":
        return sas_target()
    if cfg.experiment == "toy":
        return gaussian_toy()
    data = _dataset(cfg)
    if cfg.experiment == "fa":
        return fa_target(data, tuple(cfg.data.k_set))
    mix = ResidualMixture(cfg.data.mixture_weight, 1.0, cfg.data.mixture_sd_large)
    return vs_target(data, mix)


def validate_config(cfg: ExperimentConfig):
    """Checks that need more than field types; raises ConfigError."""
    if cfg.data.source == "file" and cfg.experiment in ("fa", "vs") and not Path(cfg.data.path).is_file():
        raise ConfigError(f"data.path {cfg.data.path!r} does not exist")
    if "exact" in cfg.proposals and cfg.experiment not in ("sas", "toy"):
        raise ConfigError(f"no exact transport maps are known for experiment {cfg.experiment!r}")
    if "conditional-flow" in cfg.proposals and cfg.experiment == "fa":
        raise ConfigError("conditional-flow needs unconstrained parameters; use flow for fa")
    if cfg.run_chains and cfg.chains.jump == "marginals" and cfg.experiment not in ("sas", "toy"):
        raise ConfigError("chains.jump = 'marginals' needs known model probabilities")
    if cfg.experiment == "fa":
        d = cfg.data
        if d.source == "synthetic" and (len(d.loadings) != d.d or len(d.variances) != d.d):
            raise ConfigError(f"data.loadings and data.variances must have {d.d} rows")
    if not cfg.run_chains and cfg.replicates == 0:
        raise ConfigError("nothing to do: run_chains is false and replicates is 0")
    gt = cfg.ground_truth
    if gt.method == "chain":
        if gt.proposal == "exact" and cfg.experiment not in ("sas", "toy"):
            raise ConfigError(f"ground_truth.proposal 'exact' is unavailable for experiment {cfg.experiment!r}")
        if gt.chains.jump == "marginals" and cfg.experiment not in ("sas", "toy"):
            raise ConfigError("ground_truth.chains.jump = 'marginals' needs known model probabilities")


# --- samples ---------------------------------------------------------------------


def draw_samples(target, k, n, seed, settings):
    """Exact draws when the target has a sampler for k, else a within-model random-walk run.

    Returns (samples, diagnostics dict).
    """
    if k in target.samplers:
        return target.sample(k, n, np.random.default_rng(seed)), {"method": "exact"}
    ps = sample_posterior(target, k, n, seed, settings)
    return ps.samples, {"method": "random-walk", "acceptance": ps.acceptance, "min_ess": float(ps.ess.min())}


def _sample_set(cfg, target, tag, rep):
    out, diag = {}, {}
    for i, k in enumerate(target.models):
        n = cfg.n_train if tag == _TRAIN else cfg.n_test
        out[k], diag[k] = draw_samples(target, k, n, [cfg.seed, tag, rep, i], cfg.sampler)
    return out, diag


# --- proposals -------------------------------------------------------------------


def _with_log_positive(target, k, fit):
    """Fit ``fit`` on log-transformed positive coordinates and compose."""
    pos = target.positive[k]
    if pos.size == 0:
        return fit
    return lambda samples: _compose(LogPositiveMap(target.dims[k], pos), fit, samples)


def _compose(pre, fit, samples):
    z, _ = pre.forward(samples)
    inner, report = fit(z)
    return ComposedMap([pre, inner]), report


def _fit_affine(samples):
    return fit_affine(samples), None


def _saturated_layout(target):
    return vs_layout() if target.name == "vs" else SaturatedLayout.concatenation(target.dims)


def _cache_key(cfg, kind, k):
    blob = json.dumps({
        "experiment": cfg.experiment, "data": dataclasses.asdict(cfg.data), "n_train": cfg.n_train,
        "seed": cfg.seed, "sampler": dataclasses.asdict(cfg.sampler), "train": dataclasses.asdict(cfg.train),
        "kind": kind, "k": format_model(k),
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _cached_fit(cfg, art, kind, k, fit, samples):
    """Fit (or reload) a map; trained maps live under maps/ keyed by what determines them."""
    tag = f"{kind}_{format_model(k) if k is not None else 'all'}_{_cache_key(cfg, kind, k)}"
    rel_map, rel_rep = Path("maps") / f"{tag}.json", Path("train") / f"{tag}.csv"
    if art is not None and (art.root / rel_map).is_file():
        log.info("reusing cached map %s", rel_map)
        art.record(rel_map)
        if (art.root / rel_rep).is_file():
            art.record(rel_rep)
        return load_map(art.root / rel_map)
    tmap, report = fit(samples)
    if art is not None:
        save_map(tmap, art.path(rel_map))
        art.record(rel_map)
        if report is not None:
            report.to_csv(art.path(rel_rep))
            art.record(rel_rep)
    return tmap


def build_proposal(cfg, target, kind, train, art=None):
    """Proposal object for one kind, fitted on the training samples where needed."""
    models = target.models
    if kind == "exact":
        maps = sas_exact_maps() if target.name == "sas" else toy_exact_maps(target)
        return TRJProposal(target, maps)
    if kind in ("affine", "flow"):
        base = _fit_affine if kind == "affine" else (lambda s: fit_flow(s, cfg.train))
        maps = {k: _cached_fit(cfg, art, kind, k, _with_log_positive(target, k, base), train[k]) for k in models}
        return TRJProposal(target, maps)
    if kind == "conditional-flow":
        layout = _saturated_layout(target)
        rng = np.random.default_rng([cfg.seed, _AUX])
        xs, ctx = [], []
        for k in models:
            xs.append(layout.assemble(k, train[k], rng.standard_normal((len(train[k]), layout.aux_dim(k)))))
            ctx += [k] * len(train[k])
        fit = lambda s: fit_flow(s, cfg.train, context=ctx, models=models, aux_mask=layout.aux_mask(models))
        cmap = _cached_fit(cfg, art, kind, None, fit, np.concatenate(xs))
        return CTRJProposal(AugmentedTarget(target, STANDARD_NORMAL, layout), cmap)
    if kind == "independence":
        if target.name == "fa":
            q = {k: lopes_proposal(target, k, train[k]) for k in models}
        else:
            q = {k: GaussianIndependence(train[k].mean(axis=0), np.atleast_2d(np.cov(train[k], rowvar=False)))
                 for k in models}
        return IndependenceProposal(target, q)
    if kind == "standard-saturated":
        layout = _saturated_layout(target)
        scale = cfg.saturated_scale or float(target.extras.get("prior_sd", 1.0))
        aug = AugmentedTarget(target, GaussianReference(0.0, scale), layout)
        return CTRJProposal(aug, IdentityConditionalMap(layout.n_max, models))
    raise ConfigError(f"unknown proposal kind {kind!r}")


def _random_walk(cfg, target, train):
    if cfg.rw_scale > 0:
        return RandomWalk({k: np.full(target.dims[k], cfg.rw_scale) for k in target.models}, target.positive)
    out = {}
    for k in target.models:
        n = target.dims[k]
        free = _to_free(train[k], target.positive[k])
        cov = np.atleast_2d(np.cov(free, rowvar=False)) + 1e-12 * np.eye(n)
        out[k] = 2.38 / np.sqrt(n) * np.linalg.cholesky(cov)
    return RandomWalk(out, log_positive=target.positive)


def _jump(cfg, target, spec=None):
    if (spec or cfg.chains).jump == "marginals":
        return JumpDistribution.from_marginals(target.models, target.true_probs)
    return JumpDistribution.uniform(target.models)


def _chain_init(target, train, n_chains):
    if target.true_probs is not None and len(target.samplers) == len(target.models):
        return None  # exact joint draws
    K = len(target.models)
    return [(target.models[c % K], train[target.models[c % K]][c // K]) for c in range(n_chains)]


# --- stages ----------------------------------------------------------------------


class _Stages:
    def __init__(self, manifest):
        self.manifest = manifest

    def run(self, name, fn, *args):
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            out = fn(*args)
        except ConfigError:
            raise
        except Exception as e:
            self.manifest.stages[name] = time.perf_counter() - t0
            raise StageError(name, e) from e
        self.manifest.stages[name] = time.perf_counter() - t0
        return out


def _occupancy_rows(out, every):
    rows = []
    idx = np.arange(every - 1, out.n_steps, every)
    if idx.size == 0 or idx[-1] != out.n_steps - 1:
        idx = np.append(idx, out.n_steps - 1)
    for c in range(out.n_chains):
        occ = [running_occupancy(out.k[c], i)[idx] for i in range(len(out.models))]
        for j, t in enumerate(idx):
            rows.append([c, int(t) + 1] + [repr(float(o[j])) for o in occ])
    return rows


def _run_chains(cfg, target, proposals, train, art):
    jump = _jump(cfg, target)
    rw = _random_walk(cfg, target, train)
    init = _chain_init(target, train, cfg.chains.n_chains)
    header = ["chain", "step"] + [f"occupancy_{format_model(k)}" for k in target.models]
    summary = {}
    for j, kind in enumerate(cfg.proposals):
        cc = ChainConfig(n_steps=cfg.chains.n_steps, n_chains=cfg.chains.n_chains,
                         seed=[cfg.seed, _CHAIN, j], within_per_across=cfg.chains.within_per_across,
                         refresh_aux=cfg.chains.refresh_aux)
        out = run_chain(proposals[kind], jump, rw, cc, init=init)
        art.csv(Path("chains") / f"occupancy_{kind}.csv", header, _occupancy_rows(out, cfg.chains.occupancy_every))
        for c in range(out.n_chains):
            rel = Path("chains") / f"{kind}_chain{c}.csv"
            out.to_csv(art.path(rel), chain=c)
            art.record(rel)
        probs, se = chain_occupancy(out, min(cfg.chains.n_batches, out.n_steps))
        final = {format_model(k): [float(np.mean(out.k[c] == i)) for c in range(out.n_chains)]
                 for i, k in enumerate(target.models)}
        across = out.move == 1
        summary[kind] = {
            "pooled": {format_model(k): probs[k] for k in target.models},
            "pooled_se": {format_model(k): se[k] for k in target.models},
            "final_per_chain": final,
            "across_acceptance": float(out.accepted[across].mean()) if across.any() else None,
            "domain_errors": int(out.domain_error.sum()),
        }
    return summary


def _one_replicate(cfg, target, proposals, jump, r):
    test, diag = _sample_set(cfg, target, _TEST, r)
    rows = []
    for j, kind in enumerate(cfg.proposals):
        rng = np.random.default_rng([cfg.seed, _MBE, r, j])
        est = mbe_from_samples(test, proposals[kind], jump, rng, replicate=r)
        flags = list(est.flags) + ([f"domain-errors: {est.n_domain_errors}"] if est.n_domain_errors else [])
        for k in target.models:
            rows.append((r, kind, k, est.probs[k], cfg.n_train, flags))
    return rows, diag


def _run_mbe(cfg, target, proposals, art, threads):
    jump = _jump(cfg, target)
    reps = range(cfg.replicates)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(lambda r: _one_replicate(cfg, target, proposals, jump, r), reps))
    else:
        results = [_one_replicate(cfg, target, proposals, jump, r) for r in reps]
    rows = [row for res, _ in results for row in res]
    write_replicates_csv(art.path("mbe_replicates.csv"), rows)
    art.record("mbe_replicates.csv")
    diag_rows = [[r, format_model(k), d.get("method"), repr(d.get("acceptance", float("nan"))),
                  repr(d.get("min_ess", float("nan")))]
                 for r, (_, diag) in enumerate(results) for k, d in diag.items()]
    art.csv("test_samples.csv", ["replicate", "k", "method", "acceptance", "min_ess"], diag_rows)
    summary = {}
    for kind in cfg.proposals:
        per_k = {}
        for k in target.models:
            v = np.array([p for (_, kd, kk, p, _, fl) in rows if kd == kind and kk == k and not fl])
            per_k[format_model(k)] = {
                "mean": float(v.mean()) if v.size else None,
                "median": float(np.median(v)) if v.size else None,
                "sd": float(v.std(ddof=1)) if v.size > 1 else None,
                "n_ok": int(v.size),
            }
        summary[kind] = per_k
    return summary


def run_experiment(cfg: ExperimentConfig, out_dir, threads=1, dry_run=False):
    """Run the whole pipeline; returns the manifest (also written to out_dir/manifest.json)."""
    out_dir = Path(out_dir)
    manifest = RunManifest(config_hash(cfg), code_version(), dry_run=dry_run)
    stages = _Stages(manifest)
    validate_config(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dry_run:
        manifest.status = "dry-run"
        manifest.write(out_dir / "manifest.json")
        return manifest
    art = _Artifacts(out_dir, manifest)
    try:
        art.json("config.json", config_to_dict(cfg))
        target = stages.run("data", build_target, cfg)
        train, diag = stages.run("samples", _sample_set, cfg, target, _TRAIN, 0)
        art.csv("train_samples.csv", ["k", "method", "acceptance", "min_ess"],
                [[format_model(k), d["method"], repr(d.get("acceptance", float("nan"))),
                  repr(d.get("min_ess", float("nan")))] for k, d in diag.items()])
        proposals = {}
        for kind in cfg.proposals:
            proposals[kind] = stages.run(f"fit:{kind}", build_proposal, cfg, target, kind, train, art)
        summary = {"experiment": cfg.experiment, "models": [format_model(k) for k in target.models]}
        if target.true_probs is not None:
            summary["true_probs"] = {format_model(k): v for k, v in target.true_probs.items()}
        if cfg.run_chains:
            summary["chains"] = stages.run("chains", _run_chains, cfg, target, proposals, train, art)
        if cfg.replicates:
            summary["mbe"] = stages.run("mbe", _run_mbe, cfg, target, proposals, art, threads)
        art.json("summary.json", summary)
        manifest.status = "complete"
    except StageError as e:
        manifest.status, manifest.failed_stage, manifest.error = "failed", e.stage, str(e)
        raise
    finally:
        if manifest.status != "dry-run":
            manifest.write(out_dir / "manifest.json")
    return manifest


def chain_ground_truth(cfg, target):
    """Pooled occupancy of long chains whose proposal is fitted to a sample set of its own."""
    spec = cfg.ground_truth
    samples, _ = _sample_set(dataclasses.replace(cfg, n_test=cfg.n_train), target, _GT, 0)
    proposal = build_proposal(cfg, target, spec.proposal, samples)
    c = spec.chains
    cc = ChainConfig(n_steps=c.n_steps, n_chains=c.n_chains, seed=[cfg.seed, _GT, 1],
                     within_per_across=c.within_per_across, refresh_aux=c.refresh_aux)
    out = run_chain(proposal, _jump(cfg, target, c), _random_walk(cfg, target, samples), cc,
                    init=_chain_init(target, samples, c.n_chains))
    probs, se = chain_occupancy(out, min(c.n_batches, out.n_steps))
    across = out.move == 1
    details = {format_model(k): {"per_chain": [float(np.mean(out.k[j] == i)) for j in range(out.n_chains)]}
               for i, k in enumerate(target.models)}
    details["run"] = {"proposal": spec.proposal, "n_chains": c.n_chains, "n_steps": c.n_steps,
                      "n_batches": c.n_batches, "across_acceptance": float(out.accepted[across].mean())}
    return GroundTruth(probs, se, f"chain/{spec.proposal}", details)


def _gt_stage(cfg, target, art):
    spec = cfg.ground_truth
    if spec.method == "chain":
        gt = chain_ground_truth(cfg, target)
    elif spec.method == "importance" and target.true_probs is not None:
        # force the numerical route even when marginals are known
        gt = ground_truth(_without_marginals(target), spec.budget, seed=cfg.seed, settings=cfg.sampler)
    else:
        gt = ground_truth(target, spec.budget, seed=cfg.seed, settings=cfg.sampler)
    art.csv("ground_truth.csv", ["k", "pi", "se", "method"],
            [[format_model(k), repr(gt.probs[k]), repr(gt.se[k]), gt.method] for k in target.models])
    art.json("ground_truth_details.json", {format_model(k): v for k, v in gt.details.items()})
    return gt


def _without_marginals(target):
    t = copy.copy(target)
    t.true_probs = None
    return t


def run_ground_truth(cfg: ExperimentConfig, out_dir):
    """Reference model probabilities (analytic, importance sampling or long chains) for the configured target."""
    out_dir = Path(out_dir)
    manifest = RunManifest(config_hash(cfg), code_version())
    stages = _Stages(manifest)
    validate_config(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    art = _Artifacts(out_dir, manifest)
    try:
        target = stages.run("data", build_target, cfg)
        gt = stages.run("ground-truth", _gt_stage, cfg, target, art)
        manifest.status = "complete"
    except StageError as e:
        manifest.status, manifest.failed_stage, manifest.error = "failed", e.stage, str(e)
        raise
    finally:
        manifest.write(out_dir / "ground_truth_manifest.json")
    return gt, manifest

