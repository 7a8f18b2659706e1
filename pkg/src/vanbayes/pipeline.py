"""End-to-end experiment orchestration: simulate, train, diagnose, infer.

An experiment is described by one YAML or JSON file; see :data:`DEFAULTS`
for the recognised keys.  Every output embeds the hash of the resolved
configuration so batches, bundles and reports from different experiments
cannot be mixed.
"""

from __future__ import annotations

import copy
import csv
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy
import sklearn
import yaml
from sklearn.pipeline import Pipeline

from . import __version__
from .diagnostics import binary_metrics, calibration_report, mad_and_coverage, write_pit_qq, write_reports
from .estimator import VariationalPosterior
from .io import config_hash, load_batch, load_observed, read_json, save_batch, write_json
from .network import TrainingDiverged, decode_array, encode_array
from .priors import IndependentPrior, make_distribution
from .simulators import ConfigError, build_simulator, make_sim_batch
from .summaries import AutologisticSummary, FlattenCounts, LeastSquaresSummary, PCASummary, RankToUnit

logger = logging.getLogger(__name__)

DEFAULTS = {
    "model": None,              # {"name": ..., **simulator options}
    "prior": None,              # per-parameter overrides of the model's default prior
    "training": None,           # per-parameter overrides defining the training distribution
    "seed": 0,
    "n_train": 10_000,
    "n_val": 2_000,
    "block_size": 1_000,
    "keep_data": None,          # store raw datasets in batch files (default: only if needed)
    "summaries": [{"stage": "flatten"}],
    "summary_variants": None,   # {name: [stages]} grid; overrides "summaries"
    "targets": None,            # {name: {"family": ..., "transform": null | "prior_quantile"}}
    "arches": [[50, 10]],
    "train": {},                # VariationalPosterior options (epochs, batch_size, ...)
    "levels": [0.5, 0.8, 0.9, 0.95],
    "ks_gate": 0.05,
    "scenario": None,           # {"theta": [...] | null, "setting": name, "replicates": 100}
}

TRAIN_STREAM, VAL_STREAM, SCENARIO_STREAM, ALT_TRAIN_STREAM = 0, 1, 2, 3

STAGES = {
    "least_squares": LeastSquaresSummary,
    "rank_to_unit": RankToUnit,
    "autologistic": AutologisticSummary,
    "pca": PCASummary,
    "flatten": FlattenCounts,
}
STATELESS = {"least_squares", "autologistic", "flatten"}


# ---------------------------------------------------------------- configuration

def load_config(path, seed_override=None):
    with open(path) as fh:
        user = yaml.safe_load(fh) or {}
    return resolve_config(user, seed_override)


def resolve_config(user: dict, seed_override=None):
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    cfg = copy.deepcopy(DEFAULTS)
    cfg.update(copy.deepcopy(user))
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    if not cfg["model"] or "name" not in cfg["model"]:
        raise ConfigError("config needs model.name")
    if cfg["n_train"] < 1 or cfg["n_val"] < 1:
        raise ConfigError("n_train and n_val must be at least 1")
    sim = make_simulator(cfg)
    if cfg["targets"] is None:
        cfg["targets"] = {name: {"family": "het_normal"} for name in sim.target_names}
    for name, spec in cfg["targets"].items():
        if name not in sim.target_names:
            raise ConfigError(f"unknown target {name!r}; model targets are {list(sim.target_names)}")
        spec.setdefault("family", "het_normal")
        spec.setdefault("transform", None)
    if not cfg["targets"]:
        raise ConfigError("target list is empty")
    if cfg["summary_variants"] is None:
        cfg["summary_variants"] = {"default": cfg["summaries"]}
    for stages in cfg["summary_variants"].values():
        for st in stages:
            if st.get("stage") not in STAGES:
                raise ConfigError(f"unknown summary stage {st.get('stage')!r}")
    cfg["arches"] = [list(a) for a in cfg["arches"]]
    cfg["config_hash"] = config_hash({k: v for k, v in cfg.items() if k != "config_hash"})
    return cfg


def make_simulator(cfg):
    opts = dict(cfg["model"])
    name = opts.pop("name")
    for key in ("shape", "grid", "initial_cell"):
        if key in opts and isinstance(opts[key], list):
            opts[key] = tuple(opts[key])
    return build_simulator(name, **opts)


def make_prior(cfg, sim):
    prior = sim.default_prior()
    if cfg["prior"]:
        if not isinstance(prior, IndependentPrior):
            raise ConfigError(f"the {sim.name} prior cannot be overridden component-wise")
        prior = prior.replace(**cfg["prior"])
    return prior


def make_training(cfg, sim, prior):
    if not cfg["training"]:
        return prior
    if not isinstance(prior, IndependentPrior):
        raise ConfigError(f"the {sim.name} model supports only training on its prior")
    return prior.replace(**cfg["training"])


# ---------------------------------------------------------------- summaries

def build_stage(spec, sim):
    opts = {k: v for k, v in spec.items() if k != "stage"}
    if spec["stage"] == "autologistic":
        opts.setdefault("adjacency", sim.A)
        opts["orders"] = tuple(opts.get("orders", (1, 2, 3)))
    return STAGES[spec["stage"]](**opts)


def stateless_prefix(stages):
    k = 0
    while k < len(stages) and stages[k]["stage"] in STATELESS:
        k += 1
    return k


def common_prefix(variants):
    """Leading stateless stages shared by every summary variant."""
    lists = list(variants.values())
    k = min(stateless_prefix(s) for s in lists)
    while k and any(s[:k] != lists[0][:k] for s in lists):
        k -= 1
    return lists[0][:k]


class Reducer:
    """Picklable stateless summary map applied while simulating."""

    def __init__(self, stages, sim):
        self.stages = [build_stage(s, sim).fit(None) for s in stages]

    def __call__(self, data):
        out = data
        for st in self.stages:
            out = st.transform(out)
        return out


class SummaryMap:
    """Fitted summary pipeline for one variant (stages after the shared prefix)."""

    def __init__(self, stages, sim):
        self.specs = list(stages)
        self.pipeline = Pipeline([(f"{i}_{s['stage']}", build_stage(s, sim)) for i, s in enumerate(self.specs)]) if self.specs else None

    def fit_transform(self, X):
        return X if self.pipeline is None else self.pipeline.fit_transform(X)

    def transform(self, X):
        return X if self.pipeline is None else self.pipeline.transform(X)

    def to_dict(self):
        states = []
        for spec, (_, st) in zip(self.specs, self.pipeline.steps if self.pipeline else []):
            state = {}
            if spec["stage"] not in STATELESS:
                for k, v in vars(st).items():
                    if k.endswith("_") and not k.startswith("_"):
                        state[k] = encode_array(v) if isinstance(v, np.ndarray) else v
            states.append(state)
        return {"stages": self.specs, "states": states}

    @classmethod
    def from_dict(cls, d, sim):
        sm = cls(d["stages"], sim)
        for spec, state, (_, st) in zip(d["stages"], d["states"], sm.pipeline.steps if sm.pipeline else []):
            if spec["stage"] in STATELESS:
                st.fit(None)
            for k, v in state.items():
                setattr(st, k, decode_array(v) if isinstance(v, dict) and "shape" in v else v)
        return sm


# ---------------------------------------------------------------- paths

def _paths(out):
    out = Path(out)
    return {
        "train": out / "batches" / "train.vbb",
        "val": out / "batches" / "val.vbb",
        "bundle": out / "bundle",
        "diagnostics": out / "diagnostics",
        "infer": out / "infer",
    }


def _check_hash(meta, cfg, what):
    if meta.get("config_hash") != cfg["config_hash"]:
        raise ConfigError(f"{what} was produced by a different configuration")


# ---------------------------------------------------------------- simulate

def simulate_batches(cfg, workers=1, streams=(TRAIN_STREAM, VAL_STREAM), training=True):
    sim = make_simulator(cfg)
    prior = make_prior(cfg, sim)
    train_dist = make_training(cfg, sim, prior) if training else prior
    prefix = common_prefix(cfg["summary_variants"])
    reducer = Reducer(prefix, sim) if prefix else None
    keep = cfg["keep_data"] if cfg["keep_data"] is not None else reducer is None
    batches = []
    for stream, n, dist in ((streams[0], cfg["n_train"], train_dist), (streams[1], cfg["n_val"], prior)):
        b = make_sim_batch(sim, n, cfg["seed"], prior, dist, reducer=reducer, keep_data=keep,
                           workers=workers, block_size=cfg["block_size"], stream=stream)
        b.meta["config_hash"] = cfg["config_hash"]
        b.meta["presummary"] = prefix
        batches.append(b)
    return batches


def cmd_simulate(cfg, out, workers=1):
    """Write the training batch and the validation batch (disjoint streams)."""
    paths = _paths(out)
    paths["train"].parent.mkdir(parents=True, exist_ok=True)
    train, val = simulate_batches(cfg, workers)
    save_batch(train, paths["train"])
    save_batch(val, paths["val"])
    logger.info("wrote %d training and %d validation records", len(train), len(val))
    return train, val


# ---------------------------------------------------------------- train

def _cell_id(variant, arch):
    return f"{variant}__{'x'.join(str(w) for w in arch)}"


def _target_groups(cfg):
    """Targets sharing a head family and transform are trained as one stack."""
    groups = {}
    for name, spec in cfg["targets"].items():
        key = (spec["family"], spec["transform"] or "none")
        groups.setdefault(key, []).append(name)
    return groups


def _fit_group(job):
    est, Z, g, w, Zv, gv = job
    try:
        est.fit(Z, g, sample_weight=w, validation=(Zv, gv))
        return est, None
    except TrainingDiverged as err:
        return None, str(err)


def train_bundle(cfg, train, val, workers=1):
    """Fit every (summary variant, architecture, target group) cell.

    Returns the manifest and a dict of fitted objects keyed by file name.
    """
    sim = make_simulator(cfg)
    prior = make_prior(cfg, sim)
    names = list(train.meta["target_names"])
    groups = _target_groups(cfg)
    opts = dict(cfg["train"])
    objects, jobs, job_keys = {}, [], []
    manifest_targets = {t: {"cells": {}, "best": None} for t in cfg["targets"]}

    for variant, stages in cfg["summary_variants"].items():
        smap = SummaryMap(stages[len(train.meta["presummary"]):], sim)
        Z = smap.fit_transform(train.inputs)
        Zv = smap.transform(val.inputs)
        objects[f"summaries_{variant}.json"] = smap.to_dict()
        for arch in cfg["arches"]:
            cell = _cell_id(variant, arch)
            for (family, transform), tnames in groups.items():
                cols = [names.index(t) for t in tnames]
                priors = None
                if transform == "prior_quantile":
                    priors = [prior.spec()[t] for t in tnames]
                est = VariationalPosterior(family=family, hidden=tuple(arch), target_priors=priors, **opts)
                jobs.append((est, Z, train.gamma[:, cols], train.weights, Zv, val.gamma[:, cols]))
                job_keys.append((cell, variant, family, transform, tnames, cols))

    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_fit_group, jobs))
    else:
        results = [_fit_group(j) for j in jobs]

    for (cell, variant, family, transform, tnames, cols), (est, err), job in zip(job_keys, results, jobs):
        fname = f"model_{cell}__{family}__{transform}.json"
        if est is None:
            for t in tnames:
                manifest_targets[t]["cells"][cell] = {"status": f"diverged: {err}", "log_score": None}
            continue
        objects[fname] = est.to_dict()
        ls = est.log_density(job[4], job[5]).mean(axis=0)
        for j, t in enumerate(tnames):
            manifest_targets[t]["cells"][cell] = {
                "status": "ok", "log_score": float(ls[j]), "model_file": fname, "column": j,
                "variant": variant, "best_epoch": est.history_.best_epoch[j],
            }

    for t, info in manifest_targets.items():
        ok = {c: v for c, v in info["cells"].items() if v["status"] == "ok"}
        if ok:
            info["best"] = max(ok, key=lambda c: ok[c]["log_score"])

    manifest = {
        "format": "vanbayes-bundle",
        "version": 1,
        "config_hash": cfg["config_hash"],
        "config": {k: v for k, v in cfg.items() if k != "config_hash"},
        "target_names": names,
        "presummary": train.meta["presummary"],
        "data_shape": train.meta["data_shape"],
        "versions": {"vanbayes": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "scikit-learn": sklearn.__version__, "python": platform.python_version()},
        "targets": manifest_targets,
    }
    return manifest, objects


def cmd_train(cfg, out, workers=1):
    paths = _paths(out)
    if not paths["train"].exists() or not paths["val"].exists():
        raise ConfigError(f"no simulated batches under {out}; run simulate first")
    train, val = load_batch(paths["train"]), load_batch(paths["val"])
    _check_hash(train.meta, cfg, "training batch")
    _check_hash(val.meta, cfg, "validation batch")
    manifest, objects = train_bundle(cfg, train, val, workers)
    paths["bundle"].mkdir(parents=True, exist_ok=True)
    for fname, obj in objects.items():
        write_json(obj, paths["bundle"] / fname)
    write_json(manifest, paths["bundle"] / "manifest.json")
    return manifest


# ---------------------------------------------------------------- bundle access

class Bundle:
    """Loaded posterior bundle: per-target best networks plus summary state."""

    def __init__(self, manifest, objects, cfg=None):
        self.manifest = manifest
        self.cfg = cfg or resolve_config(manifest["config"])
        self.sim = make_simulator(self.cfg)
        self._objects = objects
        self._cache = {}

    @classmethod
    def load(cls, directory, cfg=None):
        directory = Path(directory)
        manifest = read_json(directory / "manifest.json")
        if manifest.get("format") != "vanbayes-bundle":
            raise ConfigError(f"{directory} is not a posterior bundle")
        if cfg is not None:
            _check_hash(manifest, cfg, "bundle")
        objects = {p.name: read_json(p) for p in directory.glob("*.json") if p.name != "manifest.json"}
        return cls(manifest, objects, cfg)

    @property
    def targets(self):
        return [t for t in self.manifest["config"]["targets"]]

    def _get(self, fname, kind):
        if fname not in self._cache:
            obj = self._objects[fname]
            self._cache[fname] = SummaryMap.from_dict(obj, self.sim) if kind == "summary" else VariationalPosterior.from_dict(obj)
        return self._cache[fname]

    def cell(self, target, cell=None):
        info = self.manifest["targets"][target]
        cell = cell or info["best"]
        if cell is None:
            raise ConfigError(f"no successfully trained network for target {target!r}")
        c = info["cells"][cell]
        return self._get(f"summaries_{c['variant']}.json", "summary"), self._get(c["model_file"], "model"), c["column"]

    def presummarize(self, data):
        prefix = self.manifest["presummary"]
        return Reducer(prefix, self.sim)(data) if prefix else data

    def summaries(self, target, inputs, cell=None):
        smap, _, _ = self.cell(target, cell)
        return smap.transform(inputs)


def _col(a, j):
    a = np.asarray(a)
    return a if a.ndim == 1 else a[..., j]


class TargetPosterior:
    """Single-column view of a (possibly stacked) fitted posterior."""

    def __init__(self, est, column):
        self.est, self.column = est, column
        self.family_ = est.family_

    def predict(self, X):
        return _col(self.est.predict(X), self.column)

    def interval(self, X, level=0.9):
        lo, hi = self.est.interval(X, level)
        return _col(lo, self.column), _col(hi, self.column)

    def quantile(self, X, q):
        return _col(self.est.quantile(X, q), self.column)

    def predict_params(self, X):
        return {k: _col(v, self.column) for k, v in self.est.predict_params(X).items()}

    def _fill(self, y):
        """Full target matrix with ``y`` in this column; the other columns hold
        a value inside every support and are never read."""
        y = np.asarray(y, dtype=float).ravel()
        if self.est.target_priors is not None:
            fill = [make_distribution(d).ppf(0.5) for d in self.est.target_priors]
        else:
            fill = [1.0] * self.est.n_targets_
        full = np.tile(np.asarray(fill, dtype=float), (y.shape[0], 1))
        full[:, self.column] = y
        return full[:, 0] if self.est.y_1d_ else full

    def _to_head_scale(self, y2):
        return self.est._to_head_scale(self.est._as_targets(self._fill(y2)))[:, [self.column]]

    def log_density(self, X, y):
        return _col(self.est.log_density(X, self._fill(y)), self.column)

    def cdf(self, X, y):
        return _col(self.est.cdf(X, self._fill(y)), self.column)

    def pit(self, X, y, rng=None):
        return _col(self.est.pit(X, self._fill(y), rng=rng), self.column)


def target_posterior(bundle, target, cell=None):
    smap, est, col = bundle.cell(target, cell)
    return smap, TargetPosterior(est, col)


# ---------------------------------------------------------------- diagnose

def cmd_diagnose(cfg, out, ks_gate=None, bundle=None, val=None):
    """Write calibration reports; returns ``(reports, gate_ok)``."""
    paths = _paths(out)
    bundle = bundle or Bundle.load(paths["bundle"], cfg)
    if val is None:
        val = load_batch(paths["val"])
        _check_hash(val.meta, cfg, "validation batch")
    if len(val) == 0:
        raise ConfigError("validation batch is empty")
    gate = cfg["ks_gate"] if ks_gate is None else ks_gate
    names = bundle.manifest["target_names"]
    reports, binary = [], []
    paths["diagnostics"].mkdir(parents=True, exist_ok=True)
    for t in bundle.targets:
        smap, post = target_posterior(bundle, t)
        Z = smap.transform(val.inputs)
        if Z.shape[1] != post.est.n_features_in_:
            raise ConfigError(f"summaries for target {t!r} have {Z.shape[1]} columns, network expects {post.est.n_features_in_}")
        y = val.gamma[:, names.index(t)]
        rep = calibration_report(post, Z, y, target_names=[t], levels=cfg["levels"],
                                 rng=np.random.default_rng([cfg["seed"], 7]))[0]
        reports.append(rep)
        write_pit_qq(rep.pit, paths["diagnostics"] / f"pit_{t}.csv")
        if post.est.family == "bernoulli_logit":
            binary.append({"target": t, **binary_metrics(post.predict_params(Z)["prob"], y)})
    write_reports(reports, paths["diagnostics"] / "report.csv", paths["diagnostics"] / "report.json")
    if binary:
        _write_rows(binary, paths["diagnostics"] / "binary_metrics.csv")
    gate_ok = all(r.ks_stat <= gate for r in reports)
    return reports, gate_ok


# ---------------------------------------------------------------- infer

def posterior_table(bundle, data, levels):
    """Per (dataset, target) natural head parameters, median and intervals."""
    inputs = bundle.presummarize(data)
    rows = []
    for t in bundle.targets:
        smap, post = target_posterior(bundle, t)
        Z = smap.transform(inputs)
        params = post.predict_params(Z)
        med = post.predict(Z)
        ints = {lv: post.interval(Z, lv) for lv in levels}
        for b in range(Z.shape[0]):
            row = {"dataset": b, "target": t, "median": float(med[b])}
            row.update({f"head_{k}": float(v[b]) for k, v in params.items()})
            for lv, (lo, hi) in ints.items():
                row[f"lower_{lv:g}"] = float(lo[b])
                row[f"upper_{lv:g}"] = float(hi[b])
            rows.append(row)
    return rows


def _write_rows(rows, path):
    fields = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def scenario_evaluation(bundle, cfg, workers=1):
    """Posterior medians and intervals over replicate datasets at fixed parameters."""
    sim = bundle.sim
    sc = cfg["scenario"] or {}
    theta = sc.get("theta")
    if theta is None:
        if not hasattr(sim, "scenario_theta"):
            raise ConfigError(f"no scenario parameters given and {sim.name} has no default scenario")
        theta = sim.scenario_theta(sc["setting"]) if "setting" in sc else sim.scenario_theta()
    theta = np.asarray(theta, dtype=float)
    n_rep = int(sc.get("replicates", 100))
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], SCENARIO_STREAM]))
    out = sim.scenario(theta, n_rep, rng)
    truth = sim.targets(np.tile(theta, (n_rep, 1)), out.latent)
    inputs = bundle.presummarize(out.data)
    names = bundle.manifest["target_names"]
    rows, per_target = [], {}
    for t in bundle.targets:
        smap, post = target_posterior(bundle, t)
        Z = smap.transform(inputs)
        med = post.predict(Z)
        tr = truth[:, names.index(t)]
        row = {"target": t, "replicates": n_rep}
        for lv in cfg["levels"]:
            lo, hi = post.interval(Z, lv)
            mad, cov = mad_and_coverage(med, lo, hi, tr)
            row["mad"] = float(mad[0])
            row[f"coverage_{lv:g}"] = float(cov[0])
        rows.append(row)
        per_target[t] = {"median": med, "truth": tr}
    return rows, per_target


def cmd_infer(cfg, out, observed=None, scenario=False):
    paths = _paths(out)
    bundle = Bundle.load(paths["bundle"], cfg)
    paths["infer"].mkdir(parents=True, exist_ok=True)
    result = {}
    if observed is not None:
        data = load_observed(observed, bundle.manifest["data_shape"])
        rows = posterior_table(bundle, data, cfg["levels"])
        _write_rows(rows, paths["infer"] / "posterior.csv")
        result["posterior"] = rows
    if scenario:
        rows, _ = scenario_evaluation(bundle, cfg)
        _write_rows(rows, paths["infer"] / "scenario.csv")
        result["scenario"] = rows
    if not result:
        raise ConfigError("infer needs observed data or the scenario mode")
    return result


# ---------------------------------------------------------------- invariance

def cmd_invariance_check(cfg, out, workers=1):
    """Train on the prior (unweighted) and on the training distribution
    (weighted); compare posterior medians on one validation set."""
    if not cfg["training"]:
        raise ConfigError("invariance-check needs a 'training' distribution different from the prior")
    single = dict(cfg)
    single["arches"] = cfg["arches"][:1]
    first = next(iter(cfg["summary_variants"]))
    single["summary_variants"] = {first: cfg["summary_variants"][first]}
    base_train, val = simulate_batches(single, workers, training=False)
    alt_train, _ = simulate_batches(single, workers, streams=(ALT_TRAIN_STREAM, VAL_STREAM))
    m_base, o_base = train_bundle(single, base_train, val, workers)
    m_alt, o_alt = train_bundle(single, alt_train, val, workers)
    b_base, b_alt = Bundle(m_base, o_base, single), Bundle(m_alt, o_alt, single)
    rows = []
    for t in b_base.targets:
        smap_a, post_a = target_posterior(b_base, t)
        smap_b, post_b = target_posterior(b_alt, t)
        med_a = post_a.predict(smap_a.transform(val.inputs))
        med_b = post_b.predict(smap_b.transform(val.inputs))
        rows.append({"target": t, "rms_median_discrepancy": float(np.sqrt(np.mean((med_a - med_b) ** 2))),
                     "n_train": cfg["n_train"], "n_val": cfg["n_val"],
                     "mean_weight": float(np.mean(alt_train.weights))})
    Path(out).mkdir(parents=True, exist_ok=True)
    _write_rows(rows, Path(out) / "invariance.csv")
    return rows
