"""Experiment orchestration and report writing.

Seeds derive hierarchically from ``experiment.seed``:

* ``(seed, 1, fold)``              training-subsample stream (then ``size``)
* ``(seed, 2, fold, size)``        posterior sampler, shared by every prior source
* ``(seed, 3)``                    uninformative-mixture means
* ``(seed, 10..15)``               probe inputs, energy draws, demonstrations, MC
* ``(seed, 20..21, split)``        selection subsets and prior draws
* ``(seed, 30)``                   memorisation row picks

Report CSVs contain results only, so reruns against the same replay cache are
byte-identical; timestamps and cache statistics go to ``metadata.json``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import prompts as P
from .bayes import LinearModelSpec, evaluate, prior_predictive_loglik, sample_posterior
from .config import ExperimentConfig
from .datasets import CsvSchema, Dataset, generate_synthetic, load_csv, make_folds, normalize, subsample_train, write_csv
from .diagnostics import BayesFactorReport, compare_elicited_vs_extracted, energy, icl_prior_predictive_loglik
from .elicitation import ElicitedPriorTable, MixturePrior, build_mixture, elicit_table
from .errors import ConfigurationError, ElicitError
from .gateway import Gateway
from .memorisation import header_test, row_test
from .nuts import SamplerSettings
from .probe import ProbeDesign, extract_distribution, kde_fit, mc_posterior_on_extracted_prior
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)


@dataclass
class RunReport:
    experiment: str
    config_hash: str
    tables: dict[str, list[dict]] = field(default_factory=dict)
    documents: dict[str, object] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures

    def fail(self, reason: str, **where) -> None:
        self.failures.append({**where, "reason": reason})

    def write(self, directory: str | Path) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for name, rows in self.tables.items():
            (out / f"{name}.csv").write_text(_csv_text(rows), encoding="utf-8")
        (out / "failures.csv").write_text(_csv_text(self.failures, ["reason"]), encoding="utf-8")
        for name, doc in self.documents.items():
            (out / f"{name}.json").write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
        meta = {"experiment": self.experiment, "config_hash": self.config_hash,
                "n_failures": len(self.failures), **self.provenance}
        (out / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
        return out


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def _csv_text(rows: Sequence[dict], default_header: Sequence[str] = ()) -> str:
    header: list[str] = []
    for row in rows:
        header += [k for k in row if k not in header]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header or list(default_header))
    for row in rows:
        w.writerow([_fmt(row.get(k, "")) for k in header])
    return buf.getvalue()


# -- shared building blocks --------------------------------------------------

def make_gateway(cfg: ExperimentConfig) -> Gateway:
    return Gateway(cfg.gateway, seed=cfg.experiment.seed)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    if d.kind == "synthetic":
        return generate_synthetic(d.n, d.noise_sd, seed=cfg.experiment.seed)
    schema = CsvSchema(d.target, d.task_kind, tuple(d.categorical), d.group,
                       tuple(d.features) if d.features else None, d.dataset_id)
    return load_csv(d.path, schema)


def dataset_text(cfg: ExperimentConfig, data: Dataset) -> str:
    """Ordered raw text of the dataset, as an LLM would have seen it."""
    source = cfg.dataset.raw_text or cfg.dataset.path
    if source:
        return Path(source).read_text(encoding="utf-8")
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "data.csv"
        write_csv(data, path)
        return path.read_text(encoding="utf-8")


def _roles(directory, builtin, kind, n, llm, retries):
    roles = P.load_roles(directory, kind) if directory else P.builtin_roles(builtin, kind)
    if n <= len(roles):
        return roles[:n]
    return P.expand_role(roles[0], n, llm, retries)


def task_descriptions(cfg: ExperimentConfig, llm: Gateway, data: Dataset, icl: bool = False) -> list[P.TaskDescription]:
    p = cfg.prompts
    if icl:
        dirs, builtin = (p.icl_system_dir, p.icl_user_dir), p.icl_builtin
    else:
        dirs, builtin = (p.system_dir, p.user_dir), p.builtin
    systems = _roles(dirs[0], builtin, "system", p.n_system, llm, p.paraphrase_retries)
    users = _roles(dirs[1], builtin, "user", p.n_user, llm, p.paraphrase_retries)
    info = p.expert_info
    if p.synthetic_preset is not None:
        if p.synthetic_preset not in P.SYNTHETIC_PRESETS:
            raise ConfigurationError(f"unknown synthetic preset {p.synthetic_preset!r}")
        info = P.SYNTHETIC_PRESETS[p.synthetic_preset]
    return P.build_descriptions(systems, users, data.feature_names, p.target_name or data.target_name, info)


def _choose(descriptions, k: int, what: str):
    if k > len(descriptions):
        raise ConfigurationError(f"{what}: asked for {k} descriptions, only {len(descriptions)} available")
    return P.select_descriptions(descriptions, k)


def elicited_table(cfg: ExperimentConfig, llm: Gateway, data: Dataset) -> ElicitedPriorTable:
    e = cfg.elicitation
    if e.table_path:
        return ElicitedPriorTable.load(e.table_path)
    descs = _choose(task_descriptions(cfg, llm, data), e.k, "elicitation")
    return elicit_table(descs, data.feature_names, llm, data.dataset_id, e.max_retries, cfg.experiment.workers)


def table_subset(table: ElicitedPriorTable, k: int) -> ElicitedPriorTable:
    """The first ``k`` rows, or the sub-grid of origins when k is a perfect square."""
    if k > table.k:
        raise ConfigurationError(f"table has {table.k} components, cannot take {k}")
    if not table.descriptions:
        return table.rows(range(k))
    chosen = P.select_descriptions(list(table.descriptions), k)
    index = {id(d): i for i, d in enumerate(table.descriptions)}
    return table.rows([index[id(d)] for d in chosen])


def _normalized(cfg: ExperimentConfig, data: Dataset, train_idx) -> Dataset:
    # synthetic features are standard normal by construction and never rescaled
    if cfg.dataset.kind == "synthetic" or not cfg.dataset.normalize:
        return data
    _, whole = normalize(data.subset(train_idx), data)
    return whole


def _provenance(llm: Gateway, started: datetime) -> dict:
    s = llm.stats
    return {
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "gateway": {"kind": llm.config.kind, "network_calls": s.network_calls, "mock_calls": s.mock_calls,
                    "cache_hits": s.cache_hits, "cache_writes": s.cache_writes},
    }


def _summary(values: Sequence[float]) -> dict:
    v = np.asarray(values, float)
    mean = float(v.mean())
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    half = 1.96 * sd / math.sqrt(v.size)
    return {"n_folds": int(v.size), "mean": mean, "sd": sd, "ci_low": mean - half, "ci_high": mean + half}


# -- experiments -------------------------------------------------------------

def run_prior_elicitation(cfg: ExperimentConfig, llm: Gateway | None = None) -> RunReport:
    """Elicit (or load) the prior table and tabulate its components."""
    started = datetime.now(timezone.utc)
    llm = llm or make_gateway(cfg)
    report = RunReport("elicit", cfg.config_hash())
    data = load_dataset(cfg)
    table = elicited_table(cfg, llm, data)
    dropped = cfg.elicitation.k - table.k if not cfg.elicitation.table_path else 0
    if dropped:
        report.fail(f"{dropped} descriptions rejected after retries")
    origins = [d.origin for d in table.descriptions] or [(i, 0) for i in range(table.k)]
    report.tables["prior_table"] = [
        {"system": o[0], "user": o[1], "feature": name, "mean": table.means[i, j], "std": table.stds[i, j]}
        for i, o in enumerate(origins) for j, name in enumerate(table.feature_names)
    ]
    report.documents["prior_table"] = table.to_json()
    report.provenance = _provenance(llm, started)
    return report


def prior_sources(cfg: ExperimentConfig, table: ElicitedPriorTable | None, d: int) -> dict[str, MixturePrior]:
    sources = {}
    for name in cfg.bayes.prior_sources:
        if name == "elicited":
            sources[name] = build_mixture(table)
        elif name == "uninformative":
            sources[name] = MixturePrior.uninformative(d)
        else:
            sources[name] = MixturePrior.uninformative_mixture(d, cfg.bayes.mixture_k, derive_seed(cfg.experiment.seed, 3))
    if table is not None:
        for k in cfg.elicitation.k_sweep:
            sources[f"elicited_k{k}"] = build_mixture(table_subset(table, k))
    return sources


def run_elicitation_experiment(cfg: ExperimentConfig, llm: Gateway | None = None) -> RunReport:
    started = datetime.now(timezone.utc)
    llm = llm or make_gateway(cfg)
    report = RunReport("fit", cfg.config_hash())
    seed, b = cfg.experiment.seed, cfg.bayes
    data = load_dataset(cfg)
    needs_table = "elicited" in b.prior_sources or bool(cfg.elicitation.k_sweep)
    table = elicited_table(cfg, llm, data) if needs_table else None
    if table is not None:
        report.documents["prior_table"] = table.to_json()
    sources = prior_sources(cfg, table, data.d)
    folds = make_folds(data, b.n_folds, b.test_fraction, b.split, derive_seed(seed, 0))
    settings = SamplerSettings(warmup=b.warmup, max_tree_depth=b.max_tree_depth, target_accept=b.target_accept)

    jobs = [(f, m, s) for f in range(len(folds)) for m in b.train_sizes for s in sources]

    def cell(job):
        f, m, source = job
        fold = folds[f]
        try:
            whole = _normalized(cfg, data, fold.train_indices)
            sub = subsample_train(fold, m, derive_seed(seed, 1, f))
            spec = LinearModelSpec(data.task_kind, data.d, sources[source])
            post = sample_posterior(
                spec, whole.subset(sub.train_indices), b.chains, b.samples_per_chain,
                derive_seed(seed, 2, f, m), settings, data.feature_names, b.max_divergence_rate,
            )
            metric = evaluate(post, whole.subset(fold.test_indices), data.task_kind)
        except (ElicitError, ValueError) as exc:
            return None, f"{type(exc).__name__}: {exc}"
        divergences = sum(d["divergences"] for d in post.diagnostics)
        return {"fold": f, "size": m, "source": source, "metric": metric.metric, "value": metric.mean,
                "divergences": divergences}, None

    with ThreadPoolExecutor(max_workers=cfg.experiment.workers) as pool:
        results = list(pool.map(cell, jobs))
    cells = []
    for (f, m, source), (row, error) in zip(jobs, results):
        if row is None:
            report.fail(error, fold=f, size=m, source=source)
        else:
            cells.append(row)
    report.tables["cells"] = cells
    summary = []
    for source in sources:
        for m in b.train_sizes:
            values = [c["value"] for c in cells if c["source"] == source and c["size"] == m]
            if values:
                summary.append({"source": source, "size": m, "metric": cells[0]["metric"], **_summary(values)})
    report.tables["summary"] = summary
    report.provenance = _provenance(llm, started)
    return report


def _model_class(cfg: ExperimentConfig, data: Dataset) -> str:
    return cfg.probe.model_class or ("logistic" if data.task_kind == "classification" else "linear")


def _missing_probes(extracted, k: int, reps: int, stage: str, report: RunReport) -> None:
    seen = {s.origin for s in extracted.samples}
    for i in range(k):
        for r in range(reps):
            if (i, r) not in seen:
                report.fail("no usable predictions", stage=stage, description=i, repetition=r)


def run_probe_experiment(cfg: ExperimentConfig, llm: Gateway | None = None) -> RunReport:
    started = datetime.now(timezone.utc)
    llm = llm or make_gateway(cfg)
    report = RunReport("probe", cfg.config_hash())
    seed, pc = cfg.experiment.seed, cfg.probe
    data = load_dataset(cfg)
    model_class = _model_class(cfg, data)
    whole = _normalized(cfg, data, np.arange(data.n))
    prior = build_mixture(elicited_table(cfg, llm, data))
    descs = _choose(task_descriptions(cfg, llm, data, icl=True), pc.k, "probe")
    design = ProbeDesign(data.d, pc.n_points, pc.repetitions, pc.input_low, pc.input_high, model_class)
    workers = cfg.experiment.workers

    ex_prior = extract_distribution(llm, descs, design, None, derive_seed(seed, 10), workers)
    _missing_probes(ex_prior, len(descs), pc.repetitions, "prior", report)
    rows = [{"comparison": "elicited_vs_extracted_prior",
             **_energy_row(compare_elicited_vs_extracted(prior, ex_prior, pc.energy_n, derive_seed(seed, 11)))}]
    report.tables["extracted_prior"] = _phi_rows(ex_prior, data.feature_names)

    if pc.n_demos:
        pick = derive_rng(seed, 12).choice(data.n, size=min(pc.n_demos, data.n), replace=False)
        demos = (whole.features[pick], whole.targets[pick])
        ex_post = extract_distribution(llm, descs, design, demos, derive_seed(seed, 13), workers)
        _missing_probes(ex_post, len(descs), pc.repetitions, "posterior", report)
        kde = kde_fit(ex_prior, pc.bandwidth_factor)
        mc = mc_posterior_on_extracted_prior(
            kde, ex_post.demos, model_class, pc.mc_chains, pc.mc_samples_per_chain, pc.mc_adaptation,
            derive_seed(seed, 14), pc.mc_noise_sd,
        )
        if len(mc) > pc.energy_n:
            mc = mc[derive_rng(seed, 15).choice(len(mc), pc.energy_n, replace=False)]
        rows.append({"comparison": "mc_vs_extracted_posterior", **_energy_row(energy(mc, ex_post.matrix))})
        rows.append({"comparison": "extracted_prior_vs_posterior",
                     **_energy_row(energy(ex_prior.matrix, ex_post.matrix))})
        report.tables["extracted_posterior"] = _phi_rows(ex_post, data.feature_names)
    report.tables["energy"] = rows
    report.provenance = _provenance(llm, started)
    return report


def _energy_row(result) -> dict:
    return {"statistic": result.statistic, "distance_sq": result.distance_sq, "n_x": result.n_x, "n_y": result.n_y}


def _phi_rows(extracted, names) -> list[dict]:
    rows = []
    for s in extracted.samples:
        row = {"description": s.origin[0], "repetition": s.origin[1]}
        row.update({n: v for n, v in zip([*names, "bias"], s.phi)})
        row["mse"] = s.approximation_mse
        rows.append(row)
    return rows


def run_selection_experiment(cfg: ExperimentConfig, llm: Gateway | None = None) -> RunReport:
    started = datetime.now(timezone.utc)
    llm = llm or make_gateway(cfg)
    report = RunReport("select", cfg.config_hash())
    seed, sc = cfg.experiment.seed, cfg.selection
    data = load_dataset(cfg)
    if sc.subset_size > data.n:
        raise ConfigurationError(f"subset_size {sc.subset_size} exceeds the {data.n} available rows")
    whole = _normalized(cfg, data, np.arange(data.n))
    elicited = LinearModelSpec(data.task_kind, data.d, build_mixture(elicited_table(cfg, llm, data)))
    icl_descs = _choose(task_descriptions(cfg, llm, data, icl=True), sc.k, "selection") if "icl" in sc.compare else []
    bf = {other: BayesFactorReport("elicited", other) for other in sc.compare}
    split_rows = []
    for s in range(sc.n_splits):
        subset = whole.subset(derive_rng(seed, 20, s).choice(data.n, sc.subset_size, replace=False))
        try:
            ll_e = prior_predictive_loglik(elicited, subset, sc.prior_samples, derive_seed(seed, 21, s), sc.noise)
            for other, rep in bf.items():
                if other == "icl":
                    ll_o = icl_prior_predictive_loglik(llm, icl_descs, subset, data.task_kind,
                                                       workers=cfg.experiment.workers)
                    if ll_o.size == 0:
                        raise ElicitError("every ICL description failed")
                else:
                    spec = LinearModelSpec(data.task_kind, data.d, MixturePrior.uninformative(data.d))
                    ll_o = prior_predictive_loglik(spec, subset, sc.prior_samples, derive_seed(seed, 21, s), sc.noise)
                value = rep.add_split(ll_e, ll_o)
                split_rows.append({"split": s, "method_a": "elicited", "method_b": other,
                                   "mean_loglik_a": rep.mean_loglik_a[-1], "mean_loglik_b": rep.mean_loglik_b[-1],
                                   "log_bf": value})
        except (ElicitError, ValueError) as exc:
            report.fail(f"{type(exc).__name__}: {exc}", split=s)
    report.tables["bayes_factor"] = split_rows
    summary = [{"method_a": r.method_a, "method_b": r.method_b, "n_splits": len(r.log_bayes_factor),
                "mean_log_bf": r.mean, "sd_log_bf": r.std} for r in bf.values() if r.log_bayes_factor]
    report.tables["bayes_factor_summary"] = summary
    report.documents["bayes_factor"] = {
        "dataset": data.dataset_id,
        "comparisons": [{**row, "splits": r.records(data.dataset_id)} for row, r in
                        zip(summary, [r for r in bf.values() if r.log_bayes_factor])],
    }
    report.provenance = _provenance(llm, started)
    return report


def run_memorisation_tests(cfg: ExperimentConfig, llm: Gateway | None = None) -> RunReport:
    started = datetime.now(timezone.utc)
    llm = llm or make_gateway(cfg)
    report = RunReport("memtest", cfg.config_hash())
    mc = cfg.memorisation
    data = load_dataset(cfg)
    text = dataset_text(cfg, data)
    name = data.dataset_id
    header = header_test(llm, text, mc.n_seed_rows, mc.max_tokens, name, mc.denominator)
    rows = row_test(llm, text, mc.n_trials, mc.context_rows, derive_seed(cfg.experiment.seed, 30),
                    mc.has_header, name, mc.denominator)
    report.tables["memorisation"] = [
        {"dataset": name, "test_kind": r.test_kind, "n_trials": len(r.trials), "mean": r.mean, "std": r.std}
        for r in (header, rows)
    ]
    report.documents["memorisation"] = [header.to_json(), rows.to_json()]
    report.documents["transcripts"] = {"header": header.transcripts, "row": rows.transcripts}
    report.provenance = _provenance(llm, started)
    return report


EXPERIMENTS = {
    "elicit": run_prior_elicitation,
    "fit": run_elicitation_experiment,
    "probe": run_probe_experiment,
    "select": run_selection_experiment,
    "memtest": run_memorisation_tests,
}
