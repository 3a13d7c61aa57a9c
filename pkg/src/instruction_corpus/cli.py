"""Command-line entry point: one subcommand per pipeline stage, sharing a YAML config.

Errors print a single line ``error: <Type>: <message>`` on stderr and exit 1.
"""
from __future__ import annotations

import logging
import sys
from pathlib import Path

import click
import numpy as np

from .analyze import export_long, fit_design, read_long, save_fit
from .backends import make_chat, make_embedder
from .cluster import build_dendrogram, cluster_stats, cut_dendrogram, threshold_id
from .config import PipelineConfig, load_config
from .core import Condition, InstructionVariant, Split, load_questions, save_questions, validate_corpus
from .errors import ConfigError, PipelineError
from .evalharness import ExperimentPlan, aggregate, length_profile, lengths_to_csv, run_plan, threshold_sweep
from .infer import PromptBudget, query_text
from .instructgen import generate_corpus, make_job
from .judge import judge_corpus
from .retrieve import build_index
from .workspace import ResultsStore, Workspace

log = logging.getLogger("instruction_corpus")


class Ctx:
    def __init__(self, cfg: PipelineConfig, dry_run: bool):
        self.cfg = cfg
        self.dry_run = dry_run
        self.ws = Workspace(cfg.output_root)
        self.backends = []

    def embedder(self):
        e = make_embedder(self.cfg.embedding, self.ws.cache)
        self.backends.append(e)
        return e

    def chat(self, bcfg):
        c = make_chat(bcfg)
        self.backends.append(c)
        return c

    def report_calls(self):
        click.echo(f"backend calls: {sum(b.calls for b in self.backends)}")

    def thresholds(self, task, given) -> list[str]:
        if given:
            return [threshold_id(t) for t in given]
        tids = self.cfg.task(task).threshold_ids
        if not tids:
            raise ConfigError(f"no thresholds configured for {task}")
        return tids

    def variants(self, given) -> list[InstructionVariant]:
        return [InstructionVariant.parse(v) for v in given] if given else list(self.cfg.variants)


pass_ctx = click.make_pass_decorator(Ctx)

task_opt = click.option("--task", "tasks", multiple=True, help="Task name (repeatable); default all configured.")
thr_opt = click.option("--threshold", "thresholds", multiple=True, type=float,
                       help="Cut threshold (repeatable); default the configured list.")
var_opt = click.option("--variant", "variants", multiple=True, help="Instruction variant slug (repeatable).")


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except PipelineError as exc:
            msg = " ".join(str(exc).split())
            click.echo(f"error: {type(exc).__name__}: {msg}", err=True)
            sys.exit(1)


@click.group(cls=_Group)
@click.option("--config", "config_path", default="pipeline.yaml", show_default=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override rng_seed from the config.")
@click.option("--dry-run", is_flag=True, help="Print the work plan; make no backend calls.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config_path, seed, dry_run, verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(config_path)
    if seed is not None:
        cfg.seed = seed
    ctx.obj = Ctx(cfg, dry_run)


@main.command()
@task_opt
@pass_ctx
def ingest(c: Ctx, tasks):
    """Validate each configured corpus file and copy it into the workspace."""
    for t in c.cfg.select_tasks(tasks):
        if not t.corpus.exists():
            raise ConfigError(f"corpus file not found: {t.corpus}")
        qs = load_questions(t.corpus)
        bad = [q.id for q in qs if q.task != t.name]
        if bad:
            raise ConfigError(f"{t.corpus}: {len(bad)} questions not tagged {t.name} (first {bad[0]})")
        report = validate_corpus(qs)
        if report:
            raise ConfigError(f"{t.corpus}: {report.format()}")
        n_train = sum(q.split == Split.TRAIN for q in qs)
        click.echo(f"{t.name}: {n_train} train, {len(qs) - n_train} test")
        if not c.dry_run:
            save_questions(c.ws.corpus_path(t.name), qs)


@main.command()
@task_opt
@pass_ctx
def embed(c: Ctx, tasks):
    """Embed every question (stem plus options) into the cache."""
    for t in c.cfg.select_tasks(tasks):
        qs = c.ws.questions(t.name)
        texts = sorted({query_text(q) for q in qs})
        if c.dry_run:
            todo = sum(c.ws.cache.get(c.cfg.embedding.model_name, x) is None for x in texts)
            click.echo(f"{t.name}: {len(texts)} texts, {todo} not cached")
            continue
        c.embedder().embed_batch(texts)
        click.echo(f"{t.name}: {len(texts)} texts embedded")
    c.report_calls()


def _train_vectors(c: Ctx, task: str):
    train = c.ws.questions(task, Split.TRAIN)
    vecs = c.embedder().embed_batch([query_text(q) for q in train])
    return train, vecs


@main.command()
@task_opt
@thr_opt
@pass_ctx
def cluster(c: Ctx, tasks, thresholds):
    """Build the dendrogram over training questions, then write a cut and stats per threshold."""
    for t in c.cfg.select_tasks(tasks):
        tids = c.thresholds(t.name, thresholds)
        if c.dry_run:
            n = len(c.ws.questions(t.name, Split.TRAIN))
            click.echo(f"{t.name}: cluster {n} training questions, cuts {', '.join(tids)}")
            continue
        train, vecs = _train_vectors(c, t.name)
        dpath = c.ws.dendrogram_path(t.name)
        if dpath.exists():
            d = c.ws.dendrogram(t.name)
            if d.n_leaves != len(train):
                d = build_dendrogram(vecs)
        else:
            d = build_dendrogram(vecs)
        d.save(dpath)
        ids = [q.id for q in train]
        values = thresholds or t.thresholds
        X = np.stack([v.array for v in vecs])
        for thr in values:
            tid = threshold_id(thr)
            cut = cut_dendrogram(d, thr, ids, tid)
            path = c.ws.cut_path(t.name, tid)
            path.parent.mkdir(parents=True, exist_ok=True)
            cut.save(path)
            stats = cluster_stats(cut, X)
            c.ws.save_stats(t.name, tid, stats)
            sil = "n/a" if stats.silhouette is None else f"{stats.silhouette:.3f}"
            click.echo(f"{t.name} {tid}: {stats.n_clusters} clusters, mean {stats.mean_size:.2f}, "
                       f"max {stats.max_size}, silhouette {sil}")
    c.report_calls()


@main.command()
@task_opt
@thr_opt
@var_opt
@pass_ctx
def gen(c: Ctx, tasks, thresholds, variants):
    """Generate one instruction per cluster for each variant (resumable)."""
    chat = None
    for t in c.cfg.select_tasks(tasks):
        questions = {q.id: q for q in c.ws.questions(t.name, Split.TRAIN)}
        for tid in c.thresholds(t.name, thresholds):
            cut = c.ws.cut(t.name, tid)
            for v in c.variants(variants):
                store = c.ws.store(t.name, tid, v, must_exist=False)
                todo = [cl for cl in cut.clusters if cl.cluster_id not in store]
                if c.dry_run:
                    click.echo(f"{t.name} {tid} {v.slug}: {len(todo)} of {len(cut.clusters)} clusters to generate")
                    for cl in todo[:3]:
                        job = make_job(cl, v, questions, c.cfg.seed)
                        click.echo(f"  {cl.cluster_id}: examples {', '.join(q.id for q in job.sampled_examples)}")
                    continue
                chat = chat or c.chat(c.cfg.generator)
                res = generate_corpus(cut, v, questions, chat, store, c.cfg.seed,
                                      retries=c.cfg.generation_retries, tokenizer_id=c.cfg.budget.tokenizer_id)
                click.echo(f"{t.name} {tid} {v.slug}: {len(res.instructions)} generated, "
                           f"{len(res.failed)} failed, {len(store)} stored")
    c.report_calls()


@main.command()
@task_opt
@thr_opt
@pass_ctx
def index(c: Ctx, tasks, thresholds):
    """Build the retrieval index of cluster centroids for each cut."""
    for t in c.cfg.select_tasks(tasks):
        tids = c.thresholds(t.name, thresholds)
        if c.dry_run:
            for tid in tids:
                click.echo(f"{t.name} {tid}: index {len(c.ws.cut(t.name, tid).clusters)} clusters")
            continue
        train, vecs = _train_vectors(c, t.name)
        by_q = {q.id: v for q, v in zip(train, vecs)}
        for tid in tids:
            idx = build_index(c.ws.cut(t.name, tid), by_q, c.cfg.index_mode)
            idx.save(c.ws.index_dir(t.name, tid))
            click.echo(f"{t.name} {tid}: {len(idx)} entries, dim {idx.dim}")
    c.report_calls()


def _plan(c: Ctx, tasks, thresholds, conditions, k, budget) -> ExperimentPlan:
    sel = c.cfg.select_tasks(tasks)
    if not c.cfg.models:
        raise ConfigError("config lists no evaluation models")
    return ExperimentPlan(
        tasks=[t.name for t in sel],
        models=list(c.cfg.models),
        conditions=[Condition.parse(x) for x in conditions] if conditions else list(c.cfg.conditions),
        threshold_ids={t.name: c.thresholds(t.name, thresholds) for t in sel},
        embedding=c.cfg.embedding,
        k=k or c.cfg.k,
        budget=budget,
        rng_seed=c.cfg.seed,
        output=str(c.ws.results_path),
    )


def _budget(c: Ctx, context_limit, reserved, tokenizer) -> PromptBudget:
    b = c.cfg.budget
    return PromptBudget(context_limit or b.context_limit_tokens, reserved or b.reserved_output_tokens,
                        tokenizer or b.tokenizer_id)


run_opts = [
    click.option("--condition", "conditions", multiple=True, help="e.g. zeroshot, instructed:grad_verbose, knowledge_only."),
    click.option("--k", type=click.IntRange(min=1), default=None),
    click.option("--context-limit", type=int, default=None),
    click.option("--reserved-output", type=int, default=None),
    click.option("--tokenizer", default=None),
]


def _with(opts):
    def deco(f):
        for o in reversed(opts):
            f = o(f)
        return f
    return deco


@main.command()
@task_opt
@thr_opt
@_with(run_opts)
@pass_ctx
def run(c: Ctx, tasks, thresholds, conditions, k, context_limit, reserved_output, tokenizer):
    """Evaluate every (question, model, condition, threshold) cell; existing rows are kept."""
    plan = _plan(c, tasks, thresholds, conditions, k, _budget(c, context_limit, reserved_output, tokenizer))
    ws = c.ws
    if c.dry_run:
        run_plan(plan, ws, dry_run=True)
        c.report_calls()
        return
    embedder = c.embedder() if any(not x.is_zero_shot for x in plan.conditions) else None
    chats = {m.model_name: c.chat(m) for m in plan.models}
    path = run_plan(plan, ws, chats, embedder)
    click.echo(f"results: {path}")
    c.report_calls()


@main.command("aggregate")
@click.option("--csv", "csv_path", type=click.Path(), default=None)
@pass_ctx
def aggregate_cmd(c: Ctx, csv_path):
    """Accuracy per cell with deltas against zero-shot."""
    records = ResultsStore(c.ws.results_path).records()
    if not records:
        raise ConfigError(f"no results in {c.ws.results_path}")
    table = aggregate(records)
    click.echo(table.to_text())
    table.to_csv(csv_path or c.ws.root / "results" / "accuracy.csv")


@main.command()
@task_opt
@thr_opt
@_with(run_opts)
@pass_ctx
def sweep(c: Ctx, tasks, thresholds, conditions, k, context_limit, reserved_output, tokenizer):
    """Accuracy against cluster granularity for one task and condition."""
    if len(tasks) != 1:
        raise ConfigError("sweep takes exactly one --task")
    if len(conditions) > 1:
        raise ConfigError("sweep takes at most one --condition")
    cond = Condition.parse(conditions[0]) if conditions else None
    plan = _plan(c, tasks, thresholds, [str(cond)] if cond else ["instructed:hs_concise"], k,
                 _budget(c, context_limit, reserved_output, tokenizer))
    task = plan.tasks[0]
    tids = plan.thresholds_for(task)
    if c.dry_run:
        run_plan(plan, c.ws, dry_run=True)
        c.report_calls()
        return
    chats = {m.model_name: c.chat(m) for m in plan.models}
    table = threshold_sweep(plan, c.ws, task, tids, cond, chat_backends=chats, embedder=c.embedder())
    click.echo(table.to_text())
    table.to_csv(c.ws.root / "results" / f"sweep_{task.lower()}.csv")
    c.report_calls()


@main.command()
@task_opt
@thr_opt
@var_opt
@click.option("--repeats", type=click.IntRange(min=1), default=None)
@pass_ctx
def judge(c: Ctx, tasks, thresholds, variants, repeats):
    """Score stored instructions with the judge model and summarize by variant."""
    instrs = []
    for t in c.cfg.select_tasks(tasks):
        for tid in c.thresholds(t.name, thresholds):
            for v in c.variants(variants):
                instrs.extend(c.ws.store(t.name, tid, v).instructions.values())
    repeats = repeats or c.cfg.judge_repeats
    if c.dry_run:
        click.echo(f"judge {len(instrs)} instructions x {repeats} runs")
        c.report_calls()
        return
    summary = judge_corpus(instrs, c.chat(c.cfg.judge), repeats)
    out = c.ws.root / "judge"
    out.mkdir(parents=True, exist_ok=True)
    summary.write_judged(out / "judged.jsonl")
    click.echo(summary.to_csv(out / "quality.csv"), nl=False)
    for key, why in sorted(summary.failures.items()):
        click.echo(f"failed {key}: {why}", err=True)
    c.report_calls()


@main.command()
@task_opt
@pass_ctx
def lengths(c: Ctx, tasks):
    """Token-length profile of stored instructions per task and variant."""
    pairs = [(t.name, s) for t in c.cfg.select_tasks(tasks) for s in c.ws.stores(t.name)]
    text = lengths_to_csv(length_profile(pairs, c.cfg.budget.tokenizer_id))
    out = c.ws.root / "results" / "lengths.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    click.echo(text, nl=False)


def _long_path(c: Ctx) -> Path:
    return c.ws.root / "results" / "long.csv"


@main.command()
@pass_ctx
def export(c: Ctx):
    """Write the long-format regression table (one row per result)."""
    records = ResultsStore(c.ws.results_path).records()
    if not records:
        raise ConfigError(f"no results in {c.ws.results_path}")
    path = export_long(records, c.cfg.registry, _long_path(c), c.cfg.design)
    click.echo(f"{len(records)} rows -> {path}")


@main.command()
@pass_ctx
def analyze(c: Ctx):
    """Fit the logistic model on the exported table; print coefficients and marginal effects."""
    path = _long_path(c)
    if not path.exists():
        records = ResultsStore(c.ws.results_path).records()
        if not records:
            raise ConfigError(f"no results in {c.ws.results_path}")
        export_long(records, c.cfg.registry, path, c.cfg.design)
    fit = fit_design(read_long(path))
    save_fit(fit, c.ws.root / "results" / "fit.json")
    click.echo(fit.to_text())


if __name__ == "__main__":
    main()
