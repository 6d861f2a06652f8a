"""Command-line entry point for the full experiment pipeline.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime/training error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import corpus as corpus_mod
from .corpus import (
    CorpusError,
    Dataset,
    label_distribution,
    load_posts,
    pseudonymize_dataset,
    save_posts,
    stratified_kfold,
)
from .dccl import DcclError, DcclState, save_dccl_checkpoint, train_dccl
from .encoder import (
    EncoderConfig,
    EncoderError,
    NonFiniteLoss,
    TrainConfig,
    build_model,
    load_checkpoint,
    predict as model_predict,
    save_checkpoint,
    train_classifier,
)
from .evaluation import (
    EvaluationError,
    cohen_kappa,
    mcnemar,
    mmd as mmd_fn,
    weighted_metrics,
)
from .experiment import (
    ConfigError,
    ExperimentConfig,
    compare_runs,
    parse_config_file,
    rerun_from_manifest,
    run_experiment,
    stage_seed,
    write_comparison_csv,
)
from .lexicon import (
    LexiconError,
    default_lexicon,
    extract_features,
    feature_significance,
    load_lexicon,
)
from .prompting import (
    EchoLlmClient,
    HttpLlmClient,
    MockTranslationClient,
    PromptingError,
    classify_by_prompt,
    gold_echo_client,
    load_template,
    rewrite_dataset,
    translate_dataset,
)
from .predictions import load_predictions, save_predictions
from . import synthetic

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _fail(code: int, error: Exception) -> None:
    click.echo(f"error: {error}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map library exceptions onto the documented exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            _fail(EXIT_CONFIG, e)
        except (CorpusError, LexiconError, EvaluationError, FileNotFoundError) as e:
            _fail(EXIT_DATA, e)
        except (EncoderError, DcclError, PromptingError, NonFiniteLoss) as e:
            _fail(EXIT_RUNTIME, e)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _load(path: str) -> Dataset:
    fmt = "csv" if path.endswith(".csv") else "jsonl"
    return load_posts(path, format=fmt)


@click.group()
def main() -> None:
    """Cognitive distortion detection across languages and registers."""


# --- corpus ----------------------------------------------------------------

@main.group()
def corpus() -> None:
    """Ingest, inspect, and split post corpora."""


@corpus.command("ingest")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--format", "fmt", type=click.Choice(["jsonl", "csv"]), default="jsonl")
@click.option("--pseudonymize", "do_pseudonymize", is_flag=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@_guard
def corpus_ingest(in_path: str, fmt: str, do_pseudonymize: bool, seed: int, out_path: str) -> None:
    """Read posts and write them back in canonical JSONL."""
    data = load_posts(in_path, format=fmt)
    if do_pseudonymize:
        data = pseudonymize_dataset(data, seed)
    save_posts(data, out_path)
    click.echo(f"wrote {len(data)} posts to {out_path}")


@corpus.command("stats")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@_guard
def corpus_stats(in_path: str) -> None:
    """Per-(domain, label) counts."""
    data = _load(in_path)
    counts = label_distribution(data)
    for (domain, label), n in sorted(counts.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
        name = "distorted" if label == corpus_mod.DISTORTED else "not_distorted"
        click.echo(f"{domain.value}\t{name}\t{n}")
    click.echo(f"total\t\t{len(data)}")


@corpus.command("split")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--k", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_guard
def corpus_split(in_path: str, k: int, seed: int, out_dir: str) -> None:
    """Write stratified k-fold splits as JSON files."""
    data = _load(in_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fold in stratified_kfold(data, k, seed):
        blob = {
            "fold_index": fold.fold_index,
            "seed": fold.seed,
            "train_ids": sorted(fold.train_ids),
            "test_ids": sorted(fold.test_ids),
        }
        (out / f"fold{fold.fold_index}.json").write_text(json.dumps(blob, indent=2))
    click.echo(f"wrote {k} folds to {out_dir}")


@corpus.command("synth")
@click.option(
    "--which",
    type=click.Choice(["en", "kt", "two-domain", "shifted"]),
    required=True,
)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@_guard
def corpus_synth(which: str, seed: int, out_path: str) -> None:
    """Generate a synthetic stand-in corpus (the annotated data is restricted)."""
    maker = {
        "en": synthetic.en_reference,
        "kt": synthetic.kt_reference,
        "two-domain": synthetic.two_domain_corpus,
        "shifted": synthetic.shifted_category_corpus,
    }[which]
    data = maker(seed=seed)
    save_posts(data, out_path)
    click.echo(f"wrote {len(data)} posts to {out_path}")


# --- lexicon -----------------------------------------------------------------

@main.group("lexicon")
def lexicon_group() -> None:
    """Lexicon feature extraction and selection."""


@lexicon_group.command("extract")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--lexicon", "lexicon_path", type=click.Path(exists=True))
@click.option("--normalization", type=click.Choice(["per_token", "raw_count"]), default="per_token")
@click.option("--out", "out_path", required=True, type=click.Path())
@_guard
def lexicon_extract(in_path: str, lexicon_path: str | None, normalization: str, out_path: str) -> None:
    """Write one JSONL feature record per post."""
    lex = load_lexicon(lexicon_path) if lexicon_path else default_lexicon()
    data = _load(in_path)
    with Path(out_path).open("w", encoding="utf-8") as f:
        for post in data.posts:
            fv = extract_features(post.text, lex, normalization)
            f.write(json.dumps({"id": post.id, "values": list(fv.values)}) + "\n")
    click.echo(f"wrote {len(data)} feature rows ({len(lex)} categories) to {out_path}")


@lexicon_group.command("select")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--lexicon", "lexicon_path", type=click.Path(exists=True))
@click.option("--alpha", default=0.05, show_default=True)
@click.option("--test", type=click.Choice(["welch", "paired"]), default="welch")
@click.option("--out", "out_path", type=click.Path())
@_guard
def lexicon_select(in_path: str, lexicon_path: str | None, alpha: float, test: str, out_path: str | None) -> None:
    """Significance-based category selection on a labeled corpus."""
    lex = load_lexicon(lexicon_path) if lexicon_path else default_lexicon()
    data = _load(in_path)
    test_name = "welch_two_sample" if test == "welch" else "paired"
    selection = feature_significance(data, lex, test=test_name, alpha=alpha)
    click.echo(f"{len(selection.selected)} categories significant at alpha={alpha}")
    for name in selection.selected:
        click.echo(f"{name}\t{selection.p_values[name]:.3e}")
    if out_path:
        Path(out_path).write_text(
            json.dumps(
                {
                    "alpha": alpha,
                    "test": test_name,
                    "selected": list(selection.selected),
                    "p_values": selection.p_values,
                },
                indent=2,
                sort_keys=True,
            )
        )


# --- training ----------------------------------------------------------------

@main.group()
def train() -> None:
    """Train classifier checkpoints."""


@train.command("baseline")
@click.option("--train", "train_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--adapters/--no-adapters", default=False, show_default=True)
@click.option("--dim", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@_guard
def train_baseline(train_path: str, config_path: str | None, adapters: bool, dim: int, seed: int, out_path: str) -> None:
    """Fine-tune the encoder (optionally adapters-only) and save a checkpoint."""
    data = _load(train_path)
    method = "adapters" if adapters else "baseline_ft"
    overrides: dict = {}
    if config_path:
        cfg_file = parse_config_file(config_path, default_method=method)
        for name in ("learning_rate", "epochs", "weight_decay"):
            v = getattr(cfg_file, name)
            if v is not None:
                overrides[name] = v
        overrides["batch_size"] = cfg_file.batch_size
    scope = "adapters_only" if adapters else "full"
    tc = TrainConfig.for_method(method, seed=stage_seed(seed, "train"), trainable_scope=scope, **overrides)
    enc_cfg = EncoderConfig(
        dim=dim,
        adapter_dim=64 if adapters else None,
        init_seed=stage_seed(seed, "init"),
    )
    model = build_model([p.text for p in data.posts], enc_cfg)
    _, curve = train_classifier(model, data, tc)
    save_checkpoint(model, out_path)
    click.echo(f"final epoch loss {curve[-1]:.4f}" if curve else "no epochs run")
    click.echo(f"saved checkpoint to {out_path}")


@train.command("dccl")
@click.option("--train-en", "en_path", required=True, type=click.Path(exists=True))
@click.option("--train-kt", "kt_path", required=True, type=click.Path(exists=True))
@click.option("--alpha", default=1e-3, show_default=True)
@click.option("--beta", default=5.0, show_default=True)
@click.option("--lambda", "lambda_", default=3e-2, show_default=True)
@click.option("--tau", default=0.05, show_default=True)
@click.option("--epsilon", default=1.0, show_default=True)
@click.option("--dim", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@_guard
def train_dccl_cmd(
    en_path: str, kt_path: str, alpha: float, beta: float, lambda_: float,
    tau: float, epsilon: float, dim: int, seed: int, out_path: str,
) -> None:
    """Two-loop domain-confused contrastive training on EN + KT data."""
    en = _load(en_path)
    kt = _load(kt_path)
    data = corpus_mod.merge_domains(en, kt)
    enc_cfg = EncoderConfig(dim=dim, init_seed=stage_seed(seed, "init"))
    model = build_model([p.text for p in data.posts], enc_cfg)
    domains = sorted({p.domain.value for p in data.posts})
    state = DcclState.create(
        model, domains=domains, seed=stage_seed(seed, "dccl"),
        alpha=alpha, beta=beta, lambda_=lambda_, tau=tau, epsilon=epsilon,
    )
    tc1 = TrainConfig.for_method("dccl_loop1", seed=stage_seed(seed, "train"))
    tc2 = TrainConfig.for_method("dccl_loop2", seed=stage_seed(seed, "train2"))
    train_dccl(model, state, data, tc1, tc2)
    save_dccl_checkpoint(model, state, out_path)
    click.echo(f"saved DCCL checkpoint to {out_path}")


@main.command("predict")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@_guard
def predict_cmd(ckpt_path: str, in_path: str, out_path: str) -> None:
    """Run a saved checkpoint over a posts file."""
    model = load_checkpoint(ckpt_path)
    data = _load(in_path)
    preds = model_predict(model, data)
    save_predictions(preds, out_path)
    click.echo(f"wrote {len(preds)} predictions to {out_path}")


# --- prompting ----------------------------------------------------------------

def _llm_client(kind: str, data: Dataset):
    if kind == "http":
        return HttpLlmClient()
    return gold_echo_client(data)


@main.group()
def prompt() -> None:
    """Prompt-based classification, rewriting, and translation."""


@prompt.command("classify")
@click.option("--template", "template_name", type=click.Choice(["short", "long"]), required=True)
@click.option("--client", "client_kind", type=click.Choice(["mock", "http"]), default="mock")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@_guard
def prompt_classify(template_name: str, client_kind: str, in_path: str, out_path: str) -> None:
    """Yes/No classification via a system prompt. The mock client echoes gold labels."""
    data = _load(in_path)
    template = load_template(template_name)
    client = _llm_client(client_kind, data)
    preds, report = classify_by_prompt(client, template, data)
    save_predictions(preds, out_path)
    click.echo(
        f"classified {len(preds)}/{report.total}; "
        f"parse failures {report.parse_failures}, client errors {report.client_errors}"
    )


@prompt.command("rewrite")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--examples", "examples_path", type=click.Path(exists=True), help="JSONL posts file with 4 style examples")
@click.option("--client", "client_kind", type=click.Choice(["mock", "http"]), default="mock")
@click.option("--out", "out_path", required=True, type=click.Path())
@_guard
def prompt_rewrite(in_path: str, examples_path: str | None, client_kind: str, out_path: str) -> None:
    """Rewrite posts in adolescent-forum style; the mock client echoes inputs."""
    data = _load(in_path)
    if examples_path:
        examples = [p.text for p in _load(examples_path).posts[:4]]
    else:
        examples = [p.text for p in data.posts[:4]]
    if len(examples) < 4:
        raise ConfigError("examples", "need at least 4 example posts")
    client = HttpLlmClient() if client_kind == "http" else EchoLlmClient()
    rewritten = rewrite_dataset(client, data, examples)
    save_posts(rewritten, out_path)
    click.echo(f"wrote {len(rewritten)} rewritten posts to {out_path}")


@prompt.command("translate")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--table", "table_path", type=click.Path(exists=True), help="JSON source->target lookup table for the mock")
@click.option("--out", "out_path", required=True, type=click.Path())
@_guard
def prompt_translate(in_path: str, table_path: str | None, out_path: str) -> None:
    """EN -> NL translation through the translation client (mock by default)."""
    data = _load(in_path)
    table = json.loads(Path(table_path).read_text()) if table_path else {}
    client = MockTranslationClient(table)
    translated = translate_dataset(client, data)
    save_posts(translated, out_path)
    click.echo(f"wrote {len(translated)} translated posts to {out_path}")


# --- evaluation ----------------------------------------------------------------

@main.group("eval")
def eval_group() -> None:
    """Metrics and statistical tests."""


def _gold_labels(gold_path: str, ids: list[str]) -> list[int]:
    gold = _load(gold_path)
    by_id = {p.id: p.label for p in gold.posts}
    missing = [i for i in ids if i not in by_id or by_id[i] is None]
    if missing:
        raise EvaluationError(f"gold labels missing for ids {missing[:5]}")
    return [by_id[i] for i in ids]


@eval_group.command("metrics")
@click.option("--preds", "preds_path", required=True, type=click.Path(exists=True))
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True))
@_guard
def eval_metrics(preds_path: str, gold_path: str) -> None:
    """Weighted precision/recall/F1 of a prediction file against gold labels."""
    preds = load_predictions(preds_path)
    y_pred = [p.label for p in preds]
    y_true = _gold_labels(gold_path, [p.post_id for p in preds])
    scores = weighted_metrics(y_true, y_pred)
    click.echo(f"precision\t{scores.precision:.4f}")
    click.echo(f"recall\t{scores.recall:.4f}")
    click.echo(f"f1\t{scores.f1:.4f}")


@eval_group.command("kappa")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@_guard
def eval_kappa(in_path: str) -> None:
    """Cohen's kappa between the first two annotator labels in a posts file."""
    data = _load(in_path)
    pairs = [
        p.annotator_labels for p in data.posts
        if p.annotator_labels is not None and len(p.annotator_labels) >= 2
    ]
    if not pairs:
        raise EvaluationError("no posts with two annotator labels")
    a = [t[0] for t in pairs]
    b = [t[1] for t in pairs]
    click.echo(f"kappa\t{cohen_kappa(a, b):.4f}\t(n={len(pairs)})")


@eval_group.command("mcnemar")
@click.option("--preds-a", required=True, type=click.Path(exists=True))
@click.option("--preds-b", required=True, type=click.Path(exists=True))
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True))
@click.option("--alpha", default=0.05, show_default=True)
@click.option("--correction", type=click.Choice(["none", "bonferroni"]), default="none")
@click.option("--num-tests", default=1, show_default=True, help="family size for bonferroni")
@_guard
def eval_mcnemar(preds_a: str, preds_b: str, gold_path: str, alpha: float, correction: str, num_tests: int) -> None:
    """Pairwise McNemar test between two prediction files."""
    a = load_predictions(preds_a)
    b = load_predictions(preds_b)
    ids = [p.post_id for p in a]
    if ids != [p.post_id for p in b]:
        raise EvaluationError("prediction files do not align on post ids")
    y_true = _gold_labels(gold_path, ids)
    adjusted = alpha / num_tests if correction == "bonferroni" else alpha
    res = mcnemar([p.label for p in a], [p.label for p in b], y_true, alpha=adjusted)
    click.echo(f"b\t{res.b}\nc\t{res.c}")
    click.echo(f"statistic\t{res.statistic}")
    click.echo(f"p_value\t{res.p_value:.6g}")
    click.echo(f"alpha_adjusted\t{res.alpha_adjusted:.6g}")
    click.echo(f"reject\t{res.reject}")
    click.echo(f"test\t{res.method}")


@eval_group.command("mmd")
@click.option("--embeddings-a", required=True, type=click.Path(exists=True))
@click.option("--embeddings-b", required=True, type=click.Path(exists=True))
@click.option("--bandwidth", type=float)
@click.option("--biased", is_flag=True, help="use the biased (non-negative) estimator")
@_guard
def eval_mmd(embeddings_a: str, embeddings_b: str, bandwidth: float | None, biased: bool) -> None:
    """MMD^2 between two embedding export files."""
    from .evaluation import load_embeddings

    X = np.array([r["embedding"] for r in load_embeddings(embeddings_a)])
    Y = np.array([r["embedding"] for r in load_embeddings(embeddings_b)])
    res = mmd_fn(X, Y, bandwidth=bandwidth, unbiased=not biased)
    click.echo(f"mmd2\t{res.value:.6f}")
    click.echo(f"kernel\t{res.kernel} (bandwidth {res.bandwidth:.4f})")
    click.echo(f"samples\t{res.n_x} vs {res.n_y}")


@eval_group.command("export")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@_guard
def eval_export(ckpt_path: str, in_path: str, out_path: str) -> None:
    """Export per-post embeddings for an external 2-D projector."""
    from .evaluation import export_embeddings

    model = load_checkpoint(ckpt_path)
    data = _load(in_path)
    export_embeddings(model, data, out_path)
    click.echo(f"wrote {len(data)} embedding records to {out_path}")


@eval_group.command("cv")
@click.option("--method", required=True, type=click.Choice(["baseline", "adapters", "empath", "dccl", "random", "prompt"]))
@click.option("--target", "target_path", required=True, type=click.Path(exists=True))
@click.option("--source", "source_path", type=click.Path(exists=True))
@click.option("--k", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path())
@_guard
def eval_cv(method: str, target_path: str, source_path: str | None, k: int, seed: int, out_path: str | None) -> None:
    """Cross-validated evaluation of one method (thin wrapper over `run`)."""
    method_name = {
        "baseline": "baseline_ft",
        "adapters": "adapters",
        "empath": "empath",
        "dccl": "dccl",
        "random": "random",
        "prompt": "prompt_short",
    }[method]
    target = _load(target_path)
    target_tag = sorted({p.domain.value for p in target.posts})[0]
    data_paths = {target_tag: target_path}
    if source_path:
        source = _load(source_path)
        source_tag = sorted({p.domain.value for p in source.posts})[0]
        data_paths[source_tag] = source_path
    config = ExperimentConfig(
        method=method_name,
        data_paths=data_paths,
        target=target_tag,
        k=k,
        seed=seed,
        out_dir=out_path or f"cv_{method}",
    )
    report, out_dir = run_experiment(config)
    click.echo(
        f"{report.method}: F1 {report.mean('f1'):.3f} +- {report.std('f1'):.3f} "
        f"(precision {report.mean('precision'):.3f}, recall {report.mean('recall'):.3f})"
    )
    click.echo(f"artifacts in {out_dir}")


# --- experiment orchestration ---------------------------------------------------

@main.command("run")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path())
@_guard
def run_cmd(config_path: str | None, manifest_path: str | None, out_dir: str | None) -> None:
    """Run an experiment from a config file, or re-run one from its manifest."""
    if bool(config_path) == bool(manifest_path):
        raise ConfigError("config", "pass exactly one of --config / --manifest")
    if manifest_path:
        report, out = rerun_from_manifest(manifest_path, out_dir)
    else:
        config = parse_config_file(config_path)
        if out_dir:
            config = ExperimentConfig.from_dict({**config.to_dict(), "out_dir": out_dir})
        report, out = run_experiment(config)
    click.echo(
        f"{report.method}: F1 {report.mean('f1'):.3f} +- {report.std('f1'):.3f} "
        f"on {'+'.join(report.test_domains)}"
    )
    click.echo(f"artifacts in {out}")


@main.command("compare")
@click.argument("prediction_files", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True))
@click.option("--alpha", default=0.05, show_default=True)
@click.option("--out", "out_path", type=click.Path())
@_guard
def compare_cmd(prediction_files: tuple[str, ...], gold_path: str, alpha: float, out_path: str | None) -> None:
    """All-pairs McNemar tests with Bonferroni correction."""
    if len(prediction_files) < 2:
        raise ConfigError("prediction_files", "need at least two prediction files")
    rows = compare_runs(list(prediction_files), gold_path, alpha=alpha)
    for row in rows:
        click.echo(
            f"{row['method_a']} vs {row['method_b']}: p={row['p_value']:.4g} "
            f"(alpha'={row['alpha_adjusted']:.4g}) reject={row['reject']}"
        )
    if out_path:
        write_comparison_csv(rows, out_path)
        click.echo(f"wrote {out_path}")


if __name__ == "__main__":
    main()
