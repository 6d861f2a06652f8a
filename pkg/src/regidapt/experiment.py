"""Experiment orchestration: config resolution, pipelines, manifests.

Every experiment writes a manifest (resolved config, config hash, seed,
library versions) sufficient to re-run it identically; re-running from a
manifest reproduces the report CSV byte for byte. All randomness flows from
the single top-level seed; stage seeds are derived from the stage name hash.
"""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .corpus import Dataset, Domain, load_posts, merge_domains, random_baseline
from .dccl import DcclState, train_dccl
from .encoder import (
    EncoderConfig,
    EncoderModel,
    TrainConfig,
    DEFAULT_ADAPTER_DIM,
    build_model,
    predict,
    save_checkpoint,
    train_classifier,
)
from .evaluation import (
    EvalReport,
    IdMismatch,
    MethodSpec,
    bonferroni,
    cross_validate,
    mcnemar,
    write_report_csv,
)
from .lexicon import (
    FeatureStandardizer,
    default_lexicon,
    feature_matrix,
    feature_significance,
    load_lexicon,
)
from .predictions import Prediction, load_predictions, save_predictions
from .prompting import (
    HttpLlmClient,
    classify_by_prompt,
    gold_echo_client,
    load_template,
)

METHODS = (
    "random",
    "baseline_ft",
    "adapters",
    "empath",
    "dccl",
    "prompt_short",
    "prompt_long",
)


class ConfigError(Exception):
    def __init__(self, field_path: str, message: str = ""):
        self.field_path = field_path
        super().__init__(f"config error at {field_path!r}" + (f": {message}" if message else ""))


def stage_seed(seed: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the run seed and stage name."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


@dataclass
class ExperimentConfig:
    method: str
    data_paths: dict[str, str] = field(default_factory=dict)  # domain tag -> path
    target: str = Domain.KT.value
    k: int = 5
    seed: int = 0
    out_dir: str = "run"
    # encoder
    dim: int = 64
    adapter_dim: Optional[int] = None
    max_vocab: Optional[int] = None
    # training overrides; None falls back to the per-method defaults
    learning_rate: Optional[float] = None
    epochs: Optional[int] = None
    weight_decay: Optional[float] = None
    batch_size: int = 16
    # loop-2 overrides (dccl only)
    learning_rate2: Optional[float] = None
    epochs2: Optional[int] = None
    weight_decay2: Optional[float] = None
    # dccl coefficients
    alpha: float = 1e-3
    beta: float = 5.0
    lambda_: float = 3e-2
    tau: float = 0.05
    epsilon: float = 1.0
    projection_dim: Optional[int] = None
    # lexicon augmentation
    lexicon_path: Optional[str] = None
    lexicon_alpha: float = 0.05
    lexicon_test: str = "welch_two_sample"
    # prompting
    prompt_client: str = "mock"  # mock (gold echo) | http

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {METHODS}, got {self.method!r}")
        if self.k < 2:
            raise ConfigError("k", "need k >= 2")
        if self.target not in [d.value for d in Domain]:
            raise ConfigError("target", f"unknown domain {self.target!r}")
        if self.prompt_client not in ("mock", "http"):
            raise ConfigError("prompt_client", f"got {self.prompt_client!r}")

    def train_config(self, scope: str = "full") -> TrainConfig:
        defaults_key = {
            "baseline_ft": "baseline_ft",
            "adapters": "adapters",
            "empath": "empath",
            "dccl": "dccl_loop1",
        }[self.method]
        overrides = {}
        if self.learning_rate is not None:
            overrides["learning_rate"] = self.learning_rate
        if self.epochs is not None:
            overrides["epochs"] = self.epochs
        if self.weight_decay is not None:
            overrides["weight_decay"] = self.weight_decay
        overrides["batch_size"] = self.batch_size
        overrides["trainable_scope"] = scope
        overrides["seed"] = stage_seed(self.seed, "train")
        return TrainConfig.for_method(defaults_key, **overrides)

    def train_config_loop2(self) -> TrainConfig:
        overrides = {}
        if self.learning_rate2 is not None:
            overrides["learning_rate"] = self.learning_rate2
        if self.epochs2 is not None:
            overrides["epochs"] = self.epochs2
        if self.weight_decay2 is not None:
            overrides["weight_decay"] = self.weight_decay2
        overrides["batch_size"] = self.batch_size
        overrides["seed"] = stage_seed(self.seed, "train2")
        return TrainConfig.for_method("dccl_loop2", **overrides)

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["data_paths"] = dict(self.data_paths)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown key")
        return cls(**raw)


# Flat key=value config file; dotted keys address nested fields.
_KEY_MAP = {
    "method": ("method", str),
    "target": ("target", str),
    "k": ("k", int),
    "seed": ("seed", int),
    "out_dir": ("out_dir", str),
    "model.dim": ("dim", int),
    "model.adapter_dim": ("adapter_dim", int),
    "model.max_vocab": ("max_vocab", int),
    "train.learning_rate": ("learning_rate", float),
    "train.epochs": ("epochs", int),
    "train.weight_decay": ("weight_decay", float),
    "train.batch_size": ("batch_size", int),
    "train2.learning_rate": ("learning_rate2", float),
    "train2.epochs": ("epochs2", int),
    "train2.weight_decay": ("weight_decay2", float),
    "dccl.alpha": ("alpha", float),
    "dccl.beta": ("beta", float),
    "dccl.lambda": ("lambda_", float),
    "dccl.tau": ("tau", float),
    "dccl.epsilon": ("epsilon", float),
    "dccl.projection_dim": ("projection_dim", int),
    "lexicon.path": ("lexicon_path", str),
    "lexicon.alpha": ("lexicon_alpha", float),
    "lexicon.test": ("lexicon_test", str),
    "prompt.client": ("prompt_client", str),
}


def parse_config_file(path: str | Path, default_method: Optional[str] = None) -> ExperimentConfig:
    """Parse the flat ``key = value`` experiment config format."""
    raw: dict = {}
    data_paths: dict[str, str] = {}
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {i}", f"expected key = value, got {line!r}")
        key, value = key.strip(), value.strip()
        if key.startswith("data."):
            data_paths[key[5:].upper()] = value
        elif key in _KEY_MAP:
            attr, cast = _KEY_MAP[key]
            try:
                raw[attr] = cast(value)
            except ValueError:
                raise ConfigError(key, f"cannot parse {value!r}") from None
        else:
            raise ConfigError(key, "unknown key")
    if "method" not in raw:
        if default_method is None:
            raise ConfigError("method", "required")
        raw["method"] = default_method
    raw["data_paths"] = data_paths
    return ExperimentConfig.from_dict(raw)


def _load_datasets(config: ExperimentConfig) -> dict[str, Dataset]:
    out = {}
    for tag, path in sorted(config.data_paths.items()):
        fmt = "csv" if str(path).endswith(".csv") else "jsonl"
        out[tag] = load_posts(path, format=fmt)
    return out


def _encoder_config(config: ExperimentConfig, with_adapters: bool, extra_width: int = 0) -> EncoderConfig:
    adapter_dim = config.adapter_dim
    if with_adapters and adapter_dim is None:
        adapter_dim = DEFAULT_ADAPTER_DIM
    return EncoderConfig(
        dim=config.dim,
        adapter_dim=adapter_dim if with_adapters else None,
        extra_feature_width=extra_width,
        init_seed=stage_seed(config.seed, "init"),
    )


class _Predictor:
    """Callable over a test dataset; carries the trained model when there is one."""

    def __init__(self, fn, model: Optional[EncoderModel] = None):
        self._fn = fn
        self.model = model

    def __call__(self, test_data: Dataset) -> list[Prediction]:
        return self._fn(test_data)


def _method_spec(config: ExperimentConfig, datasets: dict[str, Dataset]) -> MethodSpec:
    method = config.method

    if method == "random":
        def trainer(train_data: Dataset, fold_seed: int):
            return lambda test_data: random_baseline(test_data, fold_seed)

        return MethodSpec(name=method, trainer=trainer, uses_target_data=False)

    if method in ("prompt_short", "prompt_long"):
        template = load_template("short" if method == "prompt_short" else "long")

        def trainer(train_data: Dataset, fold_seed: int):
            def predictor(test_data: Dataset):
                if config.prompt_client == "http":
                    client = HttpLlmClient()
                else:
                    client = gold_echo_client(test_data)
                preds, _ = classify_by_prompt(client, template, test_data)
                return preds

            return predictor

        return MethodSpec(name=method, trainer=trainer, uses_target_data=False)

    if method in ("baseline_ft", "adapters"):
        scope = "adapters_only" if method == "adapters" else "full"

        def trainer(train_data: Dataset, fold_seed: int):
            cfg = _encoder_config(config, with_adapters=method == "adapters")
            cfg = EncoderConfig(**{**cfg.__dict__, "init_seed": fold_seed})
            model = build_model([p.text for p in train_data.posts], cfg, config.max_vocab)
            tc = config.train_config(scope)
            tc = TrainConfig(**{**tc.__dict__, "seed": fold_seed})
            train_classifier(model, train_data, tc)
            return _Predictor(lambda test_data: predict(model, test_data), model)

        return MethodSpec(name=method, trainer=trainer, uses_target_data=True)

    if method == "empath":
        lexicon = load_lexicon(config.lexicon_path) if config.lexicon_path else default_lexicon()

        def trainer(train_data: Dataset, fold_seed: int):
            target_part = Dataset(
                [p for p in train_data.posts if p.domain.value == config.target]
            )
            selection_data = target_part if len(target_part) else train_data
            selection = feature_significance(
                selection_data, lexicon, test=config.lexicon_test, alpha=config.lexicon_alpha
            )
            names = list(selection.selected)
            col = {c: i for i, c in enumerate(lexicon.categories)}
            idx = [col[c] for c in names]
            train_feats = feature_matrix(train_data, lexicon)[:, idx]
            scaler = FeatureStandardizer().fit(train_feats)
            cfg = _encoder_config(config, with_adapters=False, extra_width=len(names))
            cfg = EncoderConfig(**{**cfg.__dict__, "init_seed": fold_seed})
            model = build_model([p.text for p in train_data.posts], cfg, config.max_vocab)
            tc = config.train_config("full")
            tc = TrainConfig(**{**tc.__dict__, "seed": fold_seed})
            train_classifier(model, train_data, tc, features=scaler.transform(train_feats))

            def fn(test_data: Dataset):
                feats = scaler.transform(feature_matrix(test_data, lexicon)[:, idx])
                return predict(model, test_data, features=feats)

            return _Predictor(fn, model)

        return MethodSpec(name=method, trainer=trainer, uses_target_data=True)

    if method == "dccl":
        def trainer(train_data: Dataset, fold_seed: int):
            cfg = _encoder_config(config, with_adapters=False)
            cfg = EncoderConfig(**{**cfg.__dict__, "init_seed": fold_seed})
            model = build_model([p.text for p in train_data.posts], cfg, config.max_vocab)
            domains = sorted({p.domain.value for p in train_data.posts})
            state = DcclState.create(
                model,
                domains=domains,
                projection_dim=config.projection_dim,
                seed=fold_seed,
                alpha=config.alpha,
                beta=config.beta,
                lambda_=config.lambda_,
                tau=config.tau,
                epsilon=config.epsilon,
            )
            tc1 = config.train_config("full")
            tc1 = TrainConfig(**{**tc1.__dict__, "seed": fold_seed})
            tc2 = config.train_config_loop2()
            tc2 = TrainConfig(**{**tc2.__dict__, "seed": fold_seed + 1})
            train_dccl(model, state, train_data, tc1, tc2)
            return _Predictor(lambda test_data: predict(model, test_data), model)

        return MethodSpec(name=method, trainer=trainer, uses_target_data=True)

    raise ConfigError("method", f"unhandled method {method!r}")


def _manifest(config: ExperimentConfig) -> dict:
    resolved = config.to_dict()
    blob = json.dumps(resolved, sort_keys=True)
    return {
        "config": resolved,
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
        "seed": config.seed,
        "versions": {
            "regidapt": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    }


def run_experiment(config: ExperimentConfig) -> tuple[EvalReport, Path]:
    """Execute the configured pipeline; write report, predictions, manifest.

    For trained methods, the checkpoint written is the model retrained on the
    full source + target data with the final-stage seed.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    datasets = _load_datasets(config)
    if config.target not in datasets:
        raise ConfigError("target", f"no data path given for target domain {config.target}")
    target = datasets[config.target]
    sources = [ds for tag, ds in sorted(datasets.items()) if tag != config.target]
    train_source: Optional[Dataset] = None
    for ds in sources:
        train_source = ds if train_source is None else _merge(train_source, ds)

    spec = _method_spec(config, datasets)
    cv_seed = stage_seed(config.seed, "folds")

    # a manifest with complete=false marks partial artifacts if a stage dies
    manifest = _manifest(config)
    manifest["complete"] = False
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))

    report = cross_validate(spec, train_source, target, config.k, cv_seed)
    write_report_csv([report], out_dir / "report.csv")
    save_predictions(report.predictions, out_dir / "predictions.jsonl")

    if config.method in ("baseline_ft", "adapters", "empath", "dccl"):
        train_data = target
        if train_source is not None and len(train_source):
            train_data = _merge(train_source, target)
        predictor = spec.trainer(train_data, stage_seed(config.seed, "final"))
        model = getattr(predictor, "model", None)
        if model is not None:
            save_checkpoint(model, out_dir / "model.ckpt")

    manifest["complete"] = True
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return report, out_dir


def _merge(a: Dataset, b: Dataset) -> Dataset:
    return merge_domains(a, b)


def rerun_from_manifest(manifest_path: str | Path, out_dir: Optional[str] = None) -> tuple[EvalReport, Path]:
    manifest = json.loads(Path(manifest_path).read_text())
    raw = manifest["config"]
    if out_dir is not None:
        raw = {**raw, "out_dir": out_dir}
    config = ExperimentConfig.from_dict(raw)
    return run_experiment(config)


def compare_runs(
    prediction_paths: list[str | Path],
    gold_path: str | Path,
    alpha: float = 0.05,
) -> list[dict]:
    """All-pairs McNemar over prediction files, Bonferroni-corrected.

    Prediction files must cover the same post ids; gold labels come from the
    referenced posts file.
    """
    fmt = "csv" if str(gold_path).endswith(".csv") else "jsonl"
    gold_data = load_posts(gold_path, format=fmt)
    gold_by_id = {}
    for p in gold_data.posts:
        if p.label is None:
            raise IdMismatch(f"gold post {p.id} has no label")
        gold_by_id[p.id] = p.label

    runs = []
    for path in prediction_paths:
        path = Path(path)
        preds = {p.post_id: p.label for p in load_predictions(path)}
        # run directories all call their file predictions.jsonl; label by directory
        name = path.parent.name if path.stem == "predictions" and path.parent.name else path.stem
        runs.append((name, path, preds))

    ids = None
    for _, path, preds in runs:
        missing = set(preds) - set(gold_by_id)
        if missing:
            raise IdMismatch(f"{path}: ids not in gold: {sorted(missing)[:5]}")
        if ids is None:
            ids = sorted(preds)
        elif sorted(preds) != ids:
            raise IdMismatch(f"{path}: prediction ids do not align with the other runs")
    if ids is None:
        raise IdMismatch("no prediction files given")

    gold = [gold_by_id[i] for i in ids]
    pairs = [(i, j) for i in range(len(runs)) for j in range(i + 1, len(runs))]
    results = []
    p_values = []
    for i, j in pairs:
        a = [runs[i][2][pid] for pid in ids]
        b = [runs[j][2][pid] for pid in ids]
        res = mcnemar(a, b, gold, alpha=alpha)
        p_values.append(res.p_value)
        results.append((runs[i][0], runs[j][0], res))
    corrected = bonferroni(p_values, alpha)
    rows = []
    for (name_a, name_b, res), reject in zip(results, corrected.reject):
        rows.append(
            {
                "method_a": name_a,
                "method_b": name_b,
                "statistic": res.statistic,
                "p_value": res.p_value,
                "alpha_adjusted": corrected.alpha_adjusted,
                "reject": reject,
                "test": res.method,
            }
        )
    return rows


def write_comparison_csv(rows: list[dict], path: str | Path) -> None:
    import csv

    columns = ["method_a", "method_b", "statistic", "p_value", "alpha_adjusted", "reject", "test"]
    with Path(path).open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] for c in columns])
