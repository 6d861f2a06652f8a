import json

import pytest
from click.testing import CliRunner

from regidapt.cli import main
from regidapt.corpus import Dataset, Domain, Post, load_posts, save_posts
from regidapt.experiment import (
    ConfigError,
    ExperimentConfig,
    compare_runs,
    parse_config_file,
    rerun_from_manifest,
    run_experiment,
    stage_seed,
)
from regidapt.predictions import Prediction, save_predictions
from regidapt import synthetic


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("data")
    corpus = synthetic.two_domain_corpus(n_per_domain=60, seed=3)
    en = Dataset([p for p in corpus.posts if p.domain == Domain.EN])
    kt = Dataset([p for p in corpus.posts if p.domain == Domain.KT])
    save_posts(en, tmp / "en.jsonl")
    save_posts(kt, tmp / "kt.jsonl")
    save_posts(synthetic.kt_reference(seed=0), tmp / "kt_ref.jsonl")
    return tmp


class TestConfig:
    def test_invalid_method(self):
        with pytest.raises(ConfigError) as err:
            ExperimentConfig(method="nonsense")
        assert err.value.field_path == "method"

    def test_parse_config_file(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text(
            "# experiment\n"
            "method = dccl\n"
            "seed = 7\n"
            "k = 3\n"
            "data.en = en.jsonl\n"
            "data.kt = kt.jsonl\n"
            "train.learning_rate = 0.05\n"
            "dccl.alpha = 0.2\n"
        )
        config = parse_config_file(path)
        assert config.method == "dccl"
        assert config.seed == 7
        assert config.data_paths == {"EN": "en.jsonl", "KT": "kt.jsonl"}
        assert config.learning_rate == 0.05
        assert config.alpha == 0.2

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("method = random\nwhatever = 3\n")
        with pytest.raises(ConfigError):
            parse_config_file(path)

    def test_unparseable_value(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("method = random\nk = banana\n")
        with pytest.raises(ConfigError):
            parse_config_file(path)

    def test_training_defaults_per_method(self):
        cfg = ExperimentConfig(method="baseline_ft")
        tc = cfg.train_config()
        assert (tc.learning_rate, tc.epochs, tc.weight_decay) == (5e-5, 6, 0.0)
        cfg = ExperimentConfig(method="adapters")
        tc = cfg.train_config("adapters_only")
        assert (tc.learning_rate, tc.epochs, tc.weight_decay) == (1e-4, 6, 0.0)
        cfg = ExperimentConfig(method="empath")
        tc = cfg.train_config()
        assert (tc.learning_rate, tc.epochs, tc.weight_decay) == (2e-5, 3, 0.01)
        cfg = ExperimentConfig(method="dccl")
        tc1, tc2 = cfg.train_config(), cfg.train_config_loop2()
        assert (tc1.learning_rate, tc1.epochs, tc1.weight_decay) == (1e-5, 3, 0.01)
        assert (tc2.learning_rate, tc2.epochs, tc2.weight_decay) == (2e-5, 2, 0.01)

    def test_stage_seeds_differ_by_stage(self):
        assert stage_seed(3, "folds") != stage_seed(3, "train")
        assert stage_seed(3, "folds") == stage_seed(3, "folds")


class TestRunExperiment:
    def test_random_method_report(self, data_dir, tmp_path):
        config = ExperimentConfig(
            method="random",
            data_paths={"KT": str(data_dir / "kt_ref.jsonl")},
            target="KT", k=5, seed=1, out_dir=str(tmp_path / "rand"),
        )
        report, out = run_experiment(config)
        assert 0.40 <= report.mean("f1") <= 0.62
        assert (out / "report.csv").exists()
        assert (out / "predictions.jsonl").exists()
        assert (out / "manifest.json").exists()

    def test_manifest_rerun_byte_identical(self, data_dir, tmp_path):
        config = ExperimentConfig(
            method="baseline_ft",
            data_paths={"EN": str(data_dir / "en.jsonl"), "KT": str(data_dir / "kt.jsonl")},
            target="KT", k=3, seed=5, out_dir=str(tmp_path / "ft1"),
            dim=12, learning_rate=0.3, epochs=1, batch_size=16,
        )
        _, out1 = run_experiment(config)
        _, out2 = rerun_from_manifest(out1 / "manifest.json", out_dir=str(tmp_path / "ft2"))
        assert (out1 / "report.csv").read_bytes() == (out2 / "report.csv").read_bytes()
        assert (out1 / "predictions.jsonl").read_bytes() == (out2 / "predictions.jsonl").read_bytes()

    def test_empath_method_pipeline(self, data_dir, tmp_path):
        # the stand-in's selected categories are its class signal, so the
        # feature-augmented head separates the classes outright
        config = ExperimentConfig(
            method="empath",
            data_paths={"KT": str(data_dir / "kt_ref.jsonl")},
            target="KT", k=3, seed=2, out_dir=str(tmp_path / "emp"),
            dim=12, learning_rate=0.3, epochs=2, batch_size=16,
        )
        report, out = run_experiment(config)
        assert report.mean("f1") > 0.9
        assert (out / "model.ckpt").exists()

    def test_adapters_method_pipeline(self, data_dir, tmp_path):
        config = ExperimentConfig(
            method="adapters",
            data_paths={"KT": str(data_dir / "kt.jsonl")},
            target="KT", k=3, seed=2, out_dir=str(tmp_path / "ad"),
            dim=12, adapter_dim=8, learning_rate=0.3, epochs=2, batch_size=16,
        )
        report, _ = run_experiment(config)
        assert len(report.per_fold) == 3

    def test_missing_target_config_error(self, data_dir, tmp_path):
        config = ExperimentConfig(
            method="random",
            data_paths={"EN": str(data_dir / "en.jsonl")},
            target="KT", k=2, seed=0, out_dir=str(tmp_path / "x"),
        )
        with pytest.raises(ConfigError):
            run_experiment(config)

    def test_manifest_contents(self, data_dir, tmp_path):
        config = ExperimentConfig(
            method="random",
            data_paths={"KT": str(data_dir / "kt.jsonl")},
            target="KT", k=2, seed=9, out_dir=str(tmp_path / "m"),
        )
        _, out = run_experiment(config)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 9
        assert manifest["config"]["method"] == "random"
        assert "config_hash" in manifest and "versions" in manifest
        assert manifest["complete"] is True


class TestCompareRuns:
    def _write_preds(self, path, data, labels):
        save_predictions(
            [Prediction.from_label(p.id, l) for p, l in zip(data.posts, labels)], path
        )

    def test_identical_predictions_no_rejections(self, data_dir, tmp_path):
        data = load_posts(data_dir / "kt_ref.jsonl")
        labels = [p.label for p in data.posts]
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        self._write_preds(a, data, labels)
        self._write_preds(b, data, labels)
        rows = compare_runs([a, b], data_dir / "kt_ref.jsonl")
        assert len(rows) == 1
        assert rows[0]["p_value"] == 1.0
        assert not rows[0]["reject"]
        assert rows[0]["alpha_adjusted"] == 0.05  # one pair: no correction effect

    def test_three_runs_three_pairs(self, data_dir, tmp_path):
        data = load_posts(data_dir / "kt_ref.jsonl")
        gold = [p.label for p in data.posts]
        flipped = [1 - l for l in gold]
        half = [l if i % 2 else 1 - l for i, l in enumerate(gold)]
        paths = []
        for name, labels in (("a", gold), ("b", flipped), ("c", half)):
            path = tmp_path / f"{name}.jsonl"
            self._write_preds(path, data, labels)
            paths.append(path)
        rows = compare_runs(paths, data_dir / "kt_ref.jsonl")
        assert len(rows) == 3
        assert all(r["alpha_adjusted"] == pytest.approx(0.05 / 3) for r in rows)

    def test_id_mismatch(self, data_dir, tmp_path):
        data = load_posts(data_dir / "kt_ref.jsonl")
        a = tmp_path / "a.jsonl"
        b = tmp_path / "b.jsonl"
        self._write_preds(a, data, [p.label for p in data.posts])
        save_predictions([Prediction.from_label("nope", 1)], b)
        from regidapt.evaluation import IdMismatch

        with pytest.raises(IdMismatch):
            compare_runs([a, b], data_dir / "kt_ref.jsonl")


class TestCli:
    def setup_method(self):
        self.runner = CliRunner()

    def test_corpus_ingest_stats_split(self, data_dir, tmp_path):
        out = tmp_path / "clean.jsonl"
        result = self.runner.invoke(main, [
            "corpus", "ingest", "--in", str(data_dir / "kt_ref.jsonl"),
            "--format", "jsonl", "--pseudonymize", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        stats = self.runner.invoke(main, ["corpus", "stats", "--in", str(out)])
        assert stats.exit_code == 0
        assert "KT\tdistorted\t177" in stats.output
        assert "KT\tnot_distorted\t273" in stats.output
        split_dir = tmp_path / "folds"
        split = self.runner.invoke(main, [
            "corpus", "split", "--in", str(out), "--k", "5", "--seed", "3",
            "--out", str(split_dir),
        ])
        assert split.exit_code == 0
        folds = sorted(split_dir.glob("fold*.json"))
        assert len(folds) == 5
        blob = json.loads(folds[0].read_text())
        assert len(blob["test_ids"]) == 90

    def test_corpus_synth(self, tmp_path):
        out = tmp_path / "synth.jsonl"
        result = self.runner.invoke(main, [
            "corpus", "synth", "--which", "kt", "--out", str(out),
        ])
        assert result.exit_code == 0
        assert len(load_posts(out)) == 450

    def test_missing_file_is_usage_error(self, tmp_path):
        result = self.runner.invoke(main, [
            "corpus", "stats", "--in", str(tmp_path / "nope.jsonl"),
        ])
        assert result.exit_code == 2  # click validates the path

    def test_data_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{broken\n")
        result = self.runner.invoke(main, ["corpus", "stats", "--in", str(bad)])
        assert result.exit_code == 3

    def test_runtime_error_exit_code(self, data_dir, tmp_path):
        corrupt = tmp_path / "corrupt.ckpt"
        import zipfile

        with zipfile.ZipFile(corrupt, "w") as zf:
            zf.writestr("format", "not-a-real-format")
        result = self.runner.invoke(main, [
            "predict", "--ckpt", str(corrupt),
            "--in", str(data_dir / "kt.jsonl"), "--out", str(tmp_path / "p.jsonl"),
        ])
        assert result.exit_code == 4

    def test_lexicon_extract_and_select(self, data_dir, tmp_path):
        out = tmp_path / "features.jsonl"
        result = self.runner.invoke(main, [
            "lexicon", "extract", "--in", str(data_dir / "kt_ref.jsonl"),
            "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(rows) == 450 and len(rows[0]["values"]) == 195

        selection_path = tmp_path / "selection.json"
        result = self.runner.invoke(main, [
            "lexicon", "select", "--in", str(data_dir / "kt_ref.jsonl"),
            "--alpha", "0.05", "--test", "welch", "--out", str(selection_path),
        ])
        assert result.exit_code == 0, result.output
        assert "68 categories significant" in result.output
        blob = json.loads(selection_path.read_text())
        assert len(blob["selected"]) == 68

    def test_train_predict_cycle(self, data_dir, tmp_path):
        train_cfg = tmp_path / "train.cfg"
        train_cfg.write_text("train.learning_rate = 0.1\ntrain.epochs = 2\n")
        ckpt = tmp_path / "model.ckpt"
        result = self.runner.invoke(main, [
            "train", "baseline", "--train", str(data_dir / "kt.jsonl"),
            "--config", str(train_cfg),
            "--dim", "12", "--seed", "4", "--out", str(ckpt),
        ])
        assert result.exit_code == 0, result.output
        preds_path = tmp_path / "preds.jsonl"
        result = self.runner.invoke(main, [
            "predict", "--ckpt", str(ckpt), "--in", str(data_dir / "kt.jsonl"),
            "--out", str(preds_path),
        ])
        assert result.exit_code == 0, result.output
        assert len(preds_path.read_text().splitlines()) == 60

    def test_eval_export_embeddings(self, data_dir, tmp_path):
        ckpt = tmp_path / "m.ckpt"
        result = self.runner.invoke(main, [
            "train", "baseline", "--train", str(data_dir / "kt.jsonl"),
            "--dim", "8", "--seed", "1", "--out", str(ckpt),
        ])
        assert result.exit_code == 0, result.output
        out = tmp_path / "emb.jsonl"
        result = self.runner.invoke(main, [
            "eval", "export", "--ckpt", str(ckpt),
            "--in", str(data_dir / "kt.jsonl"), "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(rows) == 60 and len(rows[0]["embedding"]) == 8

    def test_train_dccl_command(self, data_dir, tmp_path):
        ckpt = tmp_path / "dccl.ckpt"
        result = self.runner.invoke(main, [
            "train", "dccl", "--train-en", str(data_dir / "en.jsonl"),
            "--train-kt", str(data_dir / "kt.jsonl"),
            "--dim", "12", "--seed", "4", "--out", str(ckpt),
        ])
        assert result.exit_code == 0, result.output
        assert ckpt.exists()
        # the extended checkpoint still drives plain prediction
        preds_path = tmp_path / "dccl_preds.jsonl"
        result = self.runner.invoke(main, [
            "predict", "--ckpt", str(ckpt), "--in", str(data_dir / "kt.jsonl"),
            "--out", str(preds_path),
        ])
        assert result.exit_code == 0, result.output
        assert len(preds_path.read_text().splitlines()) == 60

    def test_prompt_classify_rewrite_translate(self, data_dir, tmp_path):
        preds = tmp_path / "preds.jsonl"
        result = self.runner.invoke(main, [
            "prompt", "classify", "--template", "short", "--client", "mock",
            "--in", str(data_dir / "kt.jsonl"), "--out", str(preds),
        ])
        assert result.exit_code == 0, result.output

        rewritten = tmp_path / "rewritten.jsonl"
        result = self.runner.invoke(main, [
            "prompt", "rewrite", "--in", str(data_dir / "en.jsonl"),
            "--out", str(rewritten),
        ])
        assert result.exit_code == 0, result.output
        assert all(p.domain == Domain.R for p in load_posts(rewritten).posts)

        translated = tmp_path / "translated.jsonl"
        result = self.runner.invoke(main, [
            "prompt", "translate", "--in", str(data_dir / "en.jsonl"),
            "--out", str(translated),
        ])
        assert result.exit_code == 0, result.output
        assert all(p.domain == Domain.NL for p in load_posts(translated).posts)

    def test_eval_metrics_and_mcnemar(self, data_dir, tmp_path):
        data = load_posts(data_dir / "kt_ref.jsonl")
        preds_path = tmp_path / "p.jsonl"
        save_predictions(
            [Prediction.from_label(p.id, p.label) for p in data.posts], preds_path
        )
        result = self.runner.invoke(main, [
            "eval", "metrics", "--preds", str(preds_path),
            "--gold", str(data_dir / "kt_ref.jsonl"),
        ])
        assert result.exit_code == 0, result.output
        assert "f1\t1.0000" in result.output

        result = self.runner.invoke(main, [
            "eval", "mcnemar", "--preds-a", str(preds_path), "--preds-b", str(preds_path),
            "--gold", str(data_dir / "kt_ref.jsonl"), "--correction", "bonferroni",
            "--num-tests", "3",
        ])
        assert result.exit_code == 0, result.output
        assert "p_value\t1" in result.output

    def test_eval_kappa(self, tmp_path):
        posts = Dataset([
            *(Post(id=f"a{i}", author="x", text="t", domain=Domain.KT, label=1,
                   annotator_labels=(1, 1)) for i in range(3)),
            Post(id="b", author="x", text="t", domain=Domain.KT, label=0,
                 annotator_labels=(0, 0)),
        ])
        path = tmp_path / "annotated.jsonl"
        save_posts(posts, path)
        result = self.runner.invoke(main, ["eval", "kappa", "--in", str(path)])
        assert result.exit_code == 0, result.output
        assert "kappa\t1.0000" in result.output

    def test_run_and_compare(self, data_dir, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(
            "method = random\n"
            f"data.kt = {data_dir / 'kt_ref.jsonl'}\n"
            "target = KT\nk = 5\nseed = 2\n"
            f"out_dir = {tmp_path / 'run_a'}\n"
        )
        result = self.runner.invoke(main, ["run", "--config", str(cfg)])
        assert result.exit_code == 0, result.output

        result = self.runner.invoke(main, [
            "run", "--manifest", str(tmp_path / "run_a" / "manifest.json"),
            "--out", str(tmp_path / "run_b"),
        ])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "run_a" / "report.csv").read_bytes() == (
            tmp_path / "run_b" / "report.csv"
        ).read_bytes()

        result = self.runner.invoke(main, [
            "compare",
            str(tmp_path / "run_a" / "predictions.jsonl"),
            str(tmp_path / "run_b" / "predictions.jsonl"),
            "--gold", str(data_dir / "kt_ref.jsonl"),
            "--out", str(tmp_path / "cmp.csv"),
        ])
        assert result.exit_code == 0, result.output
        assert "reject=False" in result.output

    def test_run_requires_exactly_one_source(self):
        result = self.runner.invoke(main, ["run"])
        assert result.exit_code == 2

    def test_eval_mmd_command(self, tmp_path):
        import numpy as np

        rng = np.random.RandomState(0)
        for name, shift in (("a", 0.0), ("b", 5.0)):
            rows = [
                json.dumps({"id": str(i), "domain": "EN", "label": 0,
                            "embedding": list(rng.normal(shift, 1, size=3))})
                for i in range(50)
            ]
            (tmp_path / f"{name}.jsonl").write_text("\n".join(rows) + "\n")
        result = self.runner.invoke(main, [
            "eval", "mmd", "--embeddings-a", str(tmp_path / "a.jsonl"),
            "--embeddings-b", str(tmp_path / "b.jsonl"),
        ])
        assert result.exit_code == 0, result.output
        assert "mmd2" in result.output
