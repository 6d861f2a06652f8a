import json
import re
from collections import Counter

import pytest

from regidapt.corpus import (
    DISTORTED,
    NOT_DISTORTED,
    Dataset,
    Domain,
    DuplicatePostId,
    MalformedRecord,
    MissingField,
    Post,
    TooFewExamples,
    UnknownDomainTag,
    UnlabeledPost,
    label_distribution,
    label_totals,
    load_posts,
    merge_domains,
    pseudonymize,
    pseudonymize_dataset,
    random_baseline,
    save_posts,
    stratified_kfold,
)
from regidapt import synthetic
from regidapt.evaluation import weighted_metrics


def make_post(i, label=None, domain=Domain.EN, text="hello world", author="someone"):
    return Post(id=f"p{i}", author=author, text=text, domain=domain, label=label)


def balanced_dataset(n, domain=Domain.KT):
    return Dataset([make_post(i, label=i % 2, domain=domain) for i in range(n)])


class TestLoadPosts:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert len(load_posts(path)) == 0

    def test_en_reference_counts(self, tmp_path):
        data = synthetic.en_reference(seed=0)
        path = tmp_path / "en.jsonl"
        save_posts(data, path)
        loaded = load_posts(path)
        assert len(loaded) == 2526
        totals = label_totals(loaded)
        assert totals == {NOT_DISTORTED: 933, DISTORTED: 1593}

    def test_missing_text_field(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"id": "a", "author": "x", "domain": "EN"}) + "\n")
        with pytest.raises(MissingField) as err:
            load_posts(path)
        assert err.value.name == "text"

    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        ok = json.dumps({"id": "a", "author": "x", "text": "t", "domain": "EN"})
        path.write_text(ok + "\n{not json\n")
        with pytest.raises(MalformedRecord) as err:
            load_posts(path)
        assert err.value.line_number == 2

    def test_unknown_domain(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"id": "a", "author": "x", "text": "t", "domain": "XX"}) + "\n")
        with pytest.raises(UnknownDomainTag):
            load_posts(path)

    def test_unknown_fields_ignored(self, tmp_path):
        path = tmp_path / "extra.jsonl"
        rec = {"id": "a", "author": "x", "text": "t", "domain": "EN", "mystery": 42}
        path.write_text(json.dumps(rec) + "\n")
        assert load_posts(path).posts[0].id == "a"

    def test_csv_import(self, tmp_path):
        path = tmp_path / "posts.csv"
        path.write_text(
            "id,author,text,domain,label,annotator_labels\n"
            'a,alice,"one, two",EN,1,1|0\n'
            "b,bob,three,KT,,\n"
        )
        data = load_posts(path, format="csv")
        assert data.posts[0].text == "one, two"
        assert data.posts[0].annotator_labels == (1, 0)
        assert data.posts[1].label is None

    def test_csv_bad_row_width(self, tmp_path):
        short = tmp_path / "short.csv"
        short.write_text("id,author,text,domain\na,alice\n")
        with pytest.raises(MalformedRecord):
            load_posts(short, format="csv")
        long = tmp_path / "long.csv"
        long.write_text("id,author,text,domain\na,alice,hi,EN,1,extra,extra\n")
        with pytest.raises(MalformedRecord):
            load_posts(long, format="csv")

    def test_roundtrip_identical(self, tmp_path):
        posts = [
            Post(id="a", author="x", text="hëllo", domain=Domain.EN, label=1,
                 annotator_labels=(1, 0), confusing=True),
            Post(id="b", author="y", text="bye", domain=Domain.KT),
        ]
        path = tmp_path / "round.jsonl"
        save_posts(Dataset(posts), path)
        loaded = load_posts(path)
        assert loaded.posts == posts

    def test_duplicate_ids_rejected(self):
        with pytest.raises(DuplicatePostId):
            Dataset([make_post(1), make_post(1)])


class TestPseudonymize:
    def test_author_format(self):
        post = make_post(0, author="jan_2009")
        out = pseudonymize(post, rng_seed=1)
        assert re.fullmatch(r"user[0-9]{8}", out.author)

    def test_same_username_same_pseudonym(self):
        a = pseudonymize(make_post(0, author="jan_2009"), rng_seed=1)
        b = pseudonymize(make_post(1, author="jan_2009"), rng_seed=1)
        assert a.author == b.author

    def test_distinct_usernames_distinct_pseudonyms(self):
        data = Dataset([make_post(i, author=f"user-{i}") for i in range(500)])
        out = pseudonymize_dataset(data, rng_seed=3)
        authors = [p.author for p in out.posts]
        assert len(set(authors)) == 500

    def test_url_removed(self):
        post = make_post(0, text="see https://x.example/a now")
        out = pseudonymize(post, rng_seed=0)
        assert out.text == "see  now"

    def test_www_url_removed(self):
        out = pseudonymize(make_post(0, text="go www.example.com/x here"), rng_seed=0)
        assert "www" not in out.text

    def test_idempotent(self):
        post = make_post(0, author="jan_2009", text="x https://u.example y")
        once = pseudonymize(post, rng_seed=9)
        twice = pseudonymize(once, rng_seed=9)
        assert once == twice

    def test_pseudonym_space_exhausted(self, monkeypatch):
        import regidapt.corpus as corpus_mod
        from regidapt.corpus import Pseudonymizer, PseudonymSpaceExhausted

        monkeypatch.setattr(corpus_mod, "PSEUDONYM_SPACE", 2)
        mapper = Pseudonymizer(seed=0)
        mapper.pseudonym_for("first")
        mapper.pseudonym_for("second")
        with pytest.raises(PseudonymSpaceExhausted):
            mapper.pseudonym_for("third")


class TestLabelDistribution:
    def test_kt_reference_counts(self):
        data = synthetic.kt_reference(seed=0)
        counts = label_distribution(data)
        assert counts[(Domain.KT, NOT_DISTORTED)] == 273
        assert counts[(Domain.KT, DISTORTED)] == 177

    def test_empty(self):
        assert label_distribution(Dataset([])) == {}

    def test_unlabeled_post_rejected(self):
        with pytest.raises(UnlabeledPost):
            label_distribution(Dataset([make_post(0)]))


class TestStratifiedKfold:
    def test_kt_sized_folds(self):
        # brute-force count check against the published 273/177 totals
        data = synthetic.kt_reference(seed=0)
        folds = stratified_kfold(data, k=5, seed=7)
        by_id = {p.id: p.label for p in data.posts}
        for fold in folds:
            assert len(fold.test_ids) == 90
            negatives = sum(1 for i in fold.test_ids if by_id[i] == NOT_DISTORTED)
            assert negatives in (54, 55)

    def test_every_post_in_exactly_one_test_fold(self):
        data = balanced_dataset(30)
        folds = stratified_kfold(data, k=5, seed=0)
        seen = Counter()
        for fold in folds:
            assert fold.train_ids | fold.test_ids == {p.id for p in data.posts}
            assert not fold.train_ids & fold.test_ids
            seen.update(fold.test_ids)
        assert all(v == 1 for v in seen.values())

    def test_k2_on_four_balanced(self):
        data = balanced_dataset(4)
        folds = stratified_kfold(data, k=2, seed=1)
        by_id = {p.id: p.label for p in data.posts}
        for fold in folds:
            assert len(fold.test_ids) == 2
            assert sum(by_id[i] for i in fold.test_ids) == 1

    def test_deterministic(self):
        data = balanced_dataset(40)
        assert stratified_kfold(data, 5, seed=3) == stratified_kfold(data, 5, seed=3)

    def test_stratification_within_one_item(self):
        # |per-fold class fraction - global fraction| <= 1 / |test fold|
        data = Dataset([make_post(i, label=int(i < 31)) for i in range(100)])
        global_frac = 31 / 100
        for fold in stratified_kfold(data, 7, seed=5):
            by_id = {p.id: p.label for p in data.posts}
            frac = sum(by_id[i] for i in fold.test_ids) / len(fold.test_ids)
            assert abs(frac - global_frac) <= 1 / len(fold.test_ids) + 1e-12

    def test_too_few_examples(self):
        data = Dataset([make_post(0, label=1), make_post(1, label=0), make_post(2, label=0)])
        with pytest.raises(TooFewExamples):
            stratified_kfold(data, k=2, seed=0)

    def test_k_below_two_rejected(self):
        with pytest.raises(ValueError):
            stratified_kfold(balanced_dataset(10), k=1, seed=0)


class TestMergeDomains:
    def test_en_plus_kt_tags(self):
        en = balanced_dataset(6, domain=Domain.EN)
        kt = Dataset([make_post(i + 100, label=i % 2, domain=Domain.KT) for i in range(4)])
        merged = merge_domains(en, kt)
        assert merged.domain_tags == {Domain.EN, Domain.KT}
        assert len(merged) == 10

    def test_merge_with_empty_is_identity(self):
        a = balanced_dataset(5)
        assert merge_domains(a, Dataset([])).posts == a.posts

    def test_commutative_as_multisets(self):
        a = balanced_dataset(5, domain=Domain.EN)
        b = Dataset([make_post(i + 50, label=0, domain=Domain.KT) for i in range(3)])
        ab = Counter(merge_domains(a, b).posts)
        ba = Counter(merge_domains(b, a).posts)
        assert ab == ba

    def test_id_collision_renamespaced(self):
        a = Dataset([make_post(0, label=1, domain=Domain.EN)])
        b = Dataset([make_post(0, label=0, domain=Domain.KT)])
        merged = merge_domains(a, b)
        assert {p.id for p in merged.posts} == {"EN:p0", "KT:p0"}


class TestRandomBaseline:
    def test_weighted_f1_near_half(self):
        data = balanced_dataset(4000)
        preds = random_baseline(data, seed=0)
        scores = weighted_metrics(data.labels(), [p.label for p in preds])
        assert abs(scores.f1 - 0.50) < 0.05

    def test_deterministic(self):
        data = balanced_dataset(1)
        assert random_baseline(data, seed=4) == random_baseline(data, seed=4)

    def test_class_rate_binomial_bound(self):
        data = balanced_dataset(10_000)
        preds = random_baseline(data, seed=2)
        rate = sum(p.label for p in preds) / len(preds)
        assert 0.48 <= rate <= 0.52
