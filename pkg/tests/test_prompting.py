import json
from collections import Counter

import pytest

from regidapt.corpus import DISTORTED, NOT_DISTORTED, Dataset, Domain, Post
from regidapt.evaluation import weighted_metrics
from regidapt.prompting import (
    ClientError,
    EchoLlmClient,
    EmptyText,
    HttpLlmClient,
    MockLlmClient,
    MockTranslationClient,
    UnparseableVerdict,
    classify_by_prompt,
    constant_client,
    gold_echo_client,
    load_template,
    parse_verdict,
    render_prompt,
    rewrite_dataset,
    translate_dataset,
)

REWRITE_SOURCE = (
    "It really just occurred to me recently. I've always had vague, small, random "
    "memories of it in my mind over the past few years. I knew it was my life, I never "
    "gave it much thought. But recently I started thinking about it more and I realized "
    "those vague memories were kind of all I had now."
)
REWRITE_TARGET = (
    "Het is een beetje een vreemde gedachte, maar het is me pas recent opgevallen. "
    "Ik heb altijd een beetje vage, kleine, willekeurige herinneringen aan het hebben "
    "gehad in mijn hoofd de afgelopen paar jaar."
)


def labeled_dataset(labels, domain=Domain.KT):
    return Dataset(
        [Post(id=f"p{i}", author="a", text=f"post text {i}", domain=domain, label=l)
         for i, l in enumerate(labels)]
    )


class TestTemplates:
    def test_short_template_renders_two_messages(self):
        template = load_template("short")
        messages = render_prompt(template, "I always fail")
        assert len(messages) == 2
        assert messages[0]["role"] == "system"
        assert messages[0]["content"].startswith("You are a psychologist")
        assert messages[1] == {"role": "user", "content": "I always fail"}

    def test_templates_demand_one_word_verdict(self):
        for name in ("short", "long"):
            assert "ONLY BE YES OR NO" in load_template(name).system_text

    def test_long_template_lists_ten_definitions_in_order(self):
        text = load_template("long").system_text
        names = [
            "All-or-nothing thinking", "Overgeneralization", "Mental filter",
            "Should statements", "Labeling and mislabeling", "Personalization",
            "Magnification", "Emotional reasoning", "Mind reading", "Fortune telling",
        ]
        positions = [text.index(f"{i}. {n}") for i, n in enumerate(names, start=1)]
        assert positions == sorted(positions)

    def test_rewrite_template_instruction_and_examples(self):
        template = load_template("rewrite", ["ex one", "ex two", "ex three", "ex four"])
        assert "Rewrite the following text as if a 14 year old Dutch teenager" in template.system_text
        for ex in ("ex one", "ex two", "ex three", "ex four"):
            assert ex in template.system_text

    def test_rewrite_requires_four_examples(self):
        with pytest.raises(ValueError):
            load_template("rewrite", ["only one"])

    def test_byte_stable_across_loads(self):
        assert load_template("long").system_text == load_template("long").system_text

    def test_rendering_injective_in_post_text(self):
        template = load_template("short")
        a = render_prompt(template, "first post")
        b = render_prompt(template, "second post")
        assert a[1]["content"] != b[1]["content"]

    def test_empty_text_rejected(self):
        with pytest.raises(EmptyText):
            render_prompt(load_template("short"), "")


class TestParseVerdict:
    def test_yes_with_noise(self):
        assert parse_verdict(" Yes.") == DISTORTED

    def test_plain_no(self):
        assert parse_verdict("no") == NOT_DISTORTED

    def test_case_variants(self):
        assert parse_verdict("YES") == DISTORTED
        assert parse_verdict("No!") == NOT_DISTORTED

    def test_prose_rejected(self):
        with pytest.raises(UnparseableVerdict):
            parse_verdict("It depends on context")


class TestClassifyByPrompt:
    def test_all_yes_mock_full_distorted_recall(self):
        data = labeled_dataset([1, 0, 1, 0, 1, 0])
        preds, report = classify_by_prompt(constant_client("Yes"), load_template("short"), data)
        assert all(p.label == DISTORTED for p in preds)
        y_true = data.labels()
        scores = weighted_metrics(y_true, [p.label for p in preds])
        assert scores.recall == pytest.approx(0.5)
        assert report.parse_failures == 0

    def test_empty_dataset(self):
        preds, report = classify_by_prompt(
            constant_client("Yes"), load_template("short"), Dataset([])
        )
        assert preds == [] and report.total == 0

    def test_gold_echo_perfect_f1(self):
        data = labeled_dataset([1, 0, 0, 1, 1, 0, 0, 0])
        client = gold_echo_client(data)
        preds, _ = classify_by_prompt(client, load_template("short"), data)
        scores = weighted_metrics(data.labels(), [p.label for p in preds])
        assert scores.f1 == 1.0

    def test_inverted_mock_zero_recall(self):
        data = labeled_dataset([1, 0, 1, 0])
        responses = {p.text: ("No" if p.label else "Yes") for p in data.posts}
        preds, _ = classify_by_prompt(MockLlmClient(responses), load_template("short"), data)
        assert all(p.label != post.label for p, post in zip(preds, data.posts))

    def test_unparseable_defaults_to_not_distorted(self):
        data = labeled_dataset([1, 1])
        preds, report = classify_by_prompt(
            constant_client("cannot say"), load_template("short"), data
        )
        assert [p.label for p in preds] == [NOT_DISTORTED, NOT_DISTORTED]
        assert report.parse_failures == 2

    def test_unparseable_skip_policy(self):
        data = labeled_dataset([1, 1])
        preds, report = classify_by_prompt(
            constant_client("hmm"), load_template("short"), data, on_unparseable="skip"
        )
        assert preds == []
        assert report.skipped_ids == ["p0", "p1"]

    def test_client_errors_retried_then_skipped(self):
        data = labeled_dataset([1, 0])

        class Flaky:
            def __init__(self):
                self.calls = Counter()

            def complete(self, messages):
                user = messages[-1]["content"]
                self.calls[user] += 1
                if user.endswith("0"):
                    raise ClientError("down")
                return "Yes"

        client = Flaky()
        preds, report = classify_by_prompt(client, load_template("short"), data, max_retries=3)
        assert report.client_errors == 1
        assert report.skipped_ids == ["p0"]
        assert client.calls["post text 0"] == 3
        assert [p.post_id for p in preds] == ["p1"]

    def test_parallel_matches_serial(self):
        data = labeled_dataset([1, 0, 1, 1, 0, 0, 1, 0])
        client = gold_echo_client(data)
        serial, _ = classify_by_prompt(client, load_template("short"), data, parallelism=1)
        parallel, _ = classify_by_prompt(client, load_template("short"), data, parallelism=4)
        assert serial == parallel


class TestRewriteDataset:
    def test_identity_client_keeps_text_changes_domain(self):
        data = labeled_dataset([1, 0, 1], domain=Domain.EN)
        out = rewrite_dataset(EchoLlmClient(), data, ["a", "b", "c", "d"])
        assert [p.text for p in out.posts] == [p.text for p in data.posts]
        assert all(p.domain == Domain.R for p in out.posts)
        assert [p.id for p in out.posts] == [p.id for p in data.posts]

    def test_label_multiset_preserved(self):
        data = labeled_dataset([1, 0, 1, 1, 0], domain=Domain.EN)
        out = rewrite_dataset(EchoLlmClient(), data, ["a", "b", "c", "d"])
        assert Counter(p.label for p in out.posts) == Counter(p.label for p in data.posts)

    def test_failed_posts_dropped(self):
        data = labeled_dataset([1, 0, 1], domain=Domain.EN)

        class FailsSecond:
            def complete(self, messages):
                user = messages[-1]["content"]
                if user.endswith("1"):
                    raise ClientError("boom")
                return user.upper()

        out = rewrite_dataset(FailsSecond(), data, ["a", "b", "c", "d"])
        assert [p.id for p in out.posts] == ["p0", "p2"]

    def test_published_rewrite_example_fixture(self):
        # scripted mock reproducing the documented source -> rewrite pair
        data = Dataset(
            [Post(id="x", author="a", text=REWRITE_SOURCE, domain=Domain.EN, label=1)]
        )
        client = MockLlmClient({REWRITE_SOURCE: REWRITE_TARGET})
        out = rewrite_dataset(client, data, ["a", "b", "c", "d"])
        assert out.posts[0].text.startswith("Het is een beetje een vreemde gedachte")
        assert out.posts[0].label == 1


class TestTranslateDataset:
    def test_identity_mock(self):
        data = labeled_dataset([0, 1], domain=Domain.EN)
        out = translate_dataset(MockTranslationClient(), data)
        assert [p.text for p in out.posts] == [p.text for p in data.posts]
        assert all(p.domain == Domain.NL for p in out.posts)

    def test_size_preserved(self):
        data = labeled_dataset([0, 1, 1, 0], domain=Domain.EN)
        assert len(translate_dataset(MockTranslationClient(), data)) == len(data)

    def test_lookup_table(self):
        table = {
            "post text 0": "bericht nul",
            "post text 1": "bericht een",
            "post text 2": "bericht twee",
        }
        data = labeled_dataset([0, 1, 0], domain=Domain.EN)
        out = translate_dataset(MockTranslationClient(table), data)
        assert [p.text for p in out.posts] == ["bericht nul", "bericht een", "bericht twee"]


class FakeResponse:
    def __init__(self, status_code, body=None, text=""):
        self.status_code = status_code
        self._body = body or {}
        self.text = text

    def json(self):
        return self._body


class FakeSession:
    """Scripted HTTP session standing in for requests.Session."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.requests.append({"url": url, "json": json, "headers": headers})
        result = self.responses.pop(0)
        if isinstance(result, Exception):
            raise result
        return result


class TestHttpClient:
    def _ok(self, content="Yes"):
        return FakeResponse(200, {"choices": [{"message": {"content": content}}]})

    def test_successful_completion(self):
        session = FakeSession([self._ok("No")])
        client = HttpLlmClient(endpoint="http://llm.test/v1/chat", token="tok",
                               session=session)
        out = client.complete([{"role": "user", "content": "hi"}])
        assert out == "No"
        sent = session.requests[0]
        assert sent["headers"]["Authorization"] == "Bearer tok"
        assert sent["json"]["temperature"] == 0.0

    def test_retries_server_errors(self, monkeypatch):
        monkeypatch.setattr("time.sleep", lambda s: None)
        session = FakeSession([FakeResponse(500), self._ok()])
        client = HttpLlmClient(endpoint="http://llm.test", session=session)
        assert client.complete([{"role": "user", "content": "x"}]) == "Yes"
        assert len(session.requests) == 2

    def test_gives_up_after_retries(self, monkeypatch):
        monkeypatch.setattr("time.sleep", lambda s: None)
        session = FakeSession([FakeResponse(500)] * 3)
        client = HttpLlmClient(endpoint="http://llm.test", session=session, max_retries=3)
        with pytest.raises(ClientError):
            client.complete([{"role": "user", "content": "x"}])

    def test_endpoint_from_environment(self, monkeypatch):
        monkeypatch.setenv("REGIDAPT_LLM_ENDPOINT", "http://env.test")
        client = HttpLlmClient(session=FakeSession([self._ok()]))
        assert client.endpoint == "http://env.test"

    def test_missing_endpoint_rejected(self, monkeypatch):
        monkeypatch.delenv("REGIDAPT_LLM_ENDPOINT", raising=False)
        with pytest.raises(ClientError):
            HttpLlmClient(session=FakeSession([]))
