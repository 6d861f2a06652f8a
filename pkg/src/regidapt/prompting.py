"""Prompt rendering, verdict parsing, and LLM / translation clients.

The short and long classification prompts demand a one-word Yes/No verdict;
the rewrite prompt restyles English posts as Dutch adolescent forum posts.
External clients speak a plain JSON chat-completion shape; deterministic
mocks keep the test suite hermetic.
"""

from __future__ import annotations

import logging
import os
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable, Optional, Protocol, Sequence

logger = logging.getLogger(__name__)

from .corpus import DISTORTED, NOT_DISTORTED, Dataset, Domain, Post
from .predictions import Prediction

ENDPOINT_ENV = "REGIDAPT_LLM_ENDPOINT"
TOKEN_ENV = "REGIDAPT_LLM_TOKEN"

Message = dict[str, str]


class PromptingError(Exception):
    pass


class EmptyText(PromptingError):
    pass


class UnparseableVerdict(PromptingError):
    def __init__(self, raw: str):
        self.raw = raw
        super().__init__(f"cannot parse verdict from {raw!r}")


class ClientError(PromptingError):
    pass


class ClientTimeout(ClientError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str  # "short" | "long" | "rewrite"
    system_text: str
    few_shot_examples: tuple[str, ...] = ()


def _template_text(name: str) -> str:
    path = resources.files("regidapt.data.templates").joinpath(f"{name}.txt")
    return path.read_text("utf-8").rstrip("\n")


def load_template(name: str, few_shot_examples: Sequence[str] = ()) -> PromptTemplate:
    """Load a bundled template by name.

    The rewrite template takes exactly 4 example posts for its style slots.
    """
    if name not in ("short", "long", "rewrite"):
        raise ValueError(f"unknown template {name!r}")
    text = _template_text(name)
    examples = tuple(few_shot_examples)
    if name == "rewrite":
        if len(examples) != 4:
            raise ValueError(f"rewrite template needs 4 example posts, got {len(examples)}")
        text = text.format(
            example_1=examples[0],
            example_2=examples[1],
            example_3=examples[2],
            example_4=examples[3],
        )
    elif examples:
        raise ValueError(f"{name} template takes no examples")
    return PromptTemplate(name=name, system_text=text, few_shot_examples=examples)


def render_prompt(template: PromptTemplate, post_text: str) -> list[Message]:
    """System message is the template text verbatim; user message is the post."""
    if not post_text:
        raise EmptyText("post text is empty")
    return [
        {"role": "system", "content": template.system_text},
        {"role": "user", "content": post_text},
    ]


def parse_verdict(raw: str) -> int:
    """Map a one-word model reply to a label: yes -> 1, no -> 0."""
    cleaned = raw.strip().strip(string.punctuation + string.whitespace).lower()
    if cleaned == "yes":
        return DISTORTED
    if cleaned == "no":
        return NOT_DISTORTED
    raise UnparseableVerdict(raw)


class LlmClient(Protocol):
    def complete(self, messages: list[Message]) -> str: ...


class TranslationClient(Protocol):
    def translate(self, text: str, source_lang: str, target_lang: str) -> str: ...


class MockLlmClient:
    """Scripted client: maps the user-message content to a fixed reply.

    Deterministic and safe for concurrent use.
    """

    def __init__(self, responses: Optional[dict[str, str]] = None, default: Optional[str] = None):
        self.responses = dict(responses or {})
        self.default = default

    def complete(self, messages: list[Message]) -> str:
        user = next(m["content"] for m in reversed(messages) if m["role"] == "user")
        if user in self.responses:
            return self.responses[user]
        if self.default is not None:
            return self.default
        raise ClientError(f"mock has no scripted reply for {user[:60]!r}")


class EchoLlmClient:
    """Identity client: replies with the user message unchanged."""

    def complete(self, messages: list[Message]) -> str:
        return next(m["content"] for m in reversed(messages) if m["role"] == "user")


def gold_echo_client(dataset: Dataset) -> MockLlmClient:
    """Mock that answers with each post's gold label (oracle client)."""
    responses = {}
    for p in dataset.posts:
        if p.label is None:
            raise ValueError(f"post {p.id} has no gold label")
        responses[p.text] = "Yes" if p.label == DISTORTED else "No"
    return MockLlmClient(responses)


def constant_client(reply: str) -> MockLlmClient:
    return MockLlmClient(default=reply)


class HttpLlmClient:
    """Minimal JSON chat-completion client with exponential backoff.

    Endpoint and token come from arguments or the REGIDAPT_LLM_* environment
    variables. Decoding temperature defaults to 0.
    """

    def __init__(
        self,
        endpoint: Optional[str] = None,
        token: Optional[str] = None,
        model: str = "default",
        temperature: float = 0.0,
        timeout: float = 30.0,
        max_retries: int = 3,
        session=None,
    ):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint:
            raise ClientError(f"no endpoint: set {ENDPOINT_ENV} or pass endpoint=")
        self.token = token or os.environ.get(TOKEN_ENV)
        self.model = model
        self.temperature = temperature
        self.timeout = timeout
        self.max_retries = max_retries
        if session is None:
            import requests

            session = requests.Session()
        self.session = session

    def complete(self, messages: list[Message]) -> str:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        payload = {
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
        }
        delay = 1.0
        last_error: Exception | None = None
        for _ in range(self.max_retries):
            try:
                resp = self.session.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                if resp.status_code >= 500:
                    raise ClientError(f"server error {resp.status_code}")
                if resp.status_code != 200:
                    raise ClientError(f"request failed with {resp.status_code}: {resp.text[:200]}")
                body = resp.json()
                return body["choices"][0]["message"]["content"]
            except ClientError as e:
                last_error = e
            except Exception as e:  # connection/timeout errors from the session
                last_error = ClientTimeout(str(e))
            time.sleep(delay)
            delay *= 2
        raise last_error if last_error else ClientError("request failed")


class MockTranslationClient:
    """Lookup-table translator; unlisted texts pass through unchanged."""

    def __init__(self, table: Optional[dict[str, str]] = None):
        self.table = dict(table or {})

    def translate(self, text: str, source_lang: str, target_lang: str) -> str:
        return self.table.get(text, text)


@dataclass
class PromptRunReport:
    """Bookkeeping for one classification run over a dataset."""

    total: int = 0
    parse_failures: int = 0
    client_errors: int = 0
    skipped_ids: list[str] = field(default_factory=list)


def classify_by_prompt(
    client: LlmClient,
    template: PromptTemplate,
    dataset: Dataset,
    on_unparseable: str = "not_distorted",
    max_retries: int = 3,
    parallelism: int = 1,
) -> tuple[list[Prediction], PromptRunReport]:
    """One verdict per post, collected in input order.

    Unparseable verdicts default to NotDistorted (the prompt instructs the
    model to respond conservatively) and are counted; ``on_unparseable="skip"``
    drops them instead. Client errors are retried, then the post is skipped
    and recorded.
    """
    if on_unparseable not in ("not_distorted", "skip"):
        raise ValueError(f"unknown on_unparseable policy {on_unparseable!r}")
    report = PromptRunReport(total=len(dataset))

    def ask(post: Post) -> Optional[str]:
        messages = render_prompt(template, post.text)
        for attempt in range(max_retries):
            try:
                return client.complete(messages)
            except ClientError:
                if attempt == max_retries - 1:
                    return None
        return None

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            replies = list(pool.map(ask, dataset.posts))
    else:
        replies = [ask(p) for p in dataset.posts]

    predictions: list[Prediction] = []
    for post, reply in zip(dataset.posts, replies):
        if reply is None:
            report.client_errors += 1
            report.skipped_ids.append(post.id)
            continue
        try:
            label = parse_verdict(reply)
        except UnparseableVerdict:
            report.parse_failures += 1
            if on_unparseable == "skip":
                report.skipped_ids.append(post.id)
                continue
            label = NOT_DISTORTED
        predictions.append(Prediction.from_label(post.id, label))
    return predictions, report


def _map_texts(
    dataset: Dataset,
    transform: Callable[[Post], str],
    new_domain: Domain,
) -> Dataset:
    out: list[Post] = []
    for post in dataset.posts:
        try:
            new_text = transform(post)
        except ClientError as e:
            logger.warning("dropping post %s: %s", post.id, e)
            continue
        out.append(replace(post, text=new_text, domain=new_domain))
    return Dataset(out)


def rewrite_dataset(
    client: LlmClient, dataset: Dataset, examples: Sequence[str]
) -> Dataset:
    """Restyle every post via the rewrite prompt; labels and ids are kept."""
    template = load_template("rewrite", examples)
    return _map_texts(
        dataset,
        lambda post: client.complete(render_prompt(template, post.text)),
        Domain.R,
    )


def translate_dataset(client: TranslationClient, dataset: Dataset) -> Dataset:
    """EN -> NL translation of every post; labels and ids are kept."""
    return _map_texts(
        dataset,
        lambda post: client.translate(post.text, "en", "nl"),
        Domain.NL,
    )
