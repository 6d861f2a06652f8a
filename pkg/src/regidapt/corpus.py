"""Post corpus handling: ingestion, pseudonymization, statistics, splitting.

Canonical storage is JSON-lines, one post per line, UTF-8. CSV import is
supported for the English therapist Q&A reference data.
"""

from __future__ import annotations

import csv
import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

from .predictions import Prediction
from .text import strip_urls


class Domain(str, Enum):
    EN = "EN"  # English therapist Q&A
    NL = "NL"  # machine-translated Dutch copy of EN
    KT = "KT"  # Dutch adolescent forum posts
    R = "R"  # EN rewritten in adolescent forum style


NOT_DISTORTED = 0
DISTORTED = 1

PSEUDONYM_RE = re.compile(r"^user[0-9]{8}$")
PSEUDONYM_SPACE = 10**8


class CorpusError(Exception):
    """Base class for corpus data errors."""


class MalformedRecord(CorpusError):
    def __init__(self, line_number: int, reason: str = ""):
        self.line_number = line_number
        super().__init__(f"malformed record at line {line_number}" + (f": {reason}" if reason else ""))


class MissingField(CorpusError):
    def __init__(self, name: str, line_number: Optional[int] = None):
        self.name = name
        where = f" at line {line_number}" if line_number is not None else ""
        super().__init__(f"missing field {name!r}{where}")


class UnknownDomainTag(CorpusError):
    def __init__(self, tag: str):
        self.tag = tag
        super().__init__(f"unknown domain tag {tag!r}")


class UnlabeledPost(CorpusError):
    def __init__(self, post_id: str):
        self.post_id = post_id
        super().__init__(f"post {post_id!r} has no label")


class TooFewExamples(CorpusError):
    def __init__(self, label: int, count: int):
        self.label = label
        self.count = count
        super().__init__(f"class {label} has only {count} examples")


class DuplicatePostId(CorpusError):
    def __init__(self, post_id: str):
        self.post_id = post_id
        super().__init__(f"duplicate post id {post_id!r}")


class PseudonymSpaceExhausted(CorpusError):
    pass


@dataclass(frozen=True)
class Post:
    id: str
    author: str
    text: str
    domain: Domain
    label: Optional[int] = None
    annotator_labels: Optional[tuple[int, ...]] = None
    confusing: Optional[bool] = None


@dataclass
class Dataset:
    posts: list[Post] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for p in self.posts:
            if p.id in seen:
                raise DuplicatePostId(p.id)
            seen.add(p.id)

    def __len__(self) -> int:
        return len(self.posts)

    def __iter__(self):
        return iter(self.posts)

    @property
    def domain_tags(self) -> set[Domain]:
        return {p.domain for p in self.posts}

    def by_id(self, post_id: str) -> Post:
        for p in self.posts:
            if p.id == post_id:
                return p
        raise KeyError(post_id)

    def subset(self, ids: Iterable[str]) -> "Dataset":
        wanted = set(ids)
        return Dataset([p for p in self.posts if p.id in wanted])

    def labels(self) -> list[int]:
        out = []
        for p in self.posts:
            if p.label is None:
                raise UnlabeledPost(p.id)
            out.append(p.label)
        return out


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: frozenset[str]
    test_ids: frozenset[str]
    seed: int


_REQUIRED_FIELDS = ("id", "author", "text", "domain")


def _post_from_record(rec: dict, line_number: int) -> Post:
    for name in _REQUIRED_FIELDS:
        if name not in rec or rec[name] is None:
            raise MissingField(name, line_number)
    try:
        domain = Domain(rec["domain"])
    except ValueError:
        raise UnknownDomainTag(str(rec["domain"])) from None
    label = rec.get("label")
    if label is not None:
        label = int(label)
        if label not in (NOT_DISTORTED, DISTORTED):
            raise MalformedRecord(line_number, f"label must be 0 or 1, got {label}")
    ann = rec.get("annotator_labels")
    if ann is not None:
        ann = tuple(int(a) for a in ann)
    confusing = rec.get("confusing")
    if confusing is not None:
        confusing = bool(confusing)
    return Post(
        id=str(rec["id"]),
        author=str(rec["author"]),
        text=str(rec["text"]),
        domain=domain,
        label=label,
        annotator_labels=ann,
        confusing=confusing,
    )


def load_posts(path: str | Path, format: str = "jsonl") -> Dataset:
    """Load a Dataset from a JSONL or CSV file, preserving input order.

    Unknown fields are ignored. Raises MalformedRecord, MissingField or
    UnknownDomainTag on bad input.
    """
    path = Path(path)
    posts: list[Post] = []
    if format == "jsonl":
        with path.open("r", encoding="utf-8") as f:
            for i, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise MalformedRecord(i, str(e)) from None
                if not isinstance(rec, dict):
                    raise MalformedRecord(i, "record is not an object")
                posts.append(_post_from_record(rec, i))
    elif format == "csv":
        with path.open("r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            for i, row in enumerate(reader, start=2):  # header is line 1
                if None in row.values():
                    raise MalformedRecord(i, "row shorter than header")
                if None in row:
                    raise MalformedRecord(i, "row longer than header")
                rec = {k: v for k, v in row.items() if v != ""}
                if "annotator_labels" in rec:
                    rec["annotator_labels"] = [
                        int(a) for a in str(rec["annotator_labels"]).split("|")
                    ]
                if "confusing" in rec:
                    rec["confusing"] = rec["confusing"].strip().lower() in ("1", "true", "yes")
                posts.append(_post_from_record(rec, i))
    else:
        raise ValueError(f"unsupported format {format!r}")
    return Dataset(posts)


def save_posts(dataset: Dataset, path: str | Path) -> None:
    """Write the canonical JSONL representation (round-trips exactly)."""
    with Path(path).open("w", encoding="utf-8") as f:
        for p in dataset.posts:
            rec = {
                "id": p.id,
                "author": p.author,
                "text": p.text,
                "domain": p.domain.value,
                "label": p.label,
                "annotator_labels": list(p.annotator_labels) if p.annotator_labels is not None else None,
                "confusing": p.confusing,
            }
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


class Pseudonymizer:
    """Injective username -> ``user`` + 8 digits mapping for one run.

    The first draw for a username depends only on (seed, username), so
    repeated calls agree; collisions are resolved by re-drawing. The mapping
    is intentionally not persisted across runs.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._mapping: dict[str, str] = {}
        self._used: set[str] = set()

    def pseudonym_for(self, username: str) -> str:
        if PSEUDONYM_RE.match(username):
            # Already pseudonymized; keep stable so the operation is idempotent.
            return username
        if username in self._mapping:
            return self._mapping[username]
        if len(self._mapping) >= PSEUDONYM_SPACE:
            raise PseudonymSpaceExhausted(
                f"more than {PSEUDONYM_SPACE} distinct usernames"
            )
        attempt = 0
        while True:
            rng = random.Random(f"{self.seed}:{attempt}:{username}")
            candidate = "user" + "".join(str(rng.randrange(10)) for _ in range(8))
            if candidate not in self._used:
                break
            attempt += 1
        self._mapping[username] = candidate
        self._used.add(candidate)
        return candidate

    def apply(self, post: Post) -> Post:
        return replace(
            post,
            author=self.pseudonym_for(post.author),
            text=strip_urls(post.text),
        )


def pseudonymize(post: Post, rng_seed: int) -> Post:
    """Pseudonymize a single post: author replaced, URLs stripped.

    The pseudonym depends only on (rng_seed, author), so the same username
    maps to the same pseudonym across calls. For whole datasets use
    ``pseudonymize_dataset``, which also resolves collisions.
    """
    return Pseudonymizer(rng_seed).apply(post)


def pseudonymize_dataset(dataset: Dataset, rng_seed: int) -> Dataset:
    mapper = Pseudonymizer(rng_seed)
    return Dataset([mapper.apply(p) for p in dataset.posts])


def label_distribution(dataset: Dataset) -> dict[tuple[Domain, int], int]:
    """Exact per-(domain, label) counts. Raises UnlabeledPost if any post is unlabeled."""
    counts: Counter = Counter()
    for p in dataset.posts:
        if p.label is None:
            raise UnlabeledPost(p.id)
        counts[(p.domain, p.label)] += 1
    return dict(counts)


def label_totals(dataset: Dataset) -> dict[int, int]:
    """Label counts summed over domains."""
    totals: Counter = Counter()
    for (_, label), n in label_distribution(dataset).items():
        totals[label] += n
    return dict(totals)


def stratified_kfold(dataset: Dataset, k: int, seed: int) -> list[FoldSplit]:
    """Deterministic stratified k-fold split over post ids.

    Per-class remainders are placed in consecutive folds starting where the
    previous class left off, so overall fold sizes also differ by at most one.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    by_label: dict[int, list[str]] = {}
    for p in dataset.posts:
        if p.label is None:
            raise UnlabeledPost(p.id)
        by_label.setdefault(p.label, []).append(p.id)
    for label, ids in sorted(by_label.items()):
        if len(ids) < k:
            raise TooFewExamples(label, len(ids))

    rng = random.Random(seed)
    fold_test: list[list[str]] = [[] for _ in range(k)]
    offset = 0
    for label in sorted(by_label):
        ids = list(by_label[label])
        rng.shuffle(ids)
        q, r = divmod(len(ids), k)
        pos = 0
        for j in range(k):
            fold = (offset + j) % k
            size = q + (1 if j < r else 0)
            fold_test[fold].extend(ids[pos : pos + size])
            pos += size
        offset = (offset + r) % k

    all_ids = {p.id for p in dataset.posts}
    splits = []
    for i in range(k):
        test = frozenset(fold_test[i])
        splits.append(
            FoldSplit(
                fold_index=i,
                train_ids=frozenset(all_ids - test),
                test_ids=test,
                seed=seed,
            )
        )
    return splits


def merge_domains(a: Dataset, b: Dataset) -> Dataset:
    """Union of two datasets, keeping per-post domain tags.

    If the id sets overlap, every id is re-namespaced with its domain prefix.
    """
    ids_a = {p.id for p in a.posts}
    ids_b = {p.id for p in b.posts}
    posts = list(a.posts) + list(b.posts)
    if ids_a & ids_b:
        posts = [replace(p, id=f"{p.domain.value}:{p.id}") for p in posts]
    return Dataset(posts)


def random_baseline(dataset: Dataset, seed: int) -> list[Prediction]:
    """Uniform random binary prediction per post; deterministic per seed."""
    rng = random.Random(seed)
    return [Prediction.from_label(p.id, rng.randrange(2)) for p in dataset.posts]
