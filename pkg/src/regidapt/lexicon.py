"""Lexicon-category feature extraction and significance-based selection.

Features are counts of category-term occurrences in a text, optionally
normalized per token, and feed the augmented classification head. Selection
keeps the categories whose feature values differ significantly between the
distorted and non-distorted classes.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

from .corpus import DISTORTED, NOT_DISTORTED, Dataset
from .text import tokenize

BUNDLED_LEXICON = "lexicon_195.txt"


class LexiconError(Exception):
    pass


class EmptyLexicon(LexiconError):
    pass


class DimensionMismatch(LexiconError):
    pass


@dataclass(frozen=True)
class Lexicon:
    """Category name -> term set, in file order."""

    categories: tuple[str, ...]
    terms: dict[str, frozenset[str]]

    def __post_init__(self) -> None:
        if len(set(self.categories)) != len(self.categories):
            raise LexiconError("duplicate category names")
        for name in self.categories:
            if not self.terms.get(name):
                raise LexiconError(f"category {name!r} has no terms")
        index: dict[str, list[int]] = {}
        for i, name in enumerate(self.categories):
            for term in self.terms[name]:
                index.setdefault(term, []).append(i)
        object.__setattr__(self, "_token_index", index)

    def __len__(self) -> int:
        return len(self.categories)

    def category_indices(self, token: str) -> list[int]:
        """Indices of the categories containing ``token``."""
        return self._token_index.get(token, [])

    def exclusive_term(self, category: str) -> str:
        """A term belonging to this category and no other (alphabetically first)."""
        for term in sorted(self.terms[category]):
            if len(self._token_index[term]) == 1:
                return term
        raise LexiconError(f"category {category!r} has no exclusive term")


@dataclass(frozen=True)
class FeatureVector:
    """One category-score vector, aligned with ``categories``."""

    values: np.ndarray
    normalization: str  # "raw_count" | "per_token"
    categories: tuple[str, ...]


@dataclass(frozen=True)
class FeatureSelection:
    selected: tuple[str, ...]  # sorted by category name
    p_values: dict[str, float]
    t_values: dict[str, float]
    alpha: float


def parse_lexicon(lines: list[str]) -> Lexicon:
    categories = []
    terms = {}
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        name, _, rest = line.partition("\t")
        if not rest:
            raise LexiconError(f"bad lexicon line (expected category<TAB>terms): {line!r}")
        categories.append(name)
        terms[name] = frozenset(t.strip().lower() for t in rest.split(",") if t.strip())
    return Lexicon(categories=tuple(categories), terms=terms)


def load_lexicon(path: str | Path) -> Lexicon:
    return parse_lexicon(Path(path).read_text(encoding="utf-8").splitlines())


def default_lexicon() -> Lexicon:
    """The bundled 195-category lexicon."""
    text = resources.files("regidapt.data").joinpath(BUNDLED_LEXICON).read_text("utf-8")
    return parse_lexicon(text.splitlines())


def extract_features(
    text: str, lexicon: Lexicon, normalization: str = "per_token"
) -> FeatureVector:
    """Per-category term-match counts, optionally divided by the token count.

    Tokenization is the shared lowercase whitespace+punctuation split;
    punctuation marks count as tokens.
    """
    if len(lexicon) == 0:
        raise EmptyLexicon("lexicon has no categories")
    if normalization not in ("raw_count", "per_token"):
        raise ValueError(f"unknown normalization {normalization!r}")
    tokens = tokenize(text)
    counts = np.zeros(len(lexicon), dtype=np.float64)
    for t in tokens:
        for i in lexicon.category_indices(t):
            counts[i] += 1
    if normalization == "per_token":
        counts = counts / len(tokens) if tokens else counts
    return FeatureVector(values=counts, normalization=normalization, categories=lexicon.categories)


def feature_matrix(
    dataset: Dataset, lexicon: Lexicon, normalization: str = "per_token"
) -> np.ndarray:
    """n_posts x n_categories feature matrix in dataset order."""
    return np.stack(
        [extract_features(p.text, lexicon, normalization).values for p in dataset.posts]
    )


def feature_significance(
    dataset: Dataset,
    lexicon: Lexicon,
    test: str = "welch_two_sample",
    alpha: float = 0.05,
) -> FeatureSelection:
    """Two-sided t-test per category, distorted vs non-distorted feature values.

    ``welch_two_sample`` (default) handles the unequal class sizes; ``paired``
    requires equal group sizes and pairs posts in class order. Categories that
    are constant in both groups are excluded with p = 1.
    """
    if test not in ("welch_two_sample", "paired"):
        raise ValueError(f"unknown test {test!r}")
    features = feature_matrix(dataset, lexicon)
    labels = np.array(dataset.labels())
    pos = features[labels == DISTORTED]
    neg = features[labels == NOT_DISTORTED]
    if len(pos) < 2 or len(neg) < 2:
        raise ValueError(
            f"need >= 2 posts per class, got {len(pos)} distorted / {len(neg)} non-distorted"
        )
    if test == "paired" and len(pos) != len(neg):
        raise ValueError(
            f"paired test needs equal group sizes, got {len(pos)} vs {len(neg)}"
        )

    p_values: dict[str, float] = {}
    t_values: dict[str, float] = {}
    for i, name in enumerate(lexicon.categories):
        a, b = pos[:, i], neg[:, i]
        degenerate = np.ptp(a) == 0 and np.ptp(b) == 0
        if test == "paired":
            degenerate = np.ptp(a - b) == 0
        if degenerate:
            t_values[name] = 0.0
            p_values[name] = 1.0
            continue
        if test == "welch_two_sample":
            t, p = stats.ttest_ind(a, b, equal_var=False)
        else:
            t, p = stats.ttest_rel(a, b)
        t_values[name] = float(t)
        p_values[name] = float(p)

    selected = tuple(sorted(c for c in lexicon.categories if p_values[c] < alpha))
    return FeatureSelection(selected=selected, p_values=p_values, t_values=t_values, alpha=alpha)


def build_augmented_input(
    embedding: np.ndarray, features: FeatureVector, selection: FeatureSelection
) -> np.ndarray:
    """Concatenate the selected feature values (in selection order) to an embedding."""
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.ndim != 1:
        raise DimensionMismatch(f"embedding must be 1-D, got shape {embedding.shape}")
    index = {name: i for i, name in enumerate(features.categories)}
    missing = [c for c in selection.selected if c not in index]
    if missing:
        raise DimensionMismatch(f"selected categories missing from features: {missing}")
    picked = np.array([features.values[index[c]] for c in selection.selected], dtype=np.float64)
    return np.concatenate([embedding, picked])


class FeatureStandardizer:
    """Per-category zero-mean/unit-variance scaling, frozen on the training fold."""

    def __init__(self) -> None:
        self.mean: np.ndarray | None = None
        self.std: np.ndarray | None = None

    def fit(self, matrix: np.ndarray) -> "FeatureStandardizer":
        self.mean = matrix.mean(axis=0)
        std = matrix.std(axis=0)
        std[std == 0] = 1.0
        self.std = std
        return self

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        if self.mean is None or self.std is None:
            raise RuntimeError("standardizer not fitted")
        return (matrix - self.mean) / self.std
