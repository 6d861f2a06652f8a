"""Deterministic synthetic stand-in corpora.

The annotated adolescent-forum data is available under restricted access
only, so the toolkit ships generators that reproduce its public summary
statistics (sizes, label counts, which lexicon categories separate the
classes) without reproducing any of its content. The generators are also
used for end-to-end tests of the training and evaluation pipelines.
"""

from __future__ import annotations

import random

from .corpus import DISTORTED, NOT_DISTORTED, Dataset, Domain, Post
from .lexicon import Lexicon, default_lexicon

# Published label counts for the two annotated corpora.
EN_COUNTS = {NOT_DISTORTED: 933, DISTORTED: 1593}
KT_COUNTS = {NOT_DISTORTED: 273, DISTORTED: 177}

# The 68 lexicon categories that separate distorted from non-distorted posts.
SIGNIFICANT_CATEGORIES = (
    "wedding", "domestic_work", "medical_emergency", "cold", "hate", "envy",
    "anticipation", "family", "vacation", "masculine", "dispute",
    "nervousness", "weakness", "horror", "swearing_terms", "leisure",
    "suffering", "royalty", "tourism", "kill", "ridicule", "optimism", "home",
    "sexual", "fear", "irritability", "driving", "exasperation", "internet",
    "leader", "body", "noise", "zest", "confusion", "heroic", "celebration",
    "violence", "neglect", "love", "sympathy", "trust", "ancient",
    "deception", "air_travel", "toy", "disgust", "gain", "youth", "sadness",
    "emotional", "joy", "traveling", "ugliness", "lust", "shame", "anger",
    "strength", "power", "party", "pain", "timidity", "negative_emotion",
    "messaging", "competing", "friends", "children", "monster", "contentment",
)

# Filler tokens used for padding; none may belong to any lexicon category.
_FILLER = ("vandaag", "gisteren", "misschien", "gewoon", "iets", "ergens", "best", "wel")

_EN_NEUTRAL = (
    "i spoke with my counselor about the situation and it was a reasonable talk",
    "things at school are busy but mostly manageable this week",
    "we planned the weekend and i am looking forward to resting",
    "my schedule changed and i am adjusting to the new routine",
    "i had a long day but dinner with my family was nice",
)
_EN_DISTORTED = (
    "i failed one exam so clearly i will fail everything from now on",
    "nobody ever listens to me and nothing i do is ever right",
    "if i am not perfect at this then i am a total failure",
    "my friend did not reply so she must hate me completely",
    "i always ruin everything and everyone would be better off without me",
)


def _check_fillers(lexicon: Lexicon) -> None:
    hits = [w for w in _FILLER if lexicon.category_indices(w)]
    if hits:
        raise ValueError(f"filler tokens collide with lexicon terms: {hits}")


def en_reference(seed: int = 0) -> Dataset:
    """English therapist Q&A stand-in: 2526 posts, 933 / 1593 label split."""
    rng = random.Random(seed)
    posts = []
    counter = 0
    for label, count in sorted(EN_COUNTS.items()):
        pool = _EN_DISTORTED if label == DISTORTED else _EN_NEUTRAL
        for _ in range(count):
            base = rng.choice(pool)
            extra = " ".join(rng.choice(base.split()) for _ in range(3))
            posts.append(
                Post(
                    id=f"en{counter:05d}",
                    author=f"writer_{rng.randrange(400):03d}",
                    text=f"{base} {extra}",
                    domain=Domain.EN,
                    label=label,
                )
            )
            counter += 1
    rng.shuffle(posts)
    return Dataset(posts)


def kt_reference(seed: int = 0, lexicon: Lexicon | None = None) -> Dataset:
    """Adolescent-forum stand-in: 450 posts, 273 / 177 label split.

    Distorted posts over-express one exclusive term from each of the 68
    published categories; the remaining 127 categories never occur, and every
    post has the same token count, so a significance scan at alpha = 0.05
    recovers exactly the published category set.
    """
    lexicon = lexicon or default_lexicon()
    _check_fillers(lexicon)
    terms = [lexicon.exclusive_term(c) for c in SIGNIFICANT_CATEGORIES]
    length = 2 * len(terms) + 10
    rng = random.Random(seed)
    posts = []
    counter = 0
    for label, count in sorted(KT_COUNTS.items()):
        for _ in range(count):
            tokens: list[str] = []
            for term in terms:
                if label == DISTORTED:
                    n = 1 + rng.randrange(2)  # 1 or 2 mentions
                else:
                    n = rng.randrange(2)  # 0 or 1 mentions
                tokens.extend([term] * n)
            while len(tokens) < length:
                tokens.append(rng.choice(_FILLER))
            rng.shuffle(tokens)
            posts.append(
                Post(
                    id=f"kt{counter:04d}",
                    author=f"puber{rng.randrange(300):03d}",
                    text=" ".join(tokens),
                    domain=Domain.KT,
                    label=label,
                )
            )
            counter += 1
    rng.shuffle(posts)
    return Dataset(posts)


def shifted_category_corpus(
    n_pairs: int = 200,
    shifted: tuple[str, ...] = ("fear", "sadness", "shame", "anger", "pain"),
    shift_tokens: int = 5,
    seed: int = 0,
    lexicon: Lexicon | None = None,
) -> Dataset:
    """Matched-pair corpus where exactly the given categories separate classes.

    Each distorted post shares its non-target category counts and its total
    token count with a paired non-distorted post; only the shifted categories
    gain ``shift_tokens`` extra mentions (about five standard deviations of
    the base count distribution). Category values outside the shifted set are
    therefore identically distributed across classes.
    """
    lexicon = lexicon or default_lexicon()
    _check_fillers(lexicon)
    rng = random.Random(seed)
    all_terms = {c: lexicon.exclusive_term(c) for c in lexicon.categories}
    shifted_set = set(shifted)
    base_length = 2 * len(lexicon) + len(shifted) * shift_tokens + 10

    posts = []
    for j in range(n_pairs):
        counts = {c: rng.randrange(3) for c in lexicon.categories}  # sd ~ 0.82
        for label in (NOT_DISTORTED, DISTORTED):
            tokens: list[str] = []
            for c in lexicon.categories:
                n = counts[c]
                if label == DISTORTED and c in shifted_set:
                    n += shift_tokens
                tokens.extend([all_terms[c]] * n)
            while len(tokens) < base_length:
                tokens.append(rng.choice(_FILLER))
            shuffle_rng = random.Random(f"{seed}:{j}:{label}")
            shuffle_rng.shuffle(tokens)
            posts.append(
                Post(
                    id=f"pair{j:04d}l{label}",
                    author=f"writer{j:04d}",
                    text=" ".join(tokens),
                    domain=Domain.KT,
                    label=label,
                )
            )
    return Dataset(posts)


# Shared class-signal vocabulary for the two-domain corpus: the same tokens
# mark distortion in both domains, while filler vocabularies are disjoint.
_CLASS_DISTORTED = ("always", "never", "everything", "nothing", "worthless", "ruined")
_CLASS_NEUTRAL = ("sometimes", "maybe", "okay", "fine", "normal", "manageable")
_DOMAIN_FILLERS = {
    Domain.EN: (
        "the", "project", "morning", "coffee", "office", "meeting", "garden",
        "weather", "music", "street", "window", "letter", "evening", "river",
        "market", "silver", "yellow", "bridge", "corner", "pocket",
    ),
    Domain.KT: (
        "vandaag", "fiets", "huiswerk", "klas", "pauze", "buiten", "verhaal",
        "spelletje", "zomer", "winter", "tekening", "muziekles", "plein",
        "snoep", "regenjas", "boterham", "schrift", "juf", "gang", "stoep",
    ),
}


def two_domain_corpus(
    n_per_domain: int = 2000,
    seed: int = 0,
    class_tokens: int = 3,
    filler_tokens: int = 9,
    class_token_purity: float = 0.8,
    distorted_fraction: dict[Domain, float] | None = None,
) -> Dataset:
    """Two-domain corpus with a domain-invariant class signal.

    Class membership is marked by tokens shared across domains; everything
    else is drawn from per-domain disjoint vocabularies, so the domains are
    trivially separable unless a model learns to ignore them. Mirroring the
    annotated corpora, the class prior differs per domain (63% vs 39%
    distorted by default) and the token signal is noisy, so a plain
    classifier profits from domain identity while a domain-confused one must
    rely on the shared signal.
    """
    if distorted_fraction is None:
        distorted_fraction = {Domain.EN: 0.63, Domain.KT: 0.39}
    rng = random.Random(seed)
    posts = []
    for domain in (Domain.EN, Domain.KT):
        fillers = _DOMAIN_FILLERS[domain]
        n_distorted = round(n_per_domain * distorted_fraction[domain])
        for i in range(n_per_domain):
            label = DISTORTED if i < n_distorted else NOT_DISTORTED
            own, other = (
                (_CLASS_DISTORTED, _CLASS_NEUTRAL)
                if label == DISTORTED
                else (_CLASS_NEUTRAL, _CLASS_DISTORTED)
            )
            tokens = [
                rng.choice(own if rng.random() < class_token_purity else other)
                for _ in range(class_tokens)
            ]
            tokens += [rng.choice(fillers) for _ in range(filler_tokens)]
            rng.shuffle(tokens)
            posts.append(
                Post(
                    id=f"{domain.value.lower()}{i:05d}",
                    author=f"auth{rng.randrange(500):03d}",
                    text=" ".join(tokens),
                    domain=domain,
                    label=label,
                )
            )
    rng.shuffle(posts)
    return Dataset(posts)
