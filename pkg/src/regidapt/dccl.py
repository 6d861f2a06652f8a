"""Domain-confused contrastive learning.

A perturbation generator adds a norm-bounded shift to each embedding; a
domain classifier tries to recognize the domain of the perturbed embedding
while the generator is trained adversarially to confuse it. A shared
down-projection feeds an InfoNCE loss that aligns original and perturbed
embeddings, a KL term keeps class predictions consistent under perturbation,
and plain cross-entropy on the original embeddings drives the actual task.

Training runs in two loops: the full combined objective first, then a second
pass that fine-tunes only the distortion classifier head with everything else
frozen.

The combined objective is a plain differentiable scalar; the adversarial
sign flip on the generator's domain gradient is applied by the training step
(``adversarial=True``), not baked into the reported loss, so finite-difference
checks of the objective are exact.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Dataset, Domain
from .encoder import (
    EncoderModel,
    NonFiniteLoss,
    TrainConfig,
    _init_parameters,
)

DEFAULT_ALPHA = 1e-3
DEFAULT_BETA = 5.0
DEFAULT_LAMBDA = 3e-2
DEFAULT_TAU = 0.05
DEFAULT_EPSILON = 1.0
DEFAULT_PROJECTION_DIM = 128


class DcclError(Exception):
    pass


class SingleDomainBatch(DcclError):
    pass


class SingleDomainDataset(DcclError):
    pass


class BatchTooSmall(DcclError):
    pass


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -grad


def grad_reverse(x: torch.Tensor) -> torch.Tensor:
    return _GradReverse.apply(x)


class PerturbationGenerator(nn.Module):
    """Two-layer affine-tanh map h -> delta with ||delta||_2 <= epsilon.

    The final layer starts at zero so perturbations begin at exactly zero.
    """

    def __init__(self, dim: int, epsilon: float):
        super().__init__()
        self.inner = nn.Linear(dim, dim)
        self.outer = nn.Linear(dim, dim)
        self.epsilon = epsilon

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        raw = self.outer(torch.tanh(self.inner(h)))
        norms = torch.linalg.vector_norm(raw, dim=-1, keepdim=True)
        return raw * (self.epsilon / torch.clamp(norms, min=self.epsilon))


class DomainClassifier(nn.Module):
    def __init__(self, dim: int, n_domains: int, hidden: int = 64):
        super().__init__()
        self.inner = nn.Linear(dim, hidden)
        self.outer = nn.Linear(hidden, n_domains)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.outer(torch.tanh(self.inner(x)))


@dataclass
class DcclState:
    """Perturbation generator, domain classifier, shared projection, coefficients.

    The distortion classifier is the encoder model's own head.
    """

    generator: PerturbationGenerator
    domain_head: DomainClassifier
    projection: nn.Linear
    classifier: nn.Linear
    domains: tuple[str, ...]
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    lambda_: float = DEFAULT_LAMBDA
    tau: float = DEFAULT_TAU
    epsilon: float = DEFAULT_EPSILON

    @classmethod
    def create(
        cls,
        model: EncoderModel,
        domains: Sequence[str] = (Domain.EN.value, Domain.KT.value),
        projection_dim: Optional[int] = None,
        domain_hidden: int = 64,
        seed: int = 0,
        alpha: float = DEFAULT_ALPHA,
        beta: float = DEFAULT_BETA,
        lambda_: float = DEFAULT_LAMBDA,
        tau: float = DEFAULT_TAU,
        epsilon: float = DEFAULT_EPSILON,
    ) -> "DcclState":
        dim = model.dim
        if projection_dim is None:
            projection_dim = DEFAULT_PROJECTION_DIM if dim > DEFAULT_PROJECTION_DIM else max(1, dim // 2)
        if not 0 < projection_dim < dim:
            raise ValueError(f"projection dim must be in (0, {dim}), got {projection_dim}")
        if tau <= 0 or epsilon <= 0:
            raise ValueError("tau and epsilon must be positive")
        generator = PerturbationGenerator(dim, epsilon)
        domain_head = DomainClassifier(dim, len(domains), hidden=domain_hidden)
        projection = nn.Linear(dim, projection_dim)
        gen = torch.Generator().manual_seed(seed)
        _init_parameters(generator, gen)
        _init_parameters(domain_head, gen)
        _init_parameters(projection, gen)
        with torch.no_grad():
            generator.outer.weight.zero_()
            generator.outer.bias.zero_()
        dtype = model.dtype
        generator.to(dtype)
        domain_head.to(dtype)
        projection.to(dtype)
        return cls(
            generator=generator,
            domain_head=domain_head,
            projection=projection,
            classifier=model.head,
            domains=tuple(domains),
            alpha=alpha,
            beta=beta,
            lambda_=lambda_,
            tau=tau,
            epsilon=epsilon,
        )

    def domain_index(self, domain: Domain | str) -> int:
        value = domain.value if isinstance(domain, Domain) else domain
        return self.domains.index(value)

    def named_parameters(self) -> dict[str, nn.Parameter]:
        out = {}
        for prefix, module in (
            ("generator", self.generator),
            ("domain_head", self.domain_head),
            ("projection", self.projection),
        ):
            for name, p in module.named_parameters():
                out[f"{prefix}.{name}"] = p
        return out

    def auxiliary_parameters(self) -> list[nn.Parameter]:
        return list(self.named_parameters().values())


@dataclass
class DcclBatch:
    h: torch.Tensor  # n x d original embeddings
    delta: torch.Tensor  # n x d perturbations
    domain_labels: torch.Tensor  # n, long
    class_labels: torch.Tensor  # n, long

    def __post_init__(self) -> None:
        n = self.h.shape[0]
        if not (self.delta.shape[0] == self.domain_labels.shape[0] == self.class_labels.shape[0] == n):
            raise ValueError("batch components disagree on size")


def make_batch(
    model: EncoderModel,
    state: DcclState,
    texts: Sequence[str],
    class_labels: Sequence[int],
    domain_labels: Sequence[int],
) -> DcclBatch:
    """Embed texts and generate perturbations, keeping the training graph."""
    h = model.embed(texts)
    delta = state.generator(h)
    return DcclBatch(
        h=h,
        delta=delta,
        domain_labels=torch.tensor(domain_labels, dtype=torch.long),
        class_labels=torch.tensor(class_labels, dtype=torch.long),
    )


def domain_loss(state: DcclState, batch: DcclBatch, adversarial: bool = False) -> torch.Tensor:
    """Mean cross-entropy of the domain classifier on perturbed embeddings.

    With ``adversarial=True`` the classifier input is gradient-reversed: the
    domain classifier itself still receives a minimizing gradient, while the
    perturbation generator (and the encoder feeding it) receive the negated
    gradient and so are driven to confuse it.
    """
    if torch.unique(batch.domain_labels).numel() < 2:
        raise SingleDomainBatch("batch contains a single domain")
    perturbed = batch.h + batch.delta
    if adversarial:
        perturbed = grad_reverse(perturbed)
    return F.cross_entropy(state.domain_head(perturbed), batch.domain_labels)


def contrastive_loss(state: DcclState, h: torch.Tensor, h_perturbed: torch.Tensor) -> torch.Tensor:
    """InfoNCE over down-projected pairs with in-batch negatives.

    Anchor i is the projected original embedding; its positive is the
    projected perturbed embedding i; the other perturbed projections in the
    batch are its negatives. Similarity is cosine over temperature.
    """
    n = h.shape[0]
    if n < 2:
        raise BatchTooSmall("InfoNCE needs in-batch negatives (n >= 2)")
    anchors = F.normalize(state.projection(h), dim=-1)
    candidates = F.normalize(state.projection(h_perturbed), dim=-1)
    logits = anchors @ candidates.T / state.tau
    return F.cross_entropy(logits, torch.arange(n))


def consistency_loss(state: DcclState, h: torch.Tensor, h_perturbed: torch.Tensor) -> torch.Tensor:
    """Mean KL(p(h) || p(h + delta)) between class distributions."""
    log_p = F.log_softmax(state.classifier(h), dim=-1)
    log_q = F.log_softmax(state.classifier(h_perturbed), dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=-1).mean()


def classification_loss(state: DcclState, h: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy on the original (unperturbed) embeddings only."""
    return F.cross_entropy(state.classifier(h), labels)


@dataclass(frozen=True)
class DcclLossBreakdown:
    total: float
    domain: float
    consistency: float
    contrastive: float
    classification: float


def total_loss(
    state: DcclState, batch: DcclBatch, adversarial: bool = False
) -> tuple[torch.Tensor, DcclLossBreakdown]:
    """Weighted combination of the four terms, plus the unweighted breakdown.

    The default graph is the plain objective whose autograd gradients match
    finite differences; the trainer passes ``adversarial=True`` to reverse the
    generator's domain gradient.
    """
    h_perturbed = batch.h + batch.delta
    dom = domain_loss(state, batch, adversarial=adversarial)
    cons = consistency_loss(state, batch.h, h_perturbed)
    ctr = contrastive_loss(state, batch.h, h_perturbed)
    cls = classification_loss(state, batch.h, batch.class_labels)
    total = state.alpha * dom + state.beta * cons + state.lambda_ * ctr + cls
    breakdown = DcclLossBreakdown(
        total=state.alpha * dom.item()
        + state.beta * cons.item()
        + state.lambda_ * ctr.item()
        + cls.item(),
        domain=dom.item(),
        consistency=cons.item(),
        contrastive=ctr.item(),
        classification=cls.item(),
    )
    return total, breakdown


def dccl_objective(state: DcclState):
    """Gradient-check target bound to a state: rebuilds the graph from raw texts."""

    def loss(model: EncoderModel, batch: tuple) -> torch.Tensor:
        texts, class_labels, domain_labels = batch
        dccl_batch = make_batch(model, state, texts, class_labels, domain_labels)
        total, _ = total_loss(state, dccl_batch)
        return total

    return loss


def _mixed_domain_batches(
    by_domain: dict[int, list[int]], batch_size: int, rng: random.Random
) -> list[list[int]]:
    """Batches drawing from every domain so the domain loss is always defined."""
    domains = sorted(by_domain)
    shuffled = {}
    for d in domains:
        idx = list(by_domain[d])
        rng.shuffle(idx)
        shuffled[d] = idx
    share = max(1, batch_size // len(domains))
    steps = max(-(-len(shuffled[d]) // share) for d in domains)
    for d in domains:
        idx = shuffled[d]
        while len(idx) < steps * share:  # cycle the smaller domain
            idx.extend(idx[: steps * share - len(idx)])
    batches = []
    for s in range(steps):
        batch = []
        for d in domains:
            batch.extend(shuffled[d][s * share : (s + 1) * share])
        batches.append(batch)
    return batches


def train_dccl(
    model: EncoderModel,
    state: DcclState,
    data: Dataset,
    config_loop1: Optional[TrainConfig] = None,
    config_loop2: Optional[TrainConfig] = None,
    domain_head_lr_scale: float = 5.0,
) -> EncoderModel:
    """Two-loop training.

    Loop 1 optimizes the combined objective over all components (encoder,
    head, generator, domain classifier, projection) with the adversarial
    domain gradient. Loop 2 optimizes the classification loss only, updating
    the distortion classifier head and keeping the rest frozen.

    The domain classifier trains on a faster timescale
    (``domain_head_lr_scale`` times the loop-1 rate); a near-optimal
    discriminator keeps the reversed gradient pointing at genuine domain
    confusion instead of confident domain flips.
    """
    if config_loop1 is None:
        config_loop1 = TrainConfig.for_method("dccl_loop1")
    if config_loop2 is None:
        config_loop2 = TrainConfig.for_method("dccl_loop2")

    texts = [p.text for p in data.posts]
    labels = data.labels()
    domains_present = sorted({p.domain.value for p in data.posts})
    if len(domains_present) < 2:
        raise SingleDomainDataset(f"need >= 2 domains, got {domains_present}")
    missing = [d for d in domains_present if d not in state.domains]
    if missing:
        raise DcclError(f"domains {missing} not configured in DcclState")
    domain_ids = [state.domain_index(p.domain) for p in data.posts]
    by_domain: dict[int, list[int]] = {}
    for i, d in enumerate(domain_ids):
        by_domain.setdefault(d, []).append(i)

    # Loop 1: combined objective, everything trainable.
    all_params = model.all_parameters() + state.auxiliary_parameters()
    for p in all_params:
        p.requires_grad_(True)
    domain_params = list(state.domain_head.parameters())
    domain_ids_set = {id(p) for p in domain_params}
    other_params = [p for p in all_params if id(p) not in domain_ids_set]
    optimizer = torch.optim.SGD(
        [
            {"params": other_params},
            {
                "params": domain_params,
                "lr": config_loop1.learning_rate * domain_head_lr_scale,
            },
        ],
        lr=config_loop1.learning_rate,
        weight_decay=config_loop1.weight_decay,
    )
    rng = random.Random(config_loop1.seed)
    for epoch in range(config_loop1.epochs):
        for bi, idx in enumerate(
            _mixed_domain_batches(by_domain, config_loop1.batch_size, rng)
        ):
            batch = make_batch(
                model,
                state,
                [texts[i] for i in idx],
                [labels[i] for i in idx],
                [domain_ids[i] for i in idx],
            )
            loss, _ = total_loss(state, batch, adversarial=True)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(epoch, bi)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    # Loop 2: classification loss only; everything but the head frozen.
    head_params = list(model.head.parameters())
    head_ids = {id(p) for p in head_params}
    for p in all_params:
        p.requires_grad_(id(p) in head_ids)
    optimizer = torch.optim.SGD(
        head_params, lr=config_loop2.learning_rate, weight_decay=config_loop2.weight_decay
    )
    rng = random.Random(config_loop2.seed)
    label_t = torch.tensor(labels, dtype=torch.long)
    for epoch in range(config_loop2.epochs):
        order = list(range(len(texts)))
        rng.shuffle(order)
        for bi, start in enumerate(range(0, len(order), config_loop2.batch_size)):
            idx = order[start : start + config_loop2.batch_size]
            with torch.no_grad():
                h = model.embed([texts[i] for i in idx])
            loss = classification_loss(state, h, label_t[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(epoch, bi)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    for p in all_params:
        p.requires_grad_(True)
    return model


# --- checkpointing ----------------------------------------------------------

def save_dccl_checkpoint(model: EncoderModel, state: DcclState, path) -> None:
    from .encoder import save_checkpoint

    extra = {name: p.detach().numpy() for name, p in state.named_parameters().items()}
    config = {
        "kind": "dccl",
        "dccl": {
            "domains": list(state.domains),
            "alpha": state.alpha,
            "beta": state.beta,
            "lambda": state.lambda_,
            "tau": state.tau,
            "epsilon": state.epsilon,
            "projection_dim": state.projection.out_features,
            "domain_hidden": state.domain_head.inner.out_features,
        },
    }
    save_checkpoint(model, path, extra_params=extra, extra_config=config)


def load_dccl_checkpoint(path) -> tuple[EncoderModel, DcclState]:
    from .encoder import EncoderConfig, load_model_params, read_checkpoint

    config, tokenizer, params = read_checkpoint(path)
    if config.get("kind") != "dccl":
        raise DcclError(f"not a DCCL checkpoint: kind={config.get('kind')!r}")
    model = EncoderModel(tokenizer, EncoderConfig(**config["encoder"]))
    model_params = {
        k: v
        for k, v in params.items()
        if k.split(".")[0] not in ("generator", "domain_head", "projection")
    }
    load_model_params(model, model_params)
    dc = config["dccl"]
    state = DcclState.create(
        model,
        domains=dc["domains"],
        projection_dim=dc["projection_dim"],
        domain_hidden=dc["domain_hidden"],
        alpha=dc["alpha"],
        beta=dc["beta"],
        lambda_=dc["lambda"],
        tau=dc["tau"],
        epsilon=dc["epsilon"],
    )
    with torch.no_grad():
        for name, p in state.named_parameters().items():
            p.copy_(torch.as_tensor(params[name], dtype=model.dtype))
    return model, state
