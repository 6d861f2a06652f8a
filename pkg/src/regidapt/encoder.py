"""Text encoder with classification head, adapters, and gradient verification.

The reference encoder is deliberately small: learned token embeddings, mean
pooling over non-padding positions, and one affine-tanh hidden layer. Every
gradient of every training path is cheap enough to verify against central
differences. The backbone is pluggable, so a pretrained multilingual
transformer exposing the same ``(ids, mask) -> h`` contract can be dropped in,
with the first-token vector as its sentence embedding.
"""

from __future__ import annotations

import io
import json
import random
import zipfile
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import CHECKPOINT_FORMAT
from .corpus import Dataset
from .predictions import Prediction
from .text import tokenize

MAX_TOKENS = 512
DEFAULT_ADAPTER_DIM = 64

PAD_ID = 0
UNK_ID = 1


class EncoderError(Exception):
    pass


class DimensionMismatch(EncoderError):
    pass


class NonFiniteLoss(EncoderError):
    def __init__(self, epoch: int, batch_index: int):
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")


# Per-method training hyperparameter defaults (learning rate, epochs, weight decay).
TRAIN_DEFAULTS: dict[str, tuple[float, int, float]] = {
    "baseline_ft": (5e-5, 6, 0.0),
    "adapters": (1e-4, 6, 0.0),
    "empath": (2e-5, 3, 0.01),
    "dccl_loop1": (1e-5, 3, 0.01),
    "dccl_loop2": (2e-5, 2, 0.01),
}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    weight_decay: float = 0.0
    batch_size: int = 16
    seed: int = 0
    trainable_scope: str = "full"  # full | adapters_only | head_only

    def __post_init__(self) -> None:
        if self.trainable_scope not in ("full", "adapters_only", "head_only"):
            raise ValueError(f"unknown trainable_scope {self.trainable_scope!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.weight_decay < 0:
            raise ValueError("invalid training configuration")

    @classmethod
    def for_method(cls, method: str, **overrides) -> "TrainConfig":
        lr, epochs, wd = TRAIN_DEFAULTS[method]
        base = dict(learning_rate=lr, epochs=epochs, weight_decay=wd)
        base.update(overrides)
        return cls(**base)


class Tokenizer:
    """Whitespace+punctuation tokenizer with a corpus-built vocabulary."""

    def __init__(self, vocab: dict[str, int], max_len: int = MAX_TOKENS):
        self.vocab = vocab
        self.max_len = max_len

    @classmethod
    def build(
        cls, texts: Sequence[str], max_len: int = MAX_TOKENS, max_vocab: Optional[int] = None
    ) -> "Tokenizer":
        counts: Counter = Counter()
        for t in texts:
            counts.update(tokenize(t))
        items = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if max_vocab is not None:
            items = items[: max(0, max_vocab - 2)]
        vocab = {"<pad>": PAD_ID, "<unk>": UNK_ID}
        for token, _ in items:
            vocab[token] = len(vocab)
        return cls(vocab, max_len)

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        """Token ids, silently truncated to ``max_len``."""
        return [self.vocab.get(t, UNK_ID) for t in tokenize(text)][: self.max_len]


class Adapter(nn.Module):
    """Residual bottleneck: down-project, tanh, up-project (zero-initialized), add.

    At initialization the up-projection is zero, so the adapter is exactly the
    identity and the adapted model reproduces the unadapted one bitwise.
    """

    def __init__(self, dim: int, bottleneck: int):
        super().__init__()
        self.down = nn.Linear(dim, bottleneck)
        self.up = nn.Linear(bottleneck, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.up(torch.tanh(self.down(x)))


class ReferenceEncoder(nn.Module):
    """Mean-pooled token embeddings followed by one affine-tanh layer."""

    def __init__(self, vocab_size: int, dim: int, adapter_dim: Optional[int] = None):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, dim)
        self.hidden = nn.Linear(dim, dim)
        self.adapter = Adapter(dim, adapter_dim) if adapter_dim else None

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        emb = self.embedding(ids) * mask.unsqueeze(-1)
        pooled = emb.sum(dim=1) / mask.sum(dim=1).clamp(min=1.0).unsqueeze(-1)
        h = torch.tanh(self.hidden(pooled))
        if self.adapter is not None:
            h = self.adapter(h)
        return h


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    adapter_dim: Optional[int] = None
    extra_feature_width: int = 0
    max_len: int = MAX_TOKENS
    dtype: str = "float32"  # float64 for finite-difference verification
    init_seed: int = 0


def _torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


def _init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministic re-initialization from an explicit generator."""
    for sub in module.modules():
        if isinstance(sub, nn.Embedding):
            with torch.no_grad():
                sub.weight.copy_(
                    torch.randn(sub.weight.shape, generator=generator, dtype=torch.float64) * 0.1
                )
        elif isinstance(sub, nn.Linear):
            bound = 1.0 / (sub.in_features**0.5)
            with torch.no_grad():
                w = torch.rand(sub.weight.shape, generator=generator, dtype=torch.float64)
                sub.weight.copy_(w * 2 * bound - bound)
                if sub.bias is not None:
                    b = torch.rand(sub.bias.shape, generator=generator, dtype=torch.float64)
                    sub.bias.copy_(b * 2 * bound - bound)
    for sub in module.modules():
        if isinstance(sub, Adapter):
            with torch.no_grad():
                sub.up.weight.zero_()
                sub.up.bias.zero_()


class EncoderModel:
    """Tokenizer + backbone + classification head.

    The backbone is any module mapping ``(ids, mask) -> h`` with a fixed
    embedding width; the bundled ReferenceEncoder is used when none is
    injected. A pretrained multilingual transformer wraps in the same way,
    with its first-token vector as the sentence embedding.
    ``extra_feature_width`` configures the augmentation slot of the head;
    callers must then pass matching feature vectors to ``classify``.
    """

    def __init__(
        self,
        tokenizer: Tokenizer,
        config: EncoderConfig,
        backbone: Optional[nn.Module] = None,
    ):
        self.tokenizer = tokenizer
        self.config = config
        dtype = _torch_dtype(config.dtype)
        gen = torch.Generator().manual_seed(config.init_seed)
        if backbone is None:
            backbone = ReferenceEncoder(len(tokenizer), config.dim, config.adapter_dim)
            _init_parameters(backbone, gen)
        self.backbone = backbone
        self.head = nn.Linear(config.dim + config.extra_feature_width, 2)
        _init_parameters(self.head, gen)
        self.backbone.to(dtype)
        self.head.to(dtype)

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def dtype(self) -> torch.dtype:
        return _torch_dtype(self.config.dtype)

    def batch_ids(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        encoded = [self.tokenizer.encode(t) for t in texts]
        width = max((len(e) for e in encoded), default=1) or 1
        ids = torch.full((len(texts), width), PAD_ID, dtype=torch.long)
        mask = torch.zeros((len(texts), width), dtype=self.dtype)
        for i, e in enumerate(encoded):
            if e:
                ids[i, : len(e)] = torch.tensor(e, dtype=torch.long)
                mask[i, : len(e)] = 1.0
        return ids, mask

    def embed(self, texts: Sequence[str]) -> torch.Tensor:
        """Embeddings with gradient tracking (training path)."""
        ids, mask = self.batch_ids(texts)
        return self.backbone(ids, mask)

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        """Inference-mode embeddings as a numpy array."""
        with torch.no_grad():
            return self.embed(texts).numpy()

    def named_parameters(self) -> dict[str, nn.Parameter]:
        out = {}
        for name, p in self.backbone.named_parameters():
            out[f"backbone.{name}"] = p
        for name, p in self.head.named_parameters():
            out[f"head.{name}"] = p
        return out

    def all_parameters(self) -> list[nn.Parameter]:
        return list(self.named_parameters().values())

    def trainable_parameters(self, scope: str) -> list[nn.Parameter]:
        if scope == "full":
            return self.all_parameters()
        if scope == "adapters_only":
            if self.backbone.adapter is None:
                raise EncoderError("model has no adapters")
            return list(self.backbone.adapter.parameters()) + list(self.head.parameters())
        if scope == "head_only":
            return list(self.head.parameters())
        raise ValueError(f"unknown scope {scope!r}")

    def backbone_core_state(self) -> dict[str, np.ndarray]:
        """Backbone parameters excluding adapters (freeze-contract checks)."""
        return {
            name: p.detach().numpy().copy()
            for name, p in self.backbone.named_parameters()
            if not name.startswith("adapter.")
        }


def build_model(
    texts: Sequence[str],
    config: EncoderConfig = EncoderConfig(),
    max_vocab: Optional[int] = None,
) -> EncoderModel:
    tokenizer = Tokenizer.build(texts, max_len=config.max_len, max_vocab=max_vocab)
    return EncoderModel(tokenizer, config)


def encode(model: EncoderModel, texts: Sequence[str]) -> np.ndarray:
    """One embedding per text, deterministic, no gradient tracking."""
    if not texts:
        raise ValueError("batch is empty")
    return model.encode(texts)


def classify(
    model: EncoderModel,
    h: np.ndarray | torch.Tensor,
    extra_features: Optional[np.ndarray] = None,
    post_ids: Optional[Sequence[str]] = None,
) -> list[Prediction]:
    """Predictions from embeddings (plus augmentation features when configured)."""
    h_t = torch.as_tensor(np.asarray(h), dtype=model.dtype)
    if h_t.ndim == 1:
        h_t = h_t.unsqueeze(0)
    width = model.config.extra_feature_width
    if width > 0:
        if extra_features is None:
            raise DimensionMismatch(f"head expects {width} extra features, got none")
        feats = torch.as_tensor(np.asarray(extra_features), dtype=model.dtype)
        if feats.ndim == 1:
            feats = feats.unsqueeze(0)
        if feats.shape != (h_t.shape[0], width):
            raise DimensionMismatch(
                f"extra features shape {tuple(feats.shape)}, expected ({h_t.shape[0]}, {width})"
            )
        h_t = torch.cat([h_t, feats], dim=1)
    elif extra_features is not None:
        raise DimensionMismatch("head has no augmentation slot but features were passed")
    with torch.no_grad():
        logits = model.head(h_t)
    ids = post_ids if post_ids is not None else [str(i) for i in range(h_t.shape[0])]
    return [
        Prediction.from_logits(pid, (float(z[0]), float(z[1])))
        for pid, z in zip(ids, logits)
    ]


def predict(
    model: EncoderModel, dataset: Dataset, features: Optional[np.ndarray] = None
) -> list[Prediction]:
    """End-to-end prediction for a dataset, in post order."""
    if not len(dataset):
        return []
    h = encode(model, [p.text for p in dataset.posts])
    return classify(model, h, features, post_ids=[p.id for p in dataset.posts])


def _class_logits(
    model: EncoderModel, h: torch.Tensor, features: Optional[torch.Tensor]
) -> torch.Tensor:
    if model.config.extra_feature_width > 0:
        if features is None:
            raise DimensionMismatch(
                f"head expects {model.config.extra_feature_width} extra features"
            )
        h = torch.cat([h, features], dim=1)
    return model.head(h)


def train_classifier(
    model: EncoderModel,
    data: Dataset,
    config: TrainConfig,
    features: Optional[np.ndarray] = None,
) -> tuple[EncoderModel, list[float]]:
    """Mini-batch cross-entropy training; returns the model and per-epoch mean loss.

    Only parameters in ``config.trainable_scope`` are updated. Deterministic
    for a given seed. Raises NonFiniteLoss (with the batch index) on blowup.
    """
    texts = [p.text for p in data.posts]
    labels = data.labels()
    feat_t = None
    if features is not None:
        feat_t = torch.as_tensor(np.asarray(features), dtype=model.dtype)
        if feat_t.shape != (len(texts), model.config.extra_feature_width):
            raise DimensionMismatch(
                f"features shape {tuple(feat_t.shape)}, expected "
                f"({len(texts)}, {model.config.extra_feature_width})"
            )

    params = model.trainable_parameters(config.trainable_scope)
    trainable_ids = {id(p) for p in params}
    for p in model.all_parameters():
        p.requires_grad_(id(p) in trainable_ids)
    optimizer = torch.optim.SGD(
        params, lr=config.learning_rate, weight_decay=config.weight_decay
    )
    rng = random.Random(config.seed)
    label_t = torch.tensor(labels, dtype=torch.long)

    curve: list[float] = []
    for epoch in range(config.epochs):
        order = list(range(len(texts)))
        rng.shuffle(order)
        epoch_losses = []
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            h = model.embed([texts[i] for i in idx])
            batch_feats = feat_t[idx] if feat_t is not None else None
            logits = _class_logits(model, h, batch_feats)
            loss = F.cross_entropy(logits, label_t[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(epoch, bi)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
        curve.append(float(np.mean(epoch_losses)) if epoch_losses else 0.0)

    for p in model.all_parameters():
        p.requires_grad_(True)
    return model, curve


def gradient_check(
    model: EncoderModel,
    loss: Callable[[EncoderModel, object], torch.Tensor],
    batch: object,
    epsilon: float = 1e-3,
    parameters: Optional[Sequence[nn.Parameter]] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Uses the fourth-order symmetric stencil
    (f(x-2e) - 8f(x-e) + 8f(x+e) - f(x+2e)) / 12e, whose truncation error is
    O(e^4); that allows a step large enough that float64 roundoff stays below
    the 1e-8 gradient floor even for heavily down-weighted loss terms.
    ``loss(model, batch)`` must rebuild its graph on every call so parameter
    perturbations propagate. Run on a float64 model; float32 rounding
    dominates the difference quotient otherwise.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must be in [1e-7, 1e-3], got {epsilon}")
    params = list(parameters) if parameters is not None else model.all_parameters()
    value = loss(model, batch)
    grads = torch.autograd.grad(value, params, allow_unused=True)
    max_err = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            analytic = torch.zeros_like(p) if g is None else g
            flat_p = p.view(-1)
            flat_g = analytic.reshape(-1)
            for i in range(flat_p.numel()):
                orig = flat_p[i].item()
                stencil = []
                for step in (-2.0, -1.0, 1.0, 2.0):
                    flat_p[i] = orig + step * epsilon
                    stencil.append(float(loss(model, batch)))
                flat_p[i] = orig
                f_m2, f_m1, f_p1, f_p2 = stencil
                fd = (f_m2 - 8.0 * f_m1 + 8.0 * f_p1 - f_p2) / (12.0 * epsilon)
                a = float(flat_g[i])
                err = abs(fd - a) / max(abs(fd), abs(a), 1e-8)
                max_err = max(max_err, err)
    return max_err


def cross_entropy_loss(model: EncoderModel, batch: tuple) -> torch.Tensor:
    """Standard training loss as a gradient-check target: (texts, labels[, features])."""
    texts, labels = batch[0], batch[1]
    features = batch[2] if len(batch) > 2 else None
    h = model.embed(texts)
    feats = None
    if features is not None:
        feats = torch.as_tensor(np.asarray(features), dtype=model.dtype)
    logits = _class_logits(model, h, feats)
    return F.cross_entropy(logits, torch.tensor(labels, dtype=torch.long))


# --- checkpoint container -------------------------------------------------

def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, array)
    return buf.getvalue()


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def save_checkpoint(
    model: EncoderModel,
    path: str | Path,
    extra_params: Optional[dict[str, np.ndarray]] = None,
    extra_config: Optional[dict] = None,
) -> None:
    """Single-file archive: format header, config, vocabulary, named tensors."""
    config = {
        "kind": "encoder" if not extra_config else extra_config.get("kind", "encoder"),
        "encoder": asdict(model.config),
    }
    if extra_config:
        config.update(extra_config)
    params = {name: p.detach().numpy() for name, p in model.named_parameters().items()}
    if extra_params:
        params.update(extra_params)
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "format", CHECKPOINT_FORMAT.encode())
        _write_entry(zf, "config.json", json.dumps(config, sort_keys=True).encode())
        _write_entry(
            zf,
            "vocab.json",
            json.dumps(
                {"vocab": model.tokenizer.vocab, "max_len": model.tokenizer.max_len},
                sort_keys=True,
            ).encode(),
        )
        order = sorted(params)
        _write_entry(zf, "params/__order__.json", json.dumps(order).encode())
        for name in order:
            _write_entry(zf, f"params/{name}.npy", _npy_bytes(params[name]))


def read_checkpoint(path: str | Path) -> tuple[dict, Tokenizer, dict[str, np.ndarray]]:
    with zipfile.ZipFile(path, "r") as zf:
        header = zf.read("format").decode()
        if header != CHECKPOINT_FORMAT:
            raise EncoderError(f"unsupported checkpoint format {header!r}")
        config = json.loads(zf.read("config.json"))
        vocab_blob = json.loads(zf.read("vocab.json"))
        order = json.loads(zf.read("params/__order__.json"))
        params = {
            name: np.load(io.BytesIO(zf.read(f"params/{name}.npy"))) for name in order
        }
    tokenizer = Tokenizer(vocab_blob["vocab"], vocab_blob["max_len"])
    return config, tokenizer, params


def load_checkpoint(path: str | Path) -> EncoderModel:
    config, tokenizer, params = read_checkpoint(path)
    model = EncoderModel(tokenizer, EncoderConfig(**config["encoder"]))
    load_model_params(model, params)
    return model


def load_model_params(model: EncoderModel, params: dict[str, np.ndarray]) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters().items():
            if name not in params:
                raise EncoderError(f"checkpoint is missing parameter {name!r}")
            p.copy_(torch.as_tensor(params[name], dtype=model.dtype))
