"""Prediction records shared by the classifiers and the evaluation suite."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class Prediction:
    """One model verdict for one post.

    ``label`` is always the argmax of ``logits``; ``probability`` is its
    softmax and sums to 1 within 1e-6.
    """

    post_id: str
    logits: tuple[float, float]
    label: int
    probability: tuple[float, float]

    @classmethod
    def from_logits(cls, post_id: str, logits: tuple[float, float]) -> "Prediction":
        z0, z1 = logits
        m = max(z0, z1)
        e0, e1 = math.exp(z0 - m), math.exp(z1 - m)
        s = e0 + e1
        return cls(
            post_id=post_id,
            logits=(float(z0), float(z1)),
            label=int(z1 > z0),
            probability=(e0 / s, e1 / s),
        )

    @classmethod
    def from_label(cls, post_id: str, label: int) -> "Prediction":
        """Hard prediction (random baseline, prompt verdicts): one-hot logits."""
        return cls.from_logits(post_id, (1.0, 0.0) if label == 0 else (0.0, 1.0))


def save_predictions(predictions: list[Prediction], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for p in predictions:
            f.write(
                json.dumps(
                    {
                        "id": p.post_id,
                        "label": p.label,
                        "logits": list(p.logits),
                        "probability": list(p.probability),
                    }
                )
                + "\n"
            )


def load_predictions(path: str | Path) -> list[Prediction]:
    out = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(
                Prediction(
                    post_id=rec["id"],
                    logits=tuple(rec["logits"]),
                    label=int(rec["label"]),
                    probability=tuple(rec["probability"]),
                )
            )
    return out
