"""Anchor index over encoded training examples and the blended KNN/linear prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, FeaturizerConfig, featurize_many
from .encoder import EncoderParams, HeadParams, encode, linear_head
from .losses import softmax


class KNNContractError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorIndex:
    z: np.ndarray  # (n, d), unit rows
    labels: np.ndarray  # (n,)
    ids: np.ndarray  # (n,)
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)


def build_anchor_index(params: EncoderParams, dataset: Dataset, featurizer: FeaturizerConfig) -> AnchorIndex:
    if len(dataset) == 0:
        raise KNNContractError("cannot build an anchor index from an empty dataset")
    X = featurize_many(dataset.texts, featurizer)
    z = encode(params, X).z
    ids = np.array([ex.id for ex in dataset.examples], dtype=np.int64)
    return AnchorIndex(z=z, labels=dataset.labels, ids=ids, num_classes=dataset.num_classes)


def nearest(z_q, index: AnchorIndex, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions of the ``k`` anchors most cosine-similar to ``z_q``, plus all similarities.

    Ties go to the smaller example id, so the result does not depend on the
    order anchors are stored in.
    """
    if k <= 0:
        raise KNNContractError(f"K must be positive, got {k}")
    if k > len(index):
        raise KNNContractError(f"K={k} exceeds the {len(index)} anchors in the index")
    # row-wise reduction: identical anchors always get identical scores
    sims = np.sum(index.z * np.asarray(z_q, dtype=np.float64), axis=1)
    return np.lexsort((index.ids, -sims))[:k], sims


def knn_vote(z_q, index: AnchorIndex, k: int, weighted: bool = False) -> np.ndarray:
    """Per-class vote fraction among the ``k`` nearest anchors.

    With ``weighted=True`` each neighbor votes with its similarity clipped at
    zero; if every weight is zero the plain fraction is used.
    """
    top, sims = nearest(z_q, index, k)
    votes = np.zeros(index.num_classes)
    if weighted:
        w = np.maximum(sims[top], 0.0)
        if w.sum() > 0:
            np.add.at(votes, index.labels[top], w)
            return votes / votes.sum()
    np.add.at(votes, index.labels[top], 1.0)
    return votes / k


def combined_predict(linear_logits, knn_dist, phi: float) -> np.ndarray:
    if not 0.0 <= phi <= 1.0:
        raise KNNContractError(f"phi must lie in [0, 1], got {phi}")
    return (1.0 - phi) * softmax(linear_logits) + phi * np.asarray(knn_dist, dtype=np.float64)


@dataclass(frozen=True)
class KNNClassifier:
    """Trained encoder + head + anchors, scoring raw text with the blended rule."""

    featurizer: FeaturizerConfig
    encoder: EncoderParams
    head: HeadParams
    index: AnchorIndex
    k: int = 10
    phi: float = 0.5
    weighted: bool = False

    def with_settings(self, k: int | None = None, phi: float | None = None) -> "KNNClassifier":
        return KNNClassifier(
            self.featurizer, self.encoder, self.head, self.index,
            self.k if k is None else k, self.phi if phi is None else phi, self.weighted,
        )

    def score_features(self, x) -> np.ndarray:
        rep = encode(self.encoder, x)
        logits = linear_head(self.head, rep.h)
        if self.phi == 0.0:
            knn = np.zeros(self.index.num_classes)
        else:
            knn = knn_vote(rep.z, self.index, self.k, self.weighted)
        return combined_predict(logits, knn, self.phi)

    def score(self, text: str) -> np.ndarray:
        return self.score_features(featurize_many([text], self.featurizer)[0])

    def predict(self, text: str) -> int:
        return int(np.argmax(self.score(text)))


def write_index_tsv(index: AnchorIndex, path, header_lines=()) -> None:
    """Write ``example_id\\tlabel\\tz_0...z_{d-1}`` rows, preceded by ``#`` header lines."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        for i in range(len(index)):
            vec = "\t".join(repr(float(v)) for v in index.z[i])
            fh.write(f"{int(index.ids[i])}\t{int(index.labels[i])}\t{vec}\n")
