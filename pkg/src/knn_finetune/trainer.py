"""Joint cross-entropy + selected contrastive training over a momentum key queue."""

from __future__ import annotations

import json
import math
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ._streams import SHUFFLE, substream
from .data import Dataset, FeaturizerConfig, featurize_many, few_shot_sample, load_dataset
from .encoder import (
    EncoderParams,
    HeadParams,
    Checkpoint,
    encode,
    encoder_backward,
    head_backward,
    init_encoder,
    init_head,
    linear_head,
)
from .knn import KNNClassifier, KNNContractError, build_anchor_index
from .losses import queue_contrastive, softmax
from .moco import ContrastQueue, QueueSnapshot, momentum_update

log = logging.getLogger(__name__)

BERT_LEARNING_RATE = 2e-5  # usual transformer fine-tuning rate; too small for this encoder


class ConfigError(ValueError):
    """A configuration value is outside its allowed range.  ``field`` names it."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.5
    tau: float = 0.07
    momentum: float = 0.999
    n_most: int = 10
    n_least: int = 5
    queue_capacity: int = 4096
    batch_size: int = 8
    lr: float = 1e-3
    epochs: int = 5
    hidden_dim: int = 64
    embed_dim: int = 32
    k: int = 10
    phi: float = 0.5
    weighted_vote: bool = False
    anchor_source: str = "query"

    def __post_init__(self):
        def check(name, ok, msg):
            if not ok:
                raise ConfigError(name, msg)

        check("lambda", 0.0 <= self.lam <= 1.0, f"must lie in [0, 1], got {self.lam}")
        check("tau", self.tau > 0, f"must be positive, got {self.tau}")
        check("momentum", 0.0 <= self.momentum <= 1.0, f"must lie in [0, 1], got {self.momentum}")
        check("n_most", self.n_most >= 0, f"must be >= 0, got {self.n_most}")
        check("n_least", self.n_least >= 0, f"must be >= 0, got {self.n_least}")
        check(
            "n_most",
            self.lam == 0 or self.n_most + self.n_least >= 1,
            "n_most + n_least must be >= 1 when lambda > 0",
        )
        check("queue_capacity", self.queue_capacity >= self.batch_size,
              f"must be >= batch_size ({self.batch_size}), got {self.queue_capacity}")
        check("batch_size", self.batch_size >= 1, f"must be positive, got {self.batch_size}")
        check("lr", self.lr > 0, f"must be positive, got {self.lr}")
        check("epochs", self.epochs >= 0, f"must be >= 0, got {self.epochs}")
        check("hidden_dim", self.hidden_dim >= 1, f"must be positive, got {self.hidden_dim}")
        check("embed_dim", self.embed_dim >= 1, f"must be positive, got {self.embed_dim}")
        check("k", self.k >= 1, f"must be positive, got {self.k}")
        check("phi", 0.0 <= self.phi <= 1.0, f"must lie in [0, 1], got {self.phi}")
        check("anchor_source", self.anchor_source in ("query", "key"),
              f"must be 'query' or 'key', got {self.anchor_source!r}")


class Adam:
    """Bias-corrected adaptive-moment optimizer over a flat dict of arrays.

    :meth:`step` returns fresh arrays and leaves the inputs untouched.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        for name, g in grads.items():
            # a single reduction is enough to notice inf/nan; count only on failure
            if not math.isfinite(float(np.sum(g))):
                bad = int(np.sum(~np.isfinite(g)))
                if bad:
                    raise FloatingPointError(
                        f"non-finite gradient for {name!r} at step {self.t + 1}: {bad} bad entries"
                    )
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != param shape {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            tmp = np.multiply(g, 1.0 - self.beta1)
            m *= self.beta1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - self.beta2
            v *= self.beta2
            v += tmp
            # tmp <- sqrt(v / bc2) + eps, then the step m / bc1 * lr / tmp
            np.divide(v, bc2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / bc1
            np.subtract(p, tmp, out=tmp)
            out[name] = tmp
        return out


def adam_step(opt: Adam, params, grads):
    return opt.step(params, grads)


@dataclass
class StepStats:
    loss: float
    ce: float
    contrastive: float
    skipped: int  # queries whose contrastive term was skipped (no positive or no negative)


@dataclass
class TrainState:
    query: EncoderParams
    key: EncoderParams
    head: HeadParams
    queue: ContrastQueue
    optimizer: Adam
    rng: np.random.Generator
    step: int = 0
    skipped_total: int = 0
    epoch_losses: list[float] = field(default_factory=list)


def init_state(seed: int, input_dim: int, num_classes: int, cfg: TrainConfig) -> TrainState:
    query = init_encoder(seed, (input_dim, cfg.hidden_dim, cfg.embed_dim))
    return TrainState(
        query=query,
        key=query.copy(),
        head=init_head(seed, cfg.embed_dim, num_classes),
        queue=ContrastQueue(cfg.queue_capacity, cfg.embed_dim),
        optimizer=Adam(lr=cfg.lr),
        rng=substream(seed, SHUFFLE),
    )


def contrastive_batch_term(z, labels, snapshot: QueueSnapshot, cfg: TrainConfig):
    """Batch-averaged selected-positive loss and its gradient w.r.t. each z.

    A query without any positive or any negative in the queue contributes
    zero; the average still divides by the full batch size.
    """
    B = len(labels)
    grad = np.zeros_like(z)
    total = 0.0
    skipped = 0
    if len(snapshot) == 0:
        return 0.0, grad, B
    sims = snapshot.z @ z.T
    for i in range(B):
        term = queue_contrastive(z[i], snapshot.z, snapshot.labels == labels[i], snapshot.ids,
                                 cfg.n_most, cfg.n_least, cfg.tau, sims=sims[:, i])
        if term is None:
            skipped += 1
            continue
        total += term.value
        grad[i] = term.grad
    return total / B, grad / B, skipped


def batch_loss_and_grads(query, head, X, labels, snapshot: QueueSnapshot, cfg: TrainConfig):
    """Combined loss ``(1 - lam) CE + lam SC`` on a batch and its parameter gradients.

    Returns ``(stats, encoder_grads, head_grads)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    B = len(labels)
    rep = encode(query, X)
    logits = linear_head(head, rep.h)
    p = softmax(logits)
    ce = float(np.mean(-np.log(p[np.arange(B), labels])))
    g_logits = p.copy()
    g_logits[np.arange(B), labels] -= 1.0
    g_logits /= B

    lam = cfg.lam
    if lam > 0:
        sc, g_z, skipped = contrastive_batch_term(rep.z, labels, snapshot, cfg)
    else:
        # the contrastive term has zero weight; skipping it leaves the update unchanged
        sc, g_z, skipped = 0.0, None, 0

    head_grads, g_h = head_backward(head, rep.h, (1.0 - lam) * g_logits)
    enc_grads, _ = encoder_backward(query, X, g_h, None if g_z is None else lam * g_z)
    stats = StepStats(loss=(1.0 - lam) * ce + lam * sc, ce=ce, contrastive=sc, skipped=skipped)
    return stats, enc_grads, head_grads


def _flat(query: EncoderParams, head: HeadParams) -> dict[str, np.ndarray]:
    d = {f"enc.{k}": v for k, v in query.as_dict().items()}
    d.update({f"head.{k}": v for k, v in head.as_dict().items()})
    return d


def _unflat(d) -> tuple[EncoderParams, HeadParams]:
    enc = EncoderParams.from_dict({k[4:]: v for k, v in d.items() if k.startswith("enc.")})
    head = HeadParams.from_dict({k[5:]: v for k, v in d.items() if k.startswith("head.")})
    return enc, head


def train_step(state: TrainState, X, labels, cfg: TrainConfig) -> StepStats:
    """One optimization step; mutates ``state``.

    Order: loss on the current queue, Adam update of the query encoder and
    head, momentum update of the key encoder, then the batch is encoded by
    the key encoder and pushed.
    """
    X = np.atleast_2d(X)
    labels = np.atleast_1d(labels)
    if len(labels) == 0:
        raise ValueError("empty batch")
    stats, enc_grads, head_grads = batch_loss_and_grads(
        state.query, state.head, X, labels, state.queue.snapshot() if cfg.lam > 0 else None, cfg
    )
    grads = {f"enc.{k}": v for k, v in enc_grads.items()}
    grads.update({f"head.{k}": v for k, v in head_grads.items()})
    state.query, state.head = _unflat(state.optimizer.step(_flat(state.query, state.head), grads))
    state.key = momentum_update(state.key, state.query, cfg.momentum)
    state.queue.push(encode(state.key, X).z, labels)
    state.step += 1
    state.skipped_total += stats.skipped
    return stats


def train(dataset: Dataset, featurizer: FeaturizerConfig, cfg: TrainConfig, seed: int) -> TrainState:
    X = featurize_many(dataset.texts, featurizer)
    y = dataset.labels
    state = init_state(seed, featurizer.dimension, dataset.num_classes, cfg)
    n = len(y)
    for epoch in range(cfg.epochs):
        order = state.rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            losses.append(train_step(state, X[idx], y[idx], cfg).loss)
        state.epoch_losses.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.6f skipped %d", epoch, state.epoch_losses[-1], state.skipped_total)
    log.info("trained %d steps, contrastive warm-up skips: %d", state.step, state.skipped_total)
    return state


def make_classifier(state_or_ckpt, train_set: Dataset, featurizer: FeaturizerConfig, cfg: TrainConfig) -> KNNClassifier:
    anchor_params = state_or_ckpt.key if cfg.anchor_source == "key" else state_or_ckpt.query
    index = build_anchor_index(anchor_params, train_set, featurizer)
    return KNNClassifier(
        featurizer, state_or_ckpt.query, state_or_ckpt.head, index,
        k=cfg.k, phi=cfg.phi, weighted=cfg.weighted_vote,
    )


def evaluate(model: KNNClassifier, dataset: Dataset, k: int | None = None, phi: float | None = None) -> float:
    """Accuracy of argmax of the blended score (ties to the lowest class)."""
    model = model.with_settings(k=k, phi=phi)
    if model.k > len(model.index):
        raise KNNContractError(f"K={model.k} exceeds the {len(model.index)} anchors in the index")
    X = featurize_many(dataset.texts, model.featurizer)
    correct = 0
    for x, ex in zip(X, dataset.examples):
        correct += int(np.argmax(model.score_features(x)) == ex.label)
    return correct / len(dataset)


@dataclass
class MetricsReport:
    seeds: list[int]
    accuracies: list[float]
    config: dict

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def variance(self) -> float:
        # population variance over seeds
        return float(np.var(self.accuracies))

    def to_json_lines(self) -> str:
        lines = [json.dumps({"kind": "config", **self.config}, sort_keys=True)]
        for s, a in zip(self.seeds, self.accuracies):
            lines.append(json.dumps({"kind": "seed", "seed": s, "accuracy": a}, sort_keys=True))
        lines.append(json.dumps({"kind": "summary", "mean": self.mean, "variance": self.variance,
                                 "n_seeds": len(self.seeds)}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        rows = ["seed\taccuracy"]
        rows += [f"{s}\t{a:.6f}" for s, a in zip(self.seeds, self.accuracies)]
        rows.append(f"mean\t{self.mean:.6f}")
        rows.append(f"variance\t{self.variance:.8f}")
        return "\n".join(rows) + "\n"


@dataclass
class SeedRun:
    seed: int
    state: TrainState
    model: KNNClassifier
    train_set: Dataset
    accuracy: float

    def checkpoint(self, config_echo: str = "") -> Checkpoint:
        return Checkpoint(self.state.query, self.state.key, self.state.head,
                          seed=self.seed, step=self.state.step, config_echo=config_echo)


def run_seed(cfg: TrainConfig, featurizer: FeaturizerConfig, train_set: Dataset,
             test_set: Dataset, seed: int, few_shot_n: int | None = None) -> SeedRun:
    if few_shot_n:
        train_set = few_shot_sample(train_set, few_shot_n, seed)
    state = train(train_set, featurizer, cfg, seed)
    model = make_classifier(state, train_set, featurizer, cfg)
    return SeedRun(seed, state, model, train_set, evaluate(model, test_set))


def run_experiment(cfg: TrainConfig, featurizer: FeaturizerConfig, train_path, test_path,
                   num_classes: int, seeds, few_shot_n: int | None = None,
                   on_seed=None) -> MetricsReport:
    """Train and evaluate once per seed; ``on_seed(SeedRun)`` sees each finished run."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    train_set = load_dataset(train_path, num_classes)
    test_set = load_dataset(test_path, num_classes)
    accs = []
    for seed in seeds:
        run = run_seed(cfg, featurizer, train_set, test_set, seed, few_shot_n)
        accs.append(run.accuracy)
        if on_seed is not None:
            on_seed(run)
    echo = {"train": asdict(cfg), "featurizer": asdict(featurizer), "few_shot_n": few_shot_n}
    return MetricsReport(seeds=seeds, accuracies=accs, config=echo)
