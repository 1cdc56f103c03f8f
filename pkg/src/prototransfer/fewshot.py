"""Few-shot adaptation: prototype heads, ProtoTune fine-tuning, and the
supervised baselines (episodic prototypical training, Pre+Linear).

The linear head initialized from class prototypes (W_n = 2 c_n,
b_n = -||c_n||^2) scores each class as 2 c_n . z - ||c_n||^2, which
differs from -||z - c_n||^2 only by a per-example constant, so before
any fine-tuning the head's argmax equals nearest-prototype
classification exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import streams, tensor as T
from .data import Dataset, Episode, sample_episode
from .errors import ContractError, NumericsError
from .network import EmbeddingNetwork
from .optim import AdamState, adam_step


@dataclass
class FineTuneConfig:
    epochs: int = 15
    batch_size: int = 5
    lr: float = 0.001
    scope: str = "head"  # "head" (frozen backbone) or "full"
    seed: int = 0


@dataclass
class PrototypeSet:
    prototypes: np.ndarray  # [N,D]
    counts: np.ndarray  # [N] supports per class


def compute_prototypes(embeddings: np.ndarray, labels: np.ndarray, n_ways: int) -> PrototypeSet:
    """Per-class means of support embeddings."""
    d = embeddings.shape[1]
    protos = np.zeros((n_ways, d), dtype=embeddings.dtype)
    counts = np.zeros(n_ways, dtype=np.int64)
    for c in range(n_ways):
        ids = np.flatnonzero(labels == c)
        if len(ids) == 0:
            raise ContractError(f"class {c} has no support samples")
        protos[c] = embeddings[ids].mean(axis=0)
        counts[c] = len(ids)
    return PrototypeSet(prototypes=protos, counts=counts)


@dataclass
class LinearHead:
    weight: T.Tensor  # [N,D]
    bias: T.Tensor  # [N]

    def logits(self, emb: T.Tensor) -> T.Tensor:
        return T.linear(emb, self.weight, self.bias)

    def logits_np(self, emb: np.ndarray) -> np.ndarray:
        return emb @ self.weight.data.T + self.bias.data


def init_head(prototypes: np.ndarray) -> LinearHead:
    """Prototype-initialized head: W_n = 2 c_n, b_n = -||c_n||^2."""
    w = (2.0 * prototypes).astype(np.float32)
    b = (-np.sum(prototypes.astype(np.float64) ** 2, axis=1)).astype(np.float32)
    return LinearHead(
        weight=T.Tensor(w, requires_grad=True),
        bias=T.Tensor(b, requires_grad=True),
    )


def random_head(n_ways: int, dim: int, rng: np.random.Generator) -> LinearHead:
    """Kaiming-uniform linear head (the Pre+Linear test-time probe)."""
    bound = float(np.sqrt(6.0 / dim))
    w = rng.uniform(-bound, bound, size=(n_ways, dim)).astype(np.float32)
    b = rng.uniform(-1.0 / np.sqrt(dim), 1.0 / np.sqrt(dim), size=n_ways).astype(np.float32)
    return LinearHead(T.Tensor(w, requires_grad=True), T.Tensor(b, requires_grad=True))


def classify_prototypes(query_emb: np.ndarray, prototypes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-prototype prediction and softmax(-d^2) probabilities.

    Distance ties resolve to the lowest class index.
    """
    d2 = (
        np.sum(query_emb * query_emb, axis=1, keepdims=True)
        - 2.0 * query_emb @ prototypes.T
        + np.sum(prototypes * prototypes, axis=1)[None, :]
    )
    pred = np.argmin(d2, axis=1)
    z = -d2
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    return pred, probs


def _head_loss(head: LinearHead, emb: T.Tensor, labels: np.ndarray) -> T.Tensor:
    logp = T.log_softmax(head.logits(emb))
    return T.neg(T.tmean(T.take_per_row(logp, labels)))


def proto_tune(
    network: EmbeddingNetwork,
    episode: Episode,
    config: FineTuneConfig | None = None,
) -> tuple[np.ndarray, LinearHead, EmbeddingNetwork]:
    """ProtoTune: prototype-initialized head fine-tuned on the support set.

    Returns (query predictions, tuned head, backbone used at test time).
    scope="head" freezes the backbone including batch-norm statistics, so
    support embeddings are computed once in eval mode and reused across
    epochs; scope="full" backprops through train-mode backbone passes.
    epochs=0 reduces exactly to nearest-prototype classification.
    """
    cfg = config or FineTuneConfig()
    if cfg.scope not in ("head", "full"):
        raise ContractError(f"unknown fine-tune scope {cfg.scope!r}")
    net = network.copy() if cfg.scope == "full" else network
    n_ways = episode.n_ways

    sup_emb = net.embed(episode.support_images, mode="eval").data
    head = init_head(compute_prototypes(sup_emb, episode.support_labels, n_ways).prototypes)

    n_sup = len(episode.support_labels)
    if cfg.epochs > 0:
        adam = AdamState(lr=cfg.lr, decay_period=0)
        params = {"head.weight": head.weight, "head.bias": head.bias}
        if cfg.scope == "full":
            params.update(net.parameters())
        for epoch in range(cfg.epochs):
            rng = streams.derive_rng(cfg.seed, streams.FINETUNE, epoch)
            order = rng.permutation(n_sup)
            for start in range(0, n_sup, cfg.batch_size):
                ids = order[start : start + cfg.batch_size]
                labels = episode.support_labels[ids]
                tape = T.ComputationTape()
                with tape:
                    if cfg.scope == "full":
                        emb = net.embed(episode.support_images[ids], mode="train", tape=tape)
                    else:
                        emb = T.Tensor(sup_emb[ids])
                    loss = _head_loss(head, emb, labels)
                if not np.isfinite(loss.data):
                    raise NumericsError(f"non-finite fine-tuning loss at epoch {epoch}")
                T.backward(loss, tape)
                grads = {k: p.grad for k, p in params.items()}
                params, adam = adam_step(params, grads, adam)
                head.weight = params["head.weight"]
                head.bias = params["head.bias"]
                if cfg.scope == "full":
                    net.set_parameters({k: v for k, v in params.items() if k.startswith("block")})

    qry_emb = net.embed(episode.query_images, mode="eval").data
    pred = np.argmax(qry_emb @ head.weight.data.T + head.bias.data, axis=1)
    return pred.astype(np.int64), head, net


def proto_classify(network: EmbeddingNetwork, episode: Episode) -> np.ndarray:
    """Plain nearest-prototype episode classification (no adaptation)."""
    sup_emb = network.embed(episode.support_images, mode="eval").data
    protos = compute_prototypes(sup_emb, episode.support_labels, episode.n_ways).prototypes
    qry_emb = network.embed(episode.query_images, mode="eval").data
    pred, _ = classify_prototypes(qry_emb, protos)
    return pred.astype(np.int64)


# ---------------------------------------------------------------------------
# supervised baselines
# ---------------------------------------------------------------------------


@dataclass
class ProtoNetConfig:
    n_ways: int = 5
    k_shots: int = 5
    q_queries: int = 15
    lr: float = 0.001
    lr_decay_factor: float = 0.5
    lr_decay_period: int = 25_000
    max_iterations: int = 2000
    seed: int = 0


def _episode_loss(network: EmbeddingNetwork, episode: Episode, tape) -> tuple[T.Tensor, float]:
    """Differentiable prototypical loss for one labeled episode.

    Support and query images share one train-mode forward pass;
    prototypes are class means expressed as an assignment matmul so the
    gradient flows into support embeddings.
    """
    n, k = episode.n_ways, episode.k_shots
    n_sup = len(episode.support_labels)
    images = np.concatenate([episode.support_images, episode.query_images], axis=0)
    emb = network.embed(images, mode="train", tape=tape)
    sup = T.rows(emb, 0, n_sup)
    qry = T.rows(emb, n_sup, emb.shape[0])
    assign = np.zeros((n, n_sup), dtype=np.float32)
    for c in range(n):
        ids = episode.support_labels == c
        assign[c, ids] = 1.0 / max(1, ids.sum())
    protos = T.matmul(T.Tensor(assign), sup)
    d2 = T.pairwise_sq_dist(qry, protos)
    logp = T.log_softmax(T.neg(d2))
    loss = T.neg(T.tmean(T.take_per_row(logp, episode.query_labels)))
    acc = float(np.mean(np.argmin(d2.data, axis=1) == episode.query_labels))
    return loss, acc


def train_protonet_supervised(
    network: EmbeddingNetwork,
    dataset: Dataset,
    config: ProtoNetConfig,
    verbose: bool = False,
) -> EmbeddingNetwork:
    """Episodic supervised prototypical-network training."""
    cfg = config
    adam = AdamState(lr=cfg.lr, decay_factor=cfg.lr_decay_factor, decay_period=cfg.lr_decay_period)
    for it in range(cfg.max_iterations):
        rng = streams.derive_rng(cfg.seed, streams.EPISODE, it)
        episode = sample_episode(dataset, cfg.n_ways, cfg.k_shots, cfg.q_queries, rng)
        tape = T.ComputationTape()
        with tape:
            loss, acc = _episode_loss(network, episode, tape)
        if not np.isfinite(loss.data):
            raise NumericsError(f"non-finite episodic loss at iteration {it}")
        T.backward(loss, tape)
        params = network.parameters()
        grads = {k: p.grad for k, p in params.items()}
        new_params, adam = adam_step(params, grads, adam)
        network.set_parameters(new_params)
        if verbose and it % 50 == 0:
            print(f"episode {it:5d}  loss {float(loss.data):.4f}  acc {acc:.4f}")
    return network


@dataclass
class PreLinearConfig:
    lr: float = 0.001
    batch_size: int = 50
    epochs: int = 30
    probe_epochs: int = 100
    probe_lr: float = 0.01
    seed: int = 0


def train_pre_linear(
    network: EmbeddingNetwork,
    dataset: Dataset,
    config: PreLinearConfig,
    verbose: bool = False,
) -> EmbeddingNetwork:
    """Pre+Linear stage 1: whole-base-class softmax classifier training.

    Trains backbone plus a temporary classification head over all base
    classes with cross-entropy; the head is discarded, the backbone kept.
    """
    cfg = config
    if dataset.labels is None or dataset.n_classes < 2:
        raise ContractError("Pre+Linear pre-training needs a labeled dataset with >= 2 classes")
    rng0 = streams.derive_rng(cfg.seed, streams.INIT, 99)
    head = random_head(dataset.n_classes, network.embedding_dim, rng0)
    params = dict(network.parameters())
    params["head.weight"] = head.weight
    params["head.bias"] = head.bias
    adam = AdamState(lr=cfg.lr, decay_period=0)
    m = len(dataset)
    step = 0
    for epoch in range(cfg.epochs):
        rng = streams.derive_rng(cfg.seed, streams.SHUFFLE, epoch)
        order = rng.permutation(m)
        for start in range(0, m, cfg.batch_size):
            ids = order[start : start + cfg.batch_size]
            if len(ids) < 2:
                continue  # batch-norm needs at least two values per site
            tape = T.ComputationTape()
            with tape:
                emb = network.embed(dataset.images[ids], mode="train", tape=tape)
                logp = T.log_softmax(T.linear(emb, params["head.weight"], params["head.bias"]))
                loss = T.neg(T.tmean(T.take_per_row(logp, dataset.labels[ids])))
            if not np.isfinite(loss.data):
                raise NumericsError(f"non-finite classifier loss at step {step}")
            T.backward(loss, tape)
            grads = {k: p.grad for k, p in params.items()}
            params, adam = adam_step(params, grads, adam)
            network.set_parameters({k: v for k, v in params.items() if k.startswith("block")})
            step += 1
        if verbose:
            print(f"epoch {epoch:3d}  loss {float(loss.data):.4f}")
    return network


def linear_probe(
    network: EmbeddingNetwork,
    episode: Episode,
    config: PreLinearConfig | None = None,
    probe_seed: int = 0,
) -> np.ndarray:
    """Pre+Linear stage 2: randomly initialized probe on frozen features."""
    cfg = config or PreLinearConfig()
    rng = streams.derive_rng(probe_seed, streams.FINETUNE, 0)
    sup_emb = network.embed(episode.support_images, mode="eval").data
    head = random_head(episode.n_ways, sup_emb.shape[1], rng)
    adam = AdamState(lr=cfg.probe_lr, decay_period=0)
    params = {"head.weight": head.weight, "head.bias": head.bias}
    n_sup = len(episode.support_labels)
    batch = min(5, n_sup)
    for epoch in range(cfg.probe_epochs):
        rng_e = streams.derive_rng(probe_seed, streams.FINETUNE, epoch + 1)
        order = rng_e.permutation(n_sup)
        for start in range(0, n_sup, batch):
            ids = order[start : start + batch]
            tape = T.ComputationTape()
            with tape:
                loss = _head_loss(
                    LinearHead(params["head.weight"], params["head.bias"]),
                    T.Tensor(sup_emb[ids]),
                    episode.support_labels[ids],
                )
            T.backward(loss, tape)
            grads = {k: p.grad for k, p in params.items()}
            params, adam = adam_step(params, grads, adam)
    qry_emb = network.embed(episode.query_images, mode="eval").data
    logits = qry_emb @ params["head.weight"].data.T + params["head.bias"].data
    return np.argmax(logits, axis=1).astype(np.int64)
