"""Self-supervised prototypical pre-training (ProtoCLR).

Each of the N batch images acts as a 1-shot class prototype; its Q
augmented views are queries. Queries are classified against all N
prototypes by softmax over negative squared Euclidean distance, and the
mean cross-entropy over the N*Q queries is minimized with Adam. No
labels are ever consulted.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import streams, tensor as T
from .augment import AugmentationPipeline
from .data import Dataset, sample_pretrain_batch
from .errors import ContractError, NumericsError
from .network import EmbeddingNetwork
from .optim import AdamState, adam_state_arrays, adam_step


@dataclass
class ProtoCLRConfig:
    batch_size: int = 50  # N: prototypes per batch
    n_queries: int = 3  # Q: augmented views per prototype
    lr: float = 0.001
    lr_decay_factor: float = 0.5
    lr_decay_period: int = 25_000
    max_iterations: int = 10_000
    patience: int = 20_000  # iterations without train-accuracy improvement
    accuracy_window: int = 100  # smoothing window for the stopping metric
    checkpoint_interval: int = 500
    epoch_shuffle: bool = False  # iterate epoch permutations instead of uniform draws
    seed: int = 0


@dataclass
class TrainLog:
    iterations: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    stopped_at: int = 0
    best_iteration: int = 0
    best_accuracy: float = 0.0
    wall_seconds: float = 0.0

    def append(self, iteration: int, loss: float, acc: float, lr: float):
        self.iterations.append(iteration)
        self.losses.append(loss)
        self.accuracies.append(acc)
        self.lrs.append(lr)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iter", "loss", "acc", "lr"])
            for row in zip(self.iterations, self.losses, self.accuracies, self.lrs):
                w.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}", f"{row[3]:.8f}"])


def protoclr_loss(proto_emb: T.Tensor, query_emb: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
    """Contrastive prototypical loss.

    proto_emb: [N,D] embeddings of the un-augmented batch images.
    query_emb: [N,Q,D] embeddings of the augmented views.
    Returns (scalar mean loss, per-query loss matrix [N,Q]).
    """
    n, d = proto_emb.shape
    if n < 2:
        raise ContractError(f"ProtoCLR needs at least 2 prototypes for contrast, got N={n}")
    if query_emb.ndim != 3 or query_emb.shape[0] != n or query_emb.shape[2] != d:
        raise ContractError(f"query embeddings {query_emb.shape} incompatible with prototypes {proto_emb.shape}")
    q = query_emb.shape[1]
    flat = T.reshape(query_emb, (n * q, d))
    d2 = T.pairwise_sq_dist(flat, proto_emb)  # [N*Q, N]
    logp = T.log_softmax(T.neg(d2))
    targets = np.repeat(np.arange(n, dtype=np.int64), q)
    per_query = T.neg(T.take_per_row(logp, targets))  # [N*Q]
    loss = T.tmean(per_query)
    return loss, T.reshape(per_query, (n, q))


def training_accuracy(proto_emb: np.ndarray, query_emb: np.ndarray) -> float:
    """Fraction of queries whose nearest prototype is their own.

    Ties resolve to the lowest prototype index, so N identical
    embeddings score exactly 1/N on average.
    """
    n, q, d = query_emb.shape
    flat = query_emb.reshape(n * q, d)
    d2 = (
        np.sum(flat * flat, axis=1, keepdims=True)
        - 2.0 * flat @ proto_emb.T
        + np.sum(proto_emb * proto_emb, axis=1)[None, :]
    )
    pred = np.argmin(d2, axis=1)
    targets = np.repeat(np.arange(n), q)
    return float(np.mean(pred == targets))


def _embed_batch(network: EmbeddingNetwork, batch, tape) -> tuple[T.Tensor, T.Tensor]:
    """Forward prototypes and queries through one joint train-mode pass.

    A single concatenated pass keeps batch-norm statistics shared
    between prototypes and their views.
    """
    n, q = batch.queries.shape[:2]
    c, h, w = batch.prototypes.shape[1:]
    images = np.concatenate([batch.prototypes, batch.queries.reshape(n * q, c, h, w)], axis=0)
    emb = network.embed(images, mode="train", tape=tape)
    proto_emb = T.rows(emb, 0, n)
    query_emb = T.reshape(T.rows(emb, n, n + n * q), (n, q, emb.shape[1]))
    return proto_emb, query_emb


def pretrain_step(
    network: EmbeddingNetwork,
    batch,
    adam: AdamState,
) -> tuple[float, float, AdamState]:
    """One ProtoCLR iteration: forward, backward, Adam update in place."""
    tape = T.ComputationTape()
    with tape:
        proto_emb, query_emb = _embed_batch(network, batch, tape)
        loss, _ = protoclr_loss(proto_emb, query_emb)
    if not np.isfinite(loss.data):
        raise NumericsError(f"non-finite loss at iteration {batch.iteration}: {float(loss.data)}")
    T.backward(loss, tape)
    params = network.parameters()
    grads = {k: p.grad for k, p in params.items()}
    new_params, adam = adam_step(params, grads, adam)
    network.set_parameters(new_params)
    acc = training_accuracy(proto_emb.data, query_emb.data)
    return float(loss.data), acc, adam


def train_protoclr(
    network: EmbeddingNetwork,
    dataset: Dataset,
    pipeline: AugmentationPipeline,
    config: ProtoCLRConfig,
    out_dir=None,
    log_every: int = 50,
    verbose: bool = False,
) -> tuple[EmbeddingNetwork, TrainLog]:
    """Run ProtoCLR until max_iterations or the patience criterion.

    Stopping metric: window-smoothed training accuracy. If it fails to
    improve for ``patience`` iterations, training stops and the best
    checkpoint (if out_dir is set) is the returned network. max_iterations=0
    is a no-op returning the untouched network.
    """
    cfg = config
    log = TrainLog()
    adam = AdamState(lr=cfg.lr, decay_factor=cfg.lr_decay_factor, decay_period=cfg.lr_decay_period)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.max_iterations == 0:
        if out_dir is not None:
            network.save(out_dir / "best.ptt1", extra=adam_state_arrays(adam))
            network.save(out_dir / "last.ptt1", extra=adam_state_arrays(adam))
            log.write_csv(out_dir / "train_log.csv")
        return network, log
    if cfg.batch_size > len(dataset):
        raise ContractError(f"batch size {cfg.batch_size} exceeds dataset size {len(dataset)}")

    window: list[float] = []
    best_metric = -1.0
    best_iteration = 0
    best_state: dict[str, np.ndarray] | None = None
    epoch_perm: np.ndarray | None = None
    epoch = 0
    cursor = 0
    t0 = time.perf_counter()

    for it in range(cfg.max_iterations):
        indices = None
        if cfg.epoch_shuffle:
            if epoch_perm is None or cursor + cfg.batch_size > len(dataset):
                rng = streams.derive_rng(cfg.seed, streams.SHUFFLE, epoch)
                epoch_perm = rng.permutation(len(dataset))
                epoch += 1
                cursor = 0
            indices = epoch_perm[cursor : cursor + cfg.batch_size]
            cursor += cfg.batch_size
        batch = sample_pretrain_batch(
            dataset, cfg.batch_size, cfg.n_queries, pipeline, cfg.seed, it, indices=indices
        )
        lr_now = adam.effective_lr()
        loss, acc, adam = pretrain_step(network, batch, adam)
        log.append(it, loss, acc, lr_now)

        window.append(acc)
        if len(window) > cfg.accuracy_window:
            window.pop(0)
        smoothed = float(np.mean(window))
        if smoothed > best_metric:
            best_metric = smoothed
            best_iteration = it
            best_state = {k: v.data.copy() for k, v in network.parameters().items()}
            best_stats = [(b.stats.copy()) for b in network.blocks]
        if verbose and (it % log_every == 0 or it == cfg.max_iterations - 1):
            print(f"iter {it:6d}  loss {loss:.4f}  acc {acc:.4f}  lr {lr_now:.6f}")
        if out_dir is not None and cfg.checkpoint_interval > 0 and (it + 1) % cfg.checkpoint_interval == 0:
            network.save(out_dir / "last.ptt1", extra=adam_state_arrays(adam))
        if it - best_iteration >= cfg.patience:
            log.stopped_at = it
            break
    else:
        log.stopped_at = cfg.max_iterations - 1

    log.best_iteration = best_iteration
    log.best_accuracy = best_metric
    log.wall_seconds = time.perf_counter() - t0
    if out_dir is not None:
        network.save(out_dir / "last.ptt1", extra=adam_state_arrays(adam))
    if best_state is not None:
        params = network.parameters()
        network.set_parameters({k: T.Tensor(best_state[k], requires_grad=params[k].requires_grad) for k in best_state})
        for block, stats in zip(network.blocks, best_stats):
            block.stats = stats
    if out_dir is not None:
        network.save(out_dir / "best.ptt1", extra=adam_state_arrays(adam))
        log.write_csv(out_dir / "train_log.csv")
    return network, log
