"""Episodic evaluation harness: confidence intervals, generalization-gap
measurement, ablation sweeps, and CSV / aligned-markdown report emission.

Episodes evaluate in parallel with per-episode derived seeds and
order-independent aggregation, so results are bitwise identical at any
thread count. Wall-clock and other timestamps appear only in report
headers, never in data rows.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import streams
from .data import Dataset, Episode, sample_episode
from .errors import ContractError
from .fewshot import FineTuneConfig, PreLinearConfig, linear_probe, proto_classify, proto_tune
from .network import EmbeddingNetwork

CI_MULTIPLIER = 1.96  # normal-approximation 95% interval


def confidence_interval(accs) -> tuple[float, float]:
    """(mean, 1.96 * sample std / sqrt(n)); n=1 gives half-width 0."""
    arr = np.asarray(accs, dtype=np.float64)
    if arr.size == 0:
        raise ContractError("confidence_interval needs at least one accuracy")
    mean = float(arr.mean())
    if arr.size == 1:
        return mean, 0.0
    half = CI_MULTIPLIER * float(arr.std(ddof=1)) / float(np.sqrt(arr.size))
    return mean, half


@dataclass
class EvalReport:
    method: str
    dataset: str
    split: str
    n_ways: int
    k_shots: int
    q_queries: int
    n_episodes: int
    accuracies: np.ndarray  # [n_episodes], episode-index order
    episode_seeds: list[list[int]]  # [base_seed, index] per episode, for replay
    mean: float
    ci_halfwidth: float
    wall_seconds: float
    config: dict = field(default_factory=dict)

    def recompute(self) -> tuple[float, float]:
        return confidence_interval(self.accuracies)

    def summary(self) -> str:
        return (
            f"{self.method}: {self.n_ways}-way {self.k_shots}-shot "
            f"{self.mean * 100:.2f}% +/- {self.ci_halfwidth * 100:.2f}% "
            f"({self.n_episodes} episodes)"
        )


# ---------------------------------------------------------------------------
# adaptor strategies
# ---------------------------------------------------------------------------


def make_adaptor(
    name: str,
    finetune: FineTuneConfig | None = None,
    prelinear: PreLinearConfig | None = None,
):
    """Build an adaptor strategy ``(network, episode, seed) -> predictions``.

    - proto: nearest-prototype inference, no adaptation.
    - prototune: prototype-initialized head fine-tuned on support (scope
      from ``finetune``, default head-only).
    - linear: randomly initialized probe on frozen features.
    - oracle / random: testing strategies (perfect / uniform guesses).
    """
    if name == "proto":
        return lambda net, ep, seed: proto_classify(net, ep)
    if name == "prototune":
        base = finetune or FineTuneConfig()

        def _prototune(net, ep, seed):
            cfg = FineTuneConfig(
                epochs=base.epochs, batch_size=base.batch_size, lr=base.lr, scope=base.scope, seed=seed
            )
            pred, _, _ = proto_tune(net, ep, cfg)
            return pred

        return _prototune
    if name == "linear":
        cfg = prelinear or PreLinearConfig()
        return lambda net, ep, seed: linear_probe(net, ep, cfg, probe_seed=seed)
    if name == "oracle":
        return lambda net, ep, seed: ep.query_labels.copy()
    if name == "random":
        return lambda net, ep, seed: streams.derive_rng(seed, streams.EVAL, 0).integers(
            0, ep.n_ways, size=len(ep.query_labels)
        )
    raise ContractError(f"unknown adaptor {name!r}; valid adaptors: {', '.join(ADAPTOR_NAMES)}")


ADAPTOR_NAMES = ("proto", "prototune", "linear", "oracle", "random")


def replay_episode(
    dataset: Dataset, n_ways: int, k_shots: int, q_queries: int, seed: int, index: int
) -> Episode:
    """Re-materialize the episode evaluate() ran at ``index`` under ``seed``."""
    rng = streams.derive_rng(seed, streams.EVAL, index)
    return sample_episode(dataset, n_ways, k_shots, q_queries, rng)


def _adaptor_seed(seed: int, index: int) -> int:
    # Distinct entropy per episode so adaptor-internal randomness
    # (fine-tuning shuffles, probe init) is independent across episodes.
    return (int(seed) << 32) + index


def evaluate(
    adaptor,
    dataset: Dataset,
    n_ways: int,
    k_shots: int,
    n_episodes: int = 600,
    q_queries: int = 15,
    seed: int = 0,
    network: EmbeddingNetwork | None = None,
    threads: int = 1,
    method: str | None = None,
    finetune: FineTuneConfig | None = None,
) -> EvalReport:
    """Episodic few-shot evaluation.

    ``adaptor`` is a strategy name (see make_adaptor) or a callable
    ``(network, episode, seed) -> predicted labels``. Any episode
    failure aborts with the episode seed for replay.
    """
    if isinstance(adaptor, str):
        method = method or adaptor
        adaptor = make_adaptor(adaptor, finetune=finetune)
    method = method or getattr(adaptor, "__name__", "custom")
    if n_episodes < 1:
        raise ContractError(f"need at least one episode, got {n_episodes}")

    def run_one(i: int) -> float:
        try:
            episode = replay_episode(dataset, n_ways, k_shots, q_queries, seed, i)
            pred = adaptor(network, episode, _adaptor_seed(seed, i))
            return float(np.mean(np.asarray(pred) == episode.query_labels))
        except Exception as e:
            raise ContractError(
                f"episode {i} failed (replay with seed={seed}, index={i}): {e}"
            ) from e

    t0 = time.perf_counter()
    accs = np.empty(n_episodes, dtype=np.float64)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for i, acc in enumerate(pool.map(run_one, range(n_episodes))):
                accs[i] = acc
    else:
        for i in range(n_episodes):
            accs[i] = run_one(i)
    wall = time.perf_counter() - t0
    mean, half = confidence_interval(accs)
    return EvalReport(
        method=method,
        dataset=dataset.source,
        split=dataset.split,
        n_ways=n_ways,
        k_shots=k_shots,
        q_queries=q_queries,
        n_episodes=n_episodes,
        accuracies=accs,
        episode_seeds=[[seed, i] for i in range(n_episodes)],
        mean=mean,
        ci_halfwidth=half,
        wall_seconds=wall,
    )


# ---------------------------------------------------------------------------
# generalization gap
# ---------------------------------------------------------------------------


def generalization_gap(
    network: EmbeddingNetwork,
    train_split: Dataset,
    test_split: Dataset,
    n_ways: int,
    k_shots: int,
    n_episodes: int,
    q_queries: int = 15,
    seed: int = 0,
    threads: int = 1,
) -> tuple[EvalReport, EvalReport, float]:
    """Prototypes-only episode accuracy on each split; gap = train - test.

    The same evaluation seed is used for both splits, pairing episode
    draws as far as the splits allow.
    """
    kw = dict(
        n_ways=n_ways, k_shots=k_shots, n_episodes=n_episodes, q_queries=q_queries,
        seed=seed, network=network, threads=threads,
    )
    train_report = evaluate("proto", train_split, **kw)
    test_report = evaluate("proto", test_split, **kw)
    return train_report, test_report, train_report.mean - test_report.mean


# ---------------------------------------------------------------------------
# ablation sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationPoint:
    batch_size: int
    n_queries: int
    finetune: bool

    def label(self) -> str:
        return f"N={self.batch_size},Q={self.n_queries}" + (",ft" if self.finetune else "")


def umtra_point(n_ways: int) -> AblationPoint:
    """The UMTRA-equivalent configuration: batch = ways, Q = 1, no fine-tune."""
    return AblationPoint(batch_size=n_ways, n_queries=1, finetune=False)


def ablation_sweep(
    points,
    train_dataset: Dataset,
    eval_dataset: Dataset,
    pipeline,
    seed: int = 0,
    iterations: int = 500,
    n_ways: int = 5,
    k_shots: int = 5,
    n_episodes: int = 200,
    q_queries: int = 15,
    threads: int = 1,
    finetune: FineTuneConfig | None = None,
    verbose: bool = False,
) -> list[EvalReport]:
    """Train and evaluate one ProtoCLR configuration per grid point.

    All rows share the backbone-init seed, the pre-training data seed,
    and the evaluation episode seeds (paired comparison). Each report's
    ``config`` records the exact grid point for round-tripping.
    """
    from .network import init_conv4
    from .protoclr import ProtoCLRConfig, train_protoclr

    points = list(points)
    if not points:
        raise ContractError("ablation grid is empty")
    reports = []
    for point in points:
        net = init_conv4(train_dataset.channels, train_dataset.image_size, seed=seed)
        cfg = ProtoCLRConfig(
            batch_size=point.batch_size,
            n_queries=point.n_queries,
            max_iterations=iterations,
            patience=iterations + 1,
            checkpoint_interval=0,
            seed=seed,
        )
        net, _ = train_protoclr(net, train_dataset, pipeline, cfg)
        adaptor = "prototune" if point.finetune else "proto"
        report = evaluate(
            adaptor,
            eval_dataset,
            n_ways=n_ways,
            k_shots=k_shots,
            n_episodes=n_episodes,
            q_queries=q_queries,
            seed=seed,
            network=net,
            threads=threads,
            method=point.label(),
            finetune=finetune,
        )
        report.config = {
            "batch_size": point.batch_size,
            "n_queries": point.n_queries,
            "finetune": point.finetune,
            "iterations": iterations,
            "seed": seed,
        }
        reports.append(report)
        if verbose:
            print(report.summary())
    return reports


def point_from_config(config: dict) -> AblationPoint:
    """Inverse of the config dict stored on ablation rows."""
    return AblationPoint(
        batch_size=int(config["batch_size"]),
        n_queries=int(config["n_queries"]),
        finetune=bool(config["finetune"]),
    )


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def build_id(config: dict | None = None) -> str:
    """Short content hash of package version plus run config."""
    from . import __version__

    payload = json.dumps({"version": __version__, "config": config or {}}, sort_keys=True)
    return hashlib.sha1(payload.encode()).hexdigest()[:12]


_COLUMNS = ["method", "dataset", "split", "ways", "shots", "queries", "episodes", "mean", "ci95", "config"]


def _row(report: EvalReport) -> list[str]:
    return [
        report.method,
        report.dataset,
        report.split,
        str(report.n_ways),
        str(report.k_shots),
        str(report.q_queries),
        str(report.n_episodes),
        f"{report.mean:.6f}",
        f"{report.ci_halfwidth:.6f}",
        json.dumps(report.config, sort_keys=True) if report.config else "",
    ]


def _csv_cell(value: str) -> str:
    if any(c in value for c in ',"\n'):
        return '"' + value.replace('"', '""') + '"'
    return value


def write_reports_csv(path, reports: list[EvalReport], header: dict | None = None):
    """CSV with a '#'-prefixed header block (config, build id, wall-clock)."""
    lines = [f"# build_id: {build_id(header)}"]
    for k, v in (header or {}).items():
        lines.append(f"# {k}: {json.dumps(v) if not isinstance(v, str) else v}")
    lines.append(f"# wall_seconds: {sum(r.wall_seconds for r in reports):.3f}")
    lines.append(",".join(_COLUMNS))
    for r in reports:
        lines.append(",".join(_csv_cell(c) for c in _row(r)))
    Path(path).write_text("\n".join(lines) + "\n")


def write_episode_csv(path, report: EvalReport):
    """Per-episode accuracies with replay seeds."""
    lines = [f"# {report.summary()}", "episode,base_seed,accuracy"]
    for (base, idx), acc in zip(report.episode_seeds, report.accuracies):
        lines.append(f"{idx},{base},{acc:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def format_markdown(reports: list[EvalReport]) -> str:
    """Aligned markdown table over the shared report columns."""
    cols = _COLUMNS[:-1]
    rows = [[c for c in _row(r)[:-1]] for r in reports]
    widths = [max(len(cols[j]), *(len(row[j]) for row in rows)) for j in range(len(cols))]
    fmt = "| " + " | ".join(f"{{:<{w}}}" for w in widths) + " |"
    out = [fmt.format(*cols), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    out.extend(fmt.format(*row) for row in rows)
    return "\n".join(out)
