"""Finite-difference verification of the full ProtoCLR gradient.

Backpropagated gradients for every parameter tensor of a Conv-4 network
are compared against central finite differences of the end-to-end loss.
Large tensors are checked on a seeded random coordinate subset (dense
checks on 100k+ parameters would take hours); small tensors are checked
densely. Everything runs in float64 so finite-difference round-off
stays far below the tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import streams, tensor as T
from .errors import NumericsError
from .network import EmbeddingNetwork, init_conv4
from .protoclr import protoclr_loss

REL_TOL = 1e-3
ABS_FLOOR = 1e-6
# denominator floor chosen so err <= ABS_FLOOR passes exactly when both
# gradients are tiny: err / max(|g|, FLOOR) <= REL_TOL  <=>  err <= 1e-6
_DENOM_FLOOR = ABS_FLOOR / REL_TOL


@dataclass
class TensorCheck:
    name: str
    n_checked: int
    n_total: int
    max_rel: float
    worst_index: int
    analytic: float
    numeric: float


@dataclass
class GradCheckResult:
    max_rel: float
    passed: bool
    per_tensor: list[TensorCheck] = field(default_factory=list)

    def format(self) -> str:
        lines = []
        for c in self.per_tensor:
            lines.append(
                f"{c.name:24s} checked {c.n_checked:5d}/{c.n_total:<6d} "
                f"max_rel {c.max_rel:.3e} (an {c.analytic:+.6e} fd {c.numeric:+.6e})"
            )
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"max relative error {self.max_rel:.6e} tolerance {REL_TOL:.0e} -> {verdict}")
        return "\n".join(lines)


def _loss_value(network: EmbeddingNetwork, protos: np.ndarray, queries: np.ndarray) -> float:
    n, q = queries.shape[:2]
    c, h, w = protos.shape[1:]
    images = np.concatenate([protos, queries.reshape(n * q, c, h, w)], axis=0)
    emb = network.embed(images, mode="train")
    p = T.rows(emb, 0, n)
    qq = T.reshape(T.rows(emb, n, n + n * q), (n, q, emb.shape[1]))
    loss, _ = protoclr_loss(p, qq)
    return float(loss.data)


def _suffix_loss(network: EmbeddingNetwork, x: np.ndarray, start: int, n: int, q: int) -> float:
    """Loss from a cached block input, forwarding blocks[start:] only.

    Bumping a block-k parameter leaves blocks before k untouched, so the
    finite-difference loop can reuse the unperturbed prefix activations.
    """
    t = T.Tensor(x)
    for blk in network.blocks[start:]:
        t = T.conv2d(t, blk.weight, blk.bias)
        t = T.batchnorm2d(t, blk.gamma, blk.beta, blk.stats, "train")
        t = T.relu(t)
        t = T.maxpool2x2(t)
    emb = T.flatten(t)
    p = T.rows(emb, 0, n)
    qq = T.reshape(T.rows(emb, n, n + n * q), (n, q, emb.shape[1]))
    loss, _ = protoclr_loss(p, qq)
    return float(loss.data)


def check_network_gradients(
    seed: int = 0,
    image_size: int = 16,
    n: int = 4,
    q: int = 2,
    samples_per_tensor: int = 40,
    dense_limit: int = 80,
    h: float = 1e-5,
    inject_fault: str = "",
) -> GradCheckResult:
    """Compare backprop to central differences on a ProtoCLR batch.

    The loss is piecewise smooth: a coordinate whose +-h interval
    straddles a relu or max-pool boundary makes central differences
    invalid there. Disagreeing coordinates are therefore retried at
    h/10 and h/100 and the best agreement kept -- a kink artifact
    vanishes as h shrinks, a wrong analytic gradient does not.

    ``inject_fault`` names a parameter tensor whose analytic gradient is
    deliberately corrupted before comparison (test hook; the check must
    then fail).
    """
    net = init_conv4(1, image_size, seed=seed, dtype=np.float64)
    rng = streams.derive_rng(seed, streams.BATCH, 0)
    protos = rng.uniform(0.0, 1.0, size=(n, 1, image_size, image_size))
    queries = rng.uniform(0.0, 1.0, size=(n, q, 1, image_size, image_size))

    tape = T.ComputationTape()
    with tape:
        images = np.concatenate([protos, queries.reshape(n * q, 1, image_size, image_size)], axis=0)
        emb = net.embed(images, mode="train", tape=tape)
        p = T.rows(emb, 0, n)
        qq = T.reshape(T.rows(emb, n, n + n * q), (n, q, emb.shape[1]))
        loss, _ = protoclr_loss(p, qq)
    T.backward(loss, tape)
    params = net.parameters()
    analytic = {k: v.grad.copy() for k, v in params.items()}
    if inject_fault:
        if inject_fault not in analytic:
            raise NumericsError(f"inject_fault names unknown tensor {inject_fault!r}")
        analytic[inject_fault] = analytic[inject_fault] + 1e-2 * (1.0 + np.abs(analytic[inject_fault]))

    # unperturbed inputs to each block, shared by every bump in that block
    block_inputs = []
    x = images
    for blk in net.blocks:
        block_inputs.append(x)
        t = T.maxpool2x2(
            T.relu(T.batchnorm2d(T.conv2d(T.Tensor(x), blk.weight, blk.bias), blk.gamma, blk.beta, blk.stats, "train"))
        )
        x = t.data

    checks = []
    max_rel = 0.0
    coord_rng = streams.derive_rng(seed, streams.BATCH, 1)
    for name, param in params.items():
        flat = param.data.reshape(-1)
        size = flat.size
        if size <= dense_limit:
            indices = np.arange(size)
        else:
            indices = np.sort(coord_rng.choice(size, size=samples_per_tensor, replace=False))
        an_flat = analytic[name].reshape(-1)
        worst = (0.0, 0, 0.0, 0.0)
        start = int(name.split(".", 1)[0].removeprefix("block")) - 1

        def fd_at(idx: int, step: float) -> float:
            orig = flat[idx]
            flat[idx] = orig + step
            up = _suffix_loss(net, block_inputs[start], start, n, q)
            flat[idx] = orig - step
            down = _suffix_loss(net, block_inputs[start], start, n, q)
            flat[idx] = orig
            return (up - down) / (2.0 * step)

        for idx in indices:
            an = float(an_flat[idx])
            fd = fd_at(idx, h)
            rel = abs(fd - an) / max(abs(fd), abs(an), _DENOM_FLOOR)
            for shrink in (10.0, 100.0):
                if rel <= REL_TOL:
                    break
                fd2 = fd_at(idx, h / shrink)
                rel2 = abs(fd2 - an) / max(abs(fd2), abs(an), _DENOM_FLOOR)
                if rel2 < rel:
                    rel, fd = rel2, fd2
            if rel > worst[0]:
                worst = (rel, int(idx), an, fd)
        checks.append(
            TensorCheck(
                name=name,
                n_checked=len(indices),
                n_total=size,
                max_rel=worst[0],
                worst_index=worst[1],
                analytic=worst[2],
                numeric=worst[3],
            )
        )
        max_rel = max(max_rel, worst[0])
    return GradCheckResult(max_rel=max_rel, passed=max_rel <= REL_TOL, per_tensor=checks)
