"""Conv-4 embedding network.

Four blocks of {3x3 conv -> 64 filters, batchnorm, relu, 2x2 maxpool},
then flatten. 1x28x28 inputs embed to 64 dimensions, 3x84x84 to 1600.
"""

from __future__ import annotations

import numpy as np

from . import streams
from .checkpoint import load_ptt1, save_ptt1
from .errors import GeometryError, ShapeError
from .tensor import RunningStats, Tensor, batchnorm2d, conv2d, flatten, maxpool2x2, relu

N_BLOCKS = 4
N_FILTERS = 64
MIN_INPUT_SIZE = 16


class ConvBlock:
    def __init__(self, weight, bias, gamma, beta, stats: RunningStats):
        self.weight = weight
        self.bias = bias
        self.gamma = gamma
        self.beta = beta
        self.stats = stats


class EmbeddingNetwork:
    """Parameter set realizing the embedding function."""

    def __init__(self, blocks: list[ConvBlock], input_channels: int, input_size: int):
        self.blocks = blocks
        self.input_channels = input_channels
        self.input_size = input_size

    @property
    def embedding_dim(self) -> int:
        side = self.input_size
        for _ in range(N_BLOCKS):
            side //= 2
        return N_FILTERS * side * side

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, blk in enumerate(self.blocks, start=1):
            out[f"block{i}.conv.weight"] = blk.weight
            out[f"block{i}.conv.bias"] = blk.bias
            out[f"block{i}.bn.gamma"] = blk.gamma
            out[f"block{i}.bn.beta"] = blk.beta
        return out

    def set_parameters(self, params: dict[str, Tensor]):
        for i, blk in enumerate(self.blocks, start=1):
            blk.weight = params[f"block{i}.conv.weight"]
            blk.bias = params[f"block{i}.conv.bias"]
            blk.gamma = params[f"block{i}.bn.gamma"]
            blk.beta = params[f"block{i}.bn.beta"]

    def embed(self, images, mode: str = "eval", tape=None) -> Tensor:
        """Forward a [B,C,H,W] batch to [B,D] embeddings.

        Train mode normalizes by batch statistics and updates the running
        stats. Gradients are collected by running inside an active
        ComputationTape context; the ``tape`` argument only documents that
        intent at call sites (recording always uses the active tape).
        """
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images))
        if images.ndim != 4:
            raise ShapeError(f"embed: images must be [B,C,H,W], got rank {images.ndim}")
        b, c, h, w = images.shape
        if c != self.input_channels or h != self.input_size or w != self.input_size:
            raise ShapeError(
                f"embed: expected [{self.input_channels},{self.input_size},{self.input_size}] "
                f"images, got [{c},{h},{w}]"
            )
        x = images
        for blk in self.blocks:
            x = conv2d(x, blk.weight, blk.bias)
            x = batchnorm2d(x, blk.gamma, blk.beta, blk.stats, mode)
            x = relu(x)
            x = maxpool2x2(x)
        return flatten(x)

    def copy(self) -> "EmbeddingNetwork":
        blocks = []
        for blk in self.blocks:
            blocks.append(
                ConvBlock(
                    Tensor(blk.weight.data.copy(), requires_grad=True, dtype=blk.weight.dtype),
                    Tensor(blk.bias.data.copy(), requires_grad=True, dtype=blk.bias.dtype),
                    Tensor(blk.gamma.data.copy(), requires_grad=True, dtype=blk.gamma.dtype),
                    Tensor(blk.beta.data.copy(), requires_grad=True, dtype=blk.beta.dtype),
                    blk.stats.copy(),
                )
            )
        return EmbeddingNetwork(blocks, self.input_channels, self.input_size)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.parameters().items()}
        for i, blk in enumerate(self.blocks, start=1):
            out[f"block{i}.bn.running_mean"] = blk.stats.mean
            out[f"block{i}.bn.running_var"] = blk.stats.var
        out["meta.input_channels"] = np.array([self.input_channels], dtype=np.float32)
        out["meta.input_size"] = np.array([self.input_size], dtype=np.float32)
        return out

    def save(self, path, extra: dict[str, np.ndarray] | None = None):
        state = self.state_dict()
        if extra:
            state.update(extra)
        save_ptt1(path, state)


def init_conv4(input_channels: int, input_size: int, seed: int, dtype=np.float32) -> EmbeddingNetwork:
    """Kaiming-uniform conv weights, gamma=1 beta=0; deterministic in seed."""
    if input_channels not in (1, 3):
        raise GeometryError(f"init_conv4: input_channels must be 1 or 3, got {input_channels}")
    if input_size < MIN_INPUT_SIZE:
        raise GeometryError(f"init_conv4: input_size must be >= {MIN_INPUT_SIZE}, got {input_size}")
    blocks = []
    in_ch = input_channels
    for i in range(N_BLOCKS):
        rng = streams.derive_rng(seed, streams.INIT, i)
        fan_in = in_ch * 9
        wbound = np.sqrt(6.0 / fan_in)
        weight = rng.uniform(-wbound, wbound, size=(N_FILTERS, in_ch, 3, 3)).astype(dtype)
        bbound = 1.0 / np.sqrt(fan_in)
        bias = rng.uniform(-bbound, bbound, size=N_FILTERS).astype(dtype)
        blocks.append(
            ConvBlock(
                Tensor(weight, requires_grad=True, dtype=dtype),
                Tensor(bias, requires_grad=True, dtype=dtype),
                Tensor(np.ones(N_FILTERS, dtype=dtype), requires_grad=True, dtype=dtype),
                Tensor(np.zeros(N_FILTERS, dtype=dtype), requires_grad=True, dtype=dtype),
                RunningStats(N_FILTERS, dtype=dtype),
            )
        )
        in_ch = N_FILTERS
    return EmbeddingNetwork(blocks, input_channels, input_size)


def network_from_state(state: dict[str, np.ndarray]) -> EmbeddingNetwork:
    try:
        in_ch = int(state["meta.input_channels"][0])
        in_size = int(state["meta.input_size"][0])
        blocks = []
        for i in range(1, N_BLOCKS + 1):
            stats = RunningStats(N_FILTERS)
            stats.mean = state[f"block{i}.bn.running_mean"].copy()
            stats.var = state[f"block{i}.bn.running_var"].copy()
            blocks.append(
                ConvBlock(
                    Tensor(state[f"block{i}.conv.weight"].copy(), requires_grad=True),
                    Tensor(state[f"block{i}.conv.bias"].copy(), requires_grad=True),
                    Tensor(state[f"block{i}.bn.gamma"].copy(), requires_grad=True),
                    Tensor(state[f"block{i}.bn.beta"].copy(), requires_grad=True),
                    stats,
                )
            )
    except KeyError as e:
        raise ShapeError(f"checkpoint is missing tensor {e}") from e
    return EmbeddingNetwork(blocks, in_ch, in_size)


def load_network(path) -> EmbeddingNetwork:
    return network_from_state(load_ptt1(path))
