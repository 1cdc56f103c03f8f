"""ProtoTransfer: self-supervised prototypical pre-training (ProtoCLR)
with prototype-initialized fine-tuning (ProtoTune) for few-shot
classification, on a minimal numpy reverse-mode autodiff core.
"""

__version__ = "0.1.0"

from .augment import AugmentationPipeline, pipeline_from_preset, pipeline_from_spec
from .checkpoint import load_ptt1, save_ptt1
from .config import RunConfig, default_config, defaults_json, load_config
from .data import (
    Dataset,
    Episode,
    PretrainBatch,
    load_directory_dataset,
    make_synthetic_dataset,
    restrict,
    sample_episode,
    sample_pretrain_batch,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    GeometryError,
    NumericsError,
    ShapeError,
)
from .evaluation import (
    EvalReport,
    ablation_sweep,
    confidence_interval,
    evaluate,
    generalization_gap,
)
from .fewshot import (
    FineTuneConfig,
    classify_prototypes,
    compute_prototypes,
    init_head,
    proto_classify,
    proto_tune,
    train_protonet_supervised,
)
from .gradcheck import check_network_gradients
from .network import EmbeddingNetwork, init_conv4, load_network
from .optim import AdamState, adam_step
from .protoclr import ProtoCLRConfig, protoclr_loss, train_protoclr
from .tensor import ComputationTape, Tensor, backward

__all__ = [
    "AugmentationPipeline",
    "AdamState",
    "ComputationTape",
    "ConfigError",
    "ContractError",
    "DataError",
    "Dataset",
    "EmbeddingNetwork",
    "Episode",
    "EvalReport",
    "FineTuneConfig",
    "GeometryError",
    "NumericsError",
    "PretrainBatch",
    "ProtoCLRConfig",
    "RunConfig",
    "ShapeError",
    "Tensor",
    "ablation_sweep",
    "adam_step",
    "backward",
    "check_network_gradients",
    "classify_prototypes",
    "compute_prototypes",
    "confidence_interval",
    "default_config",
    "defaults_json",
    "evaluate",
    "generalization_gap",
    "init_conv4",
    "init_head",
    "load_config",
    "load_directory_dataset",
    "load_network",
    "load_ptt1",
    "make_synthetic_dataset",
    "pipeline_from_preset",
    "pipeline_from_spec",
    "proto_classify",
    "proto_tune",
    "protoclr_loss",
    "restrict",
    "sample_episode",
    "sample_pretrain_batch",
    "save_ptt1",
    "train_protoclr",
    "train_protonet_supervised",
    "__version__",
]
