"""Mixture of meta-learners for few-shot classification."""

from .episodes import (
    Domain,
    DomainSpec,
    Episode,
    SplitConfig,
    load_feature_dataset,
    make_synthetic_domain,
    sample_episode,
    split_classes,
)
from .learners import (
    Encoder,
    Fomaml,
    ProtoNet,
    TrainConfig,
    fomaml_adapt,
    fomaml_predict,
    fomaml_train,
    proto_predict,
    proto_train,
)
from .mixture import (
    EnsembleModel,
    MixtureCoefficients,
    WpnTrainConfig,
    mxml_predict,
    single_pooled_train,
    train_wpn,
    uniform_average_predict,
)
from .tensor import Tensor, backward, no_grad
from .wpn import WpnParams, wpn_score

__version__ = "0.1.0"

__all__ = [
    "Domain", "DomainSpec", "Episode", "SplitConfig", "load_feature_dataset", "make_synthetic_domain",
    "sample_episode", "split_classes", "Encoder", "Fomaml", "ProtoNet", "TrainConfig", "fomaml_adapt",
    "fomaml_predict", "fomaml_train", "proto_predict", "proto_train", "EnsembleModel", "MixtureCoefficients",
    "WpnTrainConfig", "mxml_predict", "single_pooled_train", "train_wpn", "uniform_average_predict",
    "Tensor", "backward", "no_grad", "WpnParams", "wpn_score",
]
