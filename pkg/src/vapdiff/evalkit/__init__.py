from .downstream import ClassifierConfig, DownstreamReport, downstream_eval, mean_auc
from .features import (
    PixelExtractor,
    ToyCNNExtractor,
    extract_features,
    fit_toy_extractor,
    get_extractor,
    register_extractor,
)
from .metrics import FeatureSet, MetricReport, fid, inception_score, precision_recall
from .reports import write_csv, plot_bars

__all__ = [
    "ClassifierConfig",
    "DownstreamReport",
    "downstream_eval",
    "mean_auc",
    "PixelExtractor",
    "ToyCNNExtractor",
    "extract_features",
    "fit_toy_extractor",
    "get_extractor",
    "register_extractor",
    "FeatureSet",
    "MetricReport",
    "fid",
    "inception_score",
    "precision_recall",
    "write_csv",
    "plot_bars",
]
