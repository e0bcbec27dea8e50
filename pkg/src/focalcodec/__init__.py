"""Low-bitrate speech codec built on focal modulation and binary spherical quantisation."""

from .bsq import BsqConfig, binary_quantize, code_index, entropy_loss, index_to_code, project_to_sphere, quantize_ste
from .codec import CodecConfig, CodecModel, bitrate, decode_features, encode, knn_convert
from .errors import ConfigError, FocalCodecError, FormatError, ShapeError, TrainingDivergedError
from .estimators import FeatureVocoder, FocalCodec, KNNVoiceConverter
from .metrics import codebook_stats, measure_rtf
from .trainer import TrainConfig, train_stage1
from .vocoder import StreamConfig, VocoderConfig, VocoderParams, stream_decode, synthesize

__version__ = "0.1.0"

__all__ = [
    "BsqConfig", "CodecConfig", "CodecModel", "ConfigError", "FeatureVocoder", "FocalCodec",
    "FocalCodecError", "FormatError", "KNNVoiceConverter", "ShapeError", "StreamConfig",
    "TrainConfig", "TrainingDivergedError", "VocoderConfig", "VocoderParams", "binary_quantize",
    "bitrate", "code_index", "codebook_stats", "decode_features", "encode", "entropy_loss",
    "index_to_code", "knn_convert", "measure_rtf", "project_to_sphere", "quantize_ste",
    "stream_decode", "synthesize", "train_stage1",
]
