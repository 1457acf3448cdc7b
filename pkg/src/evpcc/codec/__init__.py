from .external import ExternalCodec, ExternalCodecError, run_external_codec
from .octree import (
    CoordinateOverflowError,
    EmptyCloudError,
    OctreeBitstream,
    OctreeConfig,
    decode,
    decode_bytes,
    encode,
    encode_bytes,
    occupancy_scores,
    rate_bpe,
)
from .rangecoder import AdaptiveModel, CorruptPayloadError, RangeDecoder, RangeEncoder

__all__ = [
    "AdaptiveModel", "CoordinateOverflowError", "CorruptPayloadError", "EmptyCloudError",
    "ExternalCodec", "ExternalCodecError", "OctreeBitstream", "OctreeConfig", "RangeDecoder",
    "RangeEncoder", "decode", "decode_bytes", "encode", "encode_bytes", "occupancy_scores",
    "rate_bpe", "run_external_codec",
]
