from .gf import REDUCTION_POLY, SUPPORTED_BITS, BinaryField, field
from .wc import (
    AuthTag,
    AuthVector,
    HashKey,
    OtpKey,
    axu_hash,
    build_vector,
    forgery_bound,
    make_tag,
    message_blocks,
    tag_from_values,
    verify_slot,
    verify_tag,
)

__all__ = [
    "REDUCTION_POLY", "SUPPORTED_BITS", "BinaryField", "field",
    "AuthTag", "AuthVector", "HashKey", "OtpKey", "axu_hash", "build_vector",
    "forgery_bound", "make_tag", "message_blocks", "tag_from_values",
    "verify_slot", "verify_tag",
]
