"""Reversible mask-template image cloaking."""

from ._maskveil import (
    ChecksumError,
    CloakKey,
    DomainError,
    FormatError,
    IoError,
    MaskTemplate,
    MaskveilError,
    RecognizerModel,
    Region,
    UnreachableTargetError,
    derive_seed,
    dssim,
    embed,
    image_digest,
    load_image,
    load_key,
    load_model,
    load_template,
    normalize_canvas,
    protect,
    protection_rate,
    recognize,
    restore,
    run_cli,
    save_key,
    save_png,
    superpose,
    synthesize_corpus,
)

__all__ = [name for name in dir() if not name.startswith("_")]
