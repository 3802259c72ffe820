"""Exception hierarchy shared by the pipeline stages.

Per-item errors (a corrupt archive, an undecodable image) are caught by the
batch drivers and written to the skip/rejection logs; only configuration and
setup errors reach the command line as nonzero exit codes.
"""


class ScifigError(Exception):
    """Base class for all pipeline errors."""

    #: short machine-readable reason used in JSONL logs
    reason = "Error"


class ConfigError(ScifigError):
    reason = "ConfigError"


class DataFormatError(ScifigError):
    """Input data does not match an expected on-disk format."""

    reason = "FormatError"


# -- archives ---------------------------------------------------------------

class ArchiveError(ScifigError):
    reason = "ArchiveError"


class DecompressError(ArchiveError):
    reason = "DecompressError"


class TarError(ArchiveError):
    reason = "TarError"


class PathTraversal(ArchiveError):
    reason = "PathTraversal"


class MissingNxml(ArchiveError):
    reason = "MissingNxml"


class MultipleNxml(ArchiveError):
    reason = "MultipleNxml"


class XmlError(ArchiveError):
    reason = "XmlError"


# -- images -----------------------------------------------------------------

class ImageError(ScifigError):
    reason = "ImageError"


class DecodeError(ImageError):
    reason = "DecodeError"


class HookError(ImageError):
    reason = "HookError"


class VectorNoHook(ImageError):
    reason = "VectorNoHook"


# -- decontamination / dataset ------------------------------------------------

class FormatError(DataFormatError):
    reason = "FormatError"


class DimMismatch(DataFormatError):
    reason = "DimMismatch"


class ProviderError(ScifigError):
    reason = "ProviderError"


class DuplicateKey(DataFormatError):
    reason = "DuplicateKey"
