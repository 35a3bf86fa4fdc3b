"""Exception hierarchy. Everything expected (bad files, bad configs, degenerate
batches) derives from SemiStereoError so the CLI can map it to exit code 1."""


class SemiStereoError(Exception):
    pass


class FormatError(SemiStereoError):
    """Malformed or unsupported file content (PFM headers, PNG bit depth...)."""


class ConfigError(SemiStereoError):
    """Invalid configuration: bad field values, unknown keys, unequal pools."""


class ShapeError(SemiStereoError):
    """Array shape/stride contract violated."""


class ContractError(SemiStereoError):
    """An operation precondition violated (negative disparity, upsampling via
    the downsampling-only resampler, ...)."""


class DegenerateBatchError(SemiStereoError):
    """No valid pixels left to average a loss over; the trainer skips and logs."""


class DataError(SemiStereoError):
    """Dataset-level problem: missing ground truth, empty pool, too few pixels."""


class CheckpointError(SemiStereoError):
    """Checkpoint file unreadable, truncated or written by another version."""
