"""Desk-scale laboratory: does multi-task finetuning the teacher help distillation?

A small transformer teacher is pretrained on a synthetic corpus, prepared in
one of three ways (vanilla, single-task finetuned, multi-task finetuned), and
distilled into a smaller student by matching self-attention relations. The
students are then finetuned and compared on in-domain, out-domain and
low-resource tasks.
"""

__version__ = "0.1.0"


class MitkdError(RuntimeError):
    """Generic error of the laboratory."""


class ConfigError(MitkdError):
    """A configuration violates one of its constraints."""


class DimensionError(MitkdError):
    """Tensor shapes do not fit together."""


class ContractError(MitkdError):
    """An operation was called outside of its pre-conditions."""


class DegenerateRowError(MitkdError):
    """A softmax row has no unmasked entry."""


class GenerationError(MitkdError):
    """A synthetic task could not be generated with balanced labels."""


class CheckpointFormatError(MitkdError):
    """A checkpoint file has a bad magic, version or header."""


class CheckpointIntegrityError(MitkdError):
    """A checkpoint payload is truncated or has trailing bytes."""


class MissingPrerequisiteError(MitkdError):
    """A pipeline stage input does not exist yet."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


# pylint: disable=wrong-import-position
from mitkd.numerics import Tape, Tensor, adam_step, backward, lr_schedule  # noqa: E402
from mitkd.model import ModelConfig, EncoderModel, init_model  # noqa: E402

__all__ = [
    "CheckpointFormatError",
    "CheckpointIntegrityError",
    "ConfigError",
    "ContractError",
    "DegenerateRowError",
    "DimensionError",
    "EncoderModel",
    "GenerationError",
    "MissingPrerequisiteError",
    "MitkdError",
    "ModelConfig",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "init_model",
    "lr_schedule",
]
