"""Exception hierarchy shared across the pipeline.

The CLI maps these onto process exit codes, so new exception types should
subclass whichever branch carries the right code rather than Exception.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PipelineError):
    """Invalid configuration: bad field values, missing API key env, bad flags."""


class DataError(PipelineError):
    """Malformed or inconsistent input data (manifests, feature files, labels)."""


class ManifestError(DataError):
    """Manifest file could not be parsed or violates record invariants."""


class FeatureFormatError(DataError):
    """Feature file violates the binary layout or its sidecar contract."""


class FeatureValidationError(DataError):
    """Feature values fail validation (non-finite entries, id mismatches)."""


class GatewayError(PipelineError):
    """Failure while talking to an LLM backend."""


class TransportError(GatewayError):
    """HTTP transport gave up: retries exhausted or a non-retryable status."""


class MockContractError(GatewayError):
    """The mock backend received a request it has no deterministic handler for."""


class LLMOutputError(GatewayError):
    """LLM output stayed unparseable after the single reprompt. Carries raw text."""

    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class BootstrapError(DataError):
    """Taxonomy bootstrap could not complete."""


class MergeBudgetError(BootstrapError):
    """A single label set does not fit under the merge token budget."""


class MergeProgressError(BootstrapError):
    """A merge round failed to reduce the number of label sets."""


class EmptyTaxonomyError(BootstrapError):
    """Frequency filtering removed every label."""


class TrainingError(PipelineError):
    """Classifier training could not run or did not converge."""


class DivergenceError(TrainingError):
    """Loss became non-finite. Carries the epoch and batch where it happened."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class GenerationError(PipelineError):
    """A report generation backend failed."""


class ExportError(DataError):
    """Fine-tuning export hit a record that cannot be serialized."""


class PrerequisiteError(PipelineError):
    """A CLI stage was invoked before the stage that produces its inputs."""
