"""Exception hierarchy shared by every harness module."""


class HarnessError(Exception):
    """Root of all harness errors."""


class ConfigError(HarnessError):
    pass


# dataset
class IngestShapeError(HarnessError):
    pass


class IngestLabelError(HarnessError):
    pass


class IngestValueError(HarnessError):
    pass


class IngestSplitError(HarnessError):
    pass


class CorruptStoreError(HarnessError):
    pass


class NotFoundError(HarnessError):
    pass


# represent
class SerializeValueError(HarnessError):
    pass


class RenderError(HarnessError):
    pass


# prompting
class LeakageError(HarnessError):
    pass


class AssemblyError(HarnessError):
    pass


class RewriterFormatError(HarnessError):
    pass


class VariantRejectedError(HarnessError):
    def __init__(self, variant_id, violations):
        self.variant_id = variant_id
        self.violations = list(violations)
        details = "; ".join(f"({v.rule}) {v.message}" for v in self.violations)
        super().__init__(f"Variant {variant_id} rejected: {details}")


# model_bridge
class ContextLengthError(HarnessError):
    pass


class BackendError(HarnessError):
    pass


class AdapterPreconditionError(HarnessError):
    pass


class ExtractionAbortedError(HarnessError):
    pass


class StoreMismatchError(HarnessError):
    pass


# probes / metrics
class DegenerateLabelsError(HarnessError):
    pass


class InsufficientSamplesError(HarnessError):
    pass


class ShapeError(HarnessError):
    pass


class DomainError(HarnessError):
    pass
