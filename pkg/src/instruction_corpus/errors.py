"""Exception hierarchy shared across the pipeline."""


class PipelineError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PipelineError):
    pass


class MissingArtifact(PipelineError):
    def __init__(self, path, what=""):
        self.path = str(path)
        msg = f"missing {what}: {self.path}" if what else f"missing artifact: {self.path}"
        super().__init__(msg)


class DimensionMismatch(PipelineError, ValueError):
    pass


class ZeroVector(PipelineError, ValueError):
    pass


# backends

class BackendError(PipelineError):
    pass


class NetworkError(BackendError):
    pass


class AuthError(BackendError):
    pass


class EmptyCompletion(BackendError):
    pass


# cluster

class LeafLimitExceeded(PipelineError):
    pass


class MonotonicityViolation(PipelineError):
    pass


# instructgen

class MissingPlaceholder(PipelineError, ValueError):
    pass


class MalformedInstruction(PipelineError, ValueError):
    pass


# retrieve

class MissingEmbedding(PipelineError, KeyError):
    def __init__(self, question_id):
        self.question_id = question_id
        super().__init__(f"no embedding for question {question_id!r}")

    def __str__(self):
        return self.args[0]


class DegenerateCentroid(PipelineError, ValueError):
    pass


class EmptyIndex(PipelineError, ValueError):
    pass


# infer

class UnknownTokenizer(PipelineError, KeyError):
    pass


class BudgetInfeasible(PipelineError):
    pass


# judge

class JudgeParseError(PipelineError, ValueError):
    pass


# analyze

class UnknownModel(PipelineError, KeyError):
    pass


class SeparationDetected(PipelineError):
    pass


class RankDeficient(PipelineError, ValueError):
    pass
