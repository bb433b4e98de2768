"""Exception hierarchy shared by every pipeline stage.

Each class carries the CLI exit code it maps to (3 for data errors, 4 when
RANSAC cannot find a consensus set).
"""


class MetricPoseError(Exception):
    exit_code = 3


class DegenerateInput(MetricPoseError):
    pass


class NotARotation(MetricPoseError):
    pass


class InvalidBox(MetricPoseError):
    pass


class EmptyRender(MetricPoseError):
    pass


class PixelNotCovered(MetricPoseError):
    pass


class NoCorrespondences(MetricPoseError):
    pass


class NoConsensus(MetricPoseError):
    exit_code = 4


class EmptyGroundTruth(MetricPoseError):
    pass


class NoValidPixels(MetricPoseError):
    pass


class UnknownCategory(MetricPoseError):
    pass


class ParseError(MetricPoseError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IndexOutOfRange(MetricPoseError):
    pass
