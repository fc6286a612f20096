"""
Error hierarchy for roadsplat

Input errors (bad or missing data) exit with code 1, numerical failures with
code 2. Every error converts to an ErrorDetail for structured reporting.
"""

from typing import Any, Dict, Optional


class RoadSplatError(Exception):
    """Base class for all domain errors"""

    code = "roadsplat_error"
    exit_code = 2

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_detail(self):
        from roadsplat.models import ErrorDetail

        return ErrorDetail(code=self.code, message=self.message, details=self.details)


class InputError(RoadSplatError):
    code = "input_error"
    exit_code = 1


class NumericalError(RoadSplatError):
    code = "numerical_error"
    exit_code = 2


# Input errors


class EmptyScene(InputError):
    code = "empty_scene"


class DegenerateExtent(InputError):
    code = "degenerate_extent"


class InvalidPose(InputError):
    code = "invalid_pose"


class NearVerticalPose(InputError):
    code = "near_vertical_pose"


class EmptyMask(InputError):
    code = "empty_mask"


class NoAssociation(InputError):
    code = "no_association"


class MissingGT(InputError):
    code = "missing_gt"


class NoMatches(InputError):
    code = "no_matches"


class InvalidSpec(InputError):
    code = "invalid_spec"


class CorruptCheckpoint(InputError):
    code = "corrupt_checkpoint"


class SceneDirectoryError(InputError):
    code = "scene_directory"


# Numerical errors


class BehindCamera(NumericalError):
    code = "behind_camera"


class SingularCovariance(NumericalError):
    code = "singular_covariance"


class NonFiniteLoss(NumericalError):
    code = "non_finite_loss"

    def __init__(self, component: str, step: Optional[int] = None, value: float = 0.0):
        details = {"component": component, "value": str(value)}
        if step is not None:
            details["step"] = step
        super().__init__(f"loss component '{component}' is not finite", details)
        self.component = component
        self.step = step


class DivergedScene(NumericalError):
    code = "diverged_scene"
