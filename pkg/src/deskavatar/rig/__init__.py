"""Joint/slider/corrective face rig: evaluation, morphing, fitting, personalization."""

from .model import (
    Corrective,
    ExpressionSpec,
    FaceRig,
    Joint,
    RigError,
    RigTensors,
    SliderChannel,
    evaluate,
    evaluate_torch,
    load_rig,
    save_rig,
)
from .morph import MorphField, volumetric_morph
from .fitting import ExpressionFitConfig, FitResult, fit_expression
from .personalize import personalize, split_expression_spec
from .expressions import (
    EXPRESSION_GROUP_ONE,
    EXPRESSION_GROUP_TWO,
    expression_catalog,
    load_expression_catalog,
    save_expression_catalog,
)

__all__ = [
    "Corrective",
    "ExpressionSpec",
    "FaceRig",
    "Joint",
    "RigError",
    "RigTensors",
    "SliderChannel",
    "evaluate",
    "evaluate_torch",
    "load_rig",
    "save_rig",
    "MorphField",
    "volumetric_morph",
    "ExpressionFitConfig",
    "FitResult",
    "fit_expression",
    "personalize",
    "split_expression_spec",
    "EXPRESSION_GROUP_ONE",
    "EXPRESSION_GROUP_TWO",
    "expression_catalog",
    "load_expression_catalog",
    "save_expression_catalog",
]
