from .adapter import (
    AdaptationConfig,
    AdaptationDiverged,
    AdaptationTrace,
    StepRecord,
    run_qttt,
    sample_span,
)
from .theory import (
    margin_change,
    margin_gain_check,
    needle_loss,
    query_descent_step,
    query_gradient_closed_form,
)

__all__ = [
    "AdaptationConfig",
    "AdaptationDiverged",
    "AdaptationTrace",
    "StepRecord",
    "run_qttt",
    "sample_span",
    "margin_change",
    "margin_gain_check",
    "needle_loss",
    "query_descent_step",
    "query_gradient_closed_form",
]
