"""
Result files
Fit-result JSON schema and CSV writers for tables produced by the CLI and experiments
"""

import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

sys.path.append(str(Path(__file__).parent.parent))
from erlang_model.erlang_core import ErlangMixture, mixture_from_dict, mixture_to_dict
from utils.errors import SummaryParseError

logger = logging.getLogger(__name__)


class FitRecord(BaseModel):
    """fit.json"""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    theta: float
    weights: List[float]
    lambda_: float = Field(alias="lambda")
    effective_dim: float
    converged: bool
    outer_iters: int
    diagnostics: Dict[str, Any] = Field(default_factory=dict)
    objective_trace: List[float] = Field(default_factory=list)
    n_obs: Optional[int] = None
    options: Dict[str, Any] = Field(default_factory=dict)
    hessian: Optional[List[List[float]]] = None

    def mixture(self, renormalize: bool = True) -> ErlangMixture:
        return mixture_from_dict(self.model_dump(include={"theta", "weights"}),
                                 renormalize=renormalize)


def _plain(value: Any) -> Any:
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings"""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return value


def fit_record(fit, include_hessian: bool = False) -> FitRecord:
    """Build the JSON record of a FitResult"""
    options = fit.options.model_dump()
    return FitRecord(
        **mixture_to_dict(fit.mixture),
        lambda_=fit.lambda_,
        effective_dim=fit.effective_dim,
        converged=fit.converged,
        outer_iters=fit.outer_iters,
        diagnostics=_plain(fit.diagnostics),
        objective_trace=[float(v) for v in fit.objective_trace],
        n_obs=fit.n_obs,
        options=_plain(options),
        hessian=fit.hessian.H.tolist() if include_hessian else None,
    )


def write_fit(fit, path: Union[str, Path], include_hessian: bool = False) -> None:
    record = fit_record(fit, include_hessian)
    payload = record.model_dump(by_alias=True, exclude_none=True)
    Path(path).write_text(json.dumps(_plain(payload), indent=2) + "\n", encoding="utf-8")
    logger.info(f"✓ Fit written to {path}")


def read_fit(path: Union[str, Path]) -> FitRecord:
    """
    Load fit.json

    Raises:
        SummaryParseError: on malformed JSON or schema violations
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SummaryParseError(f"malformed JSON: {e.msg} at line {e.lineno}") from e
    try:
        return FitRecord.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(part) for part in first["loc"])
        raise SummaryParseError(first["msg"], loc) from e


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> None:
    """CSV with a header row and no index; floats keep their shortest repr"""
    frame.to_csv(path, index=False)
    logger.debug(f"Wrote {len(frame)} rows to {path}")


def write_json(payload: Dict[str, Any], path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(_plain(payload), indent=2) + "\n", encoding="utf-8")
