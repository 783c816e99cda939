"""
Local moment summaries
Bin partitions, per-bin proportions and scaled moments, and their JSON files
"""

import json
import logging
import math
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from utils.errors import DomainError, SummaryParseError

logger = logging.getLogger(__name__)

PI_SUM_TOL = 1e-12
COUNT_TOL = 1e-9


@dataclass(frozen=True)
class BinPartition:
    """
    Half-open bins [b_{j-1}, b_j) covering [b_0, b_J); b_J may be +inf
    """
    edges: Tuple[float, ...]

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        object.__setattr__(self, "edges", edges)

        if len(edges) < 2:
            raise DomainError("a partition needs at least one bin (two edges)")
        if not edges[0] >= 0.0 or math.isinf(edges[0]):
            raise DomainError(f"first edge must be finite and >= 0, got {edges[0]}")
        for j, e in enumerate(edges[:-1]):
            if math.isinf(e) or math.isnan(e):
                raise DomainError(f"only the last edge may be infinite (edge {j} = {e})")
        if math.isnan(edges[-1]):
            raise DomainError("last edge is NaN")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise DomainError(f"edges must be strictly increasing: {edges}")

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.edges[:-1])

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.edges[1:])

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.edges[-1])

    @property
    def last_finite_edge(self) -> float:
        return self.edges[-2] if self.unbounded else self.edges[-1]

    def bins(self) -> List[Tuple[float, float]]:
        return list(zip(self.edges[:-1], self.edges[1:]))

    def locate(self, x: Union[float, np.ndarray]) -> np.ndarray:
        """Bin index of each point, -1 when the point lies outside [b_0, b_J)"""
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(np.asarray(self.edges), x, side="right") - 1
        idx = np.where((idx < 0) | (idx >= self.n_bins), -1, idx)
        return idx


@dataclass(frozen=True)
class LocalMomentSummary:
    """
    The observed data: proportions pi_hat and scaled moments
    mu_hat[j][k-1] = N^-1 sum X_i^k 1{X_i in B_j}, k = 1..k_j
    """
    partition: BinPartition
    n_obs: int
    pi_hat: Tuple[float, ...]
    mu_hat: Tuple[Tuple[float, ...], ...]
    k: Tuple[int, ...]
    # Parsed file record; lets write_summary reproduce the stored decimals
    record: Optional["SummaryFile"] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        pi_hat = tuple(float(p) for p in self.pi_hat)
        mu_hat = tuple(tuple(float(m) for m in row) for row in self.mu_hat)
        k = tuple(int(kj) for kj in self.k)
        object.__setattr__(self, "pi_hat", pi_hat)
        object.__setattr__(self, "mu_hat", mu_hat)
        object.__setattr__(self, "k", k)

        J = self.partition.n_bins
        if int(self.n_obs) != self.n_obs or self.n_obs <= 0:
            raise DomainError(f"n_obs must be a positive integer, got {self.n_obs}")
        if not (len(pi_hat) == len(mu_hat) == len(k) == J):
            raise DomainError(
                f"partition has {J} bins but pi_hat/mu_hat/k have lengths "
                f"{len(pi_hat)}/{len(mu_hat)}/{len(k)}"
            )
        if any(p < 0 for p in pi_hat):
            raise DomainError(f"negative proportion in {pi_hat}")
        if abs(math.fsum(pi_hat) - 1.0) > PI_SUM_TOL:
            raise DomainError(f"proportions sum to {math.fsum(pi_hat)!r}, not 1")
        for j, (row, kj) in enumerate(zip(mu_hat, k)):
            if kj < 0:
                raise DomainError(f"k[{j}] = {kj} is negative")
            if len(row) != kj:
                raise DomainError(f"bin {j} has {len(row)} moments but k_j = {kj}")
            if any(m < 0 for m in row):
                raise DomainError(f"negative moment in bin {j}: {row}")

    @property
    def n_bins(self) -> int:
        return self.partition.n_bins

    @property
    def max_order(self) -> int:
        return max(self.k) if self.k else 0

    @property
    def counts(self) -> np.ndarray:
        """N * pi_hat (not rounded)"""
        return self.n_obs * np.asarray(self.pi_hat)

    def observed_index(self) -> List[Tuple[int, int]]:
        """Flattened (bin, order) pairs in (j ascending, k ascending) order"""
        return [(j, kk) for j, kj in enumerate(self.k) for kk in range(1, kj + 1)]

    def mu_vector(self) -> np.ndarray:
        return np.array([m for row in self.mu_hat for m in row], dtype=float)


def summarize_sample(sample: Sequence[float], partition: BinPartition,
                     k: Sequence[int]) -> LocalMomentSummary:
    """
    Compute pi_hat and the scaled local moments of a raw sample

    Args:
        sample: Nonnegative observations
        partition: Bin partition that must contain every observation
        k: Number of moments kept in each bin

    Returns:
        LocalMomentSummary with n_obs = len(sample)
    """
    x = np.asarray(sample, dtype=float).ravel()
    if x.size == 0:
        raise DomainError("cannot summarize an empty sample")
    k = [int(kj) for kj in k]
    if len(k) != partition.n_bins:
        raise DomainError(f"k has {len(k)} entries for {partition.n_bins} bins")

    idx = partition.locate(x)
    outside = np.flatnonzero(idx < 0)
    if outside.size:
        bad = x[outside[0]]
        raise DomainError(
            f"sample value {bad!r} lies outside [{partition.edges[0]}, {partition.edges[-1]})"
        )

    N = x.size
    pi_hat = []
    mu_hat = []
    for j, kj in enumerate(k):
        xj = x[idx == j]
        pi_hat.append(xj.size / N)
        mu_hat.append(tuple(math.fsum(xj ** kk) / N for kk in range(1, kj + 1)))

    return LocalMomentSummary(partition=partition, n_obs=N, pi_hat=tuple(pi_hat),
                              mu_hat=tuple(mu_hat), k=tuple(k))


def partition_from_levels(sample: Sequence[float], levels: Sequence[float]) -> BinPartition:
    """
    Partition at the empirical quantiles of the sample; level 0 maps to 0
    and level 1 to +inf so every observation is covered
    """
    levels = [float(a) for a in levels]
    if len(levels) < 2 or any(b <= a for a, b in zip(levels, levels[1:])):
        raise DomainError(f"levels must be strictly increasing, got {levels}")
    if levels[0] < 0 or levels[-1] > 1:
        raise DomainError(f"levels must lie in [0, 1], got {levels}")

    edges = list(np.quantile(np.asarray(sample, dtype=float), levels))
    if levels[0] == 0.0:
        edges[0] = 0.0
    if levels[-1] == 1.0:
        edges[-1] = math.inf
    return BinPartition(tuple(edges))


def from_var_tvar(core: LocalMomentSummary, var_level: float, var_value: float,
                  tvar_value: float, n_obs: int) -> LocalMomentSummary:
    """
    Append an unbounded tail bin [VaR, inf) encoding a VaR/TVaR pair

    The core summary describes the observations below VaR on [b_0, VaR);
    its proportions and moments are rescaled by var_level so the full
    summary sums to one.
    """
    if not 0.0 < var_level < 1.0:
        raise DomainError(f"var_level must lie in (0, 1), got {var_level} "
                          "(a level of 1 leaves an empty tail bin)")
    if core.partition.unbounded:
        raise DomainError("the core summary must end at a finite edge")
    # the core covers [b_0, VaR); strictly increasing edges keep every inner edge below VaR
    if not math.isclose(core.partition.edges[-1], var_value, rel_tol=1e-12):
        raise DomainError(
            f"the core summary ends at {core.partition.edges[-1]}, not at VaR {var_value}"
        )
    if tvar_value < var_value:
        raise DomainError(f"TVaR {tvar_value} must dominate VaR {var_value}")

    tail = 1.0 - var_level
    scale = var_level / math.fsum(core.pi_hat)
    edges = core.partition.edges[:-1] + (float(var_value), math.inf)
    pi_hat = tuple(p * scale for p in core.pi_hat) + (tail,)
    mu_hat = tuple(tuple(m * scale for m in row) for row in core.mu_hat) + ((tail * tvar_value,),)

    # Renormalize away roundoff; moments share the factor so mu_hat / pi_hat is unchanged
    total = math.fsum(pi_hat)
    pi_hat = tuple(p / total for p in pi_hat)
    mu_hat = tuple(tuple(m / total for m in row) for row in mu_hat)

    return LocalMomentSummary(partition=BinPartition(edges), n_obs=int(n_obs),
                              pi_hat=pi_hat, mu_hat=mu_hat, k=core.k + (1,))


# ---------------------------------------------------------------------------
# JSON schema

class BinRecord(BaseModel):
    """One bin of the summary file"""
    model_config = ConfigDict(extra="forbid")

    lower: Decimal
    upper: Optional[Decimal]
    count: Optional[int] = None
    pi: Optional[Decimal] = None
    moments: List[Decimal] = []

    @field_validator("lower")
    @classmethod
    def _lower_nonnegative(cls, v: Decimal) -> Decimal:
        if not v.is_finite() or v < 0:
            raise ValueError("lower edge must be a finite number >= 0")
        return v

    @field_validator("count")
    @classmethod
    def _count_nonnegative(cls, v: Optional[int]) -> Optional[int]:
        if v is not None and v < 0:
            raise ValueError("count must be >= 0")
        return v

    @field_validator("pi")
    @classmethod
    def _pi_range(cls, v: Optional[Decimal]) -> Optional[Decimal]:
        if v is not None and not (0 <= v <= 1):
            raise ValueError("pi must lie in [0, 1]")
        return v

    @field_validator("moments")
    @classmethod
    def _moments_nonnegative(cls, v: List[Decimal]) -> List[Decimal]:
        for i, m in enumerate(v):
            if not m.is_finite() or m < 0:
                raise ValueError(f"moment {i} must be a finite number >= 0")
        return v

    @model_validator(mode="after")
    def _one_mass(self):
        if (self.count is None) == (self.pi is None):
            raise ValueError("exactly one of 'count' or 'pi' is required")
        if self.upper is not None and self.upper <= self.lower:
            raise ValueError("upper must exceed lower")
        return self


class SummaryFile(BaseModel):
    """Top-level summary file"""
    model_config = ConfigDict(extra="forbid")

    n_obs: int
    bins: List[BinRecord]

    @field_validator("n_obs")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("n_obs must be a positive integer")
        return v


def _loc_path(loc: Tuple) -> str:
    path = ""
    for part in loc:
        if isinstance(part, int):
            path += f"[{part}]"
        else:
            path += f".{part}" if path else str(part)
    return path


def parse_summary(text: str) -> LocalMomentSummary:
    """Parse summary JSON text; numbers are kept as decimals until conversion"""
    try:
        data = json.loads(text, parse_float=Decimal)
    except json.JSONDecodeError as e:
        raise SummaryParseError(f"malformed JSON ({e.msg} at line {e.lineno})") from e

    try:
        record = SummaryFile.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise SummaryParseError(first["msg"], _loc_path(first["loc"])) from e

    return _summary_from_record(record)


def _summary_from_record(record: SummaryFile) -> LocalMomentSummary:
    bins = record.bins
    if not bins:
        raise SummaryParseError("at least one bin is required", "bins")

    for j, b in enumerate(bins):
        if b.upper is None and j != len(bins) - 1:
            raise SummaryParseError("null upper (infinity) is only legal on the last bin",
                                    f"bins[{j}].upper")
        if j > 0 and b.lower != bins[j - 1].upper:
            raise SummaryParseError(
                f"lower {b.lower} does not continue previous upper {bins[j - 1].upper}",
                f"bins[{j}].lower")
    kinds = {b.count is None for b in bins}
    if len(kinds) > 1:
        raise SummaryParseError("bins must all use 'count' or all use 'pi'", "bins")

    N = record.n_obs
    if bins[0].count is not None:
        total = sum(b.count for b in bins)
        if total != N:
            raise SummaryParseError(f"counts sum to {total}, expected n_obs = {N}", "bins")
        pi_hat = tuple(b.count / N for b in bins)
    else:
        total = sum(b.pi for b in bins)
        if abs(total - 1) > Decimal(str(PI_SUM_TOL)):
            raise SummaryParseError(f"pi values sum to {total}, not 1", "bins")
        pi_hat = tuple(float(b.pi) for b in bins)

    edges = tuple(float(b.lower) for b in bins) + (
        math.inf if bins[-1].upper is None else float(bins[-1].upper),)
    try:
        partition = BinPartition(edges)
        return LocalMomentSummary(
            partition=partition,
            n_obs=N,
            pi_hat=pi_hat,
            mu_hat=tuple(tuple(float(m) for m in b.moments) for b in bins),
            k=tuple(len(b.moments) for b in bins),
            record=record,
        )
    except DomainError as e:
        raise SummaryParseError(str(e), "bins") from e


def _decimal(value: float) -> Decimal:
    return Decimal(repr(float(value)))


def summary_record(summary: LocalMomentSummary) -> SummaryFile:
    """
    File record of a summary: the parsed record when there is one, otherwise
    one built from the values with integer counts where N * pi_hat allows
    """
    if summary.record is not None:
        return summary.record
    counts = summary.counts
    integral = bool(np.all(np.abs(counts - np.round(counts)) <= COUNT_TOL))
    bins = []
    for j, (lo, hi) in enumerate(summary.partition.bins()):
        mass = ({"count": int(round(counts[j]))} if integral
                else {"pi": _decimal(summary.pi_hat[j])})
        bins.append(BinRecord(lower=_decimal(lo), upper=None if math.isinf(hi) else _decimal(hi),
                              moments=[_decimal(m) for m in summary.mu_hat[j]], **mass))
    return SummaryFile(n_obs=summary.n_obs, bins=bins)


def _encode(value) -> str:
    """JSON text of a dumped record; Decimal values keep their stored digits"""
    if isinstance(value, Decimal):
        return str(value)
    if isinstance(value, list):
        return "[" + ", ".join(_encode(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_encode(v)}" for k, v in value.items()) + "}"
    return json.dumps(value)


def summary_to_json(summary: LocalMomentSummary) -> str:
    """Render a summary through its SummaryFile record, one bin per line"""
    data = summary_record(summary).model_dump(exclude_unset=True)
    bins = ",\n".join(f"    {_encode(b)}" for b in data["bins"])
    return f'{{\n  "n_obs": {data["n_obs"]},\n  "bins": [\n{bins}\n  ]\n}}\n'


def read_summary(path: Union[str, Path]) -> LocalMomentSummary:
    """Read and validate a summary file"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise SummaryParseError(f"cannot read {path}: {e.strerror}") from e
    summary = parse_summary(text)
    logger.debug(f"Read summary {path}: J={summary.n_bins}, N={summary.n_obs}, k={summary.k}")
    return summary


def write_summary(summary: LocalMomentSummary, path: Union[str, Path]) -> None:
    """Write a summary file (UTF-8)"""
    path = Path(path)
    path.write_text(summary_to_json(summary), encoding="utf-8")
    logger.debug(f"Wrote summary {path}")
