"""Low-rank motion style adapters and the adaptation baselines.

An adapter pair ``(A, B)`` sits beside a frozen weight ``W`` and the layer
computes ``W h + B (A h)``. ``B`` starts at exactly zero so a freshly injected
model reproduces the base model bit for bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import diffcore as dc
from .diffcore import Param, Tensor
from .forecastnet import Batch, ForecastModel, forward_batch, layer_table
from .rng import SplitMix64, _mix

DEFAULT_INIT_STD = 0.02
ADAPTABLE_TAGS = ("S", "A", "F")
# attention key/output projections are never adapted
_SKIPPED = ("fusion.attn.wk", "fusion.attn.wo")


class AdaptMethod(str, enum.Enum):
    FT = "FT"
    ET = "ET"
    PA = "PA"
    NORM = "NORM"
    MOSA = "MOSA"

    @classmethod
    def parse(cls, value) -> "AdaptMethod":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown adaptation method {value!r}; expected one of "
                             f"{[m.value for m in cls]}") from None


def parse_mask(mask) -> frozenset[str]:
    """``"S+F"``, ``["S", "F"]``, ``""``/``"all"`` (empty = every module)."""
    if mask is None:
        return frozenset()
    if isinstance(mask, str):
        mask = mask.strip()
        if mask.lower() in ("", "all"):
            return frozenset()
        mask = mask.split("+")
    tags = frozenset(t.strip().upper() for t in mask)
    bad = tags - set(ADAPTABLE_TAGS)
    if bad:
        raise ValueError(f"modular mask tags must be in {ADAPTABLE_TAGS}, got {sorted(bad)}")
    return tags


def mask_label(mask: frozenset[str]) -> str:
    if not mask:
        return "all"
    return "+".join(t for t in ADAPTABLE_TAGS if t in mask)


@dataclass
class AdapterSpec:
    rank: int
    targets: list[str]
    init_std: float = DEFAULT_INIT_STD
    seed: int = 0

    def to_dict(self) -> dict:
        return {"rank": self.rank, "targets": list(self.targets),
                "init_std": self.init_std, "seed": self.seed}


class AdapterPair:
    """``B @ A`` residual; A is r x d_in, B is d_out x r."""

    kind = "mosa"

    def __init__(self, base_name: str, A: Param, B: Param):
        if A.shape[0] != B.shape[1]:
            raise dc.ShapeError(f"adapter rank mismatch: A {A.shape}, B {B.shape}")
        self.base_name = base_name
        self.A = A
        self.B = B

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def residual(self, h: Tensor) -> Tensor:
        return dc.apply_linear(self.B, None, dc.apply_linear(self.A, None, h))

    def params(self) -> list[Param]:
        return [self.A, self.B]

    def delta(self) -> np.ndarray:
        return self.B.data @ self.A.data


class ParallelAdapter:
    """Full-rank zero-initialised residual ``P h`` (no rank constraint)."""

    kind = "parallel"

    def __init__(self, base_name: str, P: Param):
        self.base_name = base_name
        self.P = P

    def residual(self, h: Tensor) -> Tensor:
        return dc.apply_linear(self.P, None, h)

    def params(self) -> list[Param]:
        return [self.P]

    def delta(self) -> np.ndarray:
        return self.P.data.copy()


@dataclass
class AdaptedModel:
    base: ForecastModel
    adapters: dict = field(default_factory=dict)
    spec: AdapterSpec | None = None

    @property
    def config(self):
        return self.base.config

    def __call__(self, batch: Batch) -> Tensor:
        return forward_batch(self.base, batch, self.adapters)

    def adapter_params(self) -> list[Param]:
        return [p for a in self.adapters.values() for p in a.params()]

    def all_params(self) -> dict[str, Param]:
        out = dict(self.base.params)
        out.update({p.name: p for p in self.adapter_params()})
        return out


# ---------------------------------------------------------------------------


def _weight_dims(model: ForecastModel) -> dict[str, tuple[int, int, bool]]:
    return {name + ".weight": (d_in, d_out, bias) for name, _, d_in, d_out, bias in layer_table(model.config)}


def validate_spec(model: ForecastModel, spec: AdapterSpec) -> None:
    dims = _weight_dims(model)
    if spec.rank < 1:
        raise ValueError("adapter rank must be at least 1")
    if not spec.init_std > 0:
        raise ValueError("init_std must be positive")
    if len(set(spec.targets)) != len(spec.targets):
        raise ValueError("duplicate adapter targets")
    for t in spec.targets:
        if t not in model.params:
            raise ValueError(f"adapter target {t!r} does not exist in the model")
        if t not in dims:
            raise ValueError(f"adapter target {t!r} is not a linear weight (biases and norms cannot be adapted)")
        d_in, d_out, _ = dims[t]
        if spec.rank >= min(d_in, d_out):
            raise ValueError(f"rank {spec.rank} is not below min(d_in, d_out)={min(d_in, d_out)} for {t!r}")


def inject(model: ForecastModel, spec: AdapterSpec) -> AdaptedModel:
    """Attach zero-initialised adapter pairs to a copy of ``model``.

    The targeted base weights are frozen; A ~ N(0, init_std^2) is drawn from
    a stream keyed by the spec seed and target order, B is exactly zero.
    """
    validate_spec(model, spec)
    base = model.clone()
    rng = SplitMix64(_mix(spec.seed & 0xFFFFFFFFFFFFFFFF))
    adapters = {}
    for t in spec.targets:
        d_out, d_in = base.params[t].shape
        A = rng.gauss_block(spec.rank * d_in, 0.0, spec.init_std).reshape(spec.rank, d_in)
        adapters[t] = AdapterPair(t, Param(t + ".mosa_A", A), Param(t + ".mosa_B", np.zeros((d_out, spec.rank))))
        base.params[t].trainable = False
    return AdaptedModel(base, adapters, spec)


def inject_parallel(model: ForecastModel, targets: Iterable[str]) -> AdaptedModel:
    dims = _weight_dims(model)
    base = model.clone()
    adapters = {}
    for t in targets:
        if t not in dims:
            raise ValueError(f"parallel adapter target {t!r} is not a linear weight")
        d_out, d_in = base.params[t].shape
        adapters[t] = ParallelAdapter(t, Param(t + ".pa_P", np.zeros((d_out, d_in))))
        base.params[t].trainable = False
    return AdaptedModel(base, adapters, None)


def adapted_linear(W: Param, pair, h, b: Param | None = None) -> Tensor:
    """``W h (+ b) + B (A h)``; BA is never formed."""
    h = dc.as_tensor(h)
    if pair.base_name and W.name and pair.base_name != W.name:
        raise ValueError(f"adapter for {pair.base_name!r} applied to {W.name!r}")
    res = pair.residual(h)
    base = dc.apply_linear(W, b, h)
    if res.shape != base.shape:
        raise dc.ShapeError(f"adapter output {res.shape} does not match base output {base.shape}")
    return dc.add(base, res)


def merge(adapted: AdaptedModel) -> ForecastModel:
    """Plain model with each adapted weight replaced by ``W + delta``."""
    merged = adapted.base.clone()
    for name, a in adapted.adapters.items():
        merged.params[name].data[...] = adapted.base.params[name].data + a.delta()
    for p in merged.params.values():
        p.trainable = True
    return merged


@dataclass
class ParamCount:
    per_target: dict[str, int]
    total: int
    base_total: int

    @property
    def ratio(self) -> float:
        return self.total / self.base_total if self.base_total else 0.0


def layer_ratio(d_in: int, d_out: int, rank: int, bias: bool = True) -> tuple[int, int, float]:
    """(adapter count, base count, ratio) for one hypothetical layer."""
    a = rank * (d_in + d_out)
    b = d_in * d_out + (d_out if bias else 0)
    return a, b, a / b


def count_adapter_params(spec: AdapterSpec, model: ForecastModel) -> ParamCount:
    dims = _weight_dims(model)
    per, base = {}, 0
    for t in spec.targets:
        d_in, d_out, bias = dims[t]
        per[t] = spec.rank * (d_in + d_out)
        base += d_in * d_out + (d_out if bias else 0)
    return ParamCount(per, sum(per.values()), base)


def verify_rank(pair, tol: float = 1e-9) -> int:
    """Numeric rank of ``B @ A`` by row reduction with partial pivoting.

    Pivots at or below ``tol`` times the largest absolute entry are treated
    as zero.
    """
    M = np.array(pair.delta() if hasattr(pair, "delta") else pair, dtype=np.float64)
    scale = np.abs(M).max() if M.size else 0.0
    if scale == 0.0:
        return 0
    thresh = tol * scale
    rows, cols = M.shape
    rank = 0
    for c in range(cols):
        if rank == rows:
            break
        p = rank + int(np.argmax(np.abs(M[rank:, c])))
        if abs(M[p, c]) <= thresh:
            continue
        if p != rank:
            M[[rank, p]] = M[[p, rank]]
        M[rank + 1:] -= np.outer(M[rank + 1:, c] / M[rank, c], M[rank])
        rank += 1
    return rank


# ---------------------------------------------------------------------------
# trainable-set construction


def mosa_targets(model: ForecastModel, mask=None) -> list[str]:
    """Weights that receive adapters for a modular mask (empty = S, A, F)."""
    mask = parse_mask(mask)
    tags = mask or frozenset(ADAPTABLE_TAGS)
    return [name + ".weight" for name, tag, *_ in layer_table(model.config)
            if tag in tags and name not in _SKIPPED]


def select_trainables(model: ForecastModel, method, mask=None) -> set[str]:
    """Names of the parameters a method trains.

    For MOSA and PA these are the adapter parameter names that
    :func:`prepare_adaptation` will create.
    """
    method = AdaptMethod.parse(method)
    if method is AdaptMethod.FT:
        names = set(model.params)
    elif method is AdaptMethod.ET:
        names = set(model.names_with_tag("S", "A", "F"))
    elif method is AdaptMethod.NORM:
        names = set(model.norm_param_names())
    elif method is AdaptMethod.MOSA:
        names = {t + s for t in mosa_targets(model, mask) for s in (".mosa_A", ".mosa_B")}
    else:
        names = {t + ".pa_P" for t in mosa_targets(model, mask)}
    if not names:
        raise ValueError(f"method {method.value} selects no trainable parameters")
    return names


def prepare_adaptation(model: ForecastModel, method, mask=None, rank: int = 3,
                       init_std: float = DEFAULT_INIT_STD, seed: int = 0) -> AdaptedModel:
    """Copy ``model`` and set it up for ``method``: adapters attached where
    needed and exactly the selected parameters trainable."""
    method = AdaptMethod.parse(method)
    wanted = select_trainables(model, method, mask)
    if method is AdaptMethod.MOSA:
        adapted = inject(model, AdapterSpec(rank, mosa_targets(model, mask), init_std, seed))
    elif method is AdaptMethod.PA:
        adapted = inject_parallel(model, mosa_targets(model, mask))
    else:
        adapted = AdaptedModel(model.clone())
    adapted.base.set_trainable(wanted)
    for p in adapted.adapter_params():
        p.trainable = p.name in wanted
    got = {n for n, p in adapted.all_params().items() if p.trainable}
    assert got == wanted, (sorted(got ^ wanted))
    return adapted
