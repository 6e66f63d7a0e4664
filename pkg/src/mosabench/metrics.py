"""Displacement metrics (grid units)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .forecastnet import make_batch, forward_batch


@dataclass
class EvalReport:
    ade: float
    fde: float
    topk_ade: float
    topk_fde: float
    n_samples: int
    k: int

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if pred.shape[0] == 0:
        raise ValueError("empty trajectory")
    return pred, gt


def ade(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def fde(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def topk_min(output, gt, which: str = "FDE") -> float:
    """Best hypothesis under ADE or FDE; ``output`` is K x T x 2."""
    output = np.asarray(output, dtype=np.float64)
    if output.ndim != 3 or output.shape[0] < 1:
        raise ValueError(f"expected K x T x 2 hypotheses, got shape {output.shape}")
    metric = {"ADE": ade, "FDE": fde}[which.upper()]
    return min(metric(h, gt) for h in output)


def per_mode_errors(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(ADE, FDE), each B x K, for B x K x T x 2 predictions."""
    d = np.linalg.norm(pred - gt[:, None], axis=-1)
    return d.mean(axis=-1), d[..., -1]


def report_from_predictions(pred: np.ndarray, gt: np.ndarray, k: int | None = None) -> EvalReport:
    if len(pred) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    k = pred.shape[1] if k is None else k
    if not 1 <= k <= pred.shape[1]:
        raise ValueError(f"k must lie in [1, {pred.shape[1]}]")
    a, f = per_mode_errors(pred[:, :k], gt)
    return EvalReport(float(a[:, 0].mean()), float(f[:, 0].mean()),
                      float(a.min(axis=1).mean()), float(f.min(axis=1).mean()), len(pred), k)


def predict(model, batch, adapters=None) -> np.ndarray:
    with dc.no_grad():
        if adapters is None and hasattr(model, "adapters"):
            return model(batch).data
        return forward_batch(model, batch, adapters).data


def evaluate(model, dataset, k: int | None = None, batch=None) -> EvalReport:
    """Mean mode-0 and Top-K errors of ``model`` (plain or adapted)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    batch = batch if batch is not None else make_batch(dataset.samples, dataset.scenes, model.config)
    return report_from_predictions(predict(model, batch), batch.future, k)


def generalization_error(checkpoint, dataset, k: int | None = None) -> EvalReport:
    """Error of the unadapted model on a (shifted) test set."""
    base = getattr(checkpoint, "base", checkpoint)
    return evaluate(base, dataset, k)
