"""JSON persistence for scenes, datasets and checkpoints.

Floats are written with 17 significant digits so that every double survives
a save/load cycle exactly and a load -> save cycle is byte-stable.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .forecastnet import ForecastModel, ModelConfig
from .mosa import AdaptedModel, AdapterPair, AdapterSpec, ParallelAdapter
from .diffcore import Param
from .synthworld import Dataset, Sample, SceneGrid, StyleParams

CHECKPOINT_VERSION = 1
DATASET_FORMAT = "mosabench.dataset/1"
SCENES_FORMAT = "mosabench.scenes/1"


class FormatError(ValueError):
    pass


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise FormatError(f"cannot serialise non-finite value {x!r}")
    if x == 0.0 and math.copysign(1.0, x) < 0:
        return "-0.0"  # "-0" would load back as the integer 0
    return "%.17g" % x


def _encode(obj, out: list) -> None:
    if obj is None:
        out.append("null")
    elif isinstance(obj, (bool, np.bool_)):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_fmt_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        out.append("{")
        for i, (k, v) in enumerate(obj.items()):
            if i:
                out.append(",")
            out.append(json.dumps(str(k)))
            out.append(":")
            _encode(v, out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(",")
            _encode(v, out)
        out.append("]")
    elif isinstance(obj, np.ndarray):
        _encode(obj.tolist(), out)
    else:
        raise FormatError(f"cannot serialise {type(obj).__name__}")


def dumps(obj) -> str:
    out: list[str] = []
    _encode(obj, out)
    return "".join(out) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# scenes and datasets


def scenes_to_dict(scenes) -> dict:
    return {"format": SCENES_FORMAT,
            "scenes": {sid: scenes[sid].cells.tolist() for sid in sorted(scenes)}}


def scenes_from_dict(d: dict) -> dict[str, SceneGrid]:
    if d.get("format") != SCENES_FORMAT:
        raise FormatError(f"not a scenes file (format {d.get('format')!r})")
    return {sid: SceneGrid(sid, np.asarray(cells, dtype=np.int64)) for sid, cells in d["scenes"].items()}


def dataset_to_dict(ds: Dataset) -> dict:
    return {
        "format": DATASET_FORMAT,
        "tag": ds.tag,
        "style": ds.style.to_dict(),
        "scene_ids": sorted(ds.scenes),
        "samples": [{"scene_id": s.scene_id, "past": np.asarray(s.past).tolist(),
                     "future": np.asarray(s.future).tolist()} for s in ds.samples],
    }


def dataset_from_dict(d: dict, scenes: dict[str, SceneGrid]) -> Dataset:
    if d.get("format") != DATASET_FORMAT:
        raise FormatError(f"not a dataset file (format {d.get('format')!r})")
    missing = [sid for sid in d["scene_ids"] if sid not in scenes]
    if missing:
        raise FormatError(f"dataset references unknown scenes {missing}")
    samples = [Sample(s["scene_id"], np.asarray(s["past"], dtype=np.float64),
                      np.asarray(s["future"], dtype=np.float64)) for s in d["samples"]]
    return Dataset(samples, {sid: scenes[sid] for sid in d["scene_ids"]},
                   StyleParams.from_dict(d["style"]), d.get("tag", ""))


def save_dataset(path, ds: Dataset) -> None:
    write_json(path, dataset_to_dict(ds))


def load_dataset(path, scenes_path=None) -> Dataset:
    path = Path(path)
    scenes_path = Path(scenes_path) if scenes_path else path.with_name("scenes.json")
    return dataset_from_dict(read_json(path), scenes_from_dict(read_json(scenes_path)))


# ---------------------------------------------------------------------------
# checkpoints


def _tensor(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "values": a.reshape(-1).tolist()}


def _array(entry: dict, name: str) -> np.ndarray:
    shape = tuple(int(s) for s in entry["shape"])
    values = np.asarray(entry["values"], dtype=np.float64)
    if values.size != int(np.prod(shape, dtype=np.int64)):
        raise FormatError(f"tensor {name!r}: {values.size} values for shape {shape}")
    return values.reshape(shape)


def checkpoint_to_dict(model) -> dict:
    """Plain or adapted model -> checkpoint document."""
    base = getattr(model, "base", model)
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": base.config.to_dict(),
        "tensors": {n: _tensor(base.params[n].data) for n in sorted(base.params)},
    }
    adapters = getattr(model, "adapters", None)
    if adapters:
        kinds = {a.kind for a in adapters.values()}
        if len(kinds) != 1:
            raise FormatError("mixed adapter kinds in one model")
        kind = kinds.pop()
        if kind == "mosa":
            spec = dict(model.spec.to_dict(), kind="mosa")
            pairs = {t: {"A": _tensor(a.A.data), "B": _tensor(a.B.data)} for t, a in adapters.items()}
        else:
            spec = {"kind": "parallel", "targets": list(adapters)}
            pairs = {t: {"P": _tensor(a.P.data)} for t, a in adapters.items()}
        doc["adapters"] = {"spec": spec, "pairs": pairs}
    return doc


def checkpoint_from_dict(doc: dict):
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint format version {version!r} is not supported "
                          f"(expected {CHECKPOINT_VERSION})")
    config = ModelConfig(**doc["model_config"])
    model = ForecastModel.init(config)
    tensors = doc["tensors"]
    if set(tensors) != set(model.params):
        extra = sorted(set(tensors) - set(model.params))
        missing = sorted(set(model.params) - set(tensors))
        raise FormatError(f"checkpoint tensors do not match the model (extra {extra}, missing {missing})")
    for name, entry in tensors.items():
        arr = _array(entry, name)
        if arr.shape != model.params[name].shape:
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, model expects {model.params[name].shape}")
        model.params[name].data[...] = arr
    section = doc.get("adapters")
    if not section:
        return model
    spec_d = section["spec"]
    adapters = {}
    if spec_d["kind"] == "mosa":
        spec = AdapterSpec(int(spec_d["rank"]), list(spec_d["targets"]), float(spec_d["init_std"]),
                           int(spec_d["seed"]))
        for t in spec.targets:
            p = section["pairs"][t]
            adapters[t] = AdapterPair(t, Param(t + ".mosa_A", _array(p["A"], t + ".A")),
                                      Param(t + ".mosa_B", _array(p["B"], t + ".B")))
    elif spec_d["kind"] == "parallel":
        spec = None
        for t in spec_d["targets"]:
            adapters[t] = ParallelAdapter(t, Param(t + ".pa_P", _array(section["pairs"][t]["P"], t + ".P")))
    else:
        raise FormatError(f"unknown adapter kind {spec_d['kind']!r}")
    for t in adapters:
        if t not in model.params:
            raise FormatError(f"adapter target {t!r} is not a model parameter")
        model.params[t].trainable = False
    return AdaptedModel(model, adapters, spec)


def save_checkpoint(path, model) -> None:
    write_json(path, checkpoint_to_dict(model))


def load_checkpoint(path):
    return checkpoint_from_dict(read_json(path))
