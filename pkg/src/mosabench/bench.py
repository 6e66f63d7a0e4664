"""Experiment configuration and the generate / pretrain / adapt / report steps.

A config is a TOML file whose keys are flattened to dotted names
(``[adapt] lr = 1e-3`` and ``adapt.lr = 1e-3`` are the same key). Unknown
keys are rejected so that typos in sweep files fail loudly.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import storage
from .forecastnet import ForecastModel, ModelConfig
from .metrics import evaluate
from .mosa import AdaptMethod, count_adapter_params, mask_label, mosa_targets, parse_mask
from .rng import SplitMix64, _mix
from .synthworld import SCENARIOS, Dataset, build_spec_dataset, scenario_preset
from .trainkit import TrainConfig, adapt, pretrain, trainable_count

OUT_ENV = "MOSABENCH_OUT"

SPLITS = ("source_train", "source_val", "source_test", "target_adapt", "target_val", "target_test")

RESULT_COLUMNS = ("scenario", "method", "mask", "rank", "n_target", "seed", "ade", "fde",
                  "topk_ade", "topk_fde", "trainable_params", "epochs_run")
GROUP_KEYS = ("scenario", "method", "mask", "rank", "n_target")
METRIC_COLUMNS = ("ade", "fde", "topk_ade", "topk_fde", "trainable_params", "epochs_run")
CURVE_COLUMNS = ("epoch", "train_loss", "val_ade", "val_fde")


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit code 2."""


# key -> (type, default)
_SCHEMA = {
    "experiment.scenario": (str, "agent_shift"),
    "experiment.n_target": (list, [20]),
    "experiment.methods": (list, ["MOSA"]),
    "experiment.masks": (list, ["all"]),
    "experiment.ranks": (list, [3]),
    "experiment.seeds": (list, [0, 1, 2, 3, 4]),
    "experiment.out": (str, "runs"),
    "data.seed": (int, 1),
    "data.n_source_train": (int, 2000),
    "data.n_source_val": (int, 300),
    "data.n_source_test": (int, 300),
    "data.n_target_adapt": (int, 200),
    "data.n_target_val": (int, 80),
    "data.n_target_test": (int, 500),
    "model.t_obs": (int, 8),
    "model.t_pred": (int, 12),
    "model.d_model": (int, 64),
    "model.k_modes": (int, 5),
    "model.seed": (int, 0),
    "pretrain.lr": (float, 1e-3),
    "pretrain.batch_size": (int, 10),
    "pretrain.max_epochs": (int, 50),
    "pretrain.patience": (int, 30),
    "pretrain.seed": (int, 0),
    "adapt.lr": (float, None),
    "adapt.batch_size": (int, 10),
    "adapt.max_epochs": (int, 100),
    "adapt.patience": (int, 30),
    "adapt.init_std": (float, 0.02),
}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value):
    kind, _ = _SCHEMA[key]
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind is str and isinstance(value, str):
        return value
    if kind is list:
        value = value if isinstance(value, list) else [value]
        if not value:
            raise ConfigError(f"{key}: list must not be empty")
        return value
    raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")


@dataclass
class ExperimentConfig:
    """Validated experiment description; ``values`` holds every dotted key."""

    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in _SCHEMA.items()})

    def __getitem__(self, key):
        return self.values[key]

    @property
    def scenario(self) -> str:
        return self.values["experiment.scenario"]

    @property
    def out(self) -> Path:
        return Path(self.values["experiment.out"])

    @property
    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(t_obs=v["model.t_obs"], t_pred=v["model.t_pred"], d_model=v["model.d_model"],
                           k_modes=v["model.k_modes"], seed=v["model.seed"])

    def pretrain_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(lr=v["pretrain.lr"], batch_size=v["pretrain.batch_size"],
                           max_epochs=v["pretrain.max_epochs"], patience=v["pretrain.patience"],
                           seed=v["pretrain.seed"], method=AdaptMethod.FT)

    def adapt_config(self, method, mask, rank, seed) -> TrainConfig:
        v = self.values
        return TrainConfig(lr=v["adapt.lr"], batch_size=v["adapt.batch_size"], max_epochs=v["adapt.max_epochs"],
                           patience=v["adapt.patience"], seed=seed, method=method, modular_mask=mask,
                           rank=rank, init_std=v["adapt.init_std"])

    def cells(self) -> list["Cell"]:
        v = self.values
        out = []
        for method, n, rank, mask, seed in itertools.product(
                v["experiment.methods"], v["experiment.n_target"], v["experiment.ranks"],
                v["experiment.masks"], v["experiment.seeds"]):
            method = AdaptMethod.parse(method)
            if method in (AdaptMethod.FT, AdaptMethod.ET, AdaptMethod.NORM):
                cell = Cell(self.scenario, method, "-", 0, n, seed)
            elif method is AdaptMethod.PA:
                cell = Cell(self.scenario, method, mask_label(parse_mask(mask)), 0, n, seed)
            else:
                cell = Cell(self.scenario, method, mask_label(parse_mask(mask)), rank, n, seed)
            if cell not in out:
                out.append(cell)
        return out


@dataclass(frozen=True)
class Cell:
    scenario: str
    method: AdaptMethod
    mask: str
    rank: int
    n_target: int
    seed: int

    @property
    def label(self) -> str:
        return f"{self.scenario}_{self.method.value}_{self.mask}_r{self.rank}_n{self.n_target}_s{self.seed}"


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    v = cfg.values
    if v["experiment.scenario"] not in SCENARIOS:
        raise ConfigError(f"experiment.scenario: unknown scenario {v['experiment.scenario']!r}; "
                          f"expected one of {SCENARIOS}")
    for m in v["experiment.methods"]:
        try:
            AdaptMethod.parse(m)
        except ValueError as e:
            raise ConfigError(f"experiment.methods: {e}") from None
    for m in v["experiment.masks"]:
        try:
            parse_mask(m)
        except (ValueError, AttributeError) as e:
            raise ConfigError(f"experiment.masks: {e}") from None
    for key in ("experiment.n_target", "experiment.ranks", "experiment.seeds"):
        for x in v[key]:
            if not isinstance(x, int) or isinstance(x, bool) or x < 0:
                raise ConfigError(f"{key}: entries must be non-negative integers, got {x!r}")
    if min(v["experiment.n_target"]) < 1 or min(v["experiment.ranks"]) < 1:
        raise ConfigError("experiment.n_target and experiment.ranks entries must be positive")
    if max(v["experiment.n_target"]) > v["data.n_target_adapt"]:
        raise ConfigError("experiment.n_target: exceeds data.n_target_adapt")
    for key in SPLIT_SIZE_KEYS.values():
        if v[key] < 1:
            raise ConfigError(f"{key}: must be positive")
    try:
        cfg.model_config
        cfg.pretrain_config()
        for method in v["experiment.methods"]:
            cfg.adapt_config(method, "", v["experiment.ranks"][0], 0)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def load_config(path=None, text: str | None = None, out=None, seed_override=None) -> ExperimentConfig:
    """Read and validate a config file.

    ``out`` (or the environment override) replaces ``experiment.out``;
    ``seed_override`` replaces every seed: data, model, pretraining and the
    adaptation seed list.
    """
    if text is None and path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
    raw = {}
    if text:
        try:
            raw = _flatten(tomllib.loads(text))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"config parse error: {e}") from None
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        cfg.values[key] = _coerce(key, value)
    if out is not None:
        cfg.values["experiment.out"] = str(out)
    elif os.environ.get(OUT_ENV) and "experiment.out" not in raw:
        cfg.values["experiment.out"] = os.environ[OUT_ENV]
    if seed_override is not None:
        s = int(seed_override)
        for key in ("data.seed", "model.seed", "pretrain.seed"):
            cfg.values[key] = s
        cfg.values["experiment.seeds"] = [s]
    return validate(cfg)


# ---------------------------------------------------------------------------
# steps

SPLIT_SIZE_KEYS = {
    "source_train": "data.n_source_train",
    "source_val": "data.n_source_val",
    "source_test": "data.n_source_test",
    "target_adapt": "data.n_target_adapt",
    "target_val": "data.n_target_val",
    "target_test": "data.n_target_test",
}


def data_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out / "data"


def build_datasets(cfg: ExperimentConfig) -> dict[str, Dataset]:
    """All six splits; each split draws from its own seeded stream."""
    src, tgt = scenario_preset(cfg.scenario)
    mc = cfg.model_config
    out = {}
    for i, split in enumerate(SPLITS):
        spec = src if split.startswith("source") else tgt
        seed = _mix((cfg["data.seed"] * len(SPLITS) + i) & 0xFFFFFFFFFFFFFFFF)
        out[split] = build_spec_dataset(replace(spec, tag=split), cfg[SPLIT_SIZE_KEYS[split]], seed,
                                        mc.t_obs, mc.t_pred)
    return out


def generate(cfg: ExperimentConfig) -> dict[str, int]:
    datasets = build_datasets(cfg)
    d = data_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    scenes = {}
    for ds in datasets.values():
        scenes.update(ds.scenes)
    storage.write_json(d / "scenes.json", storage.scenes_to_dict(scenes))
    for split, ds in datasets.items():
        storage.save_dataset(d / f"{split}.json", ds)
    return {split: len(ds) for split, ds in datasets.items()}


def load_split(cfg: ExperimentConfig, split: str) -> Dataset:
    path = data_dir(cfg) / f"{split}.json"
    if not path.exists():
        raise FileNotFoundError(f"missing dataset {path}; run 'generate' first")
    return storage.load_dataset(path)


def checkpoint_path(cfg: ExperimentConfig) -> Path:
    return cfg.out / "pretrain" / "checkpoint.json"


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell_str(x) for x in r])


def _cell_str(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def run_pretrain(cfg: ExperimentConfig):
    train, val = load_split(cfg, "source_train"), load_split(cfg, "source_val")
    model, res = pretrain(ForecastModel.init(cfg.model_config), train, val, cfg.pretrain_config())
    d = cfg.out / "pretrain"
    d.mkdir(parents=True, exist_ok=True)
    storage.save_checkpoint(checkpoint_path(cfg), model)
    write_csv(d / "loss_curve.csv", CURVE_COLUMNS,
              [(h.epoch, h.train_loss, h.val_ade, h.val_fde) for h in res.history])
    return model, res


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    """First ``n`` of a seeded permutation; shared by all methods for a seed."""
    order = SplitMix64(_mix((seed ^ 0x5EED) & 0xFFFFFFFFFFFFFFFF)).shuffle(list(range(len(ds))))
    return ds.subset(order[:n])


def run_cell(cfg: ExperimentConfig, cell: Cell, checkpoint, adapt_ds: Dataset, val_ds: Dataset,
             test_ds: Dataset, save_dir=None) -> tuple:
    """Adapt, evaluate on the target test set, and return one results row."""
    mask = "" if cell.mask == "-" else cell.mask
    rank = cell.rank if cell.rank > 0 else 1
    tc = cfg.adapt_config(cell.method, mask, rank, cell.seed)
    adapted, res = adapt(checkpoint, subsample(adapt_ds, cell.n_target, cell.seed), val_ds, tc)
    rep = evaluate(adapted, test_ds)
    n_train = trainable_count(adapted)
    if cell.method is AdaptMethod.MOSA:
        assert n_train == count_adapter_params(adapted.spec, checkpoint).total
    if save_dir is not None:
        storage.save_checkpoint(Path(save_dir) / f"{cell.label}.json", adapted)
    return (cell.scenario, cell.method.value, cell.mask, cell.rank, cell.n_target, cell.seed,
            rep.ade, rep.fde, rep.topk_ade, rep.topk_fde, n_train, res.epochs_run)


_worker_state: dict = {}


def _worker_init(cfg_values):
    cfg = ExperimentConfig(dict(cfg_values))
    _worker_state["cfg"] = cfg
    _worker_state["ckpt"] = storage.load_checkpoint(checkpoint_path(cfg))
    _worker_state["data"] = [load_split(cfg, s) for s in ("target_adapt", "target_val", "target_test")]


def _worker_run(cell: Cell):
    s = _worker_state
    return run_cell(s["cfg"], cell, s["ckpt"], *s["data"], save_dir=s["cfg"].out / "adapt" / "cells")


class CellFailure(RuntimeError):
    pass


def run_adapt(cfg: ExperimentConfig, jobs: int = 1, progress=None) -> list[tuple]:
    """Run every cell; rows go to ``adapt/results.csv`` through one writer."""
    ckpt_file = checkpoint_path(cfg)
    if not ckpt_file.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt_file}; run 'pretrain' first")
    cells = cfg.cells()
    out_dir = cfg.out / "adapt"
    (out_dir / "cells").mkdir(parents=True, exist_ok=True)
    rows = []
    with open(out_dir / "results.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)

        def emit(row):
            rows.append(row)
            w.writerow([_cell_str(x) for x in row])
            fh.flush()
            if progress:
                progress(row)

        if jobs <= 1:
            _worker_init(cfg.values)
            for cell in cells:
                try:
                    emit(_worker_run(cell))
                except Exception as e:
                    raise CellFailure(f"cell {cell.label} failed: {e}") from e
        else:
            with ProcessPoolExecutor(jobs, initializer=_worker_init, initargs=(cfg.values,)) as pool:
                futures = {pool.submit(_worker_run, c): c for c in cells}
                for fut in as_completed(futures):
                    try:
                        emit(fut.result())
                    except Exception as e:
                        for f in futures:
                            f.cancel()
                        raise CellFailure(f"cell {futures[fut].label} failed: {e}") from e
    return rows


# ---------------------------------------------------------------------------
# reporting


class ReportError(ValueError):
    pass


def read_results(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != RESULT_COLUMNS:
        raise ReportError(f"results header must be {','.join(RESULT_COLUMNS)}, got {reader.fieldnames}")
    rows = []
    for i, r in enumerate(reader, start=2):
        if None in r or any(v is None for v in r.values()):
            raise ReportError(f"line {i}: wrong number of fields")
        try:
            for k in METRIC_COLUMNS:
                x = float(r[k])
                if not math.isfinite(x):
                    raise ValueError(f"non-finite {k}")
            int(r["rank"]), int(r["n_target"]), int(r["seed"])
        except ValueError as e:
            raise ReportError(f"line {i}: {e}") from None
        rows.append(r)
    if not rows:
        raise ReportError("results file has no rows")
    return rows


def aggregate(rows: list[dict]) -> tuple[list[str], list[list]]:
    """Mean and sample std of every metric per (scenario, method, mask, rank, n_target)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in GROUP_KEYS), []).append(r)
    header = list(GROUP_KEYS) + ["n_seeds"]
    for m in METRIC_COLUMNS:
        header += [f"{m}_mean", f"{m}_std"]
    out = []
    for key, members in groups.items():
        line = list(key) + [len(members)]
        for m in METRIC_COLUMNS:
            xs = [float(r[m]) for r in members]
            line += [statistics.fmean(xs), statistics.stdev(xs) if len(xs) > 1 else 0.0]
        out.append(line)
    return header, out


def report(results_path, out_path=None) -> Path:
    try:
        text = Path(results_path).read_text(encoding="utf-8")
    except OSError as e:
        raise FileNotFoundError(f"cannot read {results_path}: {e}") from None
    header, lines = aggregate(read_results(text))
    out_path = Path(out_path) if out_path else Path(results_path).with_name("summary.csv")
    write_csv(out_path, header, lines)
    return out_path
