"""Experiment configuration, training runs, sweeps and plot-data export."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import itertools
import json
import logging
import os
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import diffcore as dc
from .data import Dataset, gen_toy_regression, gen_toy_rings, load_csv, save_csv, split, standardize
from .graphs import fully_connected, knn_graph
from .metrics import ExperimentRecord, accuracy, mean_nll, mse
from .models import Mlp, MlpSpec, init_params, load_checkpoint, save_checkpoint
from .vicinal import RegularizerConfig, RngStreams, erm_loss, regularized_loss

log = logging.getLogger(__name__)

RESULTS_HEADER = ("run_id", "method", "pooling", "alpha", "beta", "k_neighbors",
                  "seed", "split", "metric", "value")

DEFAULTS = {
    "dataset": {
        "kind": "toy-regression",
        "n_train": 100,
        "n_test": 100,
        "path": None,
        "test_path": None,
        "target_columns": [-1],
        "has_header": True,
        "task": "regression",
        "test_fraction": 0.1,
        "standardize": None,
        "seed": None,
    },
    "model": {
        "hidden": [128, 64],
        "activation": "tanh",
        "homoscedastic": False,
        "variance_hidden": 64,
        "embedding_init_var": 0.6931471805599453,
    },
    "regularizer": {
        "method": "erm",
        "pooling": "log-linear",
        "alpha": 0.1,
        "beta": 0.01,
        "k_neighbors": 5,
        "mc_samples": 1,
        "mix_layer": 1,
        "criterion": "expected-log-likelihood",
        "label_mode": "exact",
    },
    "training": {
        "optimizer": "full-batch-gd",
        "lr": 0.01,
        "epochs": 500,
        "seeds": [0],
        "val_fraction": 0.2,
        "batch_size": None,
        "selection": "regularized",
        "eval_mc_samples": 32,
    },
    "sweep": {},
    "output_dir": "runs",
    "workers": 1,
}


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, cause: Exception):
        super().__init__(f"non-finite loss at epoch {epoch}: {cause}")
        self.epoch = epoch


# -- configuration ------------------------------------------------------------------

def _schema() -> dict:
    return json.loads(resources.files("probmix").joinpath("config.schema.json").read_text())


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    """``a.b.c=value``; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the JSON file, then ``key=value`` overrides; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        # relative data paths are taken from the config file's directory
        for key in ("path", "test_path"):
            value = cfg["dataset"].get(key)
            if isinstance(value, str) and not Path(value).is_absolute():
                cfg["dataset"][key] = str((Path(path).parent / value).resolve())
    for item in overrides:
        keys, value = parse_override(item)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, _schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    try:
        RegularizerConfig(**cfg["regularizer"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# -- data ---------------------------------------------------------------------------

@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    y_log_scale: float = 0.0
    stats: object = None


def prepare_data(cfg: dict, seed: int) -> Splits:
    d = cfg["dataset"]
    data_seed = seed if d["seed"] is None else d["seed"]
    kind = d["kind"]
    if kind == "toy-regression":
        full, test = gen_toy_regression(d["n_train"], d["n_test"], seed=data_seed)
    elif kind == "toy-rings":
        full = gen_toy_rings(d["n_train"], seed=data_seed)
        test = gen_toy_rings(d["n_test"], seed=data_seed + 7919)
    else:
        full = load_csv(d["path"], d["target_columns"], d["has_header"], d["task"])
        if d["test_path"]:
            test = load_csv(d["test_path"], d["target_columns"], d["has_header"], d["task"])
        else:
            full, test = split(full, [1.0 - d["test_fraction"], d["test_fraction"]], seed=data_seed)
    train, val = split(full, [1.0 - cfg["training"]["val_fraction"], cfg["training"]["val_fraction"]],
                       seed=data_seed + 1)
    if d["standardize"] is not False:
        train, val, test, stats = standardize(train, val, test)
        return Splits(train, val, test, stats.log_y_scale, stats)
    return Splits(train, val, test)


# -- training -----------------------------------------------------------------------

def model_spec(cfg: dict, ds: Dataset) -> MlpSpec:
    reg = RegularizerConfig(**cfg["regularizer"])
    m = cfg["model"]
    if ds.task == "classification":
        head, out_dim = "softmax", max(ds.num_classes, 2)
    else:
        head = "gaussian-homoscedastic" if m["homoscedastic"] else "gaussian-heteroscedastic"
        out_dim = ds.y.shape[1]
    embedding = None
    if reg.family == "m-probmix":
        embedding = "heteroscedastic"
    elif reg.family == "m-probmix-star":
        embedding = "separate"
    hidden = tuple(m["hidden"])
    return MlpSpec(input_dim=ds.x.shape[1], hidden=hidden, activation=m["activation"], head=head,
                   output_dim=out_dim, embedding=embedding,
                   mix_layer=min(reg.mix_layer if reg.mix_layer is not None else 1, len(hidden)),
                   variance_hidden=m["variance_hidden"], embedding_init_var=m["embedding_init_var"])


def build_graph(reg: RegularizerConfig, ds: Dataset):
    if reg.family == "erm":
        return None
    if reg.local and len(ds) > 1:
        return knn_graph(ds.x, min(reg.k_neighbors, len(ds) - 1))
    return fully_connected(len(ds))


def run_id_for(cfg: dict, seed: int) -> str:
    key = {k: cfg[k] for k in ("dataset", "model", "regularizer", "training")}
    key = copy.deepcopy(key)
    key["training"].pop("seeds", None)
    key["seed"] = seed
    blob = json.dumps(key, sort_keys=True, default=str).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


@dataclass
class TrainResult:
    model: Mlp
    records: list
    best_epoch: int
    history: list  # (epoch, train_loss, val_objective, val_nll)
    splits: Splits
    run_id: str


def _objective(model, ds, graph, reg, seed_key):
    return regularized_loss(model, ds, graph, reg, RngStreams.from_seed(seed_key))


def run_train(cfg: dict, seed: int, splits: Splits | None = None) -> TrainResult:
    """Train one model; keep the parameters of the epoch with least validation loss."""
    reg = RegularizerConfig(**cfg["regularizer"])
    tr = cfg["training"]
    splits = prepare_data(cfg, seed) if splits is None else splits
    train, val = splits.train, splits.val
    streams = RngStreams.from_seed([seed, 0])
    spec = model_spec(cfg, train)
    model = Mlp(spec, init_params(spec, streams.init))
    state = dc.OptimizerState(algorithm=tr["optimizer"], lr=tr["lr"])
    step = dc.adam_step if state.algorithm == "adam" else dc.gd_step
    train_graph = build_graph(reg, train)
    val_graph = build_graph(reg, val)
    val_seed = [seed, 1]

    def loss_fn(params, batch):
        ds, graph = batch
        return regularized_loss(model, ds, graph, reg, streams)

    def validate():
        obj = float(_objective(model, val, val_graph, reg, val_seed).value)
        nll = float(erm_loss(model, val).value)
        return obj, nll

    obj, nll = validate()
    score = obj if tr["selection"] == "regularized" else nll
    best = (score if np.isfinite(score) else np.inf, 0, model.state())
    history = [(0, float("nan"), obj, nll)]
    batch_rng = np.random.default_rng([seed, 2])
    for epoch in range(1, tr["epochs"] + 1):
        if tr["batch_size"]:
            order = batch_rng.permutation(len(train))
            chunks = [order[s:s + tr["batch_size"]] for s in range(0, len(train), tr["batch_size"])]
            batches = [(sub := train.subset(c), build_graph(reg, sub)) for c in chunks]
        else:
            batches = [(train, train_graph)]
        for batch in batches:
            try:
                loss, grads = dc.evaluate_with_gradients(model.params, loss_fn, batch)
                step(model.params, grads, state)
            except dc.NonFiniteError as exc:
                raise TrainingDiverged(epoch, exc) from exc
        obj, nll = validate()
        history.append((epoch, loss, obj, nll))
        score = obj if tr["selection"] == "regularized" else nll
        if np.isfinite(score) and score < best[0]:
            best = (score, epoch, model.state())
    model.load_state(best[2])
    rid = run_id_for(cfg, seed)
    records = evaluate_records(model, splits, cfg, seed, rid)
    records.append(_record(cfg, seed, rid, "val", "best_epoch", best[1]))
    return TrainResult(model, records, best[1], history, splits, rid)


def _record(cfg, seed, rid, split_name, metric, value) -> ExperimentRecord:
    reg = cfg["regularizer"]
    return ExperimentRecord(method=reg["method"], alpha=reg["alpha"], beta=reg["beta"],
                            k_neighbors=reg["k_neighbors"], seed=seed, split=split_name,
                            metric=metric, value=float(value), pooling=reg["pooling"], run_id=rid)


def evaluate_records(model: Mlp, splits: Splits, cfg: dict, seed: int, rid: str) -> list:
    reg = RegularizerConfig(**cfg["regularizer"])
    records = []
    for name in ("train", "val", "test"):
        ds = getattr(splits, name)
        # regression metrics are reported in raw target units
        shift = splits.y_log_scale
        records.append(_record(cfg, seed, rid, name, "nll", mean_nll(model, ds) + shift))
        if model.task == "regression":
            scale = 1.0 if splits.stats is None or splits.stats.y_std is None \
                else float(np.mean(splits.stats.y_std ** 2))
            err = mse(model, ds) * scale
            records.append(_record(cfg, seed, rid, name, "mse", err))
            records.append(_record(cfg, seed, rid, name, "rmse", np.sqrt(err)))
        else:
            records.append(_record(cfg, seed, rid, name, "accuracy", accuracy(model, ds)))
        if model.spec.embedding is not None:
            val = mean_nll(model, ds, "mc", cfg["training"]["eval_mc_samples"],
                           np.random.default_rng([seed, 3]))
            records.append(_record(cfg, seed, rid, name, "nll_mc", val + shift))
    reg_val = _objective(model, splits.val, build_graph(reg, splits.val), reg, [seed, 1])
    records.append(_record(cfg, seed, rid, "val", "objective", float(reg_val.value)))
    return records


# -- results files ------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def record_rows(records) -> list[list[str]]:
    return [[r.run_id, r.method, r.pooling, _fmt(r.alpha), _fmt(r.beta), str(r.k_neighbors),
             str(r.seed), r.split, r.metric, _fmt(r.value)] for r in records]


def read_results(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_rows(fh, rows) -> None:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    fh.write(buf.getvalue())
    fh.flush()


def save_run_artifacts(result: TrainResult, cfg: dict, seed: int, out_dir: Path) -> None:
    ckpt_dir = Path(out_dir) / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, ckpt_dir / f"{result.run_id}.ckpt")
    meta = {"config": cfg, "seed": seed, "best_epoch": result.best_epoch}
    stats = result.splits.stats
    if stats is not None:
        meta["standardizer"] = {k: (np.asarray(v).tolist() if v is not None else None)
                                for k, v in asdict(stats).items()}
    (ckpt_dir / f"{result.run_id}.json").write_text(json.dumps(meta, indent=1, sort_keys=True, default=str))


# -- sweeps -------------------------------------------------------------------------

SWEEP_KEYS = ("method", "pooling", "alpha", "beta", "k_neighbors", "mc_samples", "criterion",
              "label_mode", "mix_layer")


def expand_sweep(cfg: dict) -> list[tuple[dict, int]]:
    """Cartesian product of the grid with the seed list."""
    grid = {k: v for k, v in cfg.get("sweep", {}).items() if k != "seed"}
    unknown = set(grid) - set(SWEEP_KEYS)
    if unknown:
        raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
    seeds = cfg["sweep"].get("seed", cfg["training"]["seeds"])
    keys = list(grid)
    jobs = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        run_cfg = copy.deepcopy(cfg)
        run_cfg["sweep"] = {}
        for k, v in zip(keys, combo):
            run_cfg["regularizer"][k] = v
        validate_config(run_cfg)
        for seed in seeds:
            jobs.append((run_cfg, int(seed)))
    if not jobs:
        raise ConfigError("sweep grid is empty")
    return jobs


def _run_job(job):
    run_cfg, seed, out_dir, save = job
    rid = run_id_for(run_cfg, seed)
    try:
        result = run_train(run_cfg, seed)
        if save:
            save_run_artifacts(result, run_cfg, seed, out_dir)
        return rid, record_rows(result.records), None
    except Exception as exc:  # a failed run is recorded, the sweep continues
        reg = run_cfg["regularizer"]
        epoch = getattr(exc, "epoch", -1)
        row = [rid, reg["method"], reg["pooling"], _fmt(reg["alpha"]), _fmt(reg["beta"]),
               str(reg["k_neighbors"]), str(seed), "train", "failed", _fmt(float(epoch))]
        return rid, [row], f"{type(exc).__name__}: {exc}"


@dataclass(frozen=True)
class SweepSummary:
    path: Path
    completed: int
    skipped: int
    failed: int


def run_sweep(cfg: dict, out_dir=None, save_checkpoints: bool = True) -> SweepSummary:
    """Run every grid point and seed, appending to ``results.csv``.

    Runs whose ``run_id`` already appears in the file are skipped, so an
    interrupted sweep resumes where it stopped.
    """
    out_dir = Path(out_dir or cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "results.csv"
    done = set()
    if path.exists() and path.stat().st_size > 0:
        done = {row["run_id"] for row in read_results(path)}
    else:
        path.write_text(",".join(RESULTS_HEADER) + "\n")
    jobs = [(c, s, out_dir, save_checkpoints) for c, s in expand_sweep(cfg)
            if run_id_for(c, s) not in done]
    log.info("%d runs to do, %d already present", len(jobs), len(done))
    workers = int(cfg.get("workers", 1))
    failed = 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        if workers > 1:
            import multiprocessing as mp
            with mp.get_context("spawn").Pool(workers) as pool:
                outcomes = pool.imap_unordered(_run_job, jobs)
                for rid, rows, err in outcomes:
                    failed += _log_job(rid, err)
                    write_rows(fh, rows)
        else:
            for job in jobs:
                rid, rows, err = _run_job(job)
                failed += _log_job(rid, err)
                write_rows(fh, rows)
    return SweepSummary(path, len(jobs) - failed, len(done), failed)


def _log_job(rid, err) -> int:
    if err:
        log.warning("run %s failed: %s", rid, err)
        return 1
    log.info("run %s done", rid)
    return 0


# -- generation and plot export ---------------------------------------------------------

def run_generate(cfg: dict, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    d = cfg["dataset"]
    seed = d["seed"] if d["seed"] is not None else cfg["training"]["seeds"][0]
    paths = []
    if d["kind"] == "toy-regression":
        train, test = gen_toy_regression(d["n_train"], d["n_test"], seed=seed)
        pairs = [("toy_regression_train", train), ("toy_regression_test", test)]
    elif d["kind"] == "toy-rings":
        pairs = [("toy_rings_train", gen_toy_rings(d["n_train"], seed=seed)),
                 ("toy_rings_test", gen_toy_rings(d["n_test"], seed=seed + 7919))]
    else:
        raise ConfigError("generate only handles the synthetic datasets")
    for stem, ds in pairs:
        p = out_dir / f"{stem}_seed{seed}.csv"
        save_csv(ds, p)
        paths.append(p)
    return paths


def _load_run(ckpt_dir: Path, rid: str):
    ckpt = ckpt_dir / f"{rid}.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    meta = json.loads((ckpt_dir / f"{rid}.json").read_text())
    return load_checkpoint(ckpt), meta


Z975 = 1.959963984540054


def regression_band(model: Mlp, x_grid: np.ndarray, meta: dict) -> np.ndarray:
    """Rows ``(x, mean, lower 2.5%, upper 97.5%)`` in raw units."""
    std = meta.get("standardizer")
    x_in = x_grid[:, None]
    if std:
        x_in = (x_in - np.asarray(std["x_mean"])) / np.asarray(std["x_std"])
    dens = model.forward(x_in)
    mean, sd = dens.mean.value[:, 0], np.sqrt(dens.var.value[:, 0])
    if std and std.get("y_mean") is not None:
        mean = mean * std["y_std"][0] + std["y_mean"][0]
        sd = sd * std["y_std"][0]
    return np.stack([x_grid, mean, mean - Z975 * sd, mean + Z975 * sd], axis=1)


def run_export_plots(results_path, kind: str = "auto", out_dir=None, grid_points: int = 200,
                     x_range=(-6.0, 6.0)) -> list[Path]:
    """Write plot-ready CSV tables for every run listed in a results file."""
    results_path = Path(results_path)
    base = results_path.parent
    out_dir = Path(out_dir) if out_dir else base / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    run_ids = sorted({r["run_id"] for r in read_results(results_path) if r["metric"] != "failed"})
    written = []
    for rid in run_ids:
        model, meta = _load_run(base / "checkpoints", rid)
        task = model.task
        table = "density" if task == "regression" else "boundary"
        if kind not in ("auto", table):
            continue
        path = out_dir / f"{rid}_{table}.csv"
        if task == "regression":
            rows = regression_band(model, np.linspace(*x_range, grid_points), meta)
            header = ["x", "mean", "band_lower", "band_upper"]
        else:
            g = np.linspace(x_range[0] * 0.6, x_range[1] * 0.6, int(np.sqrt(grid_points * 50)))
            gx, gy = np.meshgrid(g, g)
            pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
            std = meta.get("standardizer")
            pts_in = (pts - np.asarray(std["x_mean"])) / np.asarray(std["x_std"]) if std else pts
            probs = model.forward(pts_in).probs
            rows = np.concatenate([pts, probs], axis=1)
            header = ["x0", "x1"] + [f"p{k}" for k in range(probs.shape[1])]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows([[repr(float(v)) for v in row] for row in rows])
        written.append(path)
    return written


def run_eval(cfg: dict, checkpoint, seed: int) -> list[ExperimentRecord]:
    model = load_checkpoint(checkpoint)
    splits = prepare_data(cfg, seed)
    rid = Path(checkpoint).stem
    return evaluate_records(model, splits, cfg, seed, rid)


def cpu_count() -> int:
    return os.cpu_count() or 1
