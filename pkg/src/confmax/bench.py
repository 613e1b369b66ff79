"""Benchmark studies behind the command line: configuration, grid cells, CSV and manifests.

Every study expands into independent cells (one adaptation run each).  Cells
run serially or in a process pool and their rows are merged in sorted key
order, so the CSV bytes do not depend on the worker count.
"""

from __future__ import annotations

import configparser
import csv
import datetime as dt
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import (
    CORRUPTIONS, CorruptionSpec, Dataset, SubsetPlan, apply_corruption, default_severity_table,
    load_idx, subset_split, synth_dataset,
)
from .engine import (
    METHODS, AdaptableModel, AdaptationAborted, AdaptConfig, PretrainConfig, adapt, load_checkpoint,
    pretrain, save_checkpoint,
)
from .errors import ConfigError, ContractError
from .layers import ToyCNN
from .losses import CONF_LOSSES
from .transform import ssim_per_image

SCHEMA_VERSION = 1
SCHEMAS = {
    "pretrain": ("epoch", "train_loss", "test_accuracy", "test_accuracy_batch_stats"),
    "adapt": ("method", "corruption", "severity", "seed", "epoch", "accuracy", "loss", "l_div", "l_conf",
              "unique_classes", "mean_pred_entropy", "lr", "status"),
    "adapt_summary": ("method", "corruption", "severity", "epoch", "accuracy_mean", "accuracy_std", "runs"),
    "losscape": ("p", "l_ent", "l_pl", "l_hlr", "l_slr", "d_ent", "d_pl", "d_hlr", "d_slr"),
    "kappa": ("arm", "method", "kappa", "use_div", "corruption", "severity", "seed", "epoch", "accuracy",
              "unique_classes", "l_div", "l_conf", "status"),
    "subset": ("fraction_kind", "fraction", "method", "corruption", "severity", "seed", "n_adapt", "epoch",
               "accuracy", "unique_classes", "status"),
    "clean": ("method", "seed", "epoch", "accuracy", "delta", "unique_classes", "status"),
    "itstudy": ("corruption", "severity", "seed", "input_transform", "epoch", "accuracy", "ssim_corrupted",
                "ssim_transformed", "status"),
}

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PARTIAL = 0, 2, 3, 4
DELTA_METHODS = ("pl", "hlr", "slr")


# ---------------------------------------------------------------------------
# configuration


def _split_list(text: str) -> list[str]:
    return [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]


@dataclass(frozen=True)
class Protocol:
    """Adaptation settings shared by all studies; ``None`` keeps the method default."""

    epochs: int = 5
    batch_size: int = 64
    adam_lr: Optional[float] = None
    sgd_lr: Optional[float] = None
    kappa: float = 0.9
    delta: Optional[float] = None
    input_transform: str = "auto"

    def config(self, method: str, seed: int, **overrides) -> AdaptConfig:
        base = AdaptConfig(method=method)
        lr = self.adam_lr if base.optimizer == "adam" else self.sgd_lr
        it = {"auto": None, "on": True, "off": False}[self.input_transform]
        # delta weighs the confidence term of the likelihood-ratio family; TENT+ keeps its own weighting
        kw = dict(method=method, seed=seed, epochs=self.epochs, batch_size=self.batch_size, kappa=self.kappa,
                  delta=self.delta if method in DELTA_METHODS else None, use_input_transform=it)
        if lr is not None and method != "no-adapt":
            kw["lr0"] = lr
        kw.update(overrides)
        return AdaptConfig(**kw)


@dataclass
class BenchConfig:
    parser: configparser.ConfigParser
    sources: list[str]
    seeds: list[int]
    checkpoint: str
    protocol: Protocol
    pretrain: PretrainConfig
    pretrain_data: dict
    data: dict
    section_dirs: dict = field(default_factory=dict)

    def get(self, section: str, key: str) -> str:
        return self.parser.get(section, key, fallback="").strip()

    def methods(self, section: str) -> list[str]:
        names = _split_list(self.get(section, "methods"))
        bad = [m for m in names if m not in METHODS]
        if bad:
            raise ConfigError(f"[{section}] unknown methods {bad}; expected some of {METHODS}")
        return names

    def corruptions(self, section: str) -> list[str]:
        names = _split_list(self.get(section, "corruptions"))
        bad = [c for c in names if c not in CORRUPTIONS]
        if bad:
            raise ConfigError(f"[{section}] unknown corruptions {bad}")
        return names

    def ints(self, section: str, key: str) -> list[int]:
        return [_to_int(v, section, key) for v in _split_list(self.get(section, key))]

    def floats(self, section: str, key: str) -> list[float]:
        return [_to_float(v, section, key) for v in _split_list(self.get(section, key))]

    def echo(self) -> dict:
        return {s: dict(self.parser.items(s)) for s in self.parser.sections()}


def _to_int(v: str, section: str, key: str) -> int:
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: {v!r} is not an integer") from None


def _to_float(v: str, section: str, key: str) -> float:
    try:
        out = float(v)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: {v!r} is not a number") from None
    if not math.isfinite(out):
        raise ConfigError(f"[{section}] {key}: {v!r} is not finite")
    return out


def _opt_float(parser, section, key) -> Optional[float]:
    raw = parser.get(section, key, fallback="").strip()
    return None if raw == "" else _to_float(raw, section, key)


def load_config(path: Optional[str] = None, seeds: Optional[str] = None) -> BenchConfig:
    """Packaged defaults overlaid with ``path``; ``seeds`` (comma list) overrides [run] seeds."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.read_string(resources.files("confmax").joinpath("bench.ini").read_text(encoding="utf-8"),
                       source="<defaults>")
    sources = ["<defaults>"]
    section_dirs: dict[str, Path] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        overlay = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            overlay.read(p, encoding="utf-8")
            parser.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for section in overlay.sections():
            section_dirs[section] = p.resolve().parent
        sources.append(str(p))

    known = {"run", "pretrain", "data", "adapt", "losscape", "kappa", "subset", "clean", "itstudy"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")

    seed_text = seeds if seeds is not None else parser.get("run", "seeds")
    seed_list = [_to_int(s, "run", "seeds") for s in _split_list(seed_text)]
    if not seed_list:
        raise ConfigError("no seeds given")

    a = "adapt"
    it = parser.get(a, "input_transform").strip() or "auto"
    if it not in ("auto", "on", "off"):
        raise ConfigError(f"[adapt] input_transform must be auto, on or off, got {it!r}")
    protocol = Protocol(
        epochs=_to_int(parser.get(a, "epochs"), a, "epochs"),
        batch_size=_to_int(parser.get(a, "batch_size"), a, "batch_size"),
        adam_lr=_opt_float(parser, a, "adam_lr"),
        sgd_lr=_opt_float(parser, a, "sgd_lr"),
        kappa=_to_float(parser.get(a, "kappa"), a, "kappa"),
        delta=_opt_float(parser, a, "delta"),
        input_transform=it,
    )
    try:
        protocol.config("slr", 0)
    except ContractError as exc:
        raise ConfigError(f"[adapt] {exc}") from None

    pt = "pretrain"
    pre = PretrainConfig(
        epochs=_to_int(parser.get(pt, "epochs"), pt, "epochs"),
        batch_size=_to_int(parser.get(pt, "batch_size"), pt, "batch_size"),
        lr=_to_float(parser.get(pt, "lr"), pt, "lr"),
        seed=_to_int(parser.get(pt, "seed"), pt, "seed"),
        target_accuracy=_to_float(parser.get(pt, "target_accuracy"), pt, "target_accuracy"),
    )
    pre_data = {k: _to_int(parser.get(pt, k), pt, k)
                for k in ("train_seed", "train_per_class", "test_seed", "test_per_class")}

    d = "data"
    source = parser.get(d, "source").strip()
    if source not in ("synthetic", "idx"):
        raise ConfigError(f"[data] source must be synthetic or idx, got {source!r}")
    base = section_dirs.get(d, Path.cwd())
    data = {"source": source,
            "seed": _to_int(parser.get(d, "seed"), d, "seed"),
            "n_per_class": _to_int(parser.get(d, "n_per_class"), d, "n_per_class"),
            "images": str(base / parser.get(d, "images")) if parser.get(d, "images").strip() else "",
            "labels": str(base / parser.get(d, "labels")) if parser.get(d, "labels").strip() else ""}
    if source == "idx" and not (data["images"] and data["labels"]):
        raise ConfigError("[data] source = idx needs images and labels paths")

    ckpt = parser.get("run", "checkpoint").strip()
    if not ckpt:
        raise ConfigError("[run] checkpoint is empty")
    return BenchConfig(parser, sources, seed_list, ckpt, protocol, pre, pre_data, data,
                       {k: str(v) for k, v in section_dirs.items()})


def checkpoint_path(cfg: BenchConfig, out_dir: Path) -> Path:
    """Relative checkpoint paths live in the output directory."""
    p = Path(cfg.checkpoint)
    return p if p.is_absolute() else out_dir / p


# ---------------------------------------------------------------------------
# worker context and cells


@dataclass
class Context:
    checkpoint: bytes
    data: dict
    protocol: Protocol
    _model: Optional[AdaptableModel] = None
    _clean: Optional[Dataset] = None
    _targets: dict = field(default_factory=dict)

    @property
    def model(self) -> AdaptableModel:
        if self._model is None:
            self._model = load_checkpoint(self.checkpoint)
        return self._model

    @property
    def clean(self) -> Dataset:
        if self._clean is None:
            if self.data["source"] == "idx":
                self._clean = load_idx(self.data["images"], self.data["labels"])
            else:
                self._clean = synth_dataset(self.data["seed"], self.data["n_per_class"], "test")
        return self._clean

    def target(self, corruption: str, severity: int, seed: int) -> Dataset:
        if corruption == "none":
            return self.clean
        key = (corruption, severity, seed)
        if key not in self._targets:
            # one corrupted set per (kind, severity, seed); a small cache is enough
            if len(self._targets) > 4:
                self._targets.clear()
            self._targets[key] = apply_corruption(self.clean, CorruptionSpec(corruption, severity, seed))
        return self._targets[key]


_CTX: Optional[Context] = None


def _init_worker(ctx: Context) -> None:
    global _CTX
    _CTX = ctx


def run_adaptation(model: AdaptableModel, target: Dataset, cfg: AdaptConfig,
                   eval_set: Optional[Dataset] = None):
    """Reset, adapt, and return (trace, status); an aborted run keeps its partial trace."""
    model.reset()
    try:
        _, trace = adapt(model, target, cfg, eval_set)
        return trace, "ok"
    except AdaptationAborted as exc:
        return exc.trace, "aborted"


def _cell_adapt(ctx: Context, method: str, corruption: str, severity: int, seed: int) -> list[dict]:
    cfg = ctx.protocol.config(method, seed)
    trace, status = run_adaptation(ctx.model, ctx.target(corruption, severity, seed), cfg)
    return [{"method": method, "corruption": corruption, "severity": severity, "seed": seed, **r,
             "status": status} for r in trace.records]


def _cell_kappa(ctx: Context, arm: str, method: str, kappa: float, use_div: bool, corruption: str,
                severity: int, seed: int) -> list[dict]:
    cfg = ctx.protocol.config(method, seed, kappa=kappa, use_div=use_div)
    trace, status = run_adaptation(ctx.model, ctx.target(corruption, severity, seed), cfg)
    return [{"arm": arm, "method": method, "kappa": kappa, "use_div": int(use_div), "corruption": corruption,
             "severity": severity, "seed": seed, "epoch": r["epoch"], "accuracy": r["accuracy"],
             "unique_classes": r["unique_classes"], "l_div": r["l_div"], "l_conf": r["l_conf"],
             "status": status} for r in trace.records]


def _cell_subset(ctx: Context, kind: str, fraction: float, method: str, corruption: str, severity: int,
                 seed: int) -> list[dict]:
    full = ctx.target(corruption, severity, seed)
    plan = SubsetPlan(fraction, 1.0, seed) if kind == "class" else SubsetPlan(1.0, fraction, seed)
    sub, _ = subset_split(full, plan)
    # small subsets cannot fill a batch; shrink the batch rather than pad
    cfg = ctx.protocol.config(method, seed, batch_size=min(ctx.protocol.batch_size, len(sub)))
    trace, status = run_adaptation(ctx.model, sub, cfg, eval_set=full)
    return [{"fraction_kind": kind, "fraction": fraction, "method": method, "corruption": corruption,
             "severity": severity, "seed": seed, "n_adapt": len(sub), "epoch": r["epoch"],
             "accuracy": r["accuracy"], "unique_classes": r["unique_classes"], "status": status}
            for r in trace.records]


def _cell_clean(ctx: Context, method: str, seed: int) -> list[dict]:
    cfg = ctx.protocol.config(method, seed)
    trace, status = run_adaptation(ctx.model, ctx.clean, cfg)
    base = trace.records[0]["accuracy"]
    return [{"method": method, "seed": seed, "epoch": r["epoch"], "accuracy": r["accuracy"],
             "delta": r["accuracy"] - base, "unique_classes": r["unique_classes"], "status": status}
            for r in trace.records]


def transformed_ssim(model: AdaptableModel, clean: Dataset, corrupted: Dataset, batch_size: int = 64) -> float:
    """Mean SSIM(clean, d(corrupted)) with d's output clipped to the valid pixel range."""
    scores = []
    for start in range(0, len(clean), batch_size):
        sl = slice(start, start + batch_size)
        out = model.transform(Tensor(corrupted.images[sl])).data
        scores.append(ssim_per_image(clean.images[sl], np.clip(out, 0.0, 1.0)))
    return float(np.concatenate(scores).mean())


def _cell_it(ctx: Context, corruption: str, severity: int, seed: int, use_it: bool) -> list[dict]:
    cfg = ctx.protocol.config("slr", seed, use_input_transform=use_it)
    target = ctx.target(corruption, severity, seed)
    model = ctx.model
    trace, status = run_adaptation(model, target, cfg)
    base = float(ssim_per_image(ctx.clean.images, target.images).mean())
    final = transformed_ssim(model, ctx.clean, target) if use_it else base
    rows = []
    for r in trace.records:
        last = r["epoch"] == trace.records[-1]["epoch"]
        rows.append({"corruption": corruption, "severity": severity, "seed": seed,
                     "input_transform": int(use_it), "epoch": r["epoch"], "accuracy": r["accuracy"],
                     "ssim_corrupted": base, "ssim_transformed": final if last else base,
                     "status": status})
    return rows


CELLS: dict[str, Callable[..., list[dict]]] = {
    "adapt": _cell_adapt, "kappa": _cell_kappa, "subset": _cell_subset, "clean": _cell_clean,
    "itstudy": _cell_it,
}


def _run_cell(cell: tuple) -> list[dict]:
    kind, args = cell
    return CELLS[kind](_CTX, *args)


def run_cells(ctx: Context, cells: list[tuple], workers: int = 1, progress=None) -> list[dict]:
    """Run ``(kind, args)`` cells; the result order is the cell order regardless of ``workers``."""
    out = []
    if workers <= 1:
        _init_worker(ctx)
        for cell in cells:
            out.append(_run_cell(cell))
            if progress:
                progress(cell)
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(ctx,)) as pool:
            for cell, rows in zip(cells, pool.map(_run_cell, cells)):
                out.append(rows)
                if progress:
                    progress(cell)
    return [row for rows in out for row in rows]


def sort_rows(rows: list[dict], key_columns: tuple[str, ...]) -> list[dict]:
    return sorted(rows, key=lambda r: tuple(r[c] for c in key_columns))


# ---------------------------------------------------------------------------
# studies; each returns the rows of its CSV


def adapt_cells(cfg: BenchConfig) -> list[tuple]:
    sevs = cfg.ints("adapt", "severities")
    if not sevs:
        raise ConfigError("[adapt] severities is empty")
    return [("adapt", (m, c, s, seed)) for c in cfg.corruptions("adapt") for s in sevs
            for seed in cfg.seeds for m in cfg.methods("adapt")]


def kappa_cells(cfg: BenchConfig) -> list[tuple]:
    sev = _to_int(cfg.get("kappa", "severity"), "kappa", "severity")
    arms = [(f"kappa={k:g}", k, True) for k in cfg.floats("kappa", "kappas")] + [("no-div", cfg.protocol.kappa, False)]
    return [("kappa", (arm, m, k, div, c, sev, seed)) for c in cfg.corruptions("kappa") for seed in cfg.seeds
            for m in cfg.methods("kappa") for arm, k, div in arms]


def subset_cells(cfg: BenchConfig) -> list[tuple]:
    sev = _to_int(cfg.get("subset", "severity"), "subset", "severity")
    fracs = [("class", f) for f in cfg.floats("subset", "class_fractions")] + \
            [("sample", f) for f in cfg.floats("subset", "sample_fractions")]
    for _, f in fracs:
        if not 0.0 < f <= 1.0:
            raise ConfigError(f"[subset] fraction {f} outside (0, 1]")
    return [("subset", (kind, f, m, c, sev, seed)) for c in cfg.corruptions("subset") for seed in cfg.seeds
            for kind, f in fracs for m in cfg.methods("subset")]


def clean_cells(cfg: BenchConfig) -> list[tuple]:
    return [("clean", (m, seed)) for seed in cfg.seeds for m in cfg.methods("clean")]


def it_cells(cfg: BenchConfig) -> list[tuple]:
    sev = _to_int(cfg.get("itstudy", "severity"), "itstudy", "severity")
    return [("itstudy", (c, sev, seed, it)) for c in cfg.corruptions("itstudy") for seed in cfg.seeds
            for it in (False, True)]


STUDY_KEYS = {
    "adapt": ("method", "corruption", "severity", "seed", "epoch"),
    "kappa": ("arm", "method", "corruption", "severity", "seed", "epoch"),
    "subset": ("fraction_kind", "fraction", "method", "corruption", "severity", "seed", "epoch"),
    "clean": ("method", "seed", "epoch"),
    "itstudy": ("corruption", "severity", "seed", "input_transform", "epoch"),
}
STUDY_CELLS = {"adapt": adapt_cells, "kappa": kappa_cells, "subset": subset_cells, "clean": clean_cells,
               "itstudy": it_cells}


def run_study(name: str, cfg: BenchConfig, checkpoint: bytes, workers: int = 1, progress=None) -> list[dict]:
    cells = STUDY_CELLS[name](cfg)
    ctx = Context(checkpoint, cfg.data, cfg.protocol)
    return sort_rows(run_cells(ctx, cells, workers, progress), STUDY_KEYS[name])


def summarize_adapt(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        if r["status"] == "ok":
            groups.setdefault((r["method"], r["corruption"], r["severity"], r["epoch"]), []).append(r["accuracy"])
    return [{"method": k[0], "corruption": k[1], "severity": k[2], "epoch": k[3],
             "accuracy_mean": float(np.mean(v)), "accuracy_std": float(np.std(v)), "runs": len(v)}
            for k, v in sorted(groups.items())]


def losscape_rows(points: int) -> list[dict]:
    """Binary-logit landscapes over first-class confidence p in (0.5, 1)."""
    if points < 10:
        raise ConfigError("[losscape] points must be >= 10")
    ps = 0.5 + 0.5 * np.arange(1, points + 1) / (points + 1)
    kinds = {"ent": "entropy", "pl": "hard-pl", "hlr": "hlr", "slr": "slr"}
    values = {k: [] for k in kinds}
    grads = {k: [] for k in kinds}
    for p in ps:
        gap = math.log(p / (1.0 - p))
        for short, kind in kinds.items():
            o = ad.parameter([gap, 0.0], "o")
            with Tape() as tape:
                loss = CONF_LOSSES[kind](o)
            g = tape.backward(loss)[o]
            values[short].append(loss.item())
            grads[short].append(float(g[0]))
    rows = []
    for i, p in enumerate(ps):
        row = {"p": float(p)}
        for short in kinds:
            row[f"l_{short}"] = values[short][i] - values[short][-1]
        for short in kinds:
            row[f"d_{short}"] = grads[short][i]
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# pretraining


def pretrain_model(cfg: BenchConfig, log=None) -> tuple[AdaptableModel, list[dict], bool]:
    pd = cfg.pretrain_data
    train = synth_dataset(pd["train_seed"], pd["train_per_class"], "train")
    test = synth_dataset(pd["test_seed"], pd["test_per_class"], "test")
    model = AdaptableModel(ToyCNN(seed=cfg.pretrain.seed))
    history = pretrain(model, train, test, cfg.pretrain, log)
    last = history[-1]
    reached = min(last["test_accuracy"], last["test_accuracy_batch_stats"]) >= cfg.pretrain.target_accuracy
    return model, history, reached


# ---------------------------------------------------------------------------
# output


def write_csv(path: Path, schema: str, rows: list[dict]) -> None:
    columns = SCHEMAS[schema]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(columns)
        for r in rows:
            if set(r) != set(columns):
                raise ContractError(f"{schema} row columns {sorted(r)} do not match schema {columns}")
            writer.writerow([_fmt(r[c]) for c in columns])


def read_csv(path: Path, schema: Optional[str] = None) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if schema is not None and tuple(reader.fieldnames or ()) != SCHEMAS[schema]:
            raise ContractError(f"{path}: header {reader.fieldnames} does not match {schema} schema "
                                f"version {SCHEMA_VERSION}")
        return list(reader)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def constants_hashes() -> dict:
    table = resources.files("confmax").joinpath("corruptions.cfg").read_bytes()
    return {"corruptions.cfg": git_blob_hash(table), "severity_table_version": default_severity_table().version}


def now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(path: Path, *, command: str, cfg: BenchConfig, started: str, outputs: list[Path],
                   status: str, exit_code: int, checkpoint: Optional[bytes] = None, extra=None) -> None:
    manifest = {
        "command": command,
        "schema_version": SCHEMA_VERSION,
        "schemas": {p.stem: list(SCHEMAS[p.stem]) for p in outputs if p.suffix == ".csv" and p.stem in SCHEMAS},
        "config_sources": cfg.sources,
        "config": cfg.echo(),
        "seeds": cfg.seeds,
        "constants": constants_hashes(),
        "checkpoint_hash": git_blob_hash(checkpoint) if checkpoint is not None else None,
        "started": started,
        "finished": now(),
        "outputs": [str(p) for p in outputs],
        "status": status,
        "exit_code": exit_code,
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


__all__ = [
    "SCHEMAS", "SCHEMA_VERSION", "EXIT_OK", "EXIT_CONFIG", "EXIT_DATA", "EXIT_PARTIAL", "Protocol",
    "BenchConfig", "load_config", "checkpoint_path", "Context", "run_adaptation", "run_cells", "run_study",
    "summarize_adapt", "losscape_rows", "pretrain_model", "write_csv", "read_csv", "write_manifest",
    "transformed_ssim", "save_checkpoint", "git_blob_hash",
]
