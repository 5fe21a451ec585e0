"""``flexipatch <verb> [--config PATH] [--set key=value]... [--out DIR] [--seed N]``

Verbs: gen, train, eval, rollout, spectra, ablate, compare. Every run writes
``manifest.json`` (resolved config, code version, seed, status) into the
output directory before producing anything else, and marks it complete only
after all outputs are written.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
Thread count comes from ``FLEXIPATCH_THREADS`` unless ``runtime.deterministic``
is set, which forces one thread.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, fileio, metrics
from .pdegen import DATASET_FORMAT, PDEParams, TrajectoryDataset, generate_dataset
from .processor import ModelConfig, SurrogateModel
from .rollout import eval_starts, evaluate_rollout, make_schedule, parse_schedule
from .tensor import deterministic, set_num_threads, threads_from_env
from .training import NumericalError, TrainConfig, train

VERBS = ("gen", "train", "eval", "rollout", "spectra", "ablate", "compare")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _dataclass_defaults(cls, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        v = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


DEFAULTS: dict = {
    "seed": 0,
    "data": {**_dataclass_defaults(PDEParams), "n_traj": 40, "path": None},
    "model": _dataclass_defaults(ModelConfig),
    "train": _dataclass_defaults(TrainConfig, skip=("seed", "checkpoint")),
    "eval": {"sizes": None, "split": "test", "n_starts": 4, "batch": 8},
    "rollout": {"steps": 10, "schedule": "cyclic", "phase": 0, "split": "test", "n_starts": 2, "batch": 8},
    "spectra": {"rollout": None, "probe_sizes": [16], "field": 0},
    "ablate": {
        "study": "omit",
        "base_sizes": [4, 8, 16],
        "omit_size": 8,
        "schedules": ["cyclic", "random:0", "random:1", "random:2"],
    },
    "compare": {"runs": []},
    "paths": {"checkpoint": None},
    "runtime": {"deterministic": True},
}


# ---------------------------------------------------------------- config


def _coerce(default, value):
    """YAML 1.1 reads ``3e-4`` as a string; accept it where the default is a float."""
    if isinstance(default, float) and isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{where}{k}"
        if k not in base:
            raise ConfigError(f"{key}: unknown key (allowed: {', '.join(sorted(base))})")
        if isinstance(base[k], dict) and base[k] and not k.endswith("dist"):
            if not isinstance(v, dict):
                raise ConfigError(f"{key}: expected a mapping, got {type(v).__name__}")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = _coerce(base[k], v)
    return out


def _set(cfg: dict, dotted: str, raw: str) -> None:
    parts = dotted.split(".")
    node = cfg
    for i, p in enumerate(parts[:-1]):
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"{'.'.join(parts[: i + 1])}: not a config section")
        node = node[p]
    leaf = parts[-1]
    if leaf not in node:
        raise ConfigError(f"{dotted}: unknown key")
    try:
        value = yaml.safe_load(raw) if raw != "" else None
    except yaml.YAMLError as e:
        raise ConfigError(f"{dotted}: cannot parse value {raw!r}: {e}") from None
    if isinstance(value, str) and "," in value and isinstance(node[leaf], (list, type(None))):
        value = [yaml.safe_load(x) for x in value.split(",") if x]
    node[leaf] = _coerce(node[leaf], value)


def load_config(path: str | None, overrides: list[str], seed: int | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        text = Path(path).read_text()
        try:
            user = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        if "config" in user and "verb" in user:  # a manifest
            user = user["config"]
        cfg = _merge(cfg, user)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set(cfg, k.strip(), v.strip())
    if seed is not None:
        cfg["seed"] = seed
    validate_config(cfg)
    return cfg


def _build(section: str, cls, values: dict):
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"{section}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"{section}: {e}") from None


def pde_params(cfg) -> PDEParams:
    d = {k: v for k, v in cfg["data"].items() if k not in ("n_traj", "path")}
    return _build("data", PDEParams, d)


def model_config(cfg) -> ModelConfig:
    return _build("model", ModelConfig, dict(cfg["model"]))


def train_config(cfg, **extra) -> TrainConfig:
    return _build("train", TrainConfig, {**cfg["train"], "seed": cfg["seed"], **extra})


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed: must be a non-negative integer, got {cfg['seed']!r}")
    pde_params(cfg)
    model_config(cfg)
    train_config(cfg)
    n = cfg["data"]["n_traj"]
    if not isinstance(n, int) or n < 10:
        raise ConfigError(f"data.n_traj: need an integer >= 10 for an 80/10/10 split, got {n!r}")
    for key in ("eval.n_starts", "eval.batch", "rollout.steps", "rollout.n_starts", "rollout.batch"):
        sec, k = key.split(".")
        v = cfg[sec][k]
        if not isinstance(v, int) or v < 1:
            raise ConfigError(f"{key}: must be a positive integer, got {v!r}")
    for sec in ("eval", "rollout"):
        if cfg[sec]["split"] not in ("train", "valid", "test"):
            raise ConfigError(f"{sec}.split: must be train, valid or test, got {cfg[sec]['split']!r}")
    try:
        parse_schedule(str(cfg["rollout"]["schedule"]), 1)
    except ValueError as e:
        raise ConfigError(f"rollout.schedule: {e}") from None
    if cfg["ablate"]["study"] not in ("base_size", "omit", "schedule"):
        raise ConfigError(f"ablate.study: must be base_size, omit or schedule, got {cfg['ablate']['study']!r}")


# ---------------------------------------------------------------- manifest


def code_version() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


class Run:
    """Output directory with a manifest that records completion."""

    def __init__(self, verb: str, cfg: dict, out: Path, argv: list[str]):
        self.out = out
        self.manifest = {
            "verb": verb,
            "config": cfg,
            "seed": cfg["seed"],
            "code_version": code_version(),
            "argv": argv,
            "status": "running",
            "outputs": {},
        }
        out.mkdir(parents=True, exist_ok=True)
        self._write()

    def _write(self):
        metrics.write_json(self.out / "manifest.json", self.manifest)

    def path(self, name: str) -> Path:
        return self.out / name

    def record(self, *names: str) -> None:
        for n in names:
            self.manifest["outputs"][n] = fileio.sha256(self.out / n)

    def finish(self, status: str = "complete", error: str | None = None) -> None:
        self.manifest["status"] = status
        if error:
            self.manifest["error"] = error
        self._write()


# ---------------------------------------------------------------- helpers


def load_data(cfg) -> TrajectoryDataset:
    path = cfg["data"]["path"]
    if path:
        return TrajectoryDataset.load(path)
    return generate_dataset(pde_params(cfg), cfg["data"]["n_traj"], cfg["seed"])


def load_model(cfg) -> SurrogateModel:
    ck = cfg["paths"]["checkpoint"]
    if not ck:
        raise ConfigError("paths.checkpoint: required for this verb")
    return SurrogateModel.load(ck)


def eval_sizes(cfg, model) -> list[int]:
    sizes = cfg["eval"]["sizes"] or list(model.config.size_set)
    if isinstance(sizes, int):
        sizes = [sizes]
    return [int(s) for s in sizes]


def _fit(cfg, dataset, run: Run, tag: str, model_overrides: dict | None = None,
         size_dist: dict | None = None, checkpoint: bool = True):
    mcfg = model_config({"model": {**cfg["model"], **(model_overrides or {})}})
    model = SurrogateModel(mcfg, seed=cfg["seed"])
    ck = run.path(f"{tag}.flxc") if checkpoint else None
    extra = {"checkpoint": str(ck) if ck else None}
    if size_dist is not None:
        extra["size_dist"] = size_dist
    stats = train(model, dataset, train_config(cfg, **extra))
    return model, stats


def _size_rows(model, dataset, cfg, sizes, tag=None) -> tuple[list[dict], list[dict]]:
    """Per-size summary rows and field x step x size metric rows for one-step evaluation."""
    ec = cfg["eval"]
    T = dataset.splits[ec["split"]].shape[1]
    starts = eval_starts(T, model.config.context, 1, ec["n_starts"])
    table, rows = [], []
    for s in sizes:
        res = evaluate_rollout(model, dataset, ec["split"], starts, make_schedule("fixed", 1, size=s), ec["batch"])
        H, W = dataset.params.H, dataset.params.W
        nh, nw = model.tokenizer.grid(H, W, s)
        row = {"size": s, "tokens": nh * nw, "vrmse": float(res.vrmse.mean())}
        if tag is not None:
            row = {"model": tag, **row}
        table.append(row)
        rows.extend(({"model": tag, **r} if tag is not None else r) for r in res.rows())
    return table, rows


def _write_rollout(run: Run, res, prefix: str = "") -> list[str]:
    rows = res.rows()
    names = [f"{prefix}metrics.csv", f"{prefix}horizon_vrmse.csv", f"{prefix}pred.flxd", f"{prefix}truth.flxd"]
    metrics.write_csv(run.path(names[0]), rows)
    sv = res.step_vrmse()
    metrics.write_csv(
        run.path(names[1]),
        [{"step": t, "size": res.schedule.sizes[t], "vrmse": float(v)} for t, v in enumerate(sv)],
    )
    meta = {"schedule": res.schedule.label(), "sizes": list(res.schedule.sizes), "layout": "traj,t,H,W,C"}
    for name, arr in ((names[2], res.pred), (names[3], res.truth)):
        fileio.write(run.path(name), DATASET_FORMAT, {**meta, "kind": name}, {"fields": np.moveaxis(arr, 3, 1).astype("<f4")})
    return names


def spectral_reports(pred: np.ndarray, truth: np.ndarray, probe_sizes, field: int, sizes=None):
    """Per-step and step-averaged residual spectra with spike scores.

    ``pred``/``truth`` are ``(M, T, H, W, C)``.
    """
    H = truth.shape[2]
    spec_rows, spike_rows = [], []
    reports = []
    for t in range(truth.shape[1]):
        rep = metrics.residual_spectrum(pred[:, t, :, :, field], truth[:, t, :, :, field],
                                        {"step": t, "field": field})
        reports.append(rep)
    mean = metrics.SpectralReport(np.mean([r.power for r in reports], axis=0), meta={"step": "all", "field": field})
    for label, rep in [(str(t), r) for t, r in enumerate(reports)] + [("all", mean)]:
        for k, p in zip(rep.k, rep.power):
            spec_rows.append({"step": label, "k": int(k), "power": float(p)})
        for p in probe_sizes:
            spike_rows.append({"step": label, "probe_size": int(p),
                               "score": metrics.harmonic_spike_score(rep, int(p), H)})
    return mean, spec_rows, spike_rows


# ---------------------------------------------------------------- verbs


def cmd_gen(cfg, run: Run) -> None:
    ds = generate_dataset(pde_params(cfg), cfg["data"]["n_traj"], cfg["seed"])
    paths = ds.save(run.out)
    run.record(*[p.name for p in paths.values()])
    metrics.write_json(run.path("checksums.json"), {p.name: fileio.sha256(p) for p in paths.values()})


def cmd_train(cfg, run: Run) -> None:
    ds = load_data(cfg)
    model, stats = _fit(cfg, ds, run, "model")
    stats.write(run.out)
    run.record("model.flxc", "train_stats.csv", "train_stats.json")


def cmd_eval(cfg, run: Run) -> None:
    model = load_model(cfg)
    ds = load_data(cfg)
    table, rows = _size_rows(model, ds, cfg, eval_sizes(cfg, model))
    metrics.write_csv(run.path("eval.csv"), table)
    metrics.write_csv(run.path("metrics.csv"), rows)
    run.record("eval.csv", "metrics.csv")


def cmd_rollout(cfg, run: Run) -> None:
    model = load_model(cfg)
    ds = load_data(cfg)
    rc = cfg["rollout"]
    sched = parse_schedule(str(rc["schedule"]), rc["steps"], rc["phase"])
    T = ds.splits[rc["split"]].shape[1]
    starts = eval_starts(T, model.config.context, rc["steps"], rc["n_starts"])
    res = evaluate_rollout(model, ds, rc["split"], starts, sched, rc["batch"])
    names = _write_rollout(run, res)
    sc = cfg["spectra"]
    _, spec_rows, spike_rows = spectral_reports(
        np.moveaxis(res.pred, 3, 1), np.moveaxis(res.truth, 3, 1), sc["probe_sizes"], sc["field"]
    )
    metrics.write_csv(run.path("spectra.csv"), spec_rows)
    metrics.write_csv(run.path("spikes.csv"), spike_rows)
    run.record(*names, "spectra.csv", "spikes.csv")


def cmd_spectra(cfg, run: Run) -> None:
    sc = cfg["spectra"]
    src = sc["rollout"]
    if not src:
        raise ConfigError("spectra.rollout: directory of a rollout run is required")
    src = Path(src)
    pmeta, parr = fileio.read(src / "pred.flxd", DATASET_FORMAT)
    _, tarr = fileio.read(src / "truth.flxd", DATASET_FORMAT)
    mean, spec_rows, spike_rows = spectral_reports(
        parr["fields"].astype(np.float64), tarr["fields"].astype(np.float64), sc["probe_sizes"], sc["field"]
    )
    metrics.write_csv(run.path("spectra.csv"), spec_rows)
    metrics.write_csv(run.path("spikes.csv"), spike_rows)
    summary = {
        "source": str(src),
        "schedule": pmeta.get("schedule"),
        "spike_score": {str(p): mean.scores[int(p)] for p in sc["probe_sizes"]},
    }
    metrics.write_json(run.path("spectra.json"), summary)
    run.record("spectra.csv", "spikes.csv", "spectra.json")


def cmd_ablate(cfg, run: Run) -> None:
    ac = cfg["ablate"]
    ds = load_data(cfg)
    study = ac["study"]
    rows, metric_rows = [], []
    if study == "base_size":
        for kb in ac["base_sizes"]:
            model, _ = _fit(cfg, ds, run, f"kbase{kb}", {"k_base": int(kb)}, checkpoint=False)
            t, m = _size_rows(model, ds, cfg, eval_sizes(cfg, model), tag=f"k_base={kb}")
            rows += t
            metric_rows += m
    elif study == "omit":
        sizes = [int(s) for s in cfg["model"]["size_set"]]
        omit = int(ac["omit_size"])
        if omit not in sizes:
            raise ConfigError(f"ablate.omit_size: {omit} is not in model.size_set {sizes}")
        kept = [s for s in sizes if s != omit]
        for tag, dist in (("all", None), (f"omit{omit}", {s: 1.0 / len(kept) for s in kept})):
            model, _ = _fit(cfg, ds, run, tag, size_dist=dist, checkpoint=False)
            t, m = _size_rows(model, ds, cfg, sizes, tag=tag)
            rows += t
            metric_rows += m
    else:
        model = load_model(cfg) if cfg["paths"]["checkpoint"] else _fit(cfg, ds, run, "model")[0]
        rc = cfg["rollout"]
        T = ds.splits[rc["split"]].shape[1]
        starts = eval_starts(T, model.config.context, rc["steps"], rc["n_starts"])
        for text in ac["schedules"]:
            sched = parse_schedule(str(text), rc["steps"], rc["phase"])
            res = evaluate_rollout(model, ds, rc["split"], starts, sched, rc["batch"])
            sv = res.step_vrmse()
            rows.append({"schedule": sched.label(), "final_vrmse": float(sv[-1]), "mean_vrmse": float(sv.mean())})
            metric_rows += [{"schedule": sched.label(), **r} for r in res.rows()]
    metrics.write_csv(run.path("ablation.csv"), rows)
    metrics.write_csv(run.path("metrics.csv"), metric_rows)
    metrics.write_json(run.path("ablation.json"), {"study": study, "rows": rows})
    run.record("ablation.csv", "metrics.csv", "ablation.json")


def cmd_compare(cfg, run: Run) -> None:
    runs = cfg["compare"]["runs"]
    if isinstance(runs, str):
        runs = [runs]
    if not runs:
        raise ConfigError("compare.runs: list at least one run directory")
    report, rows = [], []
    for d in runs:
        d = Path(d)
        man = json.loads((d / "manifest.json").read_text())
        entry = {"run": str(d), "verb": man["verb"], "seed": man["seed"], "status": man["status"],
                 "code_version": man["code_version"]}
        report.append(entry)
        for name in ("eval.csv", "horizon_vrmse.csv", "ablation.csv"):
            f = d / name
            if f.exists():
                with open(f, newline="") as fh:
                    for r in csv.DictReader(fh):
                        rows.append({"run": str(d), "verb": man["verb"], "table": name,
                                     "row": json.dumps(r, sort_keys=True)})
    metrics.write_csv(run.path("compare.csv"), rows)
    metrics.write_json(run.path("compare.json"), {"runs": report})
    run.record("compare.csv", "compare.json")


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "spectra": cmd_spectra,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
}


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flexipatch", description="Compute-elastic patch tokenization experiments")
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", help="YAML config file (or a previous run's manifest.json)")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config value, e.g. --set model.attention=axial")
    ap.add_argument("--out", default="runs/latest", help="output directory")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--sizes", help="shorthand for --set eval.sizes=...")
    ap.add_argument("--schedule", help="shorthand for --set rollout.schedule=...")
    ap.add_argument("--steps", type=int, help="shorthand for --set rollout.steps=...")
    ap.add_argument("--checkpoint", help="shorthand for --set paths.checkpoint=...")
    ap.add_argument("--data", help="shorthand for --set data.path=...")
    return ap


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    overrides = list(args.overrides)
    for flag, key in (("sizes", "eval.sizes"), ("schedule", "rollout.schedule"), ("steps", "rollout.steps"),
                      ("checkpoint", "paths.checkpoint"), ("data", "data.path")):
        v = getattr(args, flag)
        if v is not None:
            overrides.append(f"{key}={v}")
    try:
        cfg = load_config(args.config, overrides, args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    try:
        ctx = deterministic() if cfg["runtime"]["deterministic"] else set_num_threads(threads_from_env())
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        r = Run(args.verb, cfg, Path(args.out), argv)
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    try:
        with ctx:
            COMMANDS[args.verb](cfg, r)
    except ConfigError as e:
        r.finish("failed", str(e))
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        r.finish("failed", str(e))
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, fileio.FormatError) as e:
        r.finish("failed", str(e))
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        r.finish("failed", str(e))
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    r.finish()
    return EXIT_OK


def main() -> None:
    sys.exit(run())
