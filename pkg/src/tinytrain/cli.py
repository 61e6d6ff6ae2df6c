"""``tinytrain`` command line: data, pretraining, compile, profile, search, train, report."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from .data import Dataset, load_dataset, make_task, save_shard
from .executor import INT8, NumericError
from .graph.builder import BackboneConfig, build_backbone
from .graph.serialize import graph_to_dict
from .graph.validate import validate
from .memory import (accumulation_buffer_bytes, analytic_breakdown, lifetimes_csv, naive_schedule,
                     profile_csv, reorder, simulate_peak)
from .model import Model, init_float_params, load_model, quantize_model, save_model
from .search import (ContributionTable, MemoryModel, ProbeConfig, SearchConfig, SearchError,
                     build_contribution_table, evolutionary_search, random_search)
from .sparse import SchemeError, UpdateScheme
from .trainer import OptimizerConfig, TrainState, evaluate, ratio_report, train

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("tinytrain")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

class RunConfig:
    """Parsed YAML config with CLI overrides; relative paths resolve against the config file."""

    def __init__(self, raw: dict, base: Path):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        self.raw, self.base = raw, base

    @classmethod
    def load(cls, path: str | None, overrides: dict) -> "RunConfig":
        raw, base = {}, Path.cwd()
        if path:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file {path} does not exist")
            try:
                raw = yaml.safe_load(p.read_text()) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse {path}: {e}") from e
            base = p.resolve().parent
        cfg = cls(raw, base)
        for k, v in overrides.items():
            if v is not None:
                cfg.raw[k] = v
        cfg.raw.setdefault("seed", 0)
        return cfg

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def hash(self) -> str:
        text = json.dumps(self.raw, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def section(self, name: str) -> dict:
        v = self.raw.get(name) or {}
        if not isinstance(v, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        return v

    def path(self, value, what: str, must_exist: bool = True) -> Path:
        p = Path(value)
        if not p.is_absolute():
            p = self.base / p
        if must_exist and not p.exists():
            raise ConfigError(f"{what} {p} does not exist")
        return p

    def stamp(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "config_hash": self.hash, "seed": self.seed}

    # -------------------------------------------------------------- objects
    def backbone(self) -> BackboneConfig:
        m = {k: v for k, v in self.section("model").items() if k != "checkpoint"}
        if not m:
            m = {"preset": "toy"}
        try:
            bc = BackboneConfig.from_dict(m)
            bc.validate()
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid model section: {e!r}") from e
        return bc

    def dataset(self, section: dict | None = None) -> Dataset:
        d = section if section is not None else self.section("data")
        if "path" not in d:
            raise ConfigError("data.path is required")
        try:
            return load_dataset(self.path(d["path"], "dataset"), d.get("format"))
        except (ValueError, KeyError) as e:
            raise ConfigError(f"cannot load dataset: {e}") from e

    def split(self) -> tuple[Dataset, Dataset]:
        d = self.section("data")
        ds = self.dataset(d)
        frac = float(d.get("val_fraction", 0.25))
        if not 0 < frac < 1:
            raise ConfigError("data.val_fraction must lie in (0, 1)")
        return ds.split(frac, int(d.get("split_seed", self.seed)))

    def model(self, calib: Dataset | None = None) -> Model:
        """Checkpoint when configured, else a seeded freshly initialized quantized backbone."""
        ck = self.section("model").get("checkpoint")
        if ck:
            try:
                return load_model(self.path(ck, "model checkpoint"))
            except (ValueError, KeyError) as e:
                raise ConfigError(f"cannot load model checkpoint: {e}") from e
        bc = self.backbone()
        if calib is not None and calib.num_classes != bc.num_classes:
            bc.num_classes = calib.num_classes
        g = build_backbone(bc)
        if calib is not None and len(calib):
            images = calib.images[:256]
        else:
            rng = np.random.default_rng(self.seed)
            images = rng.integers(0, 256, (16, bc.in_channels, bc.resolution, bc.resolution),
                                  dtype=np.uint8)
        return quantize_model(g, init_float_params(g, self.seed), images)

    def scheme(self, num_layers: int, default: UpdateScheme | None = None) -> UpdateScheme:
        s = self.raw.get("scheme")
        if s is None:
            if default is None:
                raise ConfigError("a scheme is required (--scheme or config 'scheme')")
            return default
        try:
            if isinstance(s, str):
                text = self.path(s, "scheme file").read_text()
                d = json.loads(text)
                d = d.get("scheme", d)
            elif isinstance(s, dict) and s.get("preset"):
                d = _preset_scheme(s["preset"], num_layers).to_json()
            else:
                d = s
            scheme = UpdateScheme.from_json(d)
            scheme.validate(num_layers)
        except (SchemeError, json.JSONDecodeError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid scheme: {e}") from e
        return scheme

    def optimizer(self) -> OptimizerConfig:
        try:
            return OptimizerConfig.from_dict(self.section("optimizer"))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid optimizer section: {e}") from e


def _preset_scheme(name: str, L: int) -> UpdateScheme:
    presets = {"full": UpdateScheme.full(L), "bias-only": UpdateScheme.bias_only(L),
               "classifier-only": UpdateScheme.classifier_only()}
    if name not in presets:
        raise ConfigError(f"unknown scheme preset {name!r}")
    return presets[name]


# ------------------------------------------------------------------ output helpers

def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj: dict):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _comment(cfg: RunConfig) -> str:
    return f"schema_version={SCHEMA_VERSION} config_hash={cfg.hash} seed={cfg.seed}"


def _read_csv(path: Path) -> list[dict]:
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _write_csv(path: Path, header: list[str], rows: list[list], comment: str | None = None):
    with open(path, "w", newline="") as f:
        if comment:
            f.write(f"# {comment}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ------------------------------------------------------------------ commands

def cmd_make_data(cfg: RunConfig, args) -> int:
    """Seeded synthetic source/target shards (a stand-in for real pre-decoded datasets)."""
    out = _out(args)
    s = cfg.section("synthetic")
    res = int(s.get("resolution", 16))
    classes = int(s.get("num_classes", 10))
    spc = int(s.get("samples_per_class", 40))
    src = make_task(classes, 2 * spc, res, seed=1000 + cfg.seed, sigma=1.5, name="source")
    tgt = make_task(classes, spc, res, seed=2000 + cfg.seed, sigma=1.0, name="target")
    save_shard(src, out / "source.tt")
    save_shard(tgt, out / "target.tt")
    _write_json(out / "data.json", {**cfg.stamp(), "source": len(src), "target": len(tgt),
                                    "resolution": res, "num_classes": classes})
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    from .model import pretrain_float

    out = _out(args)
    p = cfg.section("pretrain")
    ds = cfg.dataset(p.get("data") or cfg.section("data"))
    bc = cfg.backbone()
    bc.num_classes = ds.num_classes
    g = build_backbone(bc)
    fp = pretrain_float(g, init_float_params(g, cfg.seed), ds, int(p.get("epochs", 10)),
                        float(p.get("learning_rate", 3e-3)), seed=cfg.seed)
    model = quantize_model(g, fp, ds.images[:256])
    save_model(model, out / "model.tt")
    _write_json(out / "pretrain.json", {**cfg.stamp(), "dataset": ds.name, "samples": len(ds)})
    return EXIT_OK


def _compiled(cfg: RunConfig, model: Model, scheme: UpdateScheme):
    policy = cfg.section("train").get("policy", "magnitude")
    try:
        return model.compile(scheme, policy, cfg.seed)
    except SchemeError as e:
        raise ConfigError(str(e)) from e


def cmd_compile(cfg: RunConfig, args) -> int:
    out = _out(args)
    model = cfg.model()
    scheme = cfg.scheme(model.graph.num_layers, UpdateScheme.full(model.graph.num_layers))
    g = _compiled(cfg, model, scheme)
    problems = validate(g)
    if problems:
        raise ConfigError(f"compiled graph is invalid: {problems[0]}")
    sched = reorder(g)
    _write_json(out / "graph.json", {**cfg.stamp(), "graph": graph_to_dict(g),
                                     "schedule": sched.to_json()})
    _write_json(out / "scheme.json", {**cfg.stamp(), "scheme": UpdateScheme.from_json(
        g.meta["scheme"]).to_json()})
    return EXIT_OK


def cmd_profile(cfg: RunConfig, args) -> int:
    out = _out(args)
    model = cfg.model()
    L = model.graph.num_layers
    scheme = cfg.scheme(L, UpdateScheme.full(L))
    g = _compiled(cfg, model, scheme)
    naive, reordered = simulate_peak(g, naive_schedule(g)), simulate_peak(g, reorder(g))
    comment = _comment(cfg)
    rows = []
    for prof in (naive, reordered):
        body = profile_csv(prof).splitlines()[1:]
        rows += [[prof.schedule] + ln.split(",") for ln in body]
    _write_csv(out / "memory.csv", ["schedule", "step", "bytes", "category"], rows, comment)
    (out / "lifetimes.csv").write_text(lifetimes_csv(reordered, comment))
    full = analytic_breakdown(model.graph, UpdateScheme.full(L))
    _write_json(out / "memory.json", {
        **cfg.stamp(), "scheme": scheme.to_json(),
        "analytic": analytic_breakdown(model.graph, scheme), "analytic_full": full["total"],
        "naive": naive.summary(), "reordered": reordered.summary(),
        "accumulation_buffer_bytes": accumulation_buffer_bytes(g)})
    return EXIT_OK


def _budget(cfg: RunConfig, mem: MemoryModel) -> int:
    if cfg.raw.get("budget_bytes") is not None:
        b = int(cfg.raw["budget_bytes"])
    elif cfg.section("search").get("budget_fraction") is not None:
        b = int(float(cfg.section("search")["budget_fraction"]) * mem.full())
    else:
        raise ConfigError("a memory budget is required (--budget-bytes or search.budget_fraction)")
    if b <= 0:
        raise ConfigError("budget must be positive")
    return b


def cmd_search(cfg: RunConfig, args) -> int:
    out = _out(args)
    s = cfg.section("search")
    tr = va = None
    if not s.get("table"):
        tr, va = cfg.split()
    model = cfg.model(tr)
    mem = MemoryModel.from_graph(model.graph)
    budget = _budget(cfg, mem)
    floor = mem(UpdateScheme.classifier_only())
    if floor > budget:  # fail before spending time on contribution probes
        raise SearchError(f"budget {budget} B is below the classifier-only floor {floor} B")
    if s.get("table"):
        try:
            table = ContributionTable.loads(cfg.path(s["table"], "contribution table").read_text())
        except (KeyError, ValueError, TypeError) as e:
            raise ConfigError(f"invalid contribution table: {e!r}") from e
    else:
        try:
            probe = ProbeConfig(**{"seed": cfg.seed, **s.get("probe", {})})
        except TypeError as e:
            raise ConfigError(f"invalid search.probe section: {e}") from e
        table = build_contribution_table(model, tr, va, probe, s.get("layers"), log=log.info)
    if table.num_layers != model.graph.num_layers:
        raise ConfigError("contribution table does not match the model depth")
    knobs = {k: s[k] for k in ("population", "generations", "mutation_prob", "tournament",
                               "elite", "hill_climb") if k in s}
    try:
        sc = SearchConfig(budget, seed=cfg.seed, **knobs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid search section: {e}") from e
    if s.get("method", "evolutionary") == "random":
        res = random_search(table, sc, mem)
    else:
        res = evolutionary_search(table, sc, mem)
    _write_json(out / "contributions.json", {**cfg.stamp(), **table.to_json()})
    _write_json(out / "scheme.json", {**cfg.stamp(), "scheme": res.best.scheme.to_json(),
                                      "criterion": res.best.criterion,
                                      "memory": res.best.memory, "budget_bytes": budget})
    (out / "history.csv").write_text(res.history_csv(_comment(cfg)))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out(args)
    tr, va = cfg.split()
    model = cfg.model(tr)
    L = model.graph.num_layers
    scheme = cfg.scheme(L, UpdateScheme.full(L))
    t = cfg.section("train")
    mode = t.get("mode", INT8)
    g = _compiled(cfg, model, scheme)
    sched = reorder(g) if t.get("schedule", "reordered") == "reordered" else naive_schedule(g)
    state = TrainState(g, model.bind(g, float_shadow=(mode != INT8)), cfg.optimizer(), mode,
                       sched, seed=cfg.seed,
                       float_dtype=np.float64 if mode != INT8 else np.float32)
    from .trainer import compute_gradients

    batch = tr.subset(np.arange(min(len(tr), int(t.get("batch_size", 1)))))
    _, grads = compute_gradients(state, batch.images, batch.labels)
    ratios = ratio_report(state, grads)
    logs = train(state, tr, int(t.get("epochs", 4)), va, int(t.get("batch_size", 1)))
    stamp = cfg.stamp()
    with open(out / "metrics.jsonl", "w") as f:
        for e in logs:
            f.write(json.dumps({**stamp, **e.to_json()}, sort_keys=True) + "\n")
    _write_csv(out / "ratios.csv", ["tensor", "kind", "pre_qas", "post_qas"],
               [[r["tensor"], r["kind"], repr(r["pre_qas"]), repr(r["post_qas"])] for r in ratios],
               _comment(cfg))
    trained = model.absorb(g, state.params) if mode == INT8 else model
    save_model(trained, out / "checkpoint.tt")
    _write_json(out / "result.json", {
        **stamp, "scheme": scheme.to_json(), "mode": mode,
        "accuracy": evaluate(state, va), "final_loss": logs[-1].loss if logs else None,
        "analytic_bytes": analytic_breakdown(model.graph, scheme)["total"],
        "optimizer": {**asdict(state.opt_cfg), "betas": list(state.opt_cfg.betas)}})
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    """Join run directories into plot-ready CSVs (frontier, residency, ratios)."""
    out = _out(args)
    comment = _comment(cfg)
    frontier, residency, ratios = [], [], []
    for d in sorted(args.runs):
        d = Path(d)
        if not d.is_dir():
            raise ConfigError(f"run directory {d} does not exist")
        name = d.name
        if (d / "result.json").exists():
            r = json.loads((d / "result.json").read_text())
            frontier.append([name, r["analytic_bytes"], repr(float(r["accuracy"])),
                             r["scheme"]["k"], len(r["scheme"]["weights"]), r["mode"]])
        if (d / "memory.csv").exists():
            residency += [[name, row["schedule"], row["step"], row["bytes"], row["category"]]
                          for row in _read_csv(d / "memory.csv")]
        if (d / "ratios.csv").exists():
            ratios += [[name, row["tensor"], row["kind"], row["pre_qas"], row["post_qas"]]
                       for row in _read_csv(d / "ratios.csv")]
    _write_csv(out / "frontier.csv",
               ["run", "analytic_bytes", "accuracy", "k", "weight_layers", "mode"],
               sorted(frontier, key=lambda r: (r[1], r[0])), comment)
    _write_csv(out / "residency.csv", ["run", "schedule", "step", "bytes", "category"],
               residency, comment)
    _write_csv(out / "ratios.csv", ["run", "tensor", "kind", "pre_qas", "post_qas"], ratios,
               comment)
    return EXIT_OK


COMMANDS = {"make-data": cmd_make_data, "pretrain": cmd_pretrain, "compile": cmd_compile,
            "profile": cmd_profile, "search": cmd_search, "train": cmd_train,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tinytrain", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=True, help="output directory")
        if name in ("compile", "profile", "train"):
            p.add_argument("--scheme", help="scheme JSON (overrides the config)")
        if name == "search":
            p.add_argument("--budget-bytes", type=int, help="analytic memory budget")
        if name == "report":
            p.add_argument("runs", nargs="*", help="run directories to aggregate")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        overrides = {"seed": args.seed, "scheme": getattr(args, "scheme", None),
                     "budget_bytes": getattr(args, "budget_bytes", None)}
        if overrides["scheme"] is not None:
            overrides["scheme"] = str(Path(overrides["scheme"]).resolve())
        cfg = RunConfig.load(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except SearchError as e:
        log.error("infeasible search: %s", e)
        return EXIT_INFEASIBLE
    except NumericError as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
