"""Contribution analysis and budgeted search over sparse-update schemes."""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .graph.ir import Graph
from .sparse import RATIOS, SchemeError, UpdateScheme, n_selected

NEG_INF = float("-inf")


class SearchError(RuntimeError):
    """No feasible candidate under the memory budget."""


# ------------------------------------------------------------------ table

@dataclass
class ContributionTable:
    """Accuracy deltas (percentage points) for bias depths and (layer, ratio) weight updates.

    ``None`` marks a probe that failed to train; a table with missing entries is
    not complete and cannot be searched.
    """

    num_layers: int
    bias_contrib: dict[int, float | None]
    weight_contrib: dict[tuple[int, float], float | None]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bias_contrib = {int(k): v for k, v in self.bias_contrib.items()}
        self.bias_contrib[0] = 0.0
        self.weight_contrib = {(int(i), float(r)): v for (i, r), v in self.weight_contrib.items()}

    @property
    def weight_layers(self) -> list[int]:
        return sorted({i for i, _ in self.weight_contrib})

    def ratios_for(self, i: int) -> list[float]:
        return sorted(r for j, r in self.weight_contrib if j == i)

    def missing(self) -> list:
        out = [("bias", k) for k in range(self.num_layers + 1) if self.bias_contrib.get(k) is None]
        out += [("weight", i, r) for (i, r), v in sorted(self.weight_contrib.items()) if v is None]
        return out

    def check_complete(self):
        miss = self.missing()
        if miss:
            raise SearchError(f"contribution table is incomplete: {miss[:5]}")

    def criterion(self, s: UpdateScheme) -> float:
        """Sum of the tabulated contributions of every term in ``s``."""
        total = self.bias_contrib[s.bias_depth]
        for i, r in s.weight_updates.items():
            total += self.weight_contrib[(i, r)]
        return float(total)

    def to_json(self) -> dict:
        return {"schema_version": 1, "num_layers": self.num_layers,
                "bias": {str(k): v for k, v in sorted(self.bias_contrib.items())},
                "weights": [[i, r, v] for (i, r), v in sorted(self.weight_contrib.items())],
                "metadata": self.metadata}

    @classmethod
    def from_json(cls, d: dict) -> "ContributionTable":
        return cls(int(d["num_layers"]), {int(k): v for k, v in d["bias"].items()},
                   {(int(i), float(r)): v for i, r, v in d["weights"]}, d.get("metadata", {}))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ContributionTable":
        return cls.from_json(json.loads(text))


# ------------------------------------------------------------------ memory model

@dataclass
class MemoryModel:
    """Per-layer byte costs mirroring the analytic extra-memory formula."""

    input_ids: list[int]
    input_bytes: list[int]
    channels: list[int]
    channel_bytes: list[int]
    bias_bytes: list[int]
    classifier_bytes: int

    @property
    def num_layers(self) -> int:
        return len(self.channels)

    @classmethod
    def from_graph(cls, g: Graph) -> "MemoryModel":
        ids, ib, ch, cb, bb = [], [], [], [], []
        for layer in g.layers:
            w = g.tensors[layer.weight]
            ids.append(layer.input)
            ib.append(g.tensors[layer.input].nbytes)
            ch.append(w.shape[0])
            cb.append(w.numel // w.shape[0])
            bb.append(4 * g.tensors[layer.bias].numel)
        cls_bytes = 0
        if g.classifier is not None:
            cls_bytes = 4 * (g.tensors[g.classifier.weight].numel
                             + g.tensors[g.classifier.bias].numel)
        return cls(ids, ib, ch, cb, bb, cls_bytes)

    def __call__(self, s: UpdateScheme) -> int:
        L = self.num_layers
        acts = {self.input_ids[i]: self.input_bytes[i] for i in s.weight_updates}
        total = sum(acts.values())
        total += sum(n_selected(r, self.channels[i]) * self.channel_bytes[i]
                     for i, r in s.weight_updates.items())
        total += sum(self.bias_bytes[L - s.bias_depth:]) if s.bias_depth else 0
        if s.classifier_trainable:
            total += self.classifier_bytes
        return int(total)

    def full(self) -> int:
        return self(UpdateScheme.full(self.num_layers))


# ------------------------------------------------------------------ candidates

@dataclass
class Candidate:
    scheme: UpdateScheme
    criterion: float
    memory: int

    def to_json(self) -> dict:
        return {"scheme": self.scheme.to_json(), "criterion": self.criterion,
                "memory": self.memory}


@dataclass
class SearchConfig:
    budget_bytes: int
    population: int = 32
    generations: int = 64
    mutation_prob: float = 0.3
    tournament: int = 3
    elite: int = 4
    hill_climb: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if self.budget_bytes <= 0:
            raise ValueError("budget must be positive")
        if not 0 <= self.elite < self.population:
            raise ValueError("elite count must be below the population size")


@dataclass
class SearchResult:
    best: Candidate
    history: list[float]  # best-so-far criterion after each evaluation
    evaluations: int

    def history_csv(self, header_comment: str | None = None) -> str:
        return history_csv(self.history, header_comment)


def history_csv(history, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["evaluation", "best_criterion"])
    for i, v in enumerate(history):
        w.writerow([i + 1, repr(float(v))])
    return buf.getvalue()


Genome = tuple  # (k, ((layer, ratio), ...)) with layers sorted


def _scheme(gen: Genome) -> UpdateScheme:
    return UpdateScheme(gen[0], dict(gen[1]))


class _Problem:
    """Shared evaluation state: criterion + memory with a running best-so-far history."""

    def __init__(self, table: ContributionTable, mem_model, budget: int):
        table.check_complete()
        self.table, self.mem, self.budget = table, mem_model, budget
        self.L = table.num_layers
        self.layers = table.weight_layers
        self.ratios = {i: table.ratios_for(i) for i in self.layers}
        self.history: list[float] = []
        self.best: Candidate | None = None
        self._cache: dict[Genome, Candidate] = {}
        self._mem: dict[Genome, int] = {}
        floor = mem_model(UpdateScheme.classifier_only())
        if floor > budget:
            raise SearchError(f"budget {budget} B is below the classifier-only floor {floor} B")

    def eligible(self, k: int) -> list[int]:
        return [i for i in self.layers if i >= self.L - k]

    def memory(self, k: int, weights: dict) -> int:
        key = (k, tuple(sorted(weights.items())))
        m = self._mem.get(key)
        if m is None:
            m = self._mem[key] = self.mem(UpdateScheme(k, dict(weights)))
        return m

    def seen(self, gen: Genome) -> bool:
        return gen in self._cache

    def candidate(self, gen: Genome) -> Candidate:
        c = self._cache.get(gen)
        if c is None:
            s = _scheme(gen)
            mem = self.memory(*_split(gen))
            crit = self.table.criterion(s) if mem <= self.budget else NEG_INF
            c = self._cache[gen] = Candidate(s, crit, mem)
        return c

    def evaluate(self, gen: Genome) -> Candidate:
        c = self.candidate(gen)
        if self.best is None or _better(c, self.best):
            self.best = c
        self.history.append(self.best.criterion)
        return c

    def repair(self, k: int, weights: dict, rng, keep: int | None = None) -> Genome:
        """Clamp k, drop weight layers outside the last k, then shed terms until feasible.

        Each shedding step targets the term with the lowest contribution per byte.
        With an ``rng`` it is lowered one ratio step or deleted at random; with
        ``rng=None`` the cheaper of the two (contribution lost per byte freed) is
        taken. ``keep`` is never shed."""
        k = min(max(int(k), 0), self.L)
        weights = {i: r for i, r in weights.items() if i >= self.L - k}
        contrib = self.table.weight_contrib
        while (used := self.memory(k, weights)) > self.budget:
            pool = sorted(set(weights) - {keep})
            if not pool:
                if k == 0:
                    break
                k -= 1
                weights = {i: r for i, r in weights.items() if i >= self.L - k}
                continue

            def freed(w):
                return max(used - self.memory(k, w), 1)

            def without(i):
                return {j: q for j, q in weights.items() if j != i}

            if rng is not None:
                i = min(pool, key=lambda i: (contrib[(i, weights[i])] / freed(without(i)), i))
                lower = [q for q in self.ratios[i] if q < weights[i]]
                if lower and rng.random() < 0.5:
                    weights[i] = lower[-1]
                else:
                    del weights[i]
                continue
            moves = []
            for i in pool:
                moves.append((contrib[(i, weights[i])] / freed(without(i)), i, None))
                lower = [q for q in self.ratios[i] if q < weights[i]]
                if lower:
                    w = {**weights, i: lower[-1]}
                    lost = contrib[(i, weights[i])] - contrib[(i, lower[-1])]
                    moves.append((lost / freed(w), i, lower[-1]))
            _, i, r = min(moves, key=lambda m: (m[0], m[1], m[2] is None))
            if r is None:
                del weights[i]
            else:
                weights[i] = r
        return (k, tuple(sorted(weights.items())))

    def random_genome(self, rng) -> Genome:
        k = int(rng.integers(0, self.L + 1))
        weights = {}
        for i in self.eligible(k):
            if rng.random() < 0.5:
                weights[i] = float(rng.choice(self.ratios[i]))
        return (k, tuple(sorted(weights.items())))


def _better(a: Candidate, b: Candidate) -> bool:
    """Higher criterion wins; ties prefer smaller memory, then the smaller scheme key."""
    if a.criterion != b.criterion:
        return a.criterion > b.criterion
    if a.memory != b.memory:
        return a.memory < b.memory
    return a.scheme.key() < b.scheme.key()


def _mutate(p: _Problem, gen: Genome, rng) -> Genome:
    k, weights = gen[0], dict(gen[1])
    op = int(rng.integers(0, 3))
    if op == 0:
        k += 1 if rng.random() < 0.5 else -1
    elif op == 1:
        pool = p.eligible(k)
        if pool:
            i = int(rng.choice(pool))
            if i in weights:
                del weights[i]
            else:
                weights[i] = float(rng.choice(p.ratios[i]))
    elif weights:
        i = int(rng.choice(sorted(weights)))
        rs = p.ratios[i]
        j = rs.index(weights[i]) + (1 if rng.random() < 0.5 else -1)
        if 0 <= j < len(rs):
            weights[i] = rs[j]
    return p.repair(k, weights, rng)


def _crossover(p: _Problem, a: Genome, b: Genome, rng) -> Genome:
    wa, wb = dict(a[1]), dict(b[1])
    weights = {}
    for i in sorted(set(wa) | set(wb)):
        src = wa if rng.random() < 0.5 else wb
        if i in src:
            weights[i] = src[i]
    k = int(math.floor((a[0] + b[0]) / 2 + rng.random()))  # average, random rounding
    return p.repair(k, weights, rng)


def _neighbours(p: _Problem, gen: Genome) -> list[Genome]:
    k, weights = gen[0], dict(gen[1])
    out = []
    for dk in (-1, 1):
        if 0 <= k + dk <= p.L:
            out.append((k + dk, tuple(sorted((i, r) for i, r in weights.items()
                                             if i >= p.L - (k + dk)))))
    for i in p.eligible(k):
        options = [None] + p.ratios[i]
        for r in options:
            if weights.get(i) == r:
                continue
            w = dict(weights)
            if r is None:
                w.pop(i, None)
            else:
                w[i] = r
            out.append((k, tuple(sorted(w.items()))))
    # swaps: drop one weight layer and add another at any ratio
    for i in sorted(weights):
        for j in p.eligible(k):
            if j in weights:
                continue
            for r in p.ratios[j]:
                w = dict(weights)
                del w[i]
                w[j] = r
                out.append((k, tuple(sorted(w.items()))))
    # insert-and-evict: add a term, then shed the cheapest others until it fits
    for k2 in range(max(k - 1, 0), min(k + 1, p.L) + 1):
        for j in p.eligible(k2):
            for r in p.ratios[j]:
                if weights.get(j) != r:
                    out.append(p.repair(k2, {**weights, j: r}, None, keep=j))
    return out


def _pair_neighbours(p: _Problem, gen: Genome) -> list[Genome]:
    """Set one term to a new ratio while deleting or re-rating another."""
    k, weights = gen[0], dict(gen[1])
    out = []
    for j in p.eligible(k):
        for r in p.ratios[j]:
            if weights.get(j) == r:
                continue
            for i in sorted(weights):
                if i == j:
                    continue
                for q in [None] + p.ratios[i]:
                    if q == weights[i]:
                        continue
                    w = {**weights, j: r}
                    if q is None:
                        del w[i]
                    else:
                        w[i] = q
                    out.append((k, tuple(sorted(w.items()))))
    return out


def evolutionary_search(table: ContributionTable, cfg: SearchConfig, mem_model) -> SearchResult:
    """Maximize the tabulated contribution sum subject to the memory budget."""
    rng = np.random.default_rng(cfg.seed)
    p = _Problem(table, mem_model, cfg.budget_bytes)
    pop = [p.repair(*_split(p.random_genome(rng)), rng) for _ in range(cfg.population)]
    scored = [(p.evaluate(gen), gen) for gen in pop]

    def pick():
        idx = rng.choice(len(scored), size=min(cfg.tournament, len(scored)), replace=False)
        best = min(idx, key=lambda j: _rank_key(scored[j][0]))
        return scored[best][1]

    for _ in range(cfg.generations):
        scored.sort(key=lambda cg: _rank_key(cg[0]))
        nxt = scored[:cfg.elite]
        members = {gen for _, gen in nxt}
        while len(nxt) < cfg.population:
            child = _crossover(p, pick(), pick(), rng)
            if rng.random() < cfg.mutation_prob:
                child = _mutate(p, child, rng)
            for _ in range(8):  # revisits waste an evaluation; keep exploring
                if child not in members and not p.seen(child):
                    break
                child = _mutate(p, child, rng)
            else:
                child = p.repair(*_split(p.random_genome(rng)), rng)
            members.add(child)
            nxt.append((p.evaluate(child), child))
        scored = nxt
    if cfg.hill_climb:
        scored.sort(key=lambda cg: _rank_key(cg[0]))
        for c, gen in scored[:max(cfg.elite, 1)]:
            if c.criterion != NEG_INF:
                _hill_climb(p, gen)
    return SearchResult(p.best, p.history, len(p.history))


def _hill_climb(p: _Problem, gen: Genome):
    """Steepest ascent from ``gen`` until neither neighbourhood improves."""
    cur = p.candidate(gen)
    while True:
        best_gen = None
        for moves in (_neighbours, _pair_neighbours):  # pairs only at a local optimum
            for nb in moves(p, gen):
                c = p.evaluate(nb)
                if _better(c, cur):
                    cur, best_gen = c, nb
            if best_gen is not None:
                break
        if best_gen is None:
            return
        gen = best_gen


def _split(gen: Genome):
    return gen[0], dict(gen[1])


def _rank_key(c: Candidate):
    return (-c.criterion, c.memory, c.scheme.key())


def random_search(table: ContributionTable, cfg: SearchConfig, mem_model,
                  evaluations: int | None = None) -> SearchResult:
    """Uniform sampling of schemes; infeasible samples count as evaluations."""
    rng = np.random.default_rng(cfg.seed)
    p = _Problem(table, mem_model, cfg.budget_bytes)
    n = evaluations if evaluations is not None else cfg.population * (cfg.generations + 1)
    for _ in range(n):
        p.evaluate(p.random_genome(rng))
    if p.best.criterion == NEG_INF:
        raise SearchError("random search found no feasible scheme")
    return SearchResult(p.best, p.history, len(p.history))


def space_size(table: ContributionTable) -> int:
    total = 0
    for k in range(table.num_layers + 1):
        n = 1
        for i in table.weight_layers:
            if i >= table.num_layers - k:
                n *= 1 + len(table.ratios_for(i))
        total += n
    return total


def exhaustive_search(table: ContributionTable, budget_bytes: int, mem_model,
                      limit: int = 100_000) -> Candidate:
    """Brute-force optimum; refuses spaces larger than ``limit``."""
    size = space_size(table)
    if size > limit:
        raise ValueError(f"search space has {size} candidates (limit {limit})")
    p = _Problem(table, mem_model, budget_bytes)
    for k in range(p.L + 1):
        layers = p.eligible(k)
        for choice in itertools.product(*[[None] + p.ratios[i] for i in layers]):
            w = tuple((i, r) for i, r in zip(layers, choice) if r is not None)
            c = p.candidate((k, w))
            if p.best is None or _better(c, p.best):
                p.best = c
    if p.best.criterion == NEG_INF:
        raise SearchError("no feasible scheme")
    return p.best


# ------------------------------------------------------------------ synthetic problems

def synthetic_table(num_layers: int, seed: int = 0, ratios=RATIOS,
                    weight_layers=None) -> ContributionTable:
    """Seeded table with saturating bias gains and concave per-layer ratio gains."""
    rng = np.random.default_rng(seed)
    inc = np.sort(rng.exponential(1.0, num_layers))[::-1] * rng.uniform(0.5, 1.5, num_layers)
    bias = {k: float(np.round(np.sum(inc[:k]), 6)) for k in range(num_layers + 1)}
    layers = range(num_layers) if weight_layers is None else weight_layers
    weights = {}
    for i in layers:
        base = rng.gamma(1.5, 1.0) * (0.3 + (i + 1) / num_layers)
        for r in ratios:
            weights[(i, r)] = float(np.round(base * r ** rng.uniform(0.3, 0.9)
                                             + rng.normal(0, 0.05), 6))
    return ContributionTable(num_layers, bias, weights, {"model": "synthetic", "seed": seed})


def synthetic_memory(num_layers: int, seed: int = 0) -> MemoryModel:
    rng = np.random.default_rng(seed + 7919)
    channels = [int(c) for c in rng.choice([8, 16, 24, 32, 48, 64], num_layers)]
    hw = np.sort(rng.choice([4, 8, 16, 32], num_layers))[::-1]
    ib = [int(c * h * h) for c, h in zip(rng.choice([8, 16, 32], num_layers), hw)]
    cb = [int(c) for c in rng.choice([9, 16, 32, 64], num_layers)]
    return MemoryModel(list(range(num_layers)), ib, channels, cb, [4 * c for c in channels],
                       4 * (10 * 8 + 10))


# ------------------------------------------------------------------ measurement

@dataclass
class ProbeConfig:
    """How contribution probes train: short fine-tuning on one proxy task."""

    epochs: int = 3
    learning_rate: float = 0.02
    batch_size: int = 1
    seed: int = 0
    mode: str = "int8"


def _probe_accuracy(model, scheme, train_ds, val_ds, cfg: ProbeConfig, cache: dict):
    from .executor import NumericError
    from .model import finetune
    from .trainer import OptimizerConfig

    key = scheme.key()
    if key not in cache:
        try:
            res = finetune(model, scheme, train_ds, val_ds, OptimizerConfig(cfg.learning_rate),
                           cfg.epochs, cfg.seed, cfg.mode, cfg.batch_size)
            cache[key] = 100.0 * res.accuracy
        except NumericError:
            cache[key] = None
    return cache[key]


def _delta(a, b):
    return None if a is None or b is None else float(a - b)


def measure_bias_contrib(model, train_ds, val_ds, k: int, cfg: ProbeConfig | None = None,
                         cache: dict | None = None) -> float | None:
    """Accuracy gain (points) of training the last ``k`` biases over classifier-only."""
    cfg = cfg or ProbeConfig()
    cache = {} if cache is None else cache
    L = model.graph.num_layers
    if not 0 <= k <= L:
        raise SchemeError(f"bias depth {k} outside 0..{L}")
    if k == 0:
        return 0.0
    base = _probe_accuracy(model, UpdateScheme.classifier_only(), train_ds, val_ds, cfg, cache)
    return _delta(_probe_accuracy(model, UpdateScheme.bias_only(L, k), train_ds, val_ds, cfg,
                                  cache), base)


def measure_weight_contrib(model, train_ds, val_ds, i: int, r: float,
                           cfg: ProbeConfig | None = None, cache: dict | None = None):
    """Accuracy gain (points) of also updating layer ``i`` at ratio ``r`` over bias-only."""
    cfg = cfg or ProbeConfig()
    cache = {} if cache is None else cache
    L = model.graph.num_layers
    s = UpdateScheme(L, {i: r})
    s.validate(L)
    base = _probe_accuracy(model, UpdateScheme.bias_only(L), train_ds, val_ds, cfg, cache)
    return _delta(_probe_accuracy(model, s, train_ds, val_ds, cfg, cache), base)


def build_contribution_table(model, train_ds, val_ds, cfg: ProbeConfig | None = None,
                             layers=None, ratios=RATIOS, log=None) -> ContributionTable:
    cfg = cfg or ProbeConfig()
    L = model.graph.num_layers
    layers = range(L) if layers is None else layers
    cache: dict = {}
    bias = {}
    for k in range(L + 1):
        bias[k] = measure_bias_contrib(model, train_ds, val_ds, k, cfg, cache)
        if log:
            log(f"bias k={k}: {bias[k]}")
    weights = {}
    for i in layers:
        for r in ratios:
            weights[(i, r)] = measure_weight_contrib(model, train_ds, val_ds, i, r, cfg, cache)
            if log:
                log(f"weight i={i} r={r}: {weights[(i, r)]}")
    meta = {"model": model.config.name, "proxy": train_ds.name, "epochs": cfg.epochs,
            "learning_rate": cfg.learning_rate, "seed": cfg.seed, "mode": cfg.mode}
    return ContributionTable(L, bias, weights, meta)


# ------------------------------------------------------------------ additivity

@dataclass
class AdditivityReport:
    criteria: list[float]
    accuracies: list[float]
    spearman: float | None  # None when undefined (constant input)
    pvalue: float | None

    def to_json(self) -> dict:
        return {"criteria": self.criteria, "accuracies": self.accuracies,
                "spearman": self.spearman, "pvalue": self.pvalue}


def spearman(x, y) -> tuple[float | None, float | None]:
    from scipy.stats import spearmanr

    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None, None
    res = spearmanr(x, y)
    return float(res.statistic), float(res.pvalue)


def validate_additivity(table: ContributionTable, schemes, run) -> AdditivityReport:
    """Train each scheme with ``run(scheme) -> accuracy`` and rank-correlate with the criterion."""
    crit = [table.criterion(s) for s in schemes]
    acc = [float(run(s)) for s in schemes]
    rho, pv = spearman(crit, acc)
    return AdditivityReport(crit, acc, rho, pv)


def sample_schemes(table: ContributionTable, n: int, seed: int = 0, min_terms: int = 2):
    """Distinct random schemes with at least ``min_terms`` contribution terms."""
    rng = np.random.default_rng(seed)
    L = table.num_layers
    out, seen = [], set()
    for _ in range(1000 * n):
        if len(out) == n:
            break
        k = int(rng.integers(1, L + 1))
        pool = [i for i in table.weight_layers if i >= L - k]
        weights = {int(i): float(rng.choice(table.ratios_for(i)))
                   for i in pool if rng.random() < 0.4}
        s = UpdateScheme(k, weights)
        if 1 + len(weights) < min_terms or s.key() in seen:
            continue
        seen.add(s.key())
        out.append(s)
    return out


__all__ = ["AdditivityReport", "Candidate", "ContributionTable", "MemoryModel", "ProbeConfig",
           "SearchConfig", "SearchError", "SearchResult", "build_contribution_table",
           "evolutionary_search", "exhaustive_search", "history_csv", "measure_bias_contrib",
           "measure_weight_contrib", "random_search", "sample_schemes", "space_size", "spearman",
           "synthetic_memory", "synthetic_table", "validate_additivity"]
