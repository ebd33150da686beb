"""Pruning planners: entropy-safeguarded global greedy merging and baselines.

Every planner returns a :class:`ClusterPlan`: a partition of each layer's
experts into clusters, where each cluster becomes one retained expert.

Shared conventions:

* pair selection takes the most similar *unconsumed* pair ``i < j``; ties go
  to the lexicographically smallest pair. Selecting a pair consumes it (its
  similarity entry is zeroed) even if both experts already share a cluster;
* layer selection (global planner) takes the largest residual mass among
  unfrozen layers still above their floor; ties go to the lowest index.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .exceptions import (
    BudgetInfeasibleError,
    BudgetMismatchError,
    ConfigError,
    DataError,
    GuardError,
    PlannerStallError,
)

METHODS = ("grape", "uniform", "count_guided", "router_guided", "random")
ORACLE_MAX_EXPERTS = 24


def _values(block):
    v = block.values if hasattr(block, "values") else np.asarray(block, dtype=np.float64)
    return np.asarray(v, dtype=np.float64)


def _sizes(blocks):
    return [_values(b).shape[0] for b in blocks]


def _resolve_min_keep(blocks, min_keep):
    sizes = _sizes(blocks)
    if min_keep is None:
        min_keep = [getattr(b, "top_k", None) or 1 for b in blocks]
    elif isinstance(min_keep, (int, np.integer)):
        min_keep = [int(min_keep)] * len(blocks)
    min_keep = [int(m) for m in min_keep]
    if len(min_keep) != len(blocks):
        raise ConfigError(f"min_keep has {len(min_keep)} entries for {len(blocks)} layers")
    for l, (m, n) in enumerate(zip(min_keep, sizes)):
        if not 1 <= m <= n:
            raise ConfigError(f"layer {l}: min_keep={m} must lie in [1, {n}]")
    return min_keep


def cluster_entropy(counts):
    """Entropy (nats) of the distribution of cluster counts across layers."""
    counts = list(counts)
    if not counts:
        raise ConfigError("cluster_entropy needs at least one layer")
    if any(c < 1 for c in counts):
        raise ConfigError(f"cluster counts must be >= 1, got {counts}")
    total = sum(counts)
    ent = 0.0
    for c in counts:
        p = c / total
        ent -= p * math.log(p)
    return ent


@dataclass
class TraceEvent:
    step: int
    kind: str
    layer: Optional[int]
    entropy_after: float
    frozen_set_after: List[int]
    pair: Optional[Tuple[int, int]] = None
    pair_similarity: Optional[float] = None

    def to_dict(self):
        return {
            "step": self.step,
            "kind": self.kind,
            "layer": self.layer,
            "pair": list(self.pair) if self.pair is not None else None,
            "pair_similarity": self.pair_similarity,
            "entropy_after": self.entropy_after,
            "frozen_set_after": list(self.frozen_set_after),
        }

    @classmethod
    def from_dict(cls, d):
        pair = d.get("pair")
        return cls(step=int(d["step"]), kind=d["kind"], layer=d.get("layer"),
                   entropy_after=float(d["entropy_after"]),
                   frozen_set_after=[int(x) for x in d.get("frozen_set_after", [])],
                   pair=tuple(pair) if pair is not None else None,
                   pair_similarity=d.get("pair_similarity"))


@dataclass
class EntropyState:
    fractions: List[float]
    entropy: float
    threshold: float
    gamma: float
    frozen: List[int]


@dataclass
class ClusterPlan:
    method: str
    budget_total: int
    clusters: List[List[List[int]]]
    min_keep: List[int]
    gamma: Optional[float] = None
    trace: List[TraceEvent] = field(default_factory=list)
    objective_retained_mass: Optional[float] = None

    @property
    def counts(self):
        return [len(c) for c in self.clusters]

    @property
    def n_per_layer(self):
        return [sum(len(g) for g in c) for c in self.clusters]

    @property
    def is_identity(self):
        return all(len(g) == 1 for c in self.clusters for g in c)

    def assignment(self, layer):
        """Map each original expert of ``layer`` to the index of its cluster."""
        groups = self.clusters[layer]
        out = np.empty(sum(len(g) for g in groups), dtype=int)
        for ci, g in enumerate(groups):
            out[list(g)] = ci
        return out

    def entropy_state(self):
        counts = self.counts
        total = sum(counts)
        e0 = cluster_entropy(self.n_per_layer)
        gamma = 1.0 if self.gamma is None else self.gamma
        frozen = self.trace[-1].frozen_set_after if self.trace else []
        return EntropyState(fractions=[c / total for c in counts], entropy=cluster_entropy(counts),
                            threshold=e0 * (1.0 - gamma), gamma=gamma, frozen=list(frozen))

    def validate(self, sizes=None):
        """Check partition validity, floors and budget exactness."""
        if sizes is not None and list(sizes) != self.n_per_layer:
            raise DataError(f"plan covers layers of sizes {self.n_per_layer}, expected {list(sizes)}")
        for l, groups in enumerate(self.clusters):
            members = sorted(i for g in groups for i in g)
            if members != list(range(len(members))):
                raise DataError(f"layer {l}: clusters do not partition the experts")
            if any(len(g) == 0 for g in groups):
                raise DataError(f"layer {l}: empty cluster")
            if len(groups) < self.min_keep[l]:
                raise DataError(f"layer {l}: {len(groups)} clusters below floor {self.min_keep[l]}")
        if sum(self.counts) != self.budget_total:
            raise DataError(f"plan keeps {sum(self.counts)} experts, budget is {self.budget_total}")

    def to_dict(self):
        return {
            "method": self.method,
            "budget_total": self.budget_total,
            "gamma": self.gamma,
            "min_keep": list(self.min_keep),
            "layers": [{"layer": l, "clusters": [list(g) for g in groups]}
                       for l, groups in enumerate(self.clusters)],
            "trace": [e.to_dict() for e in self.trace],
            "objective_retained_mass": self.objective_retained_mass,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            layers = sorted(d["layers"], key=lambda x: x["layer"])
            clusters = [[[int(i) for i in g] for g in ld["clusters"]] for ld in layers]
            plan = cls(method=d["method"], budget_total=int(d["budget_total"]), clusters=clusters,
                       min_keep=[int(m) for m in d.get("min_keep", [1] * len(clusters))],
                       gamma=d.get("gamma"),
                       trace=[TraceEvent.from_dict(e) for e in d.get("trace", [])],
                       objective_retained_mass=d.get("objective_retained_mass"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed plan document: {exc!r}") from exc
        plan.validate()
        return plan

    def to_json(self):
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def identity_plan(sizes, min_keep=None, method="uniform"):
    sizes = list(sizes)
    min_keep = [1] * len(sizes) if min_keep is None else list(min_keep)
    return ClusterPlan(method=method, budget_total=sum(sizes),
                       clusters=[[[i] for i in range(n)] for n in sizes], min_keep=min_keep,
                       objective_retained_mass=None)


class _LayerState:
    """Greedy merging state for one layer: working similarities, partition, residual mass."""

    def __init__(self, values):
        self.n = values.shape[0]
        self.original = values
        self.work = values.copy()
        # upper-triangle view for pair selection; consumed or invalid pairs are -inf
        self.avail = np.where(np.triu(np.ones((self.n, self.n), dtype=bool), k=1), values, -np.inf)
        self.parent = list(range(self.n))
        self.count = self.n
        self.residual = float(values.sum() - np.trace(values))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def best_pair(self):
        flat = int(np.argmax(self.avail))
        i, j = divmod(flat, self.n)
        if self.avail[i, j] == -np.inf:
            return None
        return i, j

    def merge(self, i, j):
        """Union ``i`` and ``j``; zero their entry and subtract it from the residual mass.

        Returns the pair's similarity, read before zeroing.
        """
        v = float(self.work[i, j])
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            # keep the lower index as root so clusters are labelled by their smallest member
            lo, hi = min(ri, rj), max(ri, rj)
            self.parent[hi] = lo
            self.count -= 1
        self.work[i, j] = self.work[j, i] = 0.0
        self.avail[i, j] = -np.inf
        self.residual -= 2.0 * v
        return v

    def clusters(self):
        groups = {}
        for i in range(self.n):
            groups.setdefault(self.find(i), []).append(i)
        return [groups[r] for r in sorted(groups)]


def retained_mass(blocks, clusters):
    """Similarity mass left among cluster representatives (lowest index of each cluster)."""
    total = 0.0
    for b, groups in zip(blocks, clusters):
        v = _values(b)
        reps = [min(g) for g in groups]
        sub = v[np.ix_(reps, reps)]
        total += float(sub.sum() - np.trace(sub))
    return total


def _check_budget(sizes, k, min_keep):
    if k > sum(sizes):
        raise BudgetInfeasibleError(f"budget K={k} exceeds the {sum(sizes)} experts available")
    if k < sum(min_keep):
        raise BudgetInfeasibleError(f"budget K={k} is below the floor total {sum(min_keep)}")


def grape_prune(blocks, k, gamma=0.5, min_keep=None):
    """Entropy-safeguarded global greedy merging down to ``k`` retained experts.

    Each step merges the most similar unconsumed pair inside the unfrozen layer
    with the largest residual similarity mass. A layer freezes when the
    post-merge entropy of cluster counts falls below ``E0 * (1 - gamma)``; when
    every layer still above its floor is frozen, the frozen set is cleared.
    """
    if not blocks:
        raise ConfigError("need at least one similarity block")
    gamma = float(gamma)
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    k = int(k)
    sizes = _sizes(blocks)
    min_keep = _resolve_min_keep(blocks, min_keep)
    _check_budget(sizes, k, min_keep)

    layers = [_LayerState(_values(b)) for b in blocks]
    counts = list(sizes)
    total = sum(counts)
    threshold = cluster_entropy(counts) * (1.0 - gamma)
    frozen = set()
    trace = []
    step = 0
    while total > k:
        eligible = [l for l in range(len(layers)) if counts[l] > min_keep[l]]
        if not eligible:
            raise PlannerStallError(f"no layer can shrink further; {total - k} merges remain")
        if all(l in frozen for l in eligible):
            frozen.clear()
            trace.append(TraceEvent(step=step, kind="restart", layer=None,
                                    entropy_after=cluster_entropy(counts), frozen_set_after=[]))
        target = None
        for l in eligible:
            if l in frozen:
                continue
            if target is None or layers[l].residual > layers[target].residual:
                target = l
        state = layers[target]
        pair = state.best_pair()
        if pair is None:
            raise PlannerStallError(
                f"layer {target} has no similarity pairs left; {total - k} merges remain")
        v = state.merge(*pair)
        if state.count != counts[target]:
            counts[target] = state.count
            total -= 1
        entropy = cluster_entropy(counts)
        trace.append(TraceEvent(step=step, kind="merge", layer=target, pair=pair,
                                pair_similarity=v, entropy_after=entropy,
                                frozen_set_after=sorted(frozen)))
        if entropy < threshold:
            frozen.add(target)
            trace.append(TraceEvent(step=step, kind="freeze", layer=target, entropy_after=entropy,
                                    frozen_set_after=sorted(frozen)))
        step += 1

    clusters = [s.clusters() for s in layers]
    return ClusterPlan(method="grape", budget_total=k, gamma=gamma, clusters=clusters,
                       min_keep=min_keep, trace=trace,
                       objective_retained_mass=retained_mass(blocks, clusters))


def _per_layer_budget(sizes, e_per_layer, min_keep):
    e = int(e_per_layer)
    if e < 0:
        raise ConfigError(f"experts to prune per layer must be >= 0, got {e}")
    for l, (n, m) in enumerate(zip(sizes, min_keep)):
        if n - e < m:
            raise BudgetInfeasibleError(
                f"layer {l}: pruning {e} of {n} experts leaves fewer than min_keep={m}")
    return e


def budget_to_per_layer(sizes, k):
    """Experts to prune per layer for a uniform plan that keeps ``k`` experts in total."""
    pruned = sum(sizes) - int(k)
    if pruned < 0:
        raise BudgetInfeasibleError(f"budget K={k} exceeds the {sum(sizes)} experts available")
    if pruned % len(sizes):
        raise BudgetMismatchError(
            f"uniform pruning removes L*e experts; {pruned} is not a multiple of L={len(sizes)}")
    return pruned // len(sizes)


def _greedy_per_layer(blocks, e, min_keep, method, objective_blocks):
    sizes = _sizes(blocks)
    counts = list(sizes)
    trace = []
    clusters = []
    step = 0
    for l, b in enumerate(blocks):
        state = _LayerState(_values(b))
        while state.count > sizes[l] - e:
            pair = state.best_pair()
            if pair is None:
                raise PlannerStallError(f"layer {l} ran out of pairs")
            v = state.merge(*pair)
            counts[l] = state.count
            trace.append(TraceEvent(step=step, kind="merge", layer=l, pair=pair,
                                    pair_similarity=v, entropy_after=cluster_entropy(counts),
                                    frozen_set_after=[]))
            step += 1
        clusters.append(state.clusters())
    return ClusterPlan(method=method, budget_total=sum(counts), clusters=clusters,
                       min_keep=min_keep, trace=trace,
                       objective_retained_mass=retained_mass(objective_blocks, clusters))


def uniform_prune(blocks, e_per_layer, min_keep=None):
    """Remove ``e_per_layer`` experts from every layer by greedy in-layer merging."""
    min_keep = _resolve_min_keep(blocks, min_keep)
    e = _per_layer_budget(_sizes(blocks), e_per_layer, min_keep)
    return _greedy_per_layer(blocks, e, min_keep, "uniform", blocks)


def gate_similarity_blocks(model):
    """Cosine similarity of router rows per layer, negatives clipped to 0."""
    out = []
    for layer in model.layers:
        g = layer.gate
        norms = np.linalg.norm(g, axis=1)
        norms[norms == 0.0] = 1.0
        cos = (g @ g.T) / np.outer(norms, norms)
        cos = np.clip(0.5 * (cos + cos.T), 0.0, 1.0)
        np.fill_diagonal(cos, 0.0)
        out.append(cos)
    return out


def router_guided_prune(model, e_per_layer, min_keep=None, blocks=None):
    """Uniform greedy merging driven by router-row cosine similarity.

    ``objective_retained_mass`` is reported on ``blocks`` when given, otherwise
    on the router similarities themselves.
    """
    gate_blocks = gate_similarity_blocks(model)
    if min_keep is None:
        min_keep = model.top_k
    min_keep = _resolve_min_keep(gate_blocks, min_keep)
    e = _per_layer_budget(_sizes(gate_blocks), e_per_layer, min_keep)
    return _greedy_per_layer(gate_blocks, e, min_keep, "router_guided",
                             blocks if blocks is not None else gate_blocks)


def count_guided_prune(capture, e_per_layer, min_keep=None, blocks=None):
    """Drop the least-visited experts of each layer into the most-visited survivor's cluster.

    Visit ties drop the higher index first; ``capture`` may also be a plain
    list of per-layer visit counts.
    """
    visits = capture.visit_counts if hasattr(capture, "visit_counts") else capture
    visits = [list(map(int, v)) for v in visits]
    sizes = [len(v) for v in visits]
    if min_keep is None:
        min_keep = list(getattr(capture, "top_k", None) or [1] * len(sizes))
    min_keep = _resolve_min_keep([np.zeros((n, n)) for n in sizes], min_keep)
    e = _per_layer_budget(sizes, e_per_layer, min_keep)
    counts = list(sizes)
    clusters, trace = [], []
    step = 0
    for l, v in enumerate(visits):
        order = sorted(range(len(v)), key=lambda i: (v[i], -i))
        dropped, kept = order[:e], sorted(order[e:])
        keeper = min(kept, key=lambda i: (-v[i], i))
        groups = {i: [i] for i in kept}
        for d in dropped:
            groups[keeper].append(d)
            counts[l] -= 1
            sim = float(_values(blocks[l])[keeper, d]) if blocks is not None else None
            trace.append(TraceEvent(step=step, kind="merge", layer=l,
                                    pair=(min(keeper, d), max(keeper, d)), pair_similarity=sim,
                                    entropy_after=cluster_entropy(counts), frozen_set_after=[]))
            step += 1
        clusters.append([sorted(groups[i]) for i in kept])
    return ClusterPlan(method="count_guided", budget_total=sum(counts), clusters=clusters,
                       min_keep=min_keep, trace=trace,
                       objective_retained_mass=retained_mass(blocks, clusters) if blocks is not None else None)


def random_prune(blocks, e_per_layer, min_keep=None, seed=None):
    """Merge uniformly random cluster pairs, ``e_per_layer`` times per layer."""
    if seed is None:
        raise ConfigError("random_prune needs an explicit seed")
    min_keep = _resolve_min_keep(blocks, min_keep)
    sizes = _sizes(blocks)
    e = _per_layer_budget(sizes, e_per_layer, min_keep)
    rng = np.random.default_rng(seed)
    counts = list(sizes)
    clusters, trace = [], []
    step = 0
    for l, n in enumerate(sizes):
        groups = [[i] for i in range(n)]
        for _ in range(e):
            a, b = sorted(rng.choice(len(groups), size=2, replace=False).tolist())
            i, j = groups[a][0], groups[b][0]
            groups[a] = sorted(groups[a] + groups.pop(b))
            counts[l] -= 1
            trace.append(TraceEvent(step=step, kind="merge", layer=l, pair=(min(i, j), max(i, j)),
                                    pair_similarity=float(_values(blocks[l])[i, j]),
                                    entropy_after=cluster_entropy(counts), frozen_set_after=[]))
            step += 1
        clusters.append(sorted(groups, key=min))
    return ClusterPlan(method="random", budget_total=sum(counts), clusters=clusters,
                       min_keep=min_keep, trace=trace,
                       objective_retained_mass=retained_mass(blocks, clusters))


def _best_subset_mass(values):
    """Minimum retained mass over all subsets of each size (index = subset size)."""
    n = values.shape[0]
    mass = np.zeros(1)
    size = np.zeros(1, dtype=np.int64)
    for i in range(n):
        # cross[s] = sum of values[i, j] over members j of subset s (subsets of 0..i-1)
        cross = np.zeros(1)
        for j in range(i):
            cross = np.concatenate([cross, cross + values[i, j]])
        mass = np.concatenate([mass, mass + 2.0 * cross])
        size = np.concatenate([size, size + 1])
    best = np.full(n + 1, np.inf)
    np.minimum.at(best, size, mass)
    return best


def oracle_allocate(blocks, k, min_keep=None):
    """Exhaustive minimum of retained mass over allocations and retained subsets.

    Returns ``(allocation, objective)``; among equal objectives the
    lexicographically first allocation wins.
    """
    sizes = _sizes(blocks)
    if sum(sizes) > ORACLE_MAX_EXPERTS:
        raise GuardError(f"oracle is limited to {ORACLE_MAX_EXPERTS} experts, got {sum(sizes)}")
    min_keep = _resolve_min_keep(blocks, min_keep)
    k = int(k)
    _check_budget(sizes, k, min_keep)
    best = [_best_subset_mass(_values(b)) for b in blocks]
    best_alloc, best_obj = None, math.inf
    for alloc in itertools.product(*[range(m, n + 1) for m, n in zip(min_keep, sizes)]):
        if sum(alloc) != k:
            continue
        obj = 0.0
        for l, kl in enumerate(alloc):
            obj += float(best[l][kl])
        if obj < best_obj:
            best_alloc, best_obj = list(alloc), obj
    return best_alloc, best_obj
