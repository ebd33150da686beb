"""Turn a cluster plan into a smaller model."""
from __future__ import annotations

import numpy as np

from .exceptions import ConfigError, PlanError
from .synth import Expert, MoeLayer, SynthMoeModel

MERGE_MODES = ("average", "representative")


def pick_representative(members, values=None):
    """Member with the largest similarity to the rest of its cluster; ties go low."""
    members = sorted(members)
    if values is None or len(members) == 1:
        return members[0]
    sub = np.asarray(values)[np.ix_(members, members)]
    scores = sub.sum(axis=1) - np.diag(sub)
    return members[int(np.argmax(scores))]


def _merge_cluster(layer, members, mode, values):
    if len(members) == 1:
        e = layer.experts[members[0]]
        return Expert(e.w_in.copy(), e.w_out.copy()), layer.gate[members[0]].copy()
    if mode == "representative":
        rep = pick_representative(members, values)
        e = layer.experts[rep]
        return Expert(e.w_in.copy(), e.w_out.copy()), layer.gate[rep].copy()
    w_in = np.mean([layer.experts[i].w_in for i in members], axis=0)
    w_out = np.mean([layer.experts[i].w_out for i in members], axis=0)
    gate = np.mean([layer.gate[i] for i in members], axis=0)
    return Expert(w_in, w_out), gate


def apply_plan(model, plan, mode="average", blocks=None):
    """Build the pruned model: one expert per cluster, router rows merged alike.

    ``mode="average"`` averages member weights and router rows;
    ``mode="representative"`` keeps one member untouched and drops the rest.
    ``blocks`` supplies the similarities used to choose representatives; without
    them the lowest index is kept.
    """
    if mode not in MERGE_MODES:
        raise ConfigError(f"unknown merge mode {mode!r}; choose from {MERGE_MODES}")
    if len(plan.clusters) != model.n_layers:
        raise PlanError(f"plan has {len(plan.clusters)} layers, model has {model.n_layers}")
    layers = []
    for l, (layer, groups) in enumerate(zip(model.layers, plan.clusters)):
        members = sorted(i for g in groups for i in g)
        if members != list(range(layer.n_experts)):
            raise PlanError(f"layer {l}: plan clusters do not partition its {layer.n_experts} experts")
        if len(groups) < layer.top_k:
            raise ConfigError(f"layer {l}: {len(groups)} retained experts < top_k={layer.top_k}")
        values = None
        if blocks is not None:
            values = blocks[l].values if hasattr(blocks[l], "values") else blocks[l]
        experts, gate_rows = [], []
        for g in sorted(groups, key=min):
            ex, row = _merge_cluster(layer, sorted(g), mode, values)
            experts.append(ex)
            gate_rows.append(row)
        layers.append(MoeLayer(gate=np.vstack(gate_rows), experts=experts, top_k=layer.top_k))
    return SynthMoeModel(d_model=model.d_model, d_ff=model.d_ff, layers=layers,
                         planted_redundancy=list(model.planted_redundancy), seed=model.seed)
