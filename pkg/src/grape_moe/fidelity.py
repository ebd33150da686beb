"""Output and routing fidelity of a pruned model against its original."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import List

import numpy as np

from .exceptions import ShapeError
from .matrix import as_matrix
from .synth import layer_forward


@dataclass
class FidelityReport:
    layer_mse: List[float]
    end_to_end_mse: float
    routing_kl: float
    n_tokens: int
    method: str = ""

    def metrics(self):
        out = {"end_to_end_mse": self.end_to_end_mse, "routing_kl": self.routing_kl,
               "tokens": self.n_tokens}
        for l, v in enumerate(self.layer_mse):
            out[f"layer_{l}_mse"] = v
        return out


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def _kl(p, q):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * (np.log(p) - np.log(q)), 0.0)
    return np.maximum(terms.sum(axis=1), 0.0)


def evaluate(original, pruned, plan, tokens, teacher_forced=False):
    """Compare layer outputs and router distributions on ``tokens``.

    By default each model runs on its own activations, so errors compound
    through depth. ``teacher_forced=True`` feeds the pruned layers the
    original layer inputs instead.

    The routing term is the mean, over layers and tokens, of the KL divergence
    between the original router's full softmax (summed within each cluster)
    and the pruned router's full softmax.
    """
    x = as_matrix(tokens, "tokens")
    if original.d_model != pruned.d_model or original.n_layers != pruned.n_layers:
        raise ShapeError("original and pruned models are not dimensionally compatible")
    if x.shape[1] != original.d_model:
        raise ShapeError(f"tokens have width {x.shape[1]}, model expects {original.d_model}")
    if len(plan.clusters) != original.n_layers:
        raise ShapeError(f"plan has {len(plan.clusters)} layers, model has {original.n_layers}")

    xo = xp = x
    layer_mse, kls = [], []
    for l, (lo, lp) in enumerate(zip(original.layers, pruned.layers)):
        if lp.n_experts != len(plan.clusters[l]):
            raise ShapeError(f"layer {l}: pruned model has {lp.n_experts} experts, "
                             f"plan has {len(plan.clusters[l])} clusters")
        if teacher_forced:
            xp = xo
        probs_o = _softmax(xo @ lo.gate.T)
        probs_p = _softmax(xp @ lp.gate.T)
        agg = np.zeros_like(probs_p)
        np.add.at(agg.T, plan.assignment(l), probs_o.T)
        kls.append(_kl(agg, probs_p))
        yo, _, _ = layer_forward(lo, xo)
        yp, _, _ = layer_forward(lp, xp)
        layer_mse.append(float(np.mean((yo - yp) ** 2)))
        xo, xp = yo, yp
    return FidelityReport(layer_mse=layer_mse, end_to_end_mse=float(np.mean((xo - xp) ** 2)),
                          routing_kl=float(np.mean(np.concatenate(kls))), n_tokens=x.shape[0],
                          method=plan.method)


@dataclass
class ComparisonTable:
    columns: List[str]
    rows: List[list]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v)
                             for v in row])
        return buf.getvalue()

    def column(self, name):
        idx = self.columns.index(name)
        return {row[0]: row[idx] for row in self.rows}


def compare(reports):
    """Tabulate named reports, one row per method sorted by name.

    ``reports`` is a mapping or a sequence of ``(name, report)`` pairs.
    """
    items = sorted(reports.items() if hasattr(reports, "items") else reports, key=lambda kv: kv[0])
    n_layers = max((len(r.layer_mse) for _, r in items), default=0)
    columns = ["method", "end_to_end_mse", "routing_kl", "tokens"] + \
        [f"layer_{l}_mse" for l in range(n_layers)]
    rows = []
    for name, r in items:
        m = r.metrics()
        rows.append([name] + [m.get(c) for c in columns[1:]])
    return ComparisonTable(columns=columns, rows=rows)
