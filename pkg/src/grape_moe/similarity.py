"""Pairwise expert similarity blocks (one symmetric matrix per MoE layer)."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ConfigError, DataError, DegenerateInputError, ShapeError
from .matrix import as_matrix, center_columns, frobenius_norm

METRICS = ("cka", "mse", "weight_cka")


@dataclass
class SimilarityBlock:
    """Similarity matrix ``D`` for one layer: symmetric, zero diagonal, entries in [0, 1]."""
    layer: int
    values: np.ndarray
    metric: str = "cka"
    top_k: Optional[int] = None

    def __post_init__(self):
        v = as_matrix(self.values, "similarity values")
        if v.shape[0] != v.shape[1]:
            raise ShapeError(f"similarity block must be square, got {v.shape}")
        if v.shape[0] < 2:
            raise ConfigError("a similarity block needs at least two experts")
        if not np.allclose(v, v.T, rtol=0.0, atol=1e-12):
            raise DataError(f"layer {self.layer}: similarity block is not symmetric")
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise DataError(f"layer {self.layer}: similarity entries must lie in [0, 1]")
        v = v.copy()
        np.fill_diagonal(v, 0.0)
        self.values = v

    @property
    def n(self):
        return self.values.shape[0]

    def to_dict(self):
        d = {"layer": self.layer, "metric": self.metric, "n": self.n,
             "values": self.values.tolist()}
        if self.top_k is not None:
            d["top_k"] = self.top_k
        return d

    @classmethod
    def from_dict(cls, data):
        try:
            block = cls(layer=int(data["layer"]), values=data["values"],
                        metric=data.get("metric", "cka"), top_k=data.get("top_k"))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed similarity block: {exc!r}") from exc
        if "n" in data and int(data["n"]) != block.n:
            raise DataError(f"layer {block.layer}: n={data['n']} but values are {block.n}x{block.n}")
        return block


def blocks_to_json(blocks):
    return json.dumps([b.to_dict() for b in blocks], separators=(",", ":"))


def blocks_from_json(text):
    data = json.loads(text)
    if not isinstance(data, list):
        raise DataError("similarity file must hold a list of blocks")
    return [SimilarityBlock.from_dict(d) for d in data]


def _is_constant(raw, centred):
    # centring a constant column leaves rounding residue, so compare relatively
    return frobenius_norm(centred) <= 1e-12 * max(frobenius_norm(raw), 1e-300)


def linear_cka(x, y):
    """Linear CKA between two activation matrices with the same shape.

    ``||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)`` on column-centred inputs.
    """
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape != y.shape:
        raise ShapeError(f"CKA inputs differ in shape: {x.shape} vs {y.shape}")
    if x.shape[0] < 2:
        raise ShapeError("CKA needs at least two samples")
    xc = center_columns(x)
    yc = center_columns(y)
    for name, raw, cen in (("x", x, xc), ("y", y, yc)):
        if _is_constant(raw, cen):
            raise DegenerateInputError(f"{name} is constant in every column")
    cross = frobenius_norm(yc.T @ xc)
    denom = frobenius_norm(xc.T @ xc) * frobenius_norm(yc.T @ yc)
    if denom == 0.0:
        raise DegenerateInputError("CKA denominator is zero")
    return cross * cross / denom


def _finalize(values, layer, metric, top_k):
    values = np.clip(values, 0.0, 1.0)
    values = 0.5 * (values + values.T)
    np.fill_diagonal(values, 0.0)
    return SimilarityBlock(layer=layer, values=values, metric=metric, top_k=top_k)


def _check_outputs(outputs):
    outputs = [as_matrix(o, "expert output") for o in outputs]
    if len(outputs) < 2:
        raise ConfigError("need at least two experts to compare")
    shape = outputs[0].shape
    for e, o in enumerate(outputs):
        if o.shape != shape:
            raise ShapeError(f"expert {e} output shape {o.shape} != {shape}")
    return outputs


def cka_similarity_block(outputs, layer=0, top_k=None, metric="cka"):
    outputs = _check_outputs(outputs)
    n = len(outputs)
    for e, o in enumerate(outputs):
        if _is_constant(o, center_columns(o)):
            raise DegenerateInputError(f"layer {layer}, expert {e}: output is constant in every column")
    values = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            values[i, j] = values[j, i] = linear_cka(outputs[i], outputs[j])
    return _finalize(values, layer, metric, top_k)


def mse_similarity_block(outputs, layer=0, top_k=None):
    """``D_ij = 1 - mse_ij / max mse``; the most dissimilar pair maps to 0.

    When every pair has zero MSE the block is all ones off the diagonal.
    """
    outputs = _check_outputs(outputs)
    n = len(outputs)
    mse = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            diff = outputs[i] - outputs[j]
            mse[i, j] = mse[j, i] = float(np.mean(diff * diff))
    top = mse.max()
    if top == 0.0:
        values = np.ones((n, n))
    else:
        values = 1.0 - mse / top
    return _finalize(values, layer, "mse", top_k)


def weight_cka_block(layer_obj, layer=0):
    """CKA on expert weights: each expert is ``[w_in | w_out^T]`` (d_model rows)."""
    mats = [np.hstack([e.w_in, e.w_out.T]) for e in layer_obj.experts]
    return cka_similarity_block(mats, layer=layer, top_k=layer_obj.top_k, metric="weight_cka")


def similarity_blocks(source, metric="cka"):
    """Build one block per layer.

    ``source`` is a :class:`~grape_moe.synth.CalibrationCapture` for the
    activation metrics (``cka``, ``mse``) or a model for ``weight_cka``.
    """
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}; choose from {METRICS}")
    if metric == "weight_cka":
        if not hasattr(source, "layers"):
            raise ConfigError("weight_cka needs a model, not a capture")
        return [weight_cka_block(layer, layer=l) for l, layer in enumerate(source.layers)]
    if not hasattr(source, "expert_outputs"):
        raise ConfigError(f"metric {metric!r} needs a calibration capture")
    top_ks = source.top_k or [None] * len(source.expert_outputs)
    fn = cka_similarity_block if metric == "cka" else mse_similarity_block
    return [fn(outs, layer=l, top_k=k)
            for l, (outs, k) in enumerate(zip(source.expert_outputs, top_ks))]


def check_blocks(blocks):
    """Validate a sequence of blocks or square arrays; returns SimilarityBlock objects."""
    if blocks is None or len(blocks) == 0:
        raise ConfigError("expected a non-empty sequence of similarity blocks")
    out = []
    for l, b in enumerate(blocks):
        out.append(b if isinstance(b, SimilarityBlock) else SimilarityBlock(layer=l, values=b))
    return out
