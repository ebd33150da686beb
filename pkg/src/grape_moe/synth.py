"""Synthetic sparse-MoE stacks with planted per-layer redundancy.

Each layer holds a linear router and ``N_l`` experts ``phi(x) = gelu(x @ w_in) @ w_out``.
Layers are stacked without attention, residuals or normalisation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.special import erf

from .exceptions import ConfigError, DataError, ShapeError
from .matrix import as_matrix

_SQRT2 = math.sqrt(2.0)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


@dataclass
class Expert:
    w_in: np.ndarray
    w_out: np.ndarray

    def __call__(self, x):
        return gelu(x @ self.w_in) @ self.w_out


@dataclass
class MoeLayer:
    gate: np.ndarray
    experts: List[Expert]
    top_k: int

    def __post_init__(self):
        if self.gate.shape[0] != len(self.experts):
            raise ShapeError(
                f"gate has {self.gate.shape[0]} rows but layer has {len(self.experts)} experts")
        if not 1 <= self.top_k <= len(self.experts):
            raise ConfigError(f"top_k={self.top_k} outside [1, {len(self.experts)}]")

    @property
    def n_experts(self):
        return len(self.experts)


@dataclass
class SynthMoeModel:
    d_model: int
    d_ff: int
    layers: List[MoeLayer]
    planted_redundancy: List[float]
    seed: int

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("model needs at least one layer")
        for li, layer in enumerate(self.layers):
            if layer.gate.shape[1] != self.d_model:
                raise ShapeError(f"layer {li}: gate width {layer.gate.shape[1]} != d_model")
            for ei, ex in enumerate(layer.experts):
                if ex.w_in.shape != (self.d_model, self.d_ff) or ex.w_out.shape != (self.d_ff, self.d_model):
                    raise ShapeError(f"layer {li} expert {ei}: inconsistent weight shapes")

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def n_per_layer(self):
        return [layer.n_experts for layer in self.layers]

    @property
    def top_k(self):
        return [layer.top_k for layer in self.layers]

    def to_dict(self):
        return {
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "seed": self.seed,
            "planted_redundancy": [float(r) for r in self.planted_redundancy],
            "layers": [
                {
                    "top_k": layer.top_k,
                    "gate": layer.gate.tolist(),
                    "experts": [{"w_in": e.w_in.tolist(), "w_out": e.w_out.tolist()}
                                for e in layer.experts],
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            layers = [
                MoeLayer(
                    gate=as_matrix(ld["gate"], "gate"),
                    experts=[Expert(as_matrix(e["w_in"], "w_in"), as_matrix(e["w_out"], "w_out"))
                             for e in ld["experts"]],
                    top_k=int(ld["top_k"]),
                )
                for ld in data["layers"]
            ]
            return cls(
                d_model=int(data["d_model"]),
                d_ff=int(data["d_ff"]),
                layers=layers,
                planted_redundancy=[float(r) for r in data["planted_redundancy"]],
                seed=int(data["seed"]),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed model document: {exc!r}") from exc

    def to_json(self):
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class CalibrationCapture:
    """Activations recorded from one pass of calibration tokens.

    ``expert_outputs[l][e]`` is expert ``e`` of layer ``l`` applied to *every*
    token of that layer's input, whether or not the router selected it.
    """
    layer_inputs: List[np.ndarray]
    expert_outputs: List[List[np.ndarray]]
    visit_counts: List[List[int]]
    top_k: List[int] = field(default_factory=list)

    @property
    def n_tokens(self):
        return self.layer_inputs[0].shape[0]

    def to_dict(self):
        return {
            "T": self.n_tokens,
            "top_k": list(self.top_k),
            "visit_counts": [list(map(int, v)) for v in self.visit_counts],
            "layer_inputs": [x.tolist() for x in self.layer_inputs],
            "expert_outputs": [[y.tolist() for y in layer] for layer in self.expert_outputs],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                layer_inputs=[as_matrix(x, "layer_input") for x in data["layer_inputs"]],
                expert_outputs=[[as_matrix(y, "expert_output") for y in layer]
                                for layer in data["expert_outputs"]],
                visit_counts=[[int(c) for c in v] for v in data["visit_counts"]],
                top_k=[int(k) for k in data.get("top_k", [])],
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed capture document: {exc!r}") from exc


def _n_bases(n, r):
    # guard against 8 * (1 - 0.75) style rounding pushing ceil up by one
    return max(1, math.ceil(n * (1.0 - r) - 1e-9))


def generate_model(n_layers, n_per_layer, d_model, d_ff, top_k, redundancy_levels, seed):
    """Build a random model whose layer ``l`` has redundancy ``redundancy_levels[l]``.

    A layer with redundancy ``r`` and ``N`` experts draws ``ceil(N * (1 - r))``
    base experts; expert ``i`` is base ``i mod n_bases`` plus Gaussian noise of
    standard deviation ``(1 - r) * sigma0``, with ``sigma0 = 1 / sqrt(d_model)``.
    Gate rows are independent draws.
    """
    if isinstance(n_per_layer, int):
        n_per_layer = [n_per_layer] * n_layers
    n_per_layer = [int(n) for n in n_per_layer]
    levels = [float(r) for r in redundancy_levels]
    if n_layers < 1:
        raise ConfigError("n_layers must be >= 1")
    if len(n_per_layer) != n_layers or len(levels) != n_layers:
        raise ConfigError(
            f"expected {n_layers} expert counts and redundancy levels, "
            f"got {len(n_per_layer)} and {len(levels)}")
    if d_model < 1 or d_ff < 1:
        raise ConfigError("d_model and d_ff must be positive")
    if any(not 0.0 <= r <= 1.0 for r in levels):
        raise ConfigError(f"redundancy levels must lie in [0, 1], got {levels}")
    if any(n < top_k for n in n_per_layer) or top_k < 1:
        raise ConfigError(f"top_k={top_k} must be in [1, min(n_per_layer)]")

    rng = np.random.default_rng(seed)
    sigma0 = 1.0 / math.sqrt(d_model)
    layers = []
    for n, r in zip(n_per_layer, levels):
        gate = rng.normal(0.0, sigma0, size=(n, d_model))
        n_bases = _n_bases(n, r)
        bases = [(rng.normal(0.0, sigma0, size=(d_model, d_ff)),
                  rng.normal(0.0, sigma0, size=(d_ff, d_model))) for _ in range(n_bases)]
        noise_std = (1.0 - r) * sigma0
        experts = []
        for i in range(n):
            w_in, w_out = bases[i % n_bases]
            experts.append(Expert(w_in + noise_std * rng.standard_normal(w_in.shape),
                                  w_out + noise_std * rng.standard_normal(w_out.shape)))
        layers.append(MoeLayer(gate=gate, experts=experts, top_k=int(top_k)))
    return SynthMoeModel(d_model=int(d_model), d_ff=int(d_ff), layers=layers,
                         planted_redundancy=levels, seed=int(seed))


def calibration_tokens(n_tokens, d_model, seed):
    """i.i.d. standard Gaussian tokens."""
    return np.random.default_rng(seed).standard_normal((n_tokens, d_model))


def route(layer, x):
    """Top-k routing: returns (selected indices T x k, coefficients T x k).

    Ties in logits go to the lower expert index. Coefficients are a softmax
    over the selected logits only.
    """
    logits = x @ layer.gate.T
    order = np.argsort(-logits, axis=1, kind="stable")
    selected = order[:, :layer.top_k]
    chosen = np.take_along_axis(logits, selected, axis=1)
    chosen = chosen - chosen.max(axis=1, keepdims=True)
    weights = np.exp(chosen)
    weights /= weights.sum(axis=1, keepdims=True)
    return selected, weights


def layer_forward(layer, x, expert_outputs=None):
    """Mix expert outputs by routing coefficients. Experts run on every token."""
    if expert_outputs is None:
        expert_outputs = [expert(x) for expert in layer.experts]
    selected, weights = route(layer, x)
    y = np.zeros((x.shape[0], expert_outputs[0].shape[1]))
    for e in range(layer.n_experts):
        coef = (weights * (selected == e)).sum(axis=1)
        y += coef[:, None] * expert_outputs[e]
    return y, selected, weights


def _check_tokens(model, tokens):
    tokens = as_matrix(tokens, "tokens")
    if tokens.shape[1] != model.d_model:
        raise ShapeError(f"tokens have width {tokens.shape[1]}, model expects {model.d_model}")
    return tokens


def forward(model, tokens, return_layer_outputs=False):
    x = _check_tokens(model, tokens)
    outs = []
    for layer in model.layers:
        x, _, _ = layer_forward(layer, x)
        outs.append(x)
    if return_layer_outputs:
        return x, outs
    return x


def capture_calibration(model, tokens):
    x = _check_tokens(model, tokens)
    layer_inputs, expert_outputs, visit_counts = [], [], []
    for layer in model.layers:
        layer_inputs.append(x)
        outs = [expert(x) for expert in layer.experts]
        expert_outputs.append(outs)
        y, selected, _ = layer_forward(layer, x, expert_outputs=outs)
        visit_counts.append(np.bincount(selected.ravel(), minlength=layer.n_experts).tolist())
        x = y
    return CalibrationCapture(layer_inputs=layer_inputs, expert_outputs=expert_outputs,
                              visit_counts=visit_counts, top_k=model.top_k)
