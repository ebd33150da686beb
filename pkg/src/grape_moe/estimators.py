"""scikit-learn style wrappers around the similarity and planning functions.

``ExpertSimilarity`` is a transformer from a calibration capture (or a model,
for ``weight_cka``) to per-layer similarity blocks. The pruners are fitted on
whatever their planner consumes and ``transform`` a model into its pruned
version::

    blocks = ExpertSimilarity(metric="cka").fit_transform(capture)
    pruner = GrapePruner(prune_per_layer=2, gamma=0.5).fit(blocks)
    small = pruner.transform(model)
"""
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError
from .merge import apply_plan
from .planner import (
    count_guided_prune,
    grape_prune,
    random_prune,
    router_guided_prune,
    uniform_prune,
)
from .similarity import METRICS, check_blocks, similarity_blocks


class ExpertSimilarity(TransformerMixin, BaseEstimator):
    def __init__(self, metric="cka"):
        self.metric = metric

    def fit(self, X, y=None):
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}; choose from {METRICS}")
        self.n_layers_ = len(X.layers) if hasattr(X, "layers") else len(X.expert_outputs)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_layers_")
        return similarity_blocks(X, self.metric)


class _PlanTransformer(BaseEstimator):
    """Shared ``transform``: apply the fitted plan to a model."""

    def transform(self, X):
        check_is_fitted(self, "plan_")
        return apply_plan(X, self.plan_, mode=self.merge_mode, blocks=getattr(self, "blocks_", None))

    @property
    def counts_(self):
        check_is_fitted(self, "plan_")
        return self.plan_.counts


class GrapePruner(_PlanTransformer):
    """Global entropy-safeguarded pruning.

    Exactly one of ``n_keep`` (experts kept model-wide) or ``prune_per_layer``
    (keep ``sum(N_l - e)``, the same total a uniform plan would keep) is set.
    """

    def __init__(self, n_keep=None, prune_per_layer=None, gamma=0.5, min_keep=None,
                 merge_mode="average"):
        self.n_keep = n_keep
        self.prune_per_layer = prune_per_layer
        self.gamma = gamma
        self.min_keep = min_keep
        self.merge_mode = merge_mode

    def _budget(self, sizes):
        if (self.n_keep is None) == (self.prune_per_layer is None):
            raise ConfigError("set exactly one of n_keep and prune_per_layer")
        if self.n_keep is not None:
            return int(self.n_keep)
        return sum(n - int(self.prune_per_layer) for n in sizes)

    def fit(self, X, y=None):
        self.blocks_ = check_blocks(X)
        k = self._budget([b.n for b in self.blocks_])
        self.plan_ = grape_prune(self.blocks_, k, gamma=self.gamma, min_keep=self.min_keep)
        return self


class UniformPruner(_PlanTransformer):
    def __init__(self, prune_per_layer=1, min_keep=None, merge_mode="average"):
        self.prune_per_layer = prune_per_layer
        self.min_keep = min_keep
        self.merge_mode = merge_mode

    def fit(self, X, y=None):
        self.blocks_ = check_blocks(X)
        self.plan_ = uniform_prune(self.blocks_, self.prune_per_layer, min_keep=self.min_keep)
        return self


class RandomPruner(_PlanTransformer):
    def __init__(self, prune_per_layer=1, min_keep=None, random_state=None, merge_mode="average"):
        self.prune_per_layer = prune_per_layer
        self.min_keep = min_keep
        self.random_state = random_state
        self.merge_mode = merge_mode

    def fit(self, X, y=None):
        self.blocks_ = check_blocks(X)
        self.plan_ = random_prune(self.blocks_, self.prune_per_layer, min_keep=self.min_keep,
                                  seed=self.random_state)
        return self


class CountGuidedPruner(_PlanTransformer):
    """Fitted on a calibration capture; ``y`` may carry similarity blocks for objective accounting."""

    def __init__(self, prune_per_layer=1, min_keep=None, merge_mode="average"):
        self.prune_per_layer = prune_per_layer
        self.min_keep = min_keep
        self.merge_mode = merge_mode

    def fit(self, X, y=None):
        blocks = check_blocks(y) if y is not None else None
        self.plan_ = count_guided_prune(X, self.prune_per_layer, min_keep=self.min_keep, blocks=blocks)
        if blocks is not None:
            self.blocks_ = blocks
        return self


class RouterGuidedPruner(_PlanTransformer):
    """Fitted on the model itself (router rows); ``y`` as for :class:`CountGuidedPruner`."""

    def __init__(self, prune_per_layer=1, min_keep=None, merge_mode="average"):
        self.prune_per_layer = prune_per_layer
        self.min_keep = min_keep
        self.merge_mode = merge_mode

    def fit(self, X, y=None):
        blocks = check_blocks(y) if y is not None else None
        self.plan_ = router_guided_prune(X, self.prune_per_layer, min_keep=self.min_keep, blocks=blocks)
        if blocks is not None:
            self.blocks_ = blocks
        return self
