import math

import mpmath
import numpy as np
import pytest

from grape_moe.exceptions import BudgetInfeasibleError, BudgetMismatchError, ConfigError, GuardError
from grape_moe.planner import (
    ClusterPlan,
    budget_to_per_layer,
    cluster_entropy,
    count_guided_prune,
    gate_similarity_blocks,
    grape_prune,
    oracle_allocate,
    random_prune,
    router_guided_prune,
    uniform_prune,
)
from grape_moe.synth import Expert, MoeLayer, SynthMoeModel

from conftest import const_block, random_block
from replay import check_plan_invariants, replay_grape_trace

mpmath.mp.dps = 40


def mp_entropy(counts):
    total = sum(counts)
    return float(-mpmath.fsum(mpmath.mpf(c) / total * mpmath.log(mpmath.mpf(c) / total) for c in counts))


# frozen from mp_entropy([1, 2]) and log(2)
E_ONE_TWO = 0.6365141682948128
LN2 = 0.6931471805599453


def test_frozen_constants():
    assert mp_entropy([1, 2]) == pytest.approx(E_ONE_TWO, abs=1e-15)
    assert mp_entropy([1, 1]) == pytest.approx(LN2, abs=1e-15)


def test_entropy_examples():
    assert cluster_entropy([8, 8, 8, 8]) == pytest.approx(math.log(4), abs=1e-12)
    assert cluster_entropy([5]) == 0.0
    assert mp_entropy([1, 7]) == pytest.approx(0.376770, abs=1e-6)
    assert cluster_entropy([1, 7]) == pytest.approx(0.376770, abs=1e-5)


@pytest.mark.parametrize("counts", [[], [0, 3], [2, -1]])
def test_entropy_rejects(counts):
    with pytest.raises(ConfigError):
        cluster_entropy(counts)


def two_layer():
    return [const_block(0.9), const_block(0.3)]


def test_hand_trace_keep3_gamma_half():
    plan = grape_prune(two_layer(), 3, gamma=0.5, min_keep=[1, 1])
    assert plan.counts == [1, 2]
    assert [(e.kind, e.layer, e.pair) for e in plan.trace] == [("merge", 0, (0, 1))]
    ev = plan.trace[0]
    assert ev.pair_similarity == 0.9
    assert ev.entropy_after == pytest.approx(E_ONE_TWO, abs=1e-9)
    assert ev.frozen_set_after == []
    state = plan.entropy_state()
    assert state.threshold == pytest.approx(LN2 / 2, abs=1e-12)


def test_hand_trace_keep2_gamma_zero():
    plan = grape_prune(two_layer(), 2, gamma=0.0, min_keep=[1, 1])
    kinds = [(e.kind, e.layer, e.pair) for e in plan.trace]
    assert kinds == [("merge", 0, (0, 1)), ("freeze", 0, None), ("merge", 1, (0, 1))]
    assert plan.trace[0].entropy_after == pytest.approx(E_ONE_TWO, abs=1e-9)
    assert plan.trace[1].frozen_set_after == [0]
    assert plan.trace[2].entropy_after == pytest.approx(LN2, abs=1e-9)
    assert plan.counts == [1, 1]


def test_full_budget_is_identity():
    plan = grape_prune(two_layer(), 4, min_keep=[1, 1])
    assert plan.trace == []
    assert plan.clusters == [[[0], [1]], [[0], [1]]]
    assert plan.objective_retained_mass == pytest.approx(1.8 + 0.6)


def test_identical_blocks_round_robin(rng):
    b = random_block(rng, 6)
    plan = grape_prune([b.copy() for _ in range(4)], 20, gamma=0.5, min_keep=1)
    assert plan.counts == [5, 5, 5, 5]
    assert [e.layer for e in plan.trace if e.kind == "merge"] == [0, 1, 2, 3]


def test_residual_mass_shrinks_with_merges():
    # capture-before-zero: the second pick in layer 0 must see R reduced by 2 * 0.9
    blocks = [const_block(0.9, 3), const_block(0.5, 3)]
    plan = grape_prune(blocks, 4, gamma=1.0, min_keep=1)
    # R0 = 5.4 -> 3.6 after one merge, still above R1 = 3.0, so layer 0 again
    assert [e.layer for e in plan.trace] == [0, 0]
    blocks = [const_block(0.6, 3), const_block(0.5, 3)]
    plan = grape_prune(blocks, 4, gamma=1.0, min_keep=1)
    # R0 = 3.6 -> 2.4 < R1 = 3.0
    assert [e.layer for e in plan.trace] == [0, 1]


def test_noop_merge_consumes_mass_not_budget():
    # merges (0,1), (0,2) put 0,1,2 together; (1,2) is then a no-op
    v = np.array([[0, .9, .8, .1], [.9, 0, .7, .1], [.8, .7, 0, .1], [.1, .1, .1, 0]])
    plan = grape_prune([v], 1, gamma=1.0, min_keep=[1])
    pairs = [e.pair for e in plan.trace]
    assert pairs == [(0, 1), (0, 2), (1, 2), (0, 3)]
    assert plan.counts == [1]
    assert len(plan.trace) == 4


def test_zero_similarity_layers_do_not_loop():
    z = np.zeros((4, 4))
    plan = grape_prune([z, z.copy()], 2, gamma=0.0, min_keep=1)
    assert plan.counts == [1, 1]


def test_floor_respected_under_dominant_layer(rng):
    # one layer near-duplicate, the rest weakly similar: the collapse scenario
    blocks = [random_block(rng, 8) * 0.05 for _ in range(3)] + [const_block(0.99, 8)]
    plan = grape_prune(blocks, 12, gamma=1.0, min_keep=2)
    assert all(c >= 2 for c in plan.counts)
    check_plan_invariants(plan, [8] * 4, 12, [2] * 4)
    replay_grape_trace(blocks, plan)


def test_budget_errors():
    with pytest.raises(BudgetInfeasibleError):
        grape_prune(two_layer(), 5, min_keep=[1, 1])
    with pytest.raises(BudgetInfeasibleError):
        grape_prune(two_layer(), 1, min_keep=[1, 1])
    with pytest.raises(ConfigError):
        grape_prune(two_layer(), 3, gamma=1.5)


def test_min_keep_defaults_to_block_top_k(rng):
    from grape_moe.similarity import SimilarityBlock
    blocks = [SimilarityBlock(l, random_block(rng, 4), top_k=2) for l in range(2)]
    assert grape_prune(blocks, 4, gamma=1.0).min_keep == [2, 2]


def test_gamma_one_never_freezes(rng):
    for _ in range(20):
        sizes = rng.integers(2, 9, size=4)
        blocks = [random_block(rng, n) for n in sizes]
        plan = grape_prune(blocks, int(sizes.sum()) - 5, gamma=1.0, min_keep=1)
        assert not any(e.kind == "freeze" for e in plan.trace)


def test_gamma_zero_freezes_on_any_drop(rng):
    blocks = [random_block(rng, 6) for _ in range(3)]
    plan = grape_prune(blocks, 14, gamma=0.0, min_keep=1)
    first = plan.trace[0]
    assert first.kind == "merge" and first.entropy_after < math.log(3)
    assert plan.trace[1].kind == "freeze" and plan.trace[1].layer == first.layer


def test_restart_happens_and_replays(rng):
    blocks = [random_block(rng, 6) for _ in range(3)]
    plan = grape_prune(blocks, 8, gamma=0.0, min_keep=1)
    assert any(e.kind == "restart" for e in plan.trace)
    replay_grape_trace(blocks, plan)


def test_fuzz_grape_invariants(rng):
    for _ in range(100):
        L = int(rng.integers(1, 6))
        sizes = [int(n) for n in rng.integers(2, 10, size=L)]
        min_keep = [int(rng.integers(1, n + 1)) for n in sizes]
        k = int(rng.integers(sum(min_keep), sum(sizes) + 1))
        gamma = float(rng.choice([0.0, 0.25, 0.5, 1.0]))
        blocks = [random_block(rng, n) for n in sizes]
        plan = grape_prune(blocks, k, gamma=gamma, min_keep=min_keep)
        check_plan_invariants(plan, sizes, k, min_keep)
        replay_grape_trace(blocks, plan)


def test_plan_json_round_trip_and_determinism(rng):
    blocks = [random_block(rng, 5) for _ in range(3)]
    a = grape_prune(blocks, 9, gamma=0.25, min_keep=1)
    b = grape_prune([x.copy() for x in blocks], 9, gamma=0.25, min_keep=1)
    assert a.to_json() == b.to_json()
    back = ClusterPlan.from_json(a.to_json())
    assert back.to_json() == a.to_json()


def test_uniform_examples(rng):
    blocks = [random_block(rng, 4) for _ in range(3)]
    ident = uniform_prune(blocks, 0, min_keep=1)
    assert ident.is_identity and ident.trace == []
    plan = uniform_prune([const_block(0.9), const_block(0.1)], 1, min_keep=1)
    assert plan.counts == [1, 1]
    with pytest.raises(BudgetInfeasibleError):
        uniform_prune(blocks, 4, min_keep=1)


def test_uniform_budget_mismatch():
    with pytest.raises(BudgetMismatchError):
        budget_to_per_layer([2, 2], 3)
    assert budget_to_per_layer([8] * 6, 36) == 2


def test_uniform_merges_most_similar_pair():
    v = np.array([[0, .1, .2], [.1, 0, .8], [.2, .8, 0]])
    plan = uniform_prune([v], 1, min_keep=1)
    assert plan.clusters == [[[0], [1, 2]]]


def test_count_guided_examples():
    plan = count_guided_prune([[10, 1, 5, 4]], 1, min_keep=[1])
    assert plan.clusters == [[[0, 1], [2], [3]]]
    assert count_guided_prune([[3, 3, 3]], 0, min_keep=[1]).is_identity
    plan = count_guided_prune([[3, 3, 3, 3]], 2, min_keep=[1])
    assert plan.clusters == [[[0, 2, 3], [1]]]


def _gate_model(gate):
    n, d = gate.shape
    experts = [Expert(np.eye(d), np.eye(d)) for _ in range(n)]
    return SynthMoeModel(d, d, [MoeLayer(np.asarray(gate, float), experts, 1)], [0.0], 0)


def test_router_guided_duplicate_rows_merge_first():
    gate = np.array([[1.0, 0.2, 0.0], [0.0, 1.0, 0.3], [1.0, 0.2, 0.0]])
    plan = router_guided_prune(_gate_model(gate), 1, min_keep=[1])
    assert plan.clusters == [[[0, 2], [1]]]


def test_router_guided_orthogonal_rows_use_tie_rule():
    plan = router_guided_prune(_gate_model(np.eye(3)), 1, min_keep=[1])
    assert plan.clusters == [[[0, 1], [2]]]
    plan = router_guided_prune(_gate_model(np.eye(4)), 3, min_keep=[1])
    assert plan.counts == [1]
    assert router_guided_prune(_gate_model(np.eye(3)), 0, min_keep=[1]).is_identity


def test_gate_similarity_is_clipped_cosine():
    (v,) = gate_similarity_blocks(_gate_model(np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 1.0]])))
    assert v[0, 1] == 0.0
    assert v[0, 2] == pytest.approx(1 / math.sqrt(2))


def test_random_prune_needs_seed_and_is_reproducible(rng):
    blocks = [random_block(rng, 5) for _ in range(2)]
    with pytest.raises(ConfigError):
        random_prune(blocks, 1)
    a = random_prune(blocks, 2, min_keep=1, seed=3)
    assert a.to_json() == random_prune(blocks, 2, min_keep=1, seed=3).to_json()
    assert a.counts == [3, 3]


def brute_force_min_mass(values, size):
    from itertools import combinations
    n = values.shape[0]
    best = math.inf
    for subset in combinations(range(n), size):
        best = min(best, sum(values[i, j] for i in subset for j in subset if i != j))
    return best


def test_oracle_examples(rng):
    alloc, obj = oracle_allocate(two_layer(), 3, min_keep=[1, 1])
    assert alloc == [1, 2] and obj == pytest.approx(0.6)
    blocks = [random_block(rng, 4), random_block(rng, 3)]
    alloc, obj = oracle_allocate(blocks, 7, min_keep=1)
    assert alloc == [4, 3]
    assert obj == pytest.approx(sum(b.sum() for b in blocks), abs=1e-12)
    alloc, obj = oracle_allocate(blocks, 2, min_keep=1)
    assert alloc == [1, 1] and obj == 0.0


def test_oracle_subset_search_matches_combinations(rng):
    blocks = [random_block(rng, 5), random_block(rng, 4)]
    for k in range(2, 10):
        alloc, obj = oracle_allocate(blocks, k, min_keep=1)
        expected = min(
            brute_force_min_mass(blocks[0], a) + brute_force_min_mass(blocks[1], k - a)
            for a in range(max(1, k - 4), min(5, k - 1) + 1))
        assert obj == pytest.approx(expected, abs=1e-12)


def test_oracle_guard():
    with pytest.raises(GuardError):
        oracle_allocate([const_block(0.1, 13), const_block(0.1, 12)], 20, min_keep=1)


def test_identical_constant_blocks_match_oracle(rng):
    for _ in range(30):
        L, n = int(rng.integers(1, 5)), int(rng.integers(2, 7))
        if L * n > 24:
            continue
        c = float(rng.uniform(0.05, 1.0))
        blocks = [const_block(c, n) for _ in range(L)]
        k = int(rng.integers(L, L * n + 1))
        plan = grape_prune(blocks, k, gamma=1.0, min_keep=1)
        _, best = oracle_allocate(blocks, k, min_keep=1)
        assert plan.objective_retained_mass == pytest.approx(best, abs=1e-9)
