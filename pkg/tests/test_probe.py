import math

import numpy as np
import pytest

import reference as ref
from permsort.diffcore import Tensor
from permsort.env import all_permutations, apply_swap, inversion_count, is_sorted
from permsort.errors import ContractViolation
from permsort.model import ModelConfig, act_greedy, forward, init_params
from permsort.probe import (
    MOST_NEGATIVE, MOST_POSITIVE, MetricsReport, ProbeConfig, accuracy_from_actions, evaluation_set,
    extract_trace_data, greedy_trap_rate_from_actions, non_inversion_batch, non_inversion_proportion,
    run_probes, select_convention, sorting_accuracy, swap_rank, swap_ranks_batch, write_trace_csvs,
)


def first_descent(perms):
    return np.argmax(perms[:, :-1] > perms[:, 1:], axis=1)


def first_ascent(perms):
    return np.argmax(perms[:, :-1] < perms[:, 1:], axis=1)


def oracle_params():
    """A length-3 network that attends to token 3 and reads off its position.

    Position 0 or 2 of the largest token -> swap 0; position 1 -> swap 1.
    That choice is a correct swap on all five unsorted states.
    """
    params = {k: v.data.copy() for k, v in init_params(ModelConfig(3, 4), 0).items()}
    params["token_embed"] = np.array([[t, 1, 0, 0] for t in (1, 2, 3)], dtype=np.float32)
    params["pos_embed"] = np.array([[0, 0, 1, 0], [0, 0, 0, 1], [0, 0, 0, 0]], dtype=np.float32)
    wq = np.zeros((4, 4), np.float32)
    wq[1, 0] = 40.0            # constant query
    wk = np.zeros((4, 4), np.float32)
    wk[0, 0] = 1.0             # key = token value
    wv = np.zeros((4, 4), np.float32)
    wv[2, 2] = wv[3, 3] = 1.0  # value = position indicator
    params["layer0.w_q"], params["layer0.w_k"], params["layer0.w_v"] = wq, wk, wv
    params["actor.w"] = np.array([[0, 0], [0, 0], [1, 0], [0, 2]], dtype=np.float32)
    params["actor.b"] = np.array([0.5, 0.0], dtype=np.float32)
    return {k: Tensor(v) for k, v in params.items()}


# non-inversion --------------------------------------------------------------

def test_non_inversion_examples():
    assert non_inversion_proportion((0.1, 0.2, 0.3, 0.4), (1, 2, 3, 4)) == 1.0
    assert non_inversion_proportion((0.9, 0.5, 0.1), (1, 2, 3)) == 0.0
    assert non_inversion_proportion((0.1, 0.2, 0.3), (2, 1, 3)) == pytest.approx(2 / 3)


def test_non_inversion_ties_count_against():
    assert non_inversion_proportion((0.2, 0.2, 0.2), (1, 2, 3)) == 0.0
    with pytest.raises(ContractViolation):
        non_inversion_proportion((0.1, 0.2), (1, 2, 3))


# swap rank ------------------------------------------------------------------

def test_swap_rank_examples():
    w = (0.1, 0.5, 0.2, 0.9)
    assert [swap_rank(w, a) for a in (1, 0, 2)] == [1, 2, 3]
    assert swap_rank(w, 2, MOST_POSITIVE) == 1
    assert swap_rank((0.3, 0.3, 0.3, 0.3), 0) == 1
    assert swap_rank((0.3, 0.3, 0.3, 0.3), 2) == 3


def test_swap_rank_argmin_difference_is_rank_one():
    rng = np.random.default_rng(0)
    for _ in range(100):
        w = rng.random(6)
        assert swap_rank(w, int(np.argmin(np.diff(w)))) == 1


# accuracy and trap rate -------------------------------------------------------

def test_oracle_and_anti_oracle_accuracy():
    perms = all_permutations(4)
    assert accuracy_from_actions(perms, first_descent(perms)) == 1.0
    # the fully reversed permutation has no ascending pair to pick
    inner = perms[1:-1]
    assert accuracy_from_actions(inner, first_ascent(inner)) == 0.0


def test_correct_swap_is_inversion_reduction():
    perms = all_permutations(4)
    for a in range(3):
        acts = np.full(len(perms), a)
        assert accuracy_from_actions(perms, acts) == ref.accuracy(perms, acts)


def test_perfect_accuracy_sorts_optimally():
    params = oracle_params()
    for p in all_permutations(3):
        p = tuple(int(t) for t in p)
        steps, q = 0, p
        while not is_sorted(q):
            q = apply_swap(q, act_greedy(params, q))
            steps += 1
        assert steps == inversion_count(p)


def test_perfect_accuracy_policy_sorts_length_five_optimally():
    # any policy that always picks a correct swap needs exactly inversion_count steps
    for p in all_permutations(5):
        p = tuple(int(t) for t in p)
        steps, q = 0, p
        while not is_sorted(q):
            q = apply_swap(q, int(first_descent(np.array([q]))[0]))
            steps += 1
        assert steps == inversion_count(p)


def test_trap_rate_zero_for_perfect_policy():
    perms = all_permutations(4)
    assert greedy_trap_rate_from_actions(perms, first_descent(perms)) == 0.0


def test_largest_descent_heuristic_trap_rate_equals_error_rate():
    perms = all_permutations(4)
    acts = np.argmax(perms[:, :-1] - perms[:, 1:], axis=1)
    err = 1 - accuracy_from_actions(perms, acts)
    assert greedy_trap_rate_from_actions(perms, acts) == err == 0.0


def test_random_policy_trap_rate_is_strictly_inside_error_rate():
    rng = np.random.default_rng(0)
    unsorted = all_permutations(4)[1:]
    perms = unsorted[rng.integers(0, len(unsorted), 10_000)]
    acts = rng.integers(0, 3, 10_000)
    err = 1 - accuracy_from_actions(perms, acts)
    trap = greedy_trap_rate_from_actions(perms, acts)
    assert 0 < trap < err


# oracle equivalence -----------------------------------------------------------

@pytest.mark.parametrize("n", [3, 4, 5])
def test_metrics_equal_reference(n):
    rng = np.random.default_rng(n)
    perms = all_permutations(n)
    acts = rng.integers(0, n - 1, len(perms))
    w = rng.random((len(perms), n))
    w[::7, 1] = w[::7, 0]  # plant ties
    assert accuracy_from_actions(perms, acts) == ref.accuracy(perms, acts)
    assert greedy_trap_rate_from_actions(perms, acts) == ref.trap_rate(perms, acts)
    assert non_inversion_batch(w, perms).tolist() == [ref.non_inversion(r, p) for r, p in zip(w, perms)]
    for conv in (MOST_NEGATIVE, MOST_POSITIVE):
        assert swap_ranks_batch(w, acts, conv).tolist() == [ref.swap_rank(r, a, conv) for r, a in zip(w, acts)]
    conv, rates, _ = select_convention(w, acts)
    assert (conv, rates) == ref.top_k(w, acts)


def test_top_k_monotone_and_complete():
    rng = np.random.default_rng(1)
    w = rng.random((500, 5))
    _, rates, _ = select_convention(w, rng.integers(0, 4, 500))
    vals = [rates[k] for k in sorted(rates)]
    assert vals == sorted(vals) and vals[-1] == 1.0


def test_convention_tie_prefers_most_negative():
    conv, _, _ = select_convention(np.full((4, 3), 0.5), np.zeros(4, dtype=int))
    assert conv == MOST_NEGATIVE


# pre / post softmax -----------------------------------------------------------

def test_pre_and_post_softmax_agree_on_order():
    params = init_params(ModelConfig(5, 8), 2)
    out = forward(params, all_permutations(5))
    pre, post = out.trace.last_row_scores, out.trace.last_row_weights
    perms = all_permutations(5)
    assert np.array_equal(non_inversion_batch(pre, perms), non_inversion_batch(post, perms))


def test_swap_rank_can_differ_between_pre_and_post():
    # softmax keeps the order of values, not of their differences
    s = np.array([0.0, 1.0, 1.5, 2.3])
    w = np.exp(s) / np.exp(s).sum()
    assert swap_rank(s, 1) == 1
    assert swap_rank(w, 0) == 1


# consistency link -------------------------------------------------------------

def test_perfect_order_weights_make_most_negative_rule_correct():
    perms = all_permutations(5)
    w = perms / 10.0  # last row strictly ordered like the tokens
    assert np.all(non_inversion_batch(w, perms) == 1.0)
    acts = np.argmin(np.diff(w, axis=1), axis=1)
    assert accuracy_from_actions(perms, acts) == 1.0


# model-level probes -----------------------------------------------------------

def test_evaluation_set():
    assert len(evaluation_set(4)) == 24
    big = evaluation_set(9, ProbeConfig(sample_size=500, seed=3))
    assert len(big) == 500 == len({tuple(r) for r in big})
    assert np.array_equal(big, evaluation_set(9, ProbeConfig(sample_size=500, seed=3)))


def test_hand_built_oracle_probe():
    params = oracle_params()
    assert sorting_accuracy(params) == 1.0
    rep = run_probes(params)
    assert rep.greedy_trap_rate == 0.0 and rep.error_rate == 0.0
    assert rep.n_permutations_evaluated == 6


def test_fresh_model_accuracy_near_enumerated_baseline():
    params = init_params(ModelConfig(4, 16), 0)
    perms = all_permutations(4)[1:]
    # baseline: share of unsorted states where a uniformly chosen action is correct
    baseline = np.mean([np.mean(p[:-1] > p[1:]) for p in perms])
    acc = sorting_accuracy(params)
    greedy = np.array([act_greedy(params, p) for p in perms])
    assert acc == ref.accuracy(perms, greedy)
    assert abs(acc - baseline) <= 0.1


def test_metrics_report_round_trip():
    rep = run_probes(init_params(ModelConfig(4, 8), 1))
    back = MetricsReport.from_dict(rep.to_dict())
    assert back == rep
    for v in (rep.accuracy, rep.non_inversion_proportion, rep.greedy_trap_rate, *rep.top_k_hit_rates.values()):
        assert 0.0 <= v <= 1.0


def test_pre_source_gives_same_non_inversion():
    params = init_params(ModelConfig(4, 8), 5)
    post = run_probes(params, ProbeConfig(weight_source="post"))
    pre = run_probes(params, ProbeConfig(weight_source="pre"))
    assert pre.non_inversion_proportion == post.non_inversion_proportion


def test_trace_export(tmp_path):
    params = init_params(ModelConfig(4, 8), 0)
    data = extract_trace_data(params)
    assert len(data.heatmap) == 16
    rows = np.zeros((4, 4))
    for r, c, v in data.heatmap:
        rows[r, c] = v
    np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-5)
    tokens = [t for t, _ in data.violin]
    assert sorted(set(tokens)) == [1, 2, 3, 4]
    assert all(tokens.count(t) == math.factorial(4) for t in range(1, 5))
    paths = write_trace_csvs(data, tmp_path)
    assert paths["violin"].read_text().splitlines()[0] == "token_id,weight"
    assert paths["heatmap"].read_text().splitlines()[0] == "row,col,weight"
    assert len(paths["violin"].read_text().splitlines()) == 1 + 4 * 24


def test_ordered_agent_exports_increasing_last_row():
    # scores rise with the token value, so on the sorted input the last row increases
    params = oracle_params()
    rep = run_probes(params)
    last = [v for r, c, v in extract_trace_data(params).heatmap if r == 2]
    assert rep.non_inversion_sorted_input == 1.0
    assert all(a < b for a, b in zip(last, last[1:]))
