import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from popsteer import bias, data
from popsteer import sae as sae_mod
from popsteer.backbone import BackboneConfig, BackboneModel, embed_histories, train_backbone
from popsteer.errors import ConfigError, DataError


def stats_from_d(d, sigma=None):
    d = np.asarray(d, dtype=float)
    sigma = np.ones_like(d) if sigma is None else np.asarray(sigma, dtype=float)
    z = np.zeros_like(d)
    return bias.NeuronStats(z, sigma, z, sigma, d, sigma, 10, 10)


def two_pass_stats(pop, unpop):
    """Independent oracle: explicit two-pass means and population variances."""
    def moments(A):
        mu = [sum(col) / len(col) for col in A.T]
        var = [sum((v - m) ** 2 for v in col) / len(col) for col, m in zip(A.T, mu)]
        return np.array(mu), np.sqrt(var)
    mp, sp = moments(pop)
    mu, su = moments(unpop)
    pooled = np.sqrt((sp**2 + su**2) / 2)
    d = np.array([(a - b) / s if s > 0 else 0.0 for a, b, s in zip(mp, mu, pooled)])
    return mp, sp, mu, su, d, pooled


# ----------------------------------------------------------------- Cohen's d


def test_cohens_d_examples():
    d, pooled = bias.cohens_d([1.0], [1.0], [0.0], [1.0])
    assert d[0] == 1.0 and pooled[0] == 1.0
    s = bias.NeuronStats.from_samples(np.array([[1.0], [1.0]]), np.array([[0.0], [0.0]]))
    assert s.cohens_d[0] == 0.0 and s.degenerate[0]
    same = np.random.default_rng(0).random((5, 3))
    assert not bias.NeuronStats.from_samples(same, same).cohens_d.any()


moment_arrays = hnp.arrays(np.float64, st.tuples(st.integers(1, 12), st.just(4)),
                           elements=st.floats(0, 5, allow_nan=False) | st.just(0.0))


@given(moment_arrays, moment_arrays)
def test_cohens_d_matches_two_pass_oracle(pop, unpop):
    s = bias.NeuronStats.from_samples(pop, unpop)
    mp, sp, mu, su, d, pooled = two_pass_stats(pop, unpop)
    for got, want in zip((s.mu_pop, s.sigma_pop, s.mu_unpop, s.sigma_unpop, s.sigma_pooled), (mp, sp, mu, su, pooled)):
        assert np.allclose(got, want, rtol=0, atol=1e-12)
    ok = pooled > 1e-6  # avoid amplifying rounding in near-degenerate columns
    assert np.allclose(s.cohens_d[ok], d[ok], rtol=1e-12, atol=1e-12)
    assert np.isfinite(s.cohens_d).all() and (s.sigma_pooled >= 0).all()


@given(st.lists(moment_arrays, min_size=1, max_size=5))
def test_merged_moments_equal_single_pass(chunks):
    merged = bias.RunningMoments(4)
    for c in chunks:
        merged = merged.merge(bias.RunningMoments.from_batch(c))
    full = bias.RunningMoments.from_batch(np.vstack(chunks))
    assert merged.count == full.count
    assert np.allclose(merged.mean, full.mean, atol=1e-12) and np.allclose(merged.std, full.std, atol=1e-9)


def test_empty_population_is_an_error():
    with pytest.raises(DataError):
        _ = bias.RunningMoments(3).std


# ----------------------------------------------------------------- steering


def test_plan_weight_example():
    s = stats_from_d([0.5, -2.5, 1.5, 1.0])
    plan = bias.build_steering_plan(s, alpha=2.0, n_select=2)
    assert plan.neurons.tolist() == [1, 2]
    assert plan.weights.tolist() == [2.0, 1.0]
    assert plan.directions == ("boost", "suppress")
    full = bias.build_steering_plan(s, alpha=2.0, n_select=4)
    assert full.weights[full.neurons.tolist().index(0)] == 0.0


def test_plan_rejects_bad_input():
    with pytest.raises(DataError, match="normalization undefined"):
        bias.build_steering_plan(stats_from_d([1.0, -1.0]), 1.0, 1)
    with pytest.raises(ConfigError):
        bias.build_steering_plan(stats_from_d([1.0, 2.0]), -1.0, 1)
    with pytest.raises(ConfigError):
        bias.build_steering_plan(stats_from_d([1.0, 2.0]), 1.0, 3)


def test_zero_d_neurons_are_never_selected():
    plan = bias.build_steering_plan(stats_from_d([0.0, 2.0, 0.0, -1.0]), 1.0, 4)
    assert plan.neurons.tolist() == [1, 3]


def test_ties_break_by_ascending_id():
    plan = bias.build_steering_plan(stats_from_d([1.0, -2.0, 2.0, 0.5]), 1.0, 2)
    assert plan.neurons.tolist() == [1, 2]


d_vectors = hnp.arrays(np.float64, st.integers(2, 16), elements=st.floats(-4, 4, allow_nan=False))


@given(d_vectors, st.floats(0, 5), st.data())
def test_plan_invariants(d, alpha, draw):
    if np.ptp(np.abs(d)) == 0:
        return
    n_select = draw.draw(st.integers(0, len(d)))
    plan = bias.build_steering_plan(stats_from_d(d), alpha, n_select)
    assert ((plan.weights >= 0) & (plan.weights <= alpha + 1e-12)).all()
    for j, direction in zip(plan.neurons, plan.directions):
        assert (direction == "boost") == (d[j] < 0) and d[j] != 0
    chosen = np.abs(d[plan.neurons])
    rest = np.delete(np.abs(d), plan.neurons)
    if len(chosen) and len(rest) and len(plan.neurons) == n_select:
        assert chosen.min() >= rest.max()


def test_steer_examples():
    plan = bias.SteeringPlan(3, np.array([0, 2]), np.array([0.5, 1.0]), ("suppress", "boost"), np.array([2.0, 0.5]))
    out = bias.steer(np.array([1.0, 0.7, 0.0]), plan)
    assert out.tolist() == [0.0, 0.7, 0.5]
    sparse = sae_mod.SparseActivation(np.array([0]), np.array([1.0]), 3)
    assert bias.steer(sparse, plan).tolist() == [0.0, 0.0, 0.5]
    with pytest.raises(DataError):
        bias.steer(np.zeros(4), plan)


@given(hnp.arrays(np.float64, (3, 10), elements=st.floats(0, 3)), hnp.arrays(np.float64, 10, elements=st.floats(-4, 4)),
       st.floats(0, 4), st.integers(0, 10))
def test_steer_moves_in_the_planned_direction(A, d, alpha, n_select):
    if np.ptp(np.abs(d)) == 0:
        return
    plan = bias.build_steering_plan(stats_from_d(d, sigma=np.linspace(0.1, 2, 10)), alpha, n_select)
    out = bias.steer(A, plan)
    boost = [j for j, dr in zip(plan.neurons, plan.directions) if dr == "boost"]
    supp = [j for j, dr in zip(plan.neurons, plan.directions) if dr == "suppress"]
    untouched = np.setdiff1d(np.arange(10), plan.neurons)
    assert (out[:, boost] >= A[:, boost]).all()
    assert (out[:, supp] <= A[:, supp]).all() and (out >= 0).all()
    assert np.array_equal(out[:, untouched], A[:, untouched])
    zero = bias.build_steering_plan(stats_from_d(d), 0.0, n_select)
    assert np.array_equal(bias.steer(A, zero), A)


def test_boost_changes_output_by_decoder_column():
    s = sae_mod.init_sae(6, 2, 2, seed=3)
    x = np.random.default_rng(0).normal(size=6)
    base = sae_mod.reconstruct(s, x[None])[0]
    j, delta = 7, 0.3
    plan = bias.SteeringPlan(s.n, np.array([j]), np.array([delta]), ("boost",), np.array([1.0]))
    assert np.allclose(bias.steered_user_embedding(s, plan, x) - base, delta * s.W_dec[:, j])
    empty = bias.SteeringPlan(s.n, np.zeros(0, int), np.zeros(0), (), np.zeros(0))
    assert np.array_equal(bias.steered_user_embedding(s, empty, x), base)


# -------------------------------------------------------------------- noise


def test_noise_is_seeded_clamped_and_targets_top_neurons():
    stats = stats_from_d([0.1, -3.0, 2.0, 0.2])
    A = np.full((2, 4), 0.5)
    assert np.array_equal(bias.noise_ablation(A, 2, 0.0, 1, stats), A)
    a = bias.noise_ablation(A, 2, 1.0, 5, stats)
    b = bias.noise_ablation(A, 2, 1.0, 5, stats)
    assert np.array_equal(a, b) and (a >= 0).all()
    assert np.array_equal(a[:, [0, 3]], A[:, [0, 3]]) and not np.array_equal(a[:, [1, 2]], A[:, [1, 2]])
    with pytest.raises(ConfigError):
        bias.noise_ablation(A, 2, -1.0, 0, stats)


def test_noise_transform_is_per_user():
    stats = stats_from_d([1.0, -2.0, 3.0])
    tf = bias.noise_transform(stats, 3, 0.5, seed=9)
    A = np.ones((4, 3))
    whole = tf(A, np.arange(4))
    parts = np.vstack([tf(A[:2], np.arange(2)), tf(A[2:], np.arange(2, 4))])
    assert np.array_equal(whole, parts)
    assert np.array_equal(bias.noise_transform(stats, 3, 0.0, 9)(A, np.arange(4)), A)


def test_chunked_map_is_thread_independent():
    fn = lambda lo, hi: np.arange(lo, hi) ** 2  # noqa: E731
    one = np.concatenate(bias.chunked_map(fn, 1000, threads=1, chunk=64))
    four = np.concatenate(bias.chunked_map(fn, 1000, threads=4, chunk=64))
    assert np.array_equal(one, four) and np.array_equal(one, np.arange(1000) ** 2)


# ------------------------------------------------------- pipeline-level pieces


@pytest.fixture(scope="module")
def fitted(small_split):
    bb = train_backbone(small_split, BackboneConfig(dim=8, epochs=3, learning_rate=0.01, seed=0))
    X = embed_histories(bb, small_split.train)
    sae = sae_mod.train_sae(sae_mod.init_sae(8, 4, 3, seed=0), X, sae_mod.SaeConfig(scale=4, k=3, epochs=3, batch_size=32))
    part = data.partition_popularity(small_split)
    pop = data.synthesize_profiles(small_split, part, "pop", 0)
    unpop = data.synthesize_profiles(small_split, part, "unpop", 1)
    return bb, sae, pop, unpop


@pytest.mark.parametrize("stage", bias.STAGES)
def test_collected_stats_match_direct_computation(fitted, stage):
    bb, sae, pop, unpop = fitted
    s = bias.collect_activation_stats(sae, bb, pop, unpop, stage=stage)
    A_pop = bias.stage_activations(sae, embed_histories(bb, pop.sequences()), stage)
    A_unpop = bias.stage_activations(sae, embed_histories(bb, unpop.sequences()), stage)
    ref = bias.NeuronStats.from_samples(A_pop, A_unpop)
    assert np.allclose(s.cohens_d, ref.cohens_d, atol=1e-10) and s.n_pop == pop.n_users
    threaded = bias.collect_activation_stats(sae, bb, pop, unpop, threads=3, stage=stage)
    assert np.array_equal(s.cohens_d, threaded.cohens_d)


def test_stage_validation(fitted):
    with pytest.raises(ConfigError):
        bias.stage_activations(fitted[1], np.zeros((1, 8)), "sideways")


def test_deactivation_study_k0_equals_reconstruction(fitted, small_split):
    from popsteer.evaluation import evaluate_pipeline

    bb, sae, pop, unpop = fitted
    s = bias.collect_activation_stats(sae, bb, pop, unpop, stage="pre_mask")
    side = "popular" if (s.cohens_d > 0.2).any() else "unpopular"
    count = len(bias.qualifying_neurons(s, 0.2, side))
    series = bias.deactivation_study(sae, bb, s, small_split, 0.2, [0, count], side)
    assert series[0][1] == evaluate_pipeline(bb, small_split, None, sae=sae).gini
    with pytest.raises(ConfigError):
        bias.deactivation_study(sae, bb, s, small_split, 0.2, [count + 1], side)
    with pytest.raises(DataError):
        bias.deactivation_study(sae, bb, s, small_split, 1e9, [0], side)


def test_qualifying_neurons_order_and_sides():
    s = stats_from_d([1.5, -2.0, 3.0, -1.2, 0.4])
    assert bias.qualifying_neurons(s, 1.0, "popular").tolist() == [2, 0]
    assert bias.qualifying_neurons(s, 1.0, "unpopular").tolist() == [1, 3]
    with pytest.raises(ConfigError):
        bias.qualifying_neurons(s, 1.0, "both")


def test_stats_and_plan_files_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = bias.NeuronStats.from_samples(rng.random((6, 5)), rng.random((7, 5)))
    bias.write_neuron_stats(s, tmp_path / "n.tsv", stage="q")
    back = bias.read_neuron_stats(tmp_path / "n.tsv", stage="q")
    assert np.array_equal(back.cohens_d, s.cohens_d) and (back.n_pop, back.n_unpop) == (6, 7)
    plan = bias.build_steering_plan(s, 1.5, 3)
    bias.write_plan(plan, tmp_path / "p.tsv")
    p2 = bias.read_plan(tmp_path / "p.tsv")
    assert p2.n == 5 and np.array_equal(p2.weights, plan.weights) and p2.directions == plan.directions
