import numpy as np
import pytest

from marginkd.errors import ContractError
from marginkd.nets import embeddings, init_mlp
from marginkd.synthdata import GeneratorConfig, generate_from_config
from marginkd.theory import (DistanceReport, empirical_distances, lambda_sweep, loss_lower_bounds,
                             minimize_free_embeddings, minimize_tuplet, paired_comparison, pairwise_distances,
                             report_from_similarities, sensitivity_view, theorem1_check, theorem2_bound_check,
                             theorem2_constants)
from marginkd.train import TrainConfig


def _label_embedder(ds):
    """Maps each dataset row to the one-hot vector of its label."""
    label_of = {row.tobytes(): int(y) for row, y in zip(ds.X, ds.y)}

    def embed(X):
        out = np.zeros((len(X), ds.c))
        out[np.arange(len(X)), [label_of[row.tobytes()] for row in X]] = 1.0
        return out

    return embed


def test_constant_embedder_has_equal_distances(small_ds):
    rep = empirical_distances(lambda X: np.tile([1.0, 0.0, 0.0], (len(X), 1)), small_ds, anchors=5, m=4, n=4,
                              seed=0)
    assert rep.d_intra == pytest.approx(np.e)
    assert rep.d_inter == pytest.approx(np.e)
    assert rep.K == 1.0 and len(rep.per_anchor) == 5


def test_class_one_hot_embedder_distances(small_ds):
    # without augmentation the positive is the anchor row itself
    rep = empirical_distances(_label_embedder(small_ds), small_ds, anchors=10, m=3, n=5, seed=1, aug_strength=0.0)
    assert rep.d_intra == pytest.approx(np.e)
    assert rep.d_inter == pytest.approx(1.0)
    assert rep.l_inter == pytest.approx(np.log1p(5 * np.exp(-1.0)))
    assert rep.K == pytest.approx(5 / 3)


def test_sampled_indices_replay_the_report(small_ds):
    model = init_mlp([4, 16, 8, 3], seed=0)
    rep = empirical_distances(model, small_ds, anchors=8, m=5, n=6, seed=2)
    emb = embeddings(model, small_ds.X)
    for r in rep.per_anchor:
        i, intra_idx, inter_idx = r.indices
        assert len(set(intra_idx.tolist())) == 5 and i not in intra_idx
        assert np.all(small_ds.y[intra_idx] == small_ds.y[i])
        assert np.all(small_ds.y[inter_idx] != small_ds.y[i])
        assert r.d_intra == pytest.approx(np.mean(np.exp(emb[intra_idx] @ emb[i])), rel=1e-9)
        assert r.d_inter == pytest.approx(np.mean(np.exp(emb[inter_idx] @ emb[i])), rel=1e-9)
    assert rep.d_intra == pytest.approx(np.mean([r.d_intra for r in rep.per_anchor]))


def test_sampling_is_seeded(small_ds):
    model = init_mlp([4, 16, 8, 3], seed=0)
    a = empirical_distances(model, small_ds, anchors=4, m=3, n=3, seed=7)
    b = empirical_distances(model, small_ds, anchors=4, m=3, n=3, seed=7)
    assert a.to_dict() == b.to_dict()


def test_empirical_distances_rejects_oversized_sets(small_ds):
    with pytest.raises(ContractError):
        empirical_distances(lambda X: X, small_ds, anchors=1, m=20, n=1, seed=0)
    with pytest.raises(ContractError):
        empirical_distances(lambda X: X, small_ds, anchors=0, m=1, n=1, seed=0)


def test_exact_identity_holds_per_anchor(small_ds):
    model = init_mlp([4, 16, 8, 3], seed=4)
    exact, _ = theorem1_check(empirical_distances(model, small_ds, anchors=20, m=8, n=16, seed=0))
    assert exact < 1e-9


def test_exact_identity_on_random_similarities(rng):
    for _ in range(200):
        m, n = rng.integers(1, 50, size=2)
        rep = report_from_similarities(rng.uniform(-1, 1), rng.uniform(-1, 1, m), rng.uniform(-1, 1, n))
        assert theorem1_check(rep)[0] < 1e-9


@pytest.mark.parametrize("m, n, tol", [(10_000, 10_000, 0.02), (5_000, 20_000, 0.05)])
def test_asymptotic_identity_at_large_sets(rng, m, n, tol):
    rep = report_from_similarities(rng.uniform(-1, 1), rng.uniform(-1, 1, m), rng.uniform(-1, 1, n))
    exact, asymptotic = theorem1_check(rep)
    assert exact < 1e-9
    assert asymptotic < tol
    assert rep.K == n / m


def test_asymptotic_form_is_biased_for_single_negatives():
    rep = report_from_similarities(1.0, [-1.0], [1.0])
    exact, asymptotic = theorem1_check(rep)
    assert exact < 1e-9
    assert asymptotic > 0.5


def test_report_needs_both_sets():
    with pytest.raises(ContractError):
        report_from_similarities(1.0, [], [0.5])


def test_constants_positive_and_reciprocal():
    grid = np.unique(np.logspace(0, 6, 25).astype(int))
    for m in grid:
        for n in grid:
            c0, c1, c2, c3 = theorem2_constants(int(m), int(n))
            assert min(c0, c1, c2, c3) > 0
            assert c1 * c3 == pytest.approx(1.0, abs=1e-12)


def test_constants_at_single_negative():
    c0, c1, c2, c3 = theorem2_constants(1, 1)
    direct = np.log(1 + np.e ** 2) / np.log(1 + np.e ** -2) - 1
    assert c0 == pytest.approx(15.757, abs=1e-3)
    assert c0 == pytest.approx(direct, rel=1e-12)
    assert c2 == pytest.approx(c0)


def test_equal_set_sizes_give_unit_c1_c3():
    _, c1, _, c3 = theorem2_constants(8, 8)
    assert c1 == 1.0 and c3 == 1.0


def test_constants_reject_empty_sets():
    with pytest.raises(ContractError):
        theorem2_constants(0, 4)


def test_lower_bounds_single_negative():
    inter_lb, intra_lb = loss_lower_bounds(1, 1)
    assert inter_lb == pytest.approx(0.126928, abs=1e-6)
    assert intra_lb == inter_lb
    assert loss_lower_bounds(4, 16) == pytest.approx((np.log1p(16 * np.exp(-2)), np.log1p(4 * np.exp(-2))))


@pytest.mark.parametrize("count", [1, 4, 16])
def test_tuplet_losses_never_beat_the_lower_bound(unit_rows, count):
    rng = np.random.default_rng(count)
    inter_lb, intra_lb = loss_lower_bounds(count, count)
    for _ in range(10_000):
        vecs = unit_rows(rng, 2 + 2 * count, 5)
        a = vecs[0]
        rep = report_from_similarities(a @ vecs[1], vecs[2:2 + count] @ a, vecs[2 + count:] @ a)
        assert rep.l_inter >= inter_lb - 1e-9
        assert rep.l_intra >= intra_lb - 1e-9


@pytest.mark.parametrize("n", [1, 2, 4])
def test_projected_descent_reaches_the_bound(n):
    final, bound = minimize_tuplet(n, seed=n)
    assert bound == pytest.approx(np.log1p(n * np.exp(-2)))
    assert final >= bound - 1e-9
    assert final - bound < 1e-3


def test_bound_check_arithmetic():
    rep = theorem2_bound_check(1.0, 1.0, lam=1.0, m=8, n=8)
    c0 = theorem2_constants(8, 8)[0]
    assert rep.lower == pytest.approx(1 / (c0 + 1))
    assert rep.upper == pytest.approx(c0 + 1)
    assert rep.satisfied and rep.ratio == 1.0
    assert rep.to_dict()["lambda"] == 1.0
    assert not theorem2_bound_check(100.0, 1.0, lam=1.0, m=8, n=8).satisfied


def test_bound_check_rejects_degenerate_inputs():
    with pytest.raises(ContractError):
        theorem2_bound_check(1.0, 0.0, lam=1.0, m=8, n=8)
    with pytest.raises(ContractError):
        theorem2_bound_check(1.0, 1.0, lam=0.0, m=8, n=8)


@pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
def test_minimizer_ratio_lies_within_bounds(lam):
    for seed in range(3):
        res = minimize_free_embeddings(c=4, per_class=8, dim=16, m=8, n=8, lam=lam, seed=seed)
        inter_lb, intra_lb = loss_lower_bounds(8, 8)
        assert res.l_inter >= inter_lb - 1e-9 and res.l_intra >= intra_lb - 1e-9
        assert res.total == pytest.approx(res.l_inter + lam * res.l_intra)
        rep = theorem2_bound_check(res.l_intra, res.l_inter, lam, 8, 8, converged=res.converged)
        assert rep.satisfied, rep


def test_larger_lambda_lowers_the_intra_loss():
    low = minimize_free_embeddings(lam=0.1, seed=0)
    high = minimize_free_embeddings(lam=10.0, seed=0)
    assert high.l_intra < low.l_intra
    assert high.l_intra / high.l_inter < low.l_intra / low.l_inter


def test_pairwise_distances_small_example():
    emb = np.array([[0.0, 0.0], [0.0, 1.0], [3.0, 0.0]])
    intra, inter = pairwise_distances(emb, np.array([0, 0, 1]))
    assert intra == pytest.approx(1.0)
    assert inter == pytest.approx((3.0 + np.sqrt(10.0)) / 2)


def test_pairwise_distances_need_a_repeated_class():
    emb = np.eye(3)
    with pytest.raises(ContractError, match="class sizes"):
        pairwise_distances(emb, np.array([0, 1, 2]))
    with pytest.raises(ContractError):
        pairwise_distances(emb, np.array([0, 0, 0]))


def test_paired_comparison():
    control = np.array([0.80, 0.82, 0.79, 0.81, 0.83])
    treated = control + np.array([0.02, 0.03, 0.025, 0.035, 0.02])
    res = paired_comparison(treated, control)
    assert res.significant() and res.mean_diff == pytest.approx(0.026)
    assert not paired_comparison(control, treated).significant()
    assert paired_comparison(control + 0.01, control).p_value == 0.0
    assert paired_comparison(control - 0.01, control).p_value == 1.0
    with pytest.raises(ContractError):
        paired_comparison([1.0], [0.5])


def test_sweep_requires_control_and_seeds(small_ds):
    with pytest.raises(ContractError):
        lambda_sweep(small_ds, [0.01, 0.02], TrainConfig(epochs=1), seeds=[0, 1, 2])
    with pytest.raises(ContractError):
        lambda_sweep(small_ds, [0.0, 0.02], TrainConfig(epochs=1), seeds=[0, 1])


def test_small_sweep_tables(small_ds):
    cfg = TrainConfig(epochs=2, batch_size=20, hidden_dims=[16], embed_dim=8, student_hidden_dims=[16],
                      capacity_m=4, lr_decay_epochs=[])
    result = lambda_sweep(small_ds, [0.0, 0.5], cfg, seeds=[0, 1, 2], gate_ablation=True)
    assert len(result.cells) == 6
    assert result.summary["lambda"].tolist() == [0.0, 0.5]
    assert result.summary["diverged"].tolist() == [0, 0]
    for col in ("intra_dist_mean", "intra_dist_std", "entropy_mean", "student_acc_mean", "overhead_ratio"):
        assert col in result.summary.columns
    assert result.overhead()[0.0] == pytest.approx(1.0)
    assert result.cells.loc[result.cells["lambda"] == 0.0, "intra_dist_no_gate"].isna().all()
    assert result.cells.loc[result.cells["lambda"] == 0.0, "student_acc_no_gate"].isna().all()
    ablated = result.cells[result.cells["lambda"] == 0.5]
    assert ablated["student_acc_no_gate"].between(0.0, 1.0).all()
    assert (ablated["entropy_no_gate"] > 0).all()
    for col in ("student_acc_no_gate_mean", "entropy_no_gate_mean"):
        assert col in result.summary.columns
    assert result.cells.loc[result.cells["lambda"] == 0.5, "intra_dist_no_gate"].notna().all()
    view = sensitivity_view(result)
    assert view.loc[view["lambda"] == 0.0, "delta_vs_control"].iloc[0] == 0.0
    treated = view[view["lambda"] == 0.5].iloc[0]
    assert treated["gate_gain"] == pytest.approx(treated["student_acc_mean"] - treated["student_acc_no_gate_mean"])
    assert "gate_gain" not in sensitivity_view(lambda_sweep(small_ds, [0.0, 0.5], cfg, seeds=[0, 1, 2])).columns
    again = lambda_sweep(small_ds, [0.0, 0.5], cfg, seeds=[0, 1, 2], gate_ablation=True)
    assert again.cells["student_acc"].tolist() == result.cells["student_acc"].tolist()


def test_distance_report_dict():
    rep = DistanceReport(1.0, 2.0, 0.5, 0.6, 4, 8, 2.0)
    assert rep.to_dict()["anchors"] == 1


@pytest.mark.slow
def test_intra_term_spreads_classes_and_softens_labels():
    ds = generate_from_config(GeneratorConfig())
    cells = lambda_sweep(ds, [0.0, 0.03], TrainConfig(), seeds=[0, 1, 2, 3, 4], workers=-1).cells
    treated, control = cells[cells["lambda"] == 0.03], cells[cells["lambda"] == 0.0]
    assert paired_comparison(treated["intra_dist"], control["intra_dist"]).significant()
    assert paired_comparison(treated["entropy"], control["entropy"]).significant()


@pytest.mark.slow
def test_students_of_intra_teachers_are_not_worse():
    ds = generate_from_config(GeneratorConfig())
    cells = lambda_sweep(ds, [0.0, 0.02], TrainConfig(), seeds=list(range(10)), workers=-1).cells
    treated = cells.loc[cells["lambda"] == 0.02, "student_acc"].mean()
    control = cells.loc[cells["lambda"] == 0.0, "student_acc"].mean()
    assert treated >= control - 0.005
