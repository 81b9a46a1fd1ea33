import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrsc.denoise import DenoisedModel, FixedRank, SingularValueCutoff, hsvt
from mrsc.errors import DegenerateModel, NoUsableColumns, PreconditionError
from mrsc.pipeline import run_mrsc
from mrsc.regression import (
    ForecastReport,
    MetricWeights,
    SyntheticControl,
    fit,
    min_norm_lstsq,
    predict,
    score,
)
from mrsc.synthgen import generate_lowrank_tensor
from mrsc.tensor import ObservationTensor, PanelSplit, flatten


def full(values):
    values = np.asarray(values, dtype=float)
    return ObservationTensor(values, np.ones(values.shape, bool))


def fit_tensor(tensor, split, rank, weights=None):
    panel = flatten(tensor, split)
    model = hsvt(panel, FixedRank(rank))
    return panel, model, fit(model, panel, split, weights)


# 3 donors x 4 pre-columns; beta from exact rational normal equations
M_HAND = np.array([[1.0, 2, 0, 1], [0, 1, 3, 1], [2, 0, 1, 4]])
X_HAND = np.array([3.0, 1, 2, 5])
BETA_HAND = [0.4057971014492754, 0.2608695652173913, 1.1304347826086956]


def hand_tensor():
    # K=2, T=3, t0=2: pre-columns are (m0,p0),(m0,p1),(m1,p0),(m1,p1)
    values = np.zeros((4, 3, 2))
    rows = np.vstack([X_HAND, M_HAND])
    values[:, :2, 0] = rows[:, :2]
    values[:, :2, 1] = rows[:, 2:]
    values[:, 2, :] = [[0, 0], [1, 2], [3, 1], [2, 5]]
    return full(values)


class TestFit:
    def test_hand_normal_equations(self):
        _, _, control = fit_tensor(hand_tensor(), PanelSplit(0, 2), 3)
        np.testing.assert_allclose(control.beta, BETA_HAND, atol=1e-8)
        assert control.solver == "MinNormPseudoinverse"
        assert control.fit_residual >= 0

    def test_treatment_equal_to_donor(self):
        rng = np.random.default_rng(0)
        values = rng.normal(size=(6, 10, 2))
        values[0] = values[3]
        tensor = full(values)
        split = PanelSplit(0, 6)
        panel, model, control = fit_tensor(tensor, split, 5)
        traj = predict(control, model).trajectories
        np.testing.assert_allclose(traj[:, :6], values[3, :6].T, atol=1e-8)

    def test_zero_weight_reduces_to_single_metric(self):
        rng = np.random.default_rng(1)
        values = rng.normal(size=(7, 12, 2))
        split = PanelSplit(0, 8)
        _, _, both = fit_tensor(full(values), split, 3, MetricWeights((1.0, 0.0)))
        panel1 = flatten(full(values[:, :, :1]), split)
        # same denoised block, so fit metric 0 of the K=2 model alone
        panel2 = flatten(full(values), split)
        model2 = hsvt(panel2, FixedRank(3))
        single = DenoisedModel(model2.block(0).copy(), model2.singular_values_all, 3, 1.0, 12, 1)
        alone = fit(single, panel1, split)
        np.testing.assert_allclose(both.beta, alone.beta, atol=1e-10)

    def test_missing_treatment_entries_dropped(self):
        values = np.random.default_rng(2).normal(size=(5, 6, 1))
        mask = np.ones(values.shape, bool)
        mask[0, 1, 0] = False
        panel = flatten(ObservationTensor(values, mask), PanelSplit(0, 4))
        control = fit(hsvt(panel, FixedRank(2)), panel, PanelSplit(0, 4))
        assert control.n_columns_used == 3

    def test_no_usable_columns(self):
        values = np.ones((4, 3, 1))
        mask = np.ones(values.shape, bool)
        mask[0, :2] = False
        panel = flatten(ObservationTensor(values, mask), PanelSplit(0, 2))
        with pytest.raises(NoUsableColumns):
            fit(hsvt(panel, FixedRank(1)), panel, PanelSplit(0, 2))

    def test_degenerate_model(self):
        panel = flatten(full(np.zeros((4, 3, 1))), PanelSplit(0, 2))
        with pytest.warns(DegenerateModel):
            control = fit(hsvt(panel, SingularValueCutoff(1.0)), panel, PanelSplit(0, 2))
        assert not control.beta.any()

    def test_deterministic(self):
        values = np.random.default_rng(3).normal(size=(9, 10, 2))
        a = fit_tensor(full(values), PanelSplit(0, 7), 3)[2].beta
        b = fit_tensor(full(values), PanelSplit(0, 7), 3)[2].beta
        assert a.tobytes() == b.tobytes()

    def test_round_trip_dict(self):
        control = fit_tensor(hand_tensor(), PanelSplit(0, 2), 3)[2]
        back = SyntheticControl.from_dict(control.to_dict())
        np.testing.assert_array_equal(back.beta, control.beta)
        assert back.weights == control.weights


class TestWeights:
    def test_rejects_all_zero(self):
        with pytest.raises(PreconditionError):
            MetricWeights((0.0, 0.0))

    def test_rejects_negative(self):
        with pytest.raises(PreconditionError):
            MetricWeights((1.0, -1.0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3), st.floats(0.1, 10.0))
def test_common_weight_scale_invariance(seed, scale, w2):
    values = np.random.default_rng(seed).normal(size=(8, 9, 2))
    split = PanelSplit(0, 6)
    a = fit_tensor(full(values), split, 3, MetricWeights((1.0, w2)))[2].beta
    b = fit_tensor(full(values), split, 3, MetricWeights((scale, scale * w2)))[2].beta
    np.testing.assert_allclose(a, b, atol=1e-8 * max(1.0, np.abs(a).max()))


class TestPredict:
    def test_basis_vector(self):
        values = np.random.default_rng(4).normal(size=(5, 4, 2))
        panel = flatten(full(values), PanelSplit(0, 2))
        model = hsvt(panel, FixedRank(3))
        control = SyntheticControl(np.array([0.0, 1, 0, 0]), MetricWeights.uniform(2), 3, 0.0, 4)
        traj = predict(control, model).trajectories
        np.testing.assert_array_equal(traj, model.m_hat[1].reshape(2, 4))

    def test_zero_beta(self):
        panel = flatten(full(np.ones((3, 4, 2))), PanelSplit(0, 2))
        model = hsvt(panel, FixedRank(1))
        control = SyntheticControl(np.zeros(2), MetricWeights.uniform(2), 1, 0.0, 4)
        assert not predict(control, model).trajectories.any()

    def test_rank_two_matches_contraction(self):
        bundle = generate_lowrank_tensor(30, 20, 3, 2, seed=7)
        fitted = run_mrsc(bundle.tensor, PanelSplit(0, 10), FixedRank(2))
        np.testing.assert_allclose(fitted.report.trajectories, bundle.target_mean, atol=1e-8)


class TestScore:
    def test_perfect(self):
        truth = np.arange(8.0).reshape(2, 4)
        report = score(ForecastReport(truth.copy()), truth, PanelSplit(0, 2))
        assert report.pre_mse.tolist() == [0, 0] and report.post_mse.tolist() == [0, 0]

    def test_constant_post_offset(self):
        truth = np.zeros((1, 5))
        traj = truth.copy()
        traj[:, 2:] = 3.0
        report = score(ForecastReport(traj), truth, PanelSplit(0, 2))
        assert report.post_mse[0] == 9.0 and report.pre_mse[0] == 0.0

    def test_two_period_example(self):
        report = score(ForecastReport(np.array([[1.0, 2.0]])), np.array([[2.0, 4.0]]), PanelSplit(0, 1))
        assert report.pre_mse[0] == 1.0
        assert report.post_mse[0] == 4.0

    def test_to_dict_nan_becomes_null(self):
        report = score(ForecastReport(np.array([[1.0, 2.0]])), np.array([[np.nan, 4.0]]), PanelSplit(0, 1))
        assert report.to_dict()["pre_mse"] == {"metric0": None}


def test_min_norm_underdetermined():
    design = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    beta = min_norm_lstsq(design, np.array([2.0, 3.0]))
    np.testing.assert_allclose(beta, [1.0, 1.0, 3.0])


def test_single_metric_pipeline_bit_identical():
    values = np.random.default_rng(8).normal(size=(10, 12, 1))
    split = PanelSplit(0, 8)
    a = run_mrsc(full(values), split, FixedRank(3)).report.trajectories
    panel = flatten(full(values), split)
    model = hsvt(panel, FixedRank(3))
    b = predict(fit(model, panel, split), model).trajectories
    assert a.tobytes() == b.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_dropping_zero_coefficient_donor(seed):
    # donor 3 lies outside the treatment's row space, so its beta entry is 0
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(3, 8))
    values = np.zeros((5, 8, 1))
    values[1:4, :, 0] = base
    values[0, :, 0] = base[0] + 2 * base[1]
    split = PanelSplit(0, 6)
    a = run_mrsc(full(values), split, FixedRank(3))
    beta = a.control.beta
    assert abs(beta[3]) < 1e-12
    keep = [0, 1, 2, 3]
    b = run_mrsc(full(values[keep]), split, FixedRank(3))
    np.testing.assert_allclose(a.report.trajectories, b.report.trajectories, atol=1e-8)
