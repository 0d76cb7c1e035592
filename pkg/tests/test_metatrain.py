import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid

from metatpp import diffcore as dc
from metatpp.encoder import EventSequence
from metatpp.evalsim import SynthTaskSpec, gen_synth_tasks
from metatpp.intensity import CumulativeModel, IntensityModel, compute_scale
from metatpp.metatrain import (AdamState, Episode, TrainConfig, TrainingDiverged, adam_step, mean_nll,
                               predict_intensity_curve, select_best, split_episode, train)

from conftest import random_episode, tiny_config


class LinearCumulative(CumulativeModel):
    """Lambda(t) = c t, i.e. a constant intensity c; the task representation is unused."""

    kind = "linear"

    def __init__(self, c):
        params = dc.ParamStore()
        params.add("c", np.array(c, dtype=float))
        super().__init__(params)

    def _represent(self, episodes):
        return None

    def _cumulative(self, rep, t, rows, n_tasks):
        return t * self.params["c"]


def _synth_episodes(n_tasks=40, seed=0):
    spec = SynthTaskSpec(rate_range=(0.4, 1.6), phase_range=(0, 4), n_tasks=n_tasks, seed=seed)
    return [split_episode(seq, g, spec.T_c, spec.T_e, seq.task_id) for seq, g, _ in gen_synth_tasks(spec)]


# ------------------------------------------------------------ splitting

def test_event_at_split_point_goes_to_support():
    ep = split_episode(EventSequence([1.0, 12.0, 12.0, 30.0]), [], 12.0, 168.0)
    np.testing.assert_array_equal(ep.support.timestamps, [1.0, 12.0, 12.0])
    np.testing.assert_array_equal(ep.query.timestamps, [30.0])


def test_split_edge_cases():
    empty = split_episode(EventSequence([]), [], 12.0, 168.0)
    assert len(empty.support) == 0 and len(empty.query) == 0
    early = split_episode(EventSequence([1.0, 2.0]), [], 12.0, 168.0)
    assert len(early.query) == 0
    with pytest.raises(ValueError):
        split_episode(EventSequence([1.0]), [], 12.0, 12.0)
    with pytest.raises(ValueError, match="must lie"):
        split_episode(EventSequence([1.0, 200.0]), [], 12.0, 168.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 168.0, allow_nan=False), max_size=30), st.floats(0.1, 167.0))
def test_split_partitions_events(times, T_c):
    ts = np.sort(times)
    ep = split_episode(EventSequence(ts), [], T_c, 168.0)
    assert np.all(ep.support.timestamps <= T_c) and np.all(ep.query.timestamps > T_c)
    np.testing.assert_array_equal(ep.events, ts)


# ------------------------------------------------------------ loss

def test_constant_intensity_loss_closed_form():
    ep = Episode(EventSequence([0.5, 1.0]), EventSequence([2.0, 2.5]), [], 1.5, 3.0)
    loss, per_task = LinearCumulative(2.0).batch_loss([ep])
    expected = 6.0 - 4.0 * np.log(2.0)
    assert loss.value == pytest.approx(expected, abs=1e-12)
    assert per_task[0] == pytest.approx(expected, abs=1e-12)


def test_loss_matches_quadrature(tiny_model, rng):
    tiny_model.scale = 10.0
    for _ in range(5):
        ep = random_episode(rng, 7, 25)
        _, per_task = tiny_model.batch_loss([ep])
        task = tiny_model.conditioned(ep)
        grid = np.linspace(0.0, ep.T_e, 100_001)
        oracle = -np.sum(np.log(task.intensity(ep.events))) + trapezoid(task.intensity(grid), grid)
        assert abs(per_task[0] - oracle) <= 1e-3 * abs(oracle)


def test_removing_query_events_lowers_event_term_when_intensity_exceeds_one():
    model = LinearCumulative(3.0)
    full = Episode(EventSequence([1.0, 2.0]), EventSequence([5.0, 6.0]), [], 4.0, 8.0)
    cut = Episode(full.support, EventSequence([]), [], 4.0, 8.0)
    compensator = 3.0 * 8.0
    event_sum = lambda ep: compensator - model.batch_loss([ep])[1][0]  # sum of log lambda
    assert event_sum(cut) < event_sum(full)


def test_batch_loss_is_mean_of_task_losses(tiny_model, rng):
    eps = [random_episode(rng, 6, 12, task_id=f"t{i}") for i in range(4)]
    loss, per_task = tiny_model.batch_loss(eps)
    assert loss.value == pytest.approx(np.mean(per_task), rel=1e-12)


def test_query_events_never_reach_the_representation(tiny_model, rng):
    ep = random_episode(rng, 6, 15)
    moved = Episode(ep.support, EventSequence(np.sort(ep.query.timestamps + 0.37)), ep.context, ep.T_c, ep.T_e)
    np.testing.assert_array_equal(tiny_model.represent([ep]), tiny_model.represent([moved]))


def test_loss_decomposes_into_event_terms_and_compensator(tiny_model, rng):
    ep = random_episode(rng, 6, 15)
    _, per_task = tiny_model.batch_loss([ep])
    task = tiny_model.conditioned(ep)
    terms = -np.log(task.intensity(ep.events))
    comp = task.cumulative(np.array([ep.T_e]))[0]
    assert per_task[0] == pytest.approx(np.sum(terms) + comp, rel=1e-12)


def test_loss_gradient_matches_finite_differences(rng):
    from conftest import central_diff, rel_err
    model = IntensityModel(tiny_config(), seed=11, scale=3.0)
    ep = random_episode(rng, 3, 0)
    model.params.zero_grad()
    dc.backward(model.batch_loss([ep])[0])
    grads = np.concatenate([g.ravel() for g in model.params.grads().values()])
    fds = np.concatenate([central_diff(lambda: float(model.batch_loss([ep])[0].value), n.value).ravel()
                          for n in model.params.nodes()])
    assert rel_err(grads, fds) <= 1e-4


# ------------------------------------------------------------ Adam

def test_first_adam_step_moves_by_lr_times_sign():
    ps = dc.ParamStore()
    ps.add("x", np.array([1.0, -2.0, 3.0]))
    g = np.array([0.5, -4.0, 1e-3])
    cfg = TrainConfig(lr=0.01)
    adam_step(ps, {"x": g}, AdamState(), cfg)
    np.testing.assert_allclose(ps["x"].value, np.array([1.0, -2.0, 3.0]) - 0.01 * g / (np.abs(g) + 1e-8),
                               rtol=1e-12)


def test_zero_gradient_step_is_identity():
    ps = dc.ParamStore()
    ps.add("x", np.array([1.0, -2.0]))
    before = ps["x"].value.copy()
    adam_step(ps, {"x": np.zeros(2)}, AdamState(), TrainConfig())
    np.testing.assert_array_equal(ps["x"].value, before)


def test_weight_decay_is_decoupled():
    ps = dc.ParamStore()
    ps.add("x", np.array([2.0]))
    adam_step(ps, {"x": np.zeros(1)}, AdamState(), TrainConfig(lr=0.1, weight_decay=0.5))
    assert ps["x"].value[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-15)


def test_adam_rejects_misaligned_gradients():
    ps = dc.ParamStore()
    ps.add("x", np.zeros(2))
    with pytest.raises(dc.ShapeError):
        adam_step(ps, {"x": np.zeros(3)}, AdamState(), TrainConfig())


def test_adam_converges_on_quadratic():
    target = np.array([1.5, -0.5])
    A = np.array([[3.0, 0.5], [0.5, 1.0]])
    ps = dc.ParamStore()
    ps.add("x", np.zeros(2))
    state, cfg = AdamState(), TrainConfig(lr=0.01)
    for _ in range(5000):
        adam_step(ps, {"x": A @ (ps["x"].value - target)}, state, cfg)
    assert np.linalg.norm(ps["x"].value - target) <= 1e-4


def test_train_config_validation():
    for bad in ({"lr": 0.0}, {"batch_size": 0}, {"epochs": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ------------------------------------------------------------ training loop

def test_zero_epochs_returns_initial_parameters():
    eps = _synth_episodes(12)
    model = IntensityModel(tiny_config(), seed=0)
    before = model.params.state()
    res = train(model, eps[:8], eps[8:], TrainConfig(epochs=0))
    assert res.best_epoch == 0 and res.history == []
    assert res.best_val_nll == pytest.approx(mean_nll(model, eps[8:]))
    for k, v in before.items():
        np.testing.assert_array_equal(res.best_state[k], v)


def test_training_improves_validation_nll_and_keeps_best():
    eps = _synth_episodes(40)
    model = IntensityModel(tiny_config(width=16), seed=0)
    model.scale = compute_scale(eps[:28])
    initial = mean_nll(model, eps[28:])
    res = train(model, eps[:28], eps[28:], TrainConfig(epochs=15, batch_size=8, lr=3e-3))
    vals = [r.val_nll for r in res.history]
    assert res.best_val_nll <= 0.9 * initial
    assert res.best_epoch == select_best(res.history) + 1
    assert res.best_val_nll == min(vals)
    assert mean_nll(model, eps[28:]) == pytest.approx(res.best_val_nll, rel=1e-12)


def test_training_is_bit_reproducible():
    eps = _synth_episodes(16)

    def run():
        model = IntensityModel(tiny_config(), seed=5)
        res = train(model, eps[:12], eps[12:], TrainConfig(epochs=3, batch_size=4, seed=9))
        return res

    a, b = run(), run()
    assert a.history == b.history
    for k in a.best_state:
        np.testing.assert_array_equal(a.best_state[k], b.best_state[k])


def test_divergence_names_epoch_and_batch():
    eps = _synth_episodes(8)
    model = IntensityModel(tiny_config(), seed=0)
    model.batch_loss = lambda batch: (dc.constant(np.nan), None)
    with pytest.raises(TrainingDiverged, match="epoch 1, batch 0"):
        train(model, eps, [], TrainConfig(epochs=1))


def test_empty_training_set_is_rejected():
    with pytest.raises(ValueError):
        train(IntensityModel(tiny_config()), [], [], TrainConfig())


# ------------------------------------------------------------ prediction

def test_curve_at_single_point_and_range_checks(tiny_model, rng):
    ep = random_episode(rng, 6, 10)
    curve = predict_intensity_curve(ep, tiny_model, [ep.T_c])
    assert curve.shape == (1, 2)
    assert curve[0, 1] == pytest.approx(tiny_model.conditioned(ep).intensity(np.array([ep.T_c]))[0], rel=1e-14)
    with pytest.raises(ValueError):
        predict_intensity_curve(ep, tiny_model, [ep.T_c - 1.0])
    with pytest.raises(ValueError):
        predict_intensity_curve(ep, tiny_model, [ep.T_e + 1.0])


def test_curve_integrates_to_cumulative_mass(tiny_model, rng):
    ep = random_episode(rng, 6, 10)
    grid = np.linspace(ep.T_c, ep.T_e, 10_000)
    curve = predict_intensity_curve(ep, tiny_model, grid)
    cum = tiny_model.conditioned(ep).cumulative(np.array([ep.T_c, ep.T_e]))
    assert abs(trapezoid(curve[:, 1], grid) - (cum[1] - cum[0])) <= 1e-3 * (cum[1] - cum[0])


def test_periodic_only_curve_repeats(rng):
    model = IntensityModel(tiny_config(), seed=2, scale=4.0)
    for name, node in model.params.items():
        if name.startswith("aperiodic.") and name.split(".")[1] in ("w_t", "W1", "w_out"):
            node.value = np.zeros_like(node.value)
    ep = random_episode(rng, 6, 10)
    first = predict_intensity_curve(ep, model, np.linspace(12.0, 36.0, 97)[:-1])
    second = predict_intensity_curve(ep, model, np.linspace(36.0, 60.0, 97)[:-1])
    np.testing.assert_allclose(first[:, 1], second[:, 1], rtol=1e-9, atol=1e-12)


def test_curve_ignores_query_events(tiny_model, rng):
    ep = random_episode(rng, 6, 10)
    other = Episode(ep.support, EventSequence([100.0]), ep.context, ep.T_c, ep.T_e)
    grid = np.linspace(ep.T_c, ep.T_e, 11)
    np.testing.assert_array_equal(predict_intensity_curve(ep, tiny_model, grid),
                                  predict_intensity_curve(other, tiny_model, grid))
