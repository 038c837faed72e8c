import math
import warnings

import numpy as np
import pytest

from mrmemory.errors import BlowUpError, DomainError, StepFailure
from mrmemory.flow import DoubleGyre, FieldBounds, FlowField, FlowSample, derived_fields
from mrmemory.params import ParticleParams
from mrmemory.relaxation import RelaxationKernel
from mrmemory.solver import (BACKENDS, SolverConfig, convergence_study, load_checkpoint,
                             recover_particle_velocity, restart_discard_history, restart_replay_history,
                             save_checkpoint, simulate, simulate_ensemble)

W0 = np.array([10.0, 10.0])


def frozen_error(rec, kappa, w0):
    exact = np.outer(RelaxationKernel(kappa).psi(rec.tau), w0)
    return np.max(np.abs(rec.w - exact)) / np.max(np.abs(exact))


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("kappa", [0.5, math.sqrt(3), 2.0, 2.5])
def test_frozen_field_relaxes_like_psi(frozen_fields, backend, kappa):
    rec = simulate(frozen_fields(kappa), (0.5, 0.5), (1.0, -2.0), SolverConfig(backend, dt=0.01, tau_end=10.0))
    assert frozen_error(rec, kappa, np.array([1.0, -2.0])) < 5e-5


@pytest.mark.parametrize("kappa", [0.5, 2.5])
def test_direct_backend_sup_error_second_order(frozen_fields, kappa):
    # every node counts, the starting block included
    errs = [frozen_error(simulate(frozen_fields(kappa), (0.5, 0.5), W0, SolverConfig("fractional_direct", dt=dt,
                                                                                      tau_end=4.0)), kappa, W0)
            for dt in (0.02, 0.01, 0.005)]
    assert math.log2(errs[1] / errs[2]) > 1.6


def test_mild_backend_exact_on_frozen_field(frozen_fields):
    rec = simulate(frozen_fields(1.3), (0.5, 0.5), W0, SolverConfig(dt=0.1, tau_end=50.0))
    assert frozen_error(rec, 1.3, W0) < 1e-15


@pytest.mark.parametrize("backend", BACKENDS)
def test_memoryless_limit_is_exponential(frozen_fields, backend):
    rec = simulate(frozen_fields(0.0), (0.5, 0.5), W0, SolverConfig(backend, dt=1e-3, tau_end=20.0))
    assert np.max(np.abs(rec.w - np.outer(np.exp(-rec.tau), W0))) / 10.0 < 1e-7


@pytest.mark.parametrize("kappa", [0.5, math.sqrt(3), 2.5])
def test_direct_backend_convergence_order(frozen_fields, kappa):
    kernel = RelaxationKernel(kappa)
    res = convergence_study(frozen_fields(kappa), (0.5, 0.5), W0, [0.04, 0.02, 0.01],
                            SolverConfig(tau_end=2.0), reference=lambda t: np.outer(kernel.psi(t), W0),
                            backends=("fractional_direct",))["fractional_direct"]
    assert res.conclusive
    assert res.order >= 1.5


def test_convergence_study_without_reference(gyre_fields):
    res = convergence_study(gyre_fields(1.0), (0.6, 0.4), W0, [0.08, 0.04, 0.02, 0.01],
                            SolverConfig(tau_end=2.0), backends=("mild_volterra",))
    r = res["mild_volterra"]
    assert len(r.errors) == 3 and r.dts == (0.08, 0.04, 0.02)
    with pytest.raises(DomainError):
        convergence_study(gyre_fields(1.0), (0.6, 0.4), W0, [0.02, 0.01], SolverConfig(tau_end=1.0))


def test_backends_agree_on_gyre(gyre_fields):
    cfg = SolverConfig(dt=0.01, tau_end=20.0)
    a = simulate(gyre_fields(1.0), (0.6, 0.4), W0, cfg.replace(backend="fractional_direct"))
    b = simulate(gyre_fields(1.0), (0.6, 0.4), W0, cfg.replace(backend="mild_volterra"))
    assert np.max(np.abs(a.w - b.w)) / np.linalg.norm(W0) < 5e-5
    assert np.max(np.abs(a.y - b.y)) < 5e-5


@pytest.mark.parametrize("backend", BACKENDS)
def test_moving_field_convergence_order(backend):
    # large Stokes number so the drag forcing, not the free decay, sets the error
    fields = derived_fields(DoubleGyre(), ParticleParams.from_dimensionless(1 / 3, 0.1), False)
    y0, w0 = np.array([0.7, 0.4]), np.array([1.0, -0.5])
    ref = simulate(fields, y0, w0, SolverConfig("fractional_direct", dt=2.5e-4, tau_end=2.0))
    errors = []
    for dt in (0.01, 0.005):
        rec = simulate(fields, y0, w0, SolverConfig(backend, dt=dt, tau_end=2.0))
        errors.append(np.max(np.abs(rec.w - ref.w[:: int(round(dt / 2.5e-4))])))
    assert errors[1] < 2e-6
    assert math.log2(errors[0] / errors[1]) > 1.6


def test_ensemble_matches_single_runs(gyre_fields):
    y0s = np.array([[0.3, 0.3], [1.2, 0.7], [1.8, 0.5]])
    cfg = SolverConfig(dt=0.02, tau_end=4.0)
    batch = simulate_ensemble(gyre_fields(1 / 3), y0s, W0, cfg)
    for y0, rec in zip(y0s, batch):
        single = simulate(gyre_fields(1 / 3), y0, W0, cfg)
        assert np.allclose(single.w, rec.w, rtol=0, atol=1e-13)
        assert np.allclose(single.y, rec.y, rtol=0, atol=1e-13)


def test_runs_are_deterministic(gyre_fields):
    cfg = SolverConfig("fractional_direct", dt=0.02, tau_end=3.0)
    a = simulate(gyre_fields(1.0), (0.9, 0.2), W0, cfg)
    b = simulate(gyre_fields(1.0), (0.9, 0.2), W0, cfg)
    assert np.array_equal(a.w, b.w) and np.array_equal(a.y, b.y)


def test_record_quantities(gyre_fields):
    f = gyre_fields(1.0)
    rec = simulate(f, (0.9, 0.2), W0, SolverConfig(dt=0.05, tau_end=1.0, t0=0.3))
    assert np.allclose(rec.t_phys, 0.3 + 0.01 * rec.tau)
    assert np.allclose(rec.v, rec.w + DoubleGyre().evaluate(rec.y, rec.t_phys).u)
    assert np.array_equal(recover_particle_velocity(rec), rec.v)
    assert rec.abs_w[0] == pytest.approx(np.linalg.norm(W0))
    assert not rec.domain_exit_flag


# -- restarts ---------------------------------------------------------------------

@pytest.mark.parametrize("backend", BACKENDS)
def test_replay_restart_is_exact(gyre_fields, backend):
    cfg = SolverConfig(backend, dt=0.02, tau_end=6.0)
    full = simulate(gyre_fields(1.0), (1.0, 0.5), W0, cfg)
    short = simulate(gyre_fields(1.0), (1.0, 0.5), W0, cfg.replace(tau_end=2.0))
    resumed = restart_replay_history(short, 1.0, cfg)
    assert np.array_equal(resumed.w, full.w) and np.array_equal(resumed.y, full.y)


def test_replay_from_origin_is_exact(gyre_fields):
    cfg = SolverConfig(dt=0.02, tau_end=2.0)
    full = simulate(gyre_fields(1.0), (1.0, 0.5), W0, cfg)
    assert np.array_equal(restart_replay_history(full, 0.0).w, full.w)


def test_discard_restart_departs(gyre_fields):
    cfg = SolverConfig(dt=0.02, tau_end=6.0)
    full = simulate(gyre_fields(1.0), (1.0, 0.5), W0, cfg)
    fresh = restart_discard_history(full, 2.0)
    assert fresh.tau[0] == pytest.approx(2.0) and fresh.tau[-1] == pytest.approx(6.0)
    assert np.array_equal(fresh.w[0], full.w[100])
    assert fresh.t_phys[0] == pytest.approx(full.t_phys[100])
    assert np.max(np.abs(fresh.w - full.w[100:])) > 1e-2


def test_discard_restart_harmless_without_memory():
    params = ParticleParams.memoryless(1.0, 0.01, kappa=0.0)
    f = derived_fields(DoubleGyre(), params)
    full = simulate(f, (1.0, 0.5), W0, SolverConfig(dt=0.02, tau_end=6.0))
    fresh = restart_discard_history(full, 2.0)
    assert np.max(np.abs(fresh.w - full.w[100:])) < 1e-12


def test_restart_validation(gyre_fields):
    rec = simulate(gyre_fields(1.0), (1.0, 0.5), W0, SolverConfig(dt=0.02, tau_end=1.0))
    with pytest.raises(DomainError):
        rec.node_of(0.511)
    with pytest.raises(DomainError):
        rec.node_of(5.0)
    with pytest.raises(DomainError):
        restart_replay_history(rec, 0.5, rec.config.replace(dt=0.01))
    with pytest.raises(DomainError):
        restart_replay_history(rec, 0.5, rec.config.replace(backend="fractional_direct"))
    with pytest.raises(DomainError):
        restart_discard_history(rec, 1.0)


def test_checkpoint_round_trip(tmp_path, gyre_fields):
    cfg = SolverConfig("fractional_direct", dt=0.02, tau_end=4.0)
    full = simulate(gyre_fields(1.0), (1.0, 0.5), W0, cfg)
    short = simulate(gyre_fields(1.0), (1.0, 0.5), W0, cfg.replace(tau_end=1.0))
    path = tmp_path / "ck.npz"
    save_checkpoint(short, path)
    loaded = load_checkpoint(path, gyre_fields(1.0))
    assert loaded.config == short.config and loaded.params == short.params
    assert np.array_equal(restart_replay_history(loaded, 1.0, cfg).w, full.w)
    with pytest.raises(DomainError):
        load_checkpoint(path, gyre_fields(1 / 3))


# -- failures and validation ----------------------------------------------------------

class Pinned(FlowField):
    """Zero velocity with a uniform negative velocity gradient that amplifies ``w``.

    Not a consistent flow (``M`` is not the gradient of ``u``), but positions
    stay put so only the velocity equation can fail.
    """

    def __init__(self, rate):
        self.rate = rate

    def _evaluate(self, x, t, order):
        shape = np.broadcast_shapes(x.shape[:-1], np.shape(t))
        zero = np.zeros(shape + (2,))
        grad = np.broadcast_to(-self.rate * np.eye(2), shape + (2, 2)).copy()
        return FlowSample(zero, grad, zero.copy())


# rates that put the implicit update just short of singular, so |w| grows ~20x per step
@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@pytest.mark.parametrize("backend, rate", [("fractional_direct", 480.0), ("mild_volterra", 446.0)])
def test_blow_up_detected(backend, rate):
    f = derived_fields(Pinned(rate), ParticleParams.memoryless(2 / 3, 0.01, kappa=0.0))
    with pytest.raises(BlowUpError):
        simulate(f, (0.1, 0.1), W0, SolverConfig(backend, dt=0.5, tau_end=500.0))


def test_step_failure_when_closure_cannot_converge(gyre_fields):
    with pytest.raises(StepFailure) as info:
        simulate(gyre_fields(1.0), (1.0, 0.5), W0, SolverConfig(dt=0.02, tau_end=1.0, picard_max_iters=1))
    assert info.value.node == 1


@pytest.mark.parametrize("changes", [dict(backend="euler"), dict(dt=0.0), dict(dt=math.nan),
                                     dict(tau_end=0.001), dict(picard_tol=0.0), dict(picard_max_iters=0)])
def test_config_validation(changes):
    with pytest.raises(DomainError):
        SolverConfig(**changes)


def test_input_validation(gyre_fields):
    cfg = SolverConfig(dt=0.1, tau_end=0.2)
    with pytest.raises(DomainError):
        simulate(gyre_fields(1.0), (0.5, 0.5, 0.5), W0, cfg)
    with pytest.raises(DomainError):
        simulate(gyre_fields(1.0), (0.5, math.nan), W0, cfg)
    with pytest.raises(DomainError):
        simulate(gyre_fields(1.0), (0.5, 0.5), W0, cfg.replace(faxen=True))


def test_warns_outside_contraction(gyre_fields):
    bounds = FieldBounds.from_constants(1.0, 1.0, 200.0)
    with pytest.warns(UserWarning, match="eps\\*L_M"):
        simulate(gyre_fields(1.0), (0.5, 0.5), W0, SolverConfig(dt=0.1, tau_end=0.2), bounds)


def test_faxen_run(gyre_fields):
    f = derived_fields(DoubleGyre(), ParticleParams.from_dimensionless(1.0, 0.01), faxen=True)
    rec = simulate(f, (0.5, 0.5), W0, SolverConfig(dt=0.05, tau_end=2.0, faxen=True))
    plain = simulate(gyre_fields(1.0), (0.5, 0.5), W0, SolverConfig(dt=0.05, tau_end=2.0))
    # the corrections are O(St/Re) small
    assert 0 < np.max(np.abs(rec.w - plain.w)) < 5e-3
