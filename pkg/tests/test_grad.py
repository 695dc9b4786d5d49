import numpy as np
import pytest

from coft.errors import ContractError, DomainError, ShapeError, TrainingError
from coft.grad import (
    Adam,
    SgdMomentum,
    accumulate_grad,
    check_gradients,
    checkpoint_files_equal,
    load_checkpoint,
    param,
    save_checkpoint,
    step,
)


class TestAccumulate:
    def test_basic(self):
        p = param("w", [0.0, 0.0])
        accumulate_grad(p, [1.0, 2.0])
        np.testing.assert_array_equal(p.grad, [1.0, 2.0])

    def test_additivity(self):
        p = param("w", [0.0, 0.0])
        accumulate_grad(p, [1.0, 0.0])
        accumulate_grad(p, [0.0, 1.0])
        np.testing.assert_array_equal(p.grad, [1.0, 1.0])

    def test_shape_mismatch(self):
        p = param("w", [0.0, 0.0])
        with pytest.raises(ShapeError):
            accumulate_grad(p, [1.0, 2.0, 3.0])


class TestStep:
    def test_sgd_single_step(self):
        p = param("w", [1.0])
        p.grad[:] = 1.0
        step(SgdMomentum(0.1, momentum=0.0), [p])
        assert p.value[0] == pytest.approx(0.9, abs=1e-15)
        assert p.grad[0] == 0.0

    def test_adam_zero_grad_no_motion(self):
        p = param("w", [1.5, -2.5])
        opt = Adam(1e-2)
        before = p.value.copy()
        for _ in range(10):
            step(opt, [p])
        np.testing.assert_array_equal(p.value, before)
        assert opt.step_count == 10

    def test_adam_first_step_closed_form(self):
        # constant grad 1: m_hat = v_hat = 1, so the step is lr / (1 + eps)
        p = param("w", [0.0])
        p.grad[:] = 1.0
        step(Adam(1e-3, beta1=0.9, beta2=0.999, eps=1e-8), [p])
        assert -p.value[0] == pytest.approx(1e-3, rel=1e-7)

    def test_lr_zero_bit_identical(self):
        rng = np.random.default_rng(0)
        for opt in (SgdMomentum(0.0, 0.9), Adam(0.0)):
            p = param("w", rng.normal(size=7))
            before = p.value.tobytes()
            p.grad[:] = rng.normal(size=7)
            step(opt, [p])
            assert p.value.tobytes() == before

    def test_non_finite_grad_names_param(self):
        p = param("bad_param", [1.0])
        p.grad[:] = np.nan
        with pytest.raises(TrainingError) as exc:
            step(Adam(1e-3), [p])
        assert exc.value.param_name == "bad_param"

    def test_momentum_accumulates(self):
        p = param("w", [0.0])
        opt = SgdMomentum(1.0, momentum=0.5)
        p.grad[:] = 1.0
        step(opt, [p])  # buf=1, w=-1
        p.grad[:] = 1.0
        step(opt, [p])  # buf=1.5, w=-2.5
        assert p.value[0] == pytest.approx(-2.5, abs=1e-15)


class TestCheckGradients:
    def test_quadratic(self):
        p = param("p", [1.0, 2.0])

        def loss():
            accumulate_grad(p, 2.0 * p.value)
            return float(p.value @ p.value)

        report = check_gradients(loss, [p], eps=1e-5, tol=1e-6)
        assert report.ok
        assert report.max_rel_error <= 1e-6

    def test_constant_loss(self):
        p = param("p", [3.0, -1.0])
        report = check_gradients(lambda: 7.5, [p])
        assert report.ok
        assert report.max_rel_error == 0.0

    def test_detects_wrong_gradient(self):
        p = param("p", [1.0, 2.0])

        def loss():
            accumulate_grad(p, 3.0 * p.value)  # wrong: true grad is 2p
            return float(p.value @ p.value)

        report = check_gradients(loss, [p])
        assert not report.ok
        assert any(name == "p" for name, *_ in report.failures)

    def test_nondeterministic_loss_rejected(self):
        p = param("p", [1.0])
        state = {"n": 0}

        def loss():
            state["n"] += 1
            return float(state["n"])

        with pytest.raises(ContractError):
            check_gradients(loss, [p])

    def test_eps_domain(self):
        p = param("p", [1.0])
        with pytest.raises(DomainError):
            check_gradients(lambda: 0.0, [p], eps=1e-2)


class TestCheckpoint:
    def test_param_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        params = [param("a", rng.normal(size=(3, 4))), param("b", rng.normal(size=5))]
        stem = str(tmp_path / "ck")
        save_checkpoint(stem, params)
        loaded, opt = load_checkpoint(stem)
        assert opt is None
        for orig, back in zip(params, loaded):
            assert back.name == orig.name
            assert back.value.tobytes() == orig.value.tobytes()
            assert np.all(back.grad == 0.0)

    @pytest.mark.parametrize("make_opt", [lambda: Adam(1e-3), lambda: SgdMomentum(0.1, 0.9)])
    def test_optimizer_state_round_trip_exact(self, tmp_path, make_opt):
        rng = np.random.default_rng(2)
        params = [param("w1", rng.normal(size=(2, 3))), param("w2", rng.normal(size=4))]
        opt = make_opt()
        for _ in range(3):
            for p in params:
                p.grad[:] = rng.normal(size=p.shape)
            step(opt, params)
        stem = str(tmp_path / "ck")
        save_checkpoint(stem, params, opt)
        loaded_params, loaded_opt = load_checkpoint(stem)
        assert loaded_opt.kind == opt.kind
        assert loaded_opt.step_count == opt.step_count
        assert loaded_opt.hyper() == opt.hyper()
        for (na, a), (nb, b) in zip(opt.state_entries(), loaded_opt.state_entries()):
            assert na == nb
            assert a.tobytes() == b.tobytes()
        # training continues identically from the restored state
        for p_set in (params, loaded_params):
            for p in p_set:
                p.grad[:] = 0.25
        step(opt, params)
        step(loaded_opt, loaded_params)
        for a, b in zip(params, loaded_params):
            assert a.value.tobytes() == b.value.tobytes()

    def test_files_equal_helper(self, tmp_path):
        params = [param("x", [1.0, 2.0])]
        s1, s2 = str(tmp_path / "a"), str(tmp_path / "b")
        save_checkpoint(s1, params)
        save_checkpoint(s2, params)
        assert checkpoint_files_equal(s1, s2)
        params[0].value[0] = 9.0
        save_checkpoint(s2, params)
        assert not checkpoint_files_equal(s1, s2)

    def test_payload_is_little_endian_f64(self, tmp_path):
        p = param("x", [1.0, -2.0, 0.5])
        stem = str(tmp_path / "ck")
        save_checkpoint(stem, [p])
        with open(stem + ".f64le", "rb") as f:
            raw = f.read()
        assert raw == np.array([1.0, -2.0, 0.5], dtype="<f8").tobytes()
