import numpy as np
import pytest

from conftest import make_model
from mupscale.exceptions import InvalidMultiplierError, InvalidParameterError, ShapeMismatchError
from mupscale.model import forward
from mupscale.mup import MATRIX, VECTOR, BaseConstants, resolve_hparams
from mupscale.optim import OptState, UpdateRule
from mupscale.training import Trainer
from mupscale.widen import (
    WidenPlan,
    relation_violation,
    rescale_hparams,
    table_factors,
    transfer_buffers,
    transfer_opt_state,
    verify_dynamic_equivalence,
    widen_report,
    widen_static,
)


def test_plan_validation():
    with pytest.raises(InvalidMultiplierError):
        WidenPlan((2, 2, 1))
    with pytest.raises(InvalidMultiplierError):
        WidenPlan((1, 0, 1))
    with pytest.raises(InvalidMultiplierError):
        WidenPlan((1, 1))
    with pytest.raises(ShapeMismatchError):
        widen_static(make_model((3, 4, 2)), WidenPlan((1, 2, 2, 1)))


def test_identity_plan():
    model = make_model((3, 5, 5, 2), bias=True)
    wide = widen_static(model, WidenPlan((1, 1, 1, 1)))
    for p, q in zip(model.params, wide.params):
        assert p.tobytes() == q.tobytes()


@pytest.mark.parametrize("readout", ["sum", "mean"])
@pytest.mark.parametrize("bias", [False, True])
def test_static_equivalence(readout, bias):
    model = make_model((3, 4, 5, 2), seed=3, readout=readout, bias=bias)
    wide = widen_static(model, WidenPlan((1, 2, 2, 1)))
    X = np.random.default_rng(0).standard_normal((100, 3))
    assert np.max(np.abs(forward(model, X)[0] - forward(wide, X)[0])) <= 1e-12


def test_block_duplicated_activations():
    model = make_model((3, 4, 5, 2), seed=1)
    wide = widen_static(model, WidenPlan((1, 2, 3, 1)))
    x = np.random.default_rng(1).standard_normal((1, 3))
    _, cb = forward(model, x)
    _, cw = forward(wide, x)
    np.testing.assert_allclose(cw.hs[0][0], np.repeat(cb.hs[0][0], 2), atol=1e-14)
    np.testing.assert_allclose(cw.hs[1][0], np.repeat(cb.hs[1][0], 3), atol=1e-14)


def test_matrix_lr_example():
    assert table_factors(MATRIX, 2, 3, 1, "vanilla")["lr"] * 0.6 == pytest.approx(0.4, abs=1e-15)


def test_adam_hidden_factors():
    f = table_factors(MATRIX, 3, 3, 0, "vanilla")
    assert f["lr"] == pytest.approx(1 / 3) and f["eps"] == pytest.approx(1 / 3)


def test_hidden_lr_unchanged_equal_multipliers():
    spec = make_model((3, 4, 4, 4, 2)).spec
    hp = resolve_hparams(spec, BaseConstants(lr=0.3), 1)
    up = rescale_hparams(hp, spec, WidenPlan.uniform(4, 3), 1)
    assert up.lr[1:3] == pytest.approx(hp.lr[1:3], rel=1e-15)
    assert up.lr[0] != hp.lr[0] and up.lr[3] != hp.lr[3]


def test_vector_table_entry():
    assert table_factors(VECTOR, 4, None, 1, "vanilla") == {"lr": 4.0, "wd": 0.25, "eps": 0.25}


@pytest.mark.parametrize("m", [0, 1])
@pytest.mark.parametrize("decay_mode", ["vanilla", "decoupled"])
def test_rescale_matches_mup_resolution(m, decay_mode):
    model = make_model((3, 4, 6, 2))
    base = BaseConstants(lr=0.2, wd=0.01, eps=1e-6)
    plan = WidenPlan.uniform(3, 2)
    hp = resolve_hparams(model.spec, base, m, decay_mode)
    up = rescale_hparams(hp, model.spec, plan, m)
    direct = resolve_hparams(model.spec.with_widths(plan.widths(model.spec)), base, m, decay_mode)
    for a, b in ((up.lr, direct.lr), (up.wd, direct.wd), (up.eps, direct.eps)):
        np.testing.assert_allclose(a, b, rtol=1e-14)


def test_fresh_state_transfers_to_zero():
    model = make_model((3, 4, 4, 2))
    rule = UpdateRule("amsgrad")
    plan = WidenPlan((1, 2, 2, 1))
    state = transfer_opt_state(OptState.fresh(rule, model.spec.param_shapes()), model.spec, plan)
    wide_shapes = model.spec.with_widths(plan.widths(model.spec)).param_shapes()
    for bufs in state.buffers.values():
        assert [b.shape for b in bufs] == wide_shapes and not any(b.any() for b in bufs)


def test_transfer_rule_mismatch():
    model = make_model((3, 4, 2))
    state = OptState.fresh(UpdateRule("adam"), model.spec.param_shapes())
    with pytest.raises(InvalidParameterError):
        transfer_opt_state(state, model.spec, WidenPlan((1, 2, 1)), UpdateRule("sgd"))


def test_transfer_buffers():
    out = transfer_buffers({"mean": [1.0, 2.0], "count": 3.0}, 2)
    assert out["mean"].tolist() == [1.0, 1.0, 2.0, 2.0] and float(out["count"]) == 3.0


def _pair(rule, decay_mode, wd, plan, bias=False):
    model = make_model((4, 8, 8, 2), seed=7, bias=bias, m=rule.m)
    hp = resolve_hparams(model.spec, BaseConstants(lr=0.05 if rule.m else 0.01, wd=wd, eps=1e-6), rule.m, decay_mode)
    wide = widen_static(model, plan)
    whp = rescale_hparams(hp, model.spec, plan, rule.m)
    return Trainer(model, rule, hp), Trainer(wide, rule, whp)


@pytest.mark.parametrize("name,decay_mode", [("sgd", "vanilla"), ("sgd_nesterov", "decoupled"), ("adam", "decoupled"), ("amsgrad", "vanilla")])
def test_dynamic_equivalence(name, decay_mode):
    rule = UpdateRule(name, decay_mode=decay_mode)
    plan = WidenPlan((1, 2, 3, 1))
    base, wide = _pair(rule, decay_mode, 1e-2, plan, bias=True)
    rng = np.random.default_rng(0)
    batches = [(rng.standard_normal((5, 4)), rng.standard_normal((5, 2))) for _ in range(20)]
    res = verify_dynamic_equivalence(base, wide, batches, rng.standard_normal((3, 4)), plan)
    assert res["max_output_deviation"] <= 1e-8 and res["max_relation_violation"] <= 1e-8
    assert len(res["output_deviation"]) == 21


def test_zero_steps_is_static():
    plan = WidenPlan((1, 2, 3, 1))
    base, wide = _pair(UpdateRule("sgd"), "vanilla", 0.0, plan)
    res = verify_dynamic_equivalence(base, wide, [], np.ones((2, 4)), plan)
    assert res["max_output_deviation"] <= 1e-12 and relation_violation(base.model, wide.model, plan) == 0.0


def test_report_contents():
    spec = make_model((3, 4, 4, 2)).spec
    rep = widen_report(spec, WidenPlan((1, 2, 2, 1)), 0, "vanilla")
    hidden = rep["params"][1]
    assert hidden["old_shape"] == [4, 4] and hidden["new_shape"] == [8, 8]
    assert hidden["weight_scale"] == 0.5 and hidden["state_factors"] == {"first_moment": 0.5, "second_moment": 0.25}
