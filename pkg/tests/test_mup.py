import json

import numpy as np
import pytest

from conftest import make_model
from mupscale.exceptions import InvalidParameterError
from mupscale.linalg import make_rng
from mupscale.model import MlpModel, MlpSpec
from mupscale.mup import (
    SCALAR,
    VECTOR,
    BaseConstants,
    MupMultipliers,
    WeightKind,
    anchored_multipliers,
    classify,
    dump_hparam_report,
    hparam_report,
    init_weights,
    mup_multipliers,
    resolve_hparams,
    scaled_hparams,
    theta_rescale_check,
    theta_rescale_deviation,
)
from mupscale.optim import UpdateRule


def test_classify_three_layer():
    kinds = classify(MlpSpec((4, 8, 8, 2)))
    assert kinds == [WeightKind.vector(8), WeightKind.matrix(8, 8), WeightKind.vector(8)]


def test_classify_two_layer_all_vector():
    assert [k.kind for k in classify(MlpSpec((3, 7, 2)))] == [VECTOR, VECTOR]


def test_classify_deep_axes_follow_width():
    widths = (5, 11, 13, 17, 19, 3)
    kinds = classify(MlpSpec(widths))
    for l, kind in enumerate(kinds, start=1):
        n_out, n_in = widths[l], widths[l - 1]
        grows = [d for d, is_hidden in ((n_out, l < 5), (n_in, l > 1)) if is_hidden]
        assert list(kind.dims) == grows


def test_classify_biases():
    kinds = classify(MlpSpec((3, 6, 5, 2), bias=True))
    assert [k.kind for k in kinds[3:]] == [VECTOR, VECTOR, SCALAR]


def test_matrix_lr_example():
    hp = scaled_hparams(WeightKind.matrix(8, 4), 1, BaseConstants(lr=0.5))
    assert hp["lr"] == pytest.approx(1.0, rel=0, abs=1e-15)


def test_scalar_multipliers_are_one():
    assert mup_multipliers(WeightKind.scalar(), 0) == MupMultipliers()
    assert mup_multipliers(WeightKind.scalar(), 1) == MupMultipliers()


def test_vector_eps_example():
    hp = scaled_hparams(WeightKind.vector(16), 0, BaseConstants(eps=1e-8))
    assert hp["eps"] == 1e-8 / 16


def test_table_values():
    mv = mup_multipliers(WeightKind.vector(4), 1)
    assert (mv.B, mv.C, mv.D, mv.Dt, mv.E) == (1.0, 4.0, 0.25, 0.25, 0.25)
    mm = mup_multipliers(WeightKind.matrix(6, 3), 0)
    assert (mm.B, mm.C, mm.D, mm.Dt, mm.E) == (1 / 3, 1 / 3, 0.5, 3.0, 1 / 6)


def test_decay_modes_differ_only_for_wd():
    base = BaseConstants(lr=0.1, wd=0.2)
    kind = WeightKind.matrix(8, 4)
    v = scaled_hparams(kind, 0, base, "vanilla")
    d = scaled_hparams(kind, 0, base, "decoupled")
    assert v["lr"] == d["lr"] and v["wd"] == pytest.approx(0.2 * 0.5) and d["wd"] == pytest.approx(0.2 * 4)


def test_bad_inputs():
    with pytest.raises(InvalidParameterError):
        BaseConstants(lr=-1.0)
    with pytest.raises(InvalidParameterError):
        mup_multipliers(WeightKind.vector(3), 2)
    with pytest.raises(InvalidParameterError):
        scaled_hparams(WeightKind.vector(3), 1, BaseConstants(), "l2")


def test_anchored_is_one_at_base():
    k = WeightKind.matrix(32, 16)
    a = anchored_multipliers(k, k, 1)
    assert a == MupMultipliers()
    wide = anchored_multipliers(WeightKind.matrix(64, 32), k, 1)
    assert wide.C == pytest.approx(1.0) and wide.B == pytest.approx(0.5)


def test_zero_init_std():
    model = make_model((3, 5, 2), init_std=0.0)
    assert all(not p.any() for p in model.params)


def test_init_variance_matrix():
    spec = MlpSpec((2, 4096, 4096, 1))
    model = init_weights(MlpModel.zeros(spec), BaseConstants(init_std=1.0), make_rng(0, 1))
    assert abs(model.params[1].var() * 4096 - 1.0) < 0.05
    assert abs(model.params[0].var() - 1.0) < 0.05


def test_init_deterministic():
    a, b = make_model((3, 6, 6, 2), seed=9), make_model((3, 6, 6, 2), seed=9)
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p, q)


def test_resolve_hparams_order():
    spec = MlpSpec((3, 8, 4, 2), bias=True)
    hp = resolve_hparams(spec, BaseConstants(lr=1.0), 1)
    assert hp.lr == [8.0, 4 / 8, 4.0, 8.0, 4.0, 1.0]


def test_hparam_report_json(tmp_path):
    spec = MlpSpec((3, 8, 4, 2))
    rep = hparam_report(spec, BaseConstants(lr=0.5), 1)
    assert rep["params"][1]["multipliers"]["C"] == 0.5
    path = tmp_path / "r.json"
    dump_hparam_report(rep, path)
    assert json.loads(path.read_text()) == rep


def test_multiplier_symmetry_algebra():
    mu = MupMultipliers(1, 2, 3, 4, 5, 6)
    r = mu.rescaled(2.0, 1)
    assert (r.A, r.B, r.C, r.D, r.Dt, r.E) == (2.0, 0.5, 0.75, 16.0, 20.0, 12.0)


@pytest.fixture
def data():
    rng = np.random.default_rng(0)
    return rng.standard_normal((8, 3)), rng.standard_normal((8, 2))


def test_theta_one_exact(data):
    spec = MlpSpec((3, 8, 8, 2))
    assert theta_rescale_deviation(spec, BaseConstants(lr=0.1), UpdateRule("sgd"), 1.0, 5, *data) == 0.0


def test_theta_sgd(data):
    spec = MlpSpec((3, 8, 8, 2))
    assert theta_rescale_check(spec, BaseConstants(lr=0.1, wd=0.01), UpdateRule("sgd"), 2.0, 20, *data)


def test_theta_adam_vanilla_decay(data):
    spec = MlpSpec((3, 8, 8, 2))
    rule = UpdateRule("adam", decay_mode="vanilla")
    assert theta_rescale_check(spec, BaseConstants(lr=0.01, wd=0.01, eps=1e-3), rule, 0.5, 20, *data)
