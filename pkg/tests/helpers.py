import numpy as np

from conftest import make_model
from mupscale.checkpoint import Checkpoint, make_meta
from mupscale.mup import BaseConstants, resolve_hparams
from mupscale.optim import UpdateRule
from mupscale.training import BatchStream, Trainer
from mupscale.linalg import make_rng


def toy_data(n=32, d_in=3, d_out=2, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d_in))
    return X, np.tanh(X @ rng.standard_normal((d_in, d_out)))


def trained_checkpoint(widths=(3, 8, 8, 2), rule="sgd_momentum", steps=10, lr=0.05, seed=0, bias=False, **base_kw):
    rule = UpdateRule.parse(rule)
    base = BaseConstants(lr=lr, **base_kw)
    model = make_model(widths, seed=seed, bias=bias, m=rule.m)
    hp = resolve_hparams(model.spec, base, rule.m, rule.decay_mode)
    trainer = Trainer(model, rule, hp)
    X, Y = toy_data(d_in=widths[0], d_out=widths[-1])
    stream = BatchStream(X, Y, 8, make_rng(seed, 3))
    for _ in range(steps):
        trainer.step(*stream.next())
    meta = make_meta(base, rule.m, [{"op": "init", "seed": seed}], rule=rule.to_dict())
    return Checkpoint(model, trainer.state, hp, meta), stream
