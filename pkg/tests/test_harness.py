import json
import math

import numpy as np
import pytest

from mupscale.emit import read_csv
from mupscale.exceptions import ConfigError, CsvFormatError, CsvValueError
from mupscale.harness import (
    DataConfig,
    ExperimentConfig,
    SweepResult,
    emit_results,
    gen_teacher_data,
    load_csv,
    make_dataset,
    run_transfer_sweep,
    batch_stream,
    teacher_model,
    train_checkpoint,
)
from mupscale.training import evaluate_loss
from mupscale.upscale import UpscaleConfig, train_upscaled, upscale
from mupscale.linalg import make_rng
from mupscale.model import forward

SMALL = """
[model]
hidden = 8
[optimizer]
rule = adam
[base]
lr = 0.01
[data]
d_in = 4
samples = 64
teacher_hidden = 16
[train]
steps = 5
batch_size = 16
seeds = 0, 1
[sweep]
base_widths = 4, 8
k = 2
lr_grid = logspace 0.001 0.1 3
noise_grid = 0, 0.5
fixed_lr = 0.01
fixed_noise = 0
steps_before = 5
steps_after = 5
"""


def test_teacher_data_deterministic():
    a = make_dataset(DataConfig(samples=40))
    b = make_dataset(DataConfig(samples=40))
    assert a.X.tobytes() == b.X.tobytes() and a.Y.tobytes() == b.Y.tobytes()
    assert not set(a.train_idx) & set(a.val_idx) and len(a.train_idx) + len(a.val_idx) == 40


def test_teacher_achievable_zero_loss():
    rng = make_rng(3, 0)
    ds = gen_teacher_data(rng, 5, 2, 30, (7,), noise=0.0)
    assert np.max(np.abs(forward(ds.teacher, ds.X)[0] - ds.Y)) == 0.0
    assert teacher_model(make_rng(3, 0), 5, 2, (7,)).spec.widths == (5, 7, 2)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_load_csv_toy(tmp_path):
    path = write(tmp_path, "a,flag,y\n1.5,0,2\n-2,1,3\n0.25,1,4\n")
    ds = load_csv(path, "y", normalize=False, val_fraction=0.0)
    assert ds.X.tolist() == [[1.5, 0.0], [-2.0, 1.0], [0.25, 1.0]]
    assert ds.Y.ravel().tolist() == [2.0, 3.0, 4.0] and ds.columns == ["a", "flag"]
    assert ds.binary == [False, True]


def test_normalization_train_only(tmp_path):
    rng = np.random.default_rng(0)
    rows = "\n".join(f"{v:.6f},{int(b)},{t:.6f}" for v, b, t in zip(rng.normal(5, 3, 50), rng.random(50) > 0.5, rng.random(50)))
    ds = load_csv(write(tmp_path, "a,b,y\n" + rows + "\n"), "y", val_fraction=0.2, seed=1)
    assert abs(ds.X_train[:, 0].mean()) < 1e-12 and abs(ds.X_train[:, 0].std() - 1) < 1e-12
    assert set(np.unique(ds.X[:, 1])) <= {0.0, 1.0}


def test_classification_stratified(tmp_path):
    rows = "\n".join(f"{i},{i % 2}" for i in range(20))
    ds = load_csv(write(tmp_path, "x,c\n" + rows + "\n"), "c", task="classification", val_fraction=0.2)
    assert sorted(ds.Y_val.tolist()) == [0, 0, 1, 1] and ds.loss == "cross_entropy" and ds.d_out == 2


def test_bad_row_names_line(tmp_path):
    with pytest.raises(CsvFormatError) as e:
        load_csv(write(tmp_path, "a,y\n1,2\n3\n"), "y")
    assert e.value.line == 3
    with pytest.raises(CsvValueError) as e:
        load_csv(write(tmp_path, "a,y\n1,2\n1,x\n"), "y")
    assert e.value.line == 3 and e.value.column == "y"
    with pytest.raises(CsvFormatError):
        load_csv(write(tmp_path, "a,y\n1,2\n"), "z")


def test_config_parsing():
    cfg = ExperimentConfig.from_string(SMALL)
    assert cfg.model.hidden == (8,) and cfg.train.seeds == (0, 1)
    assert cfg.sweep.lr_grid[1] == cfg.sweep.fixed_lr == pytest.approx(0.01)
    assert cfg.sweep.fixed_lr in cfg.sweep.lr_grid


@pytest.mark.parametrize("text", [
    "[model]\nwidth = 3\n",
    "[nonsense]\na = 1\n",
    "[train]\nsteps = many\n",
    "[optimizer]\nrule = lion\n",
    "[data]\nsource = csv\n",
    "[sweep]\ngrid = diagonal\n",
    "no section header",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_string(text)


def test_sweep_requires_grid_members():
    cfg = ExperimentConfig.from_string(SMALL.replace("fixed_lr = 0.01", "fixed_lr = 0.02"))
    with pytest.raises(ConfigError):
        cfg.validate_sweep()


@pytest.fixture(scope="module")
def sweep():
    return run_transfer_sweep(ExperimentConfig.from_string(SMALL))


def test_sweep_shape(sweep):
    # axes grid: 3 lrs at fixed noise + 1 extra noise at fixed lr
    assert len(sweep.rows) == 2 * 2 * 4
    assert {r["width"] for r in sweep.rows} == {8, 16}
    assert len(sweep.trajectories) == len(sweep.rows) * 5
    am = sweep.argmins("train_loss", sweep.config["sweep"]["fixed_lr"], 0.0)
    assert set(am) == {4, 8} and all(v["lr_index"] is not None for v in am.values())


def test_emit_deterministic(tmp_path, sweep):
    again = run_transfer_sweep(ExperimentConfig.from_string(SMALL))
    a = emit_results(sweep, tmp_path / "a")
    b = emit_results(again, tmp_path / "b")
    for p, q in zip(a, b):
        assert open(p, "rb").read() == open(q, "rb").read()


def test_csv_json_parity(tmp_path, sweep):
    csv_path, _, json_path = emit_results(sweep, tmp_path)
    cols, rows = read_csv(csv_path)
    payload = json.loads(open(json_path).read())
    assert cols == payload["columns"]
    for r, j in zip(rows, payload["rows"]):
        assert r["final_train_loss"] == j["final_train_loss"] and r["lr"] == j["lr"]


def test_empty_sweep_header_only(tmp_path):
    path = emit_results(SweepResult(), tmp_path, formats=("csv",))[0]
    assert open(path).read() == ",".join(SweepResult.ROW_COLUMNS) + "\n"


def test_timing_separate(tmp_path, sweep):
    paths = emit_results(sweep, tmp_path, timing=True)
    assert paths[-1].endswith("sweep_timing.json") and len(json.load(open(paths[-1]))) == len(sweep.rows)


def test_divergent_cell_flagged(tmp_path):
    text = SMALL.replace("rule = adam", "rule = sgd").replace("lr_grid = logspace 0.001 0.1 3", "lr_grid = 0.01, 1e6")
    res = run_transfer_sweep(ExperimentConfig.from_string(text.replace("base_widths = 4, 8", "base_widths = 4")))
    bad = [r for r in res.rows if r["lr"] == 1e6]
    assert bad and all(r["diverged"] and math.isnan(r["final_train_loss"]) for r in bad)
    path = emit_results(res, tmp_path, formats=("csv",))[0]
    assert ",nan," in open(path).read()
    am = res.argmins("train_loss", 0.01, 0.0)
    assert am[4]["lr"] == 0.01


def test_one_point_grid_matches_single_upscale():
    text = SMALL.replace("lr_grid = logspace 0.001 0.1 3", "lr_grid = 0.01").replace("noise_grid = 0, 0.5", "noise_grid = 0.5")
    text = text.replace("fixed_noise = 0", "fixed_noise = 0.5").replace("base_widths = 4, 8", "base_widths = 4")
    text = text.replace("seeds = 0, 1", "seeds = 1")
    cfg = ExperimentConfig.from_string(text)
    res = run_transfer_sweep(cfg)
    assert len(res.rows) == 1

    ds = make_dataset(cfg.data)
    spec = cfg.model.spec(ds.d_in, ds.d_out, (4,))
    ckpt, _ = train_checkpoint(spec, cfg.base, cfg.optim.update_rule(), ds, 5, 16, 1)
    up = upscale(ckpt, UpscaleConfig(k=2, noise_std=0.5, lr=0.01, seed=1))
    train_upscaled(up.model, up.state, up.hp, 5, batch_stream(ds, 16, 1, 1), (ds.X_train, ds.Y_train))
    assert res.rows[0]["final_train_loss"] == evaluate_loss(up.model, ds.X_train, ds.Y_train)


def test_argmin_cells_ties_and_divergence():
    rows = []
    for lr, noise, loss in ((0.1, 0.0, 1.0), (0.1, 0.5, 0.5), (0.2, 0.0, 0.5), (0.2, 0.5, math.nan)):
        for seed in (0, 1):
            rows.append({"base_width": 4, "lr": lr, "noise": noise, "seed": seed, "final_train_loss": loss})
    cell = SweepResult(rows=rows).argmin_cells()[4]
    assert (cell["lr"], cell["noise"], cell["lr_index"], cell["noise_index"]) == (0.1, 0.5, 0, 1)


def test_inline_comments():
    cfg = ExperimentConfig.from_string("[train]\nsteps = 7   ; seven\nseeds = 1, 2  # two\n")
    assert cfg.train.steps == 7 and cfg.train.seeds == (1, 2)
