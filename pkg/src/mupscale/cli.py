"""Command-line entry point: ``mupscale <command> [options]``.

Exit codes: 0 success, 1 a verification check failed, 2 configuration or
input error, 3 numerical failure (NaN/inf).
"""

import argparse
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from .checkpoint import Checkpoint
from .emit import write_csv, write_json
from .exceptions import ConfigError, CsvFormatError, MupscaleError, NumericalError
from .harness import DataConfig, ExperimentConfig, batch_stream, emit_results, make_dataset, run_transfer_sweep, train_checkpoint
from .infwidth import CSV_COLUMNS, Oracle3Config, Oracle4Config, monte_carlo_compare, oracle
from .mup import hparam_report
from .training import Trainer
from .upscale import UpscaleConfig, train_upscaled, trajectory_columns, upscale
from .widen import WidenPlan, rescale_hparams, transfer_opt_state, verify_dynamic_equivalence, widen_report, widen_static

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
PROBE_SIZE = 8


def _out(args, name):
    return os.path.join(args.out_dir, name)


def _load_config(args):
    return ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()


def _parse_k(text, depth):
    parts = [int(v) for v in text.split(",") if v.strip()]
    if len(parts) == 1:
        return WidenPlan.uniform(depth, parts[0])
    return WidenPlan(tuple(parts))


def _dataset_for(ckpt):
    data = (ckpt.meta.get("data") or {}).get("config")
    if data is None:
        raise ConfigError("checkpoint does not record its dataset; retrain with `mupscale train`")
    return make_dataset(DataConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}))


def cmd_train(args):
    cfg = _load_config(args)
    steps = cfg.train.steps if args.steps is None else args.steps
    seed = cfg.train.seeds[0] if args.seed is None else args.seed
    ds = make_dataset(cfg.data)
    rule = cfg.optim.update_rule()
    spec = cfg.model.spec(ds.d_in, ds.d_out)
    data_meta = {"config": asdict(cfg.data), "batch_size": cfg.train.batch_size}
    ckpt, losses = train_checkpoint(spec, cfg.base, rule, ds, steps, cfg.train.batch_size, seed, data_meta)
    path = args.out or _out(args, "checkpoint.bin")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    ckpt.save(path)
    write_csv(_out(args, "train_trajectory.csv"), ("step", "train_loss"), [{"step": i + 1, "train_loss": v} for i, v in enumerate(losses)])
    write_json(_out(args, "hparams.json"), hparam_report(spec, cfg.base, rule.m, rule.decay_mode))
    print(f"trained {steps} steps; final minibatch loss {losses[-1] if losses else float('nan'):.6g}; checkpoint {path}")
    return EXIT_OK


def cmd_widen(args):
    ckpt = Checkpoint.load(args.checkpoint)
    spec = ckpt.model.spec
    plan = _parse_k(args.k, spec.depth)
    m = int(ckpt.meta.get("m", ckpt.state.rule.m if ckpt.state else 1))
    decay_mode = ckpt.hp.decay_mode if ckpt.hp else "vanilla"
    model = widen_static(ckpt.model, plan)
    state = transfer_opt_state(ckpt.state, spec, plan) if ckpt.state is not None else None
    hp = rescale_hparams(ckpt.hp, spec, plan, m) if ckpt.hp is not None else None
    meta = dict(ckpt.meta)
    meta["seed_lineage"] = ckpt.seed_lineage + [{"op": "widen", "k": list(plan.k), "step": ckpt.step}]
    path = args.out or _out(args, "widened.bin")
    Checkpoint(model, state, hp, meta).save(path)
    report = widen_report(spec, plan, m, decay_mode)
    write_json(os.path.splitext(path)[0] + "_report.json", report)
    print(f"widened {list(spec.widths)} -> {list(model.spec.widths)}; checkpoint {path}")
    return EXIT_OK


def cmd_upscale(args):
    ckpt = Checkpoint.load(args.checkpoint)
    ds = _dataset_for(ckpt)
    seed = 0 if args.seed is None else args.seed
    cfg = UpscaleConfig(k=args.k, noise_std=args.noise_std, lr=args.lr, seed=seed)
    probe = (ds.X_val[:PROBE_SIZE], ds.Y_val[:PROBE_SIZE]) if len(ds.val_idx) else (ds.X_train[:PROBE_SIZE], ds.Y_train[:PROBE_SIZE])
    res = upscale(ckpt, cfg, probe=probe, loss=ds.loss)
    bs = ckpt.meta["data"].get("batch_size", 64)
    traj = train_upscaled(res.model, res.state, res.hp, args.steps, batch_stream(ds, bs, seed, 1), probe, ds.loss)
    path = args.out or _out(args, "upscale_trajectory.csv")
    write_csv(path, trajectory_columns(res.model, probe), traj.rows)
    write_json(os.path.splitext(path)[0] + "_report.json", dict(res.report, diverged=traj.diverged, error=traj.error))
    if args.save:
        res.checkpoint.save(args.save)
    if traj.diverged:
        print(f"diverged: {traj.error}; partial trajectory in {path}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"upscaled to {list(res.model.spec.widths)}; {len(traj.rows) - 1} steps logged to {path}")
    return EXIT_OK


def cmd_verify(args):
    ckpt = Checkpoint.load(args.checkpoint)
    if ckpt.state is None or ckpt.hp is None:
        raise ConfigError("verify-equivalence needs a checkpoint with optimizer state and hyperparameters")
    ds = _dataset_for(ckpt)
    spec = ckpt.model.spec
    plan = _parse_k(args.k, spec.depth)
    rule = ckpt.state.rule
    base = Trainer(ckpt.model.copy(), rule, ckpt.hp, ds.loss, ckpt.state.copy())
    wide = Trainer(
        widen_static(ckpt.model, plan), rule, rescale_hparams(ckpt.hp, spec, plan, rule.m), ds.loss, transfer_opt_state(ckpt.state, spec, plan)
    )
    seed = 0 if args.seed is None else args.seed
    stream = batch_stream(ds, ckpt.meta["data"].get("batch_size", 64), seed, 2)
    res = verify_dynamic_equivalence(base, wide, stream.take(args.steps), ds.X_train[:PROBE_SIZE], plan)
    ok = res["max_output_deviation"] <= args.tol and res["max_relation_violation"] <= args.tol
    res.update(tolerance=args.tol, passed=ok, plan=list(plan.k), steps=args.steps)
    write_json(_out(args, "equivalence.json"), res)
    print(
        f"{'PASS' if ok else 'FAIL'} max output deviation {res['max_output_deviation']:.3e}, "
        f"max relation violation {res['max_relation_violation']:.3e} (tol {args.tol:g})"
    )
    return EXIT_OK if ok else EXIT_CHECK_FAILED


_ORACLE_KEYS = {f for f in Oracle4Config.__dataclass_fields__}


def _oracle_config(example, section):
    kw = {}
    for key, raw in section.items():
        if key == "example":
            continue
        if key not in _ORACLE_KEYS:
            raise ConfigError(f"[infwidth] unknown key {key!r}")
        if key in ("T", "horizon", "k", "inner_start"):
            kw[key] = int(raw)
        elif key in ("boundary", "loss"):
            kw[key] = raw.strip()
        else:
            kw[key] = float(raw)
    cls = Oracle4Config if example == "4layer" else Oracle3Config
    if cls is Oracle3Config and {"noise_D", "k", "inner_start"} & set(kw):
        raise ConfigError("noise_D, k and inner_start only apply to the 4layer example")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[infwidth] {exc}") from None


def cmd_infwidth(args):
    section = _load_config(args).infwidth if args.config else {}
    example = args.example or section.get("example", "3layer")
    if example not in ("3layer", "4layer"):
        raise ConfigError(f"--example must be 3layer or 4layer, got {example!r}")
    cfg = _oracle_config(example, section)
    if args.boundary:
        cfg = replace(cfg, boundary=args.boundary)
    upscale_run = not args.no_upscale
    path = args.out or _out(args, f"infwidth_{example}.csv")
    if args.oracle_only:
        y = oracle(cfg, upscale_run)
        write_csv(path, ("t", "oracle_y"), [{"t": t, "oracle_y": float(v)} for t, v in enumerate(y)])
        print(f"oracle sequence ({len(y)} steps) written to {path}")
        return EXIT_OK
    widths = [int(w) for w in args.widths.split(",")]
    seed = 0 if args.seed is None else args.seed
    res = monte_carlo_compare(cfg, widths, args.seeds, upscale=upscale_run, seed_offset=seed)
    write_csv(path, CSV_COLUMNS, res.rows)
    for w in widths:
        print(f"width {w}: max abs err {res.max_abs_err[w]:.4e}, relative {res.rel_err[w]:.4%}")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seeds=(args.seed,)))
    if args.workers is not None:
        cfg = replace(cfg, sweep=replace(cfg.sweep, workers=args.workers))
    result = run_transfer_sweep(cfg)
    paths = emit_results(result, args.out_dir, formats=tuple(args.format.split(",")), timing=args.timing)
    s = cfg.sweep
    for bw, a in result.argmins(s.metric, s.fixed_lr, s.fixed_noise).items():
        print(f"base width {bw}: argmin {a}")
    n_div = sum(bool(r["diverged"]) for r in result.rows)
    print(f"{len(result.rows)} cells ({n_div} diverged) -> {', '.join(paths)}")
    return EXIT_OK


def cmd_report(args):
    if args.checkpoint:
        ckpt = Checkpoint.load(args.checkpoint)
        rule_m = int(ckpt.meta.get("m", 1))
        decay = ckpt.hp.decay_mode if ckpt.hp else "vanilla"
        report = hparam_report(ckpt.model.spec, ckpt.base, rule_m, decay)
        report["step"] = ckpt.step
        report["seed_lineage"] = ckpt.seed_lineage
    else:
        cfg = _load_config(args)
        rule = cfg.optim.update_rule()
        spec = cfg.model.spec(cfg.data.d_in, cfg.data.d_out)
        report = hparam_report(spec, cfg.base, rule.m, rule.decay_mode)
    path = args.out or _out(args, "hparams.json")
    write_json(path, report)
    for row in report["params"]:
        r = row["resolved"]
        print(f"{row['name']:>4} {row['kind']:<12} lr={r['lr']:.4g} wd={r['wd']:.4g} eps={r['eps']:.4g} init_std={r['init_std']:.4g}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="mupscale", description="μP width upscaling toolkit")
    p.add_argument("--seed", type=int, default=None, help="run seed (overrides the config)")
    p.add_argument("--out-dir", default=".", help="directory for emitted files")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a base model under μP and save a checkpoint")
    s.add_argument("--config")
    s.add_argument("--steps", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("widen", help="function-preserving widening of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--k", required=True, help="uniform multiplier or comma list k_0..k_L")
    s.add_argument("--out")
    s.set_defaults(func=cmd_widen)

    s = sub.add_parser("upscale", help="widen, add noise and resume training")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--noise-std", type=float, default=0.0)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--steps", type=int, default=0)
    s.add_argument("--out", help="trajectory CSV path")
    s.add_argument("--save", help="also save the upscaled checkpoint (before training)")
    s.set_defaults(func=cmd_upscale)

    s = sub.add_parser("verify-equivalence", help="lockstep check of base vs widened training")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--k", required=True)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--tol", type=float, default=1e-8)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("infwidth", help="infinite-width oracle vs finite-width Monte-Carlo")
    s.add_argument("--example", choices=("3layer", "4layer"))
    s.add_argument("--config")
    s.add_argument("--widths", default="256,1024")
    s.add_argument("--seeds", type=int, default=8)
    s.add_argument("--boundary", choices=("delayed", "continuous"))
    s.add_argument("--no-upscale", action="store_true")
    s.add_argument("--oracle-only", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_infwidth)

    s = sub.add_parser("sweep", help="hyperparameter-transfer sweep over widths")
    s.add_argument("--config", required=True)
    s.add_argument("--format", default="csv,json")
    s.add_argument("--workers", type=int)
    s.add_argument("--timing", action="store_true", help="also write wall times (not byte-stable)")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="μP hyperparameter table for a config or checkpoint")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (MupscaleError, CsvFormatError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
