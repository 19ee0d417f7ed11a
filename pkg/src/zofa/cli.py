"""Command-line front end.

Commands: pretrain (build and save a source model), adapt (run one online
adaptation experiment), sweep (grids over one ablation axis), probe
(gradient-alignment and estimator-variance diagnostics). Exit codes: 0 ok,
2 configuration error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, engine, zo
from .config import RunConfig, config_echo, load_run_config
from .errors import ConfigError, NumericalError
from .grads import pretrain_source
from .net import forward, load_model, make_mlp, quantize_weights, save_model
from .rng import derive_key

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

SWEEP_AXES = ("components", "gamma", "k", "m", "mu", "batch-size", "estimator")


def _cli_layer(args) -> dict:
    layer: dict = {}

    def put(section, key, value):
        layer.setdefault(section, {})[key] = value

    if args.seed is not None:
        put("adapt", "seed", args.seed)
        put("task", "seed", args.seed)
    if getattr(args, "mode", None):
        put("adapt", "mode", args.mode)
    if getattr(args, "quantize_bits", None) is not None:
        put("run", "quantize_bits", args.quantize_bits)
    if args.out:
        put("run", "out", args.out)
    if getattr(args, "protocol", None):
        put("protocol", "policy", args.protocol)
    return layer


def _load(args) -> RunConfig:
    return load_run_config(args.config, cli=_cli_layer(args))


def _build_task(cfg: RunConfig):
    t = cfg.task
    return data.make_source_task(
        t.seed, t.dim, t.classes, t.n_train, t.n_test, t.radius, t.noise
    )


def _build_net(cfg: RunConfig):
    t = cfg.task
    return make_mlp(
        t.seed, t.dim, t.classes, tuple(t.hidden),
        with_offset=t.with_offset, tap=t.tap,
    )


def cmd_pretrain(cfg: RunConfig) -> int:
    train, test = _build_task(cfg)
    net = _build_net(cfg)
    p = cfg.pretrain
    result = pretrain_source(net, train, p.steps, p.lr, p.batch, p.seed,
                             compute_stats=p.store_stats)
    path = Path(cfg.run.model)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(result.net, path, result.stats)
    logits, _ = forward(result.net, test.x)
    acc = float((logits.argmax(axis=1) == test.y).mean())
    print(f"pretrained model -> {path} (source test acc {acc:.3f}, "
          f"stats {'stored' if result.stats is not None else 'omitted'})")
    return EXIT_OK


def _run_one(cfg: RunConfig):
    net, stats = load_model(cfg.run.model)
    if cfg.run.quantize_bits:
        net = quantize_weights(net, cfg.run.quantize_bits)
    _, test = _build_task(cfg)
    domains = data.preset_domains(cfg.protocol.preset, cfg.protocol.severity)
    protocol = data.build_protocol(
        test, domains, cfg.protocol.samples_per_domain,
        cfg.protocol.order_seed, cfg.protocol.policy,
    )
    report = engine.run_stream(net, protocol, cfg.adapt, stats)
    report.config = config_echo(cfg)
    return report


def cmd_adapt(cfg: RunConfig) -> int:
    report = _run_one(cfg)
    engine.write_report(report, cfg.run.out)
    print(f"avg acc {report.avg_acc:.4f} over {len(report.domains)} domains "
          f"-> {cfg.run.out}")
    return EXIT_OK


def _sweep_settings(cfg: RunConfig, axis: str):
    base = cfg.adapt
    if axis == "components":
        for bits in range(16):
            si = bool(bits & 1)
            swa = bool(bits & 2)
            anchor = bool(bits & 4)
            samplewise = bool(bits & 8)
            label = (
                f"si={int(si)},align={int(swa)},anchor={int(anchor)},"
                f"samplewise={int(samplewise)}"
            )
            yield label, replace(
                base, mode="custom",
                custom_objective="si" if si else "plain",
                custom_samplewise=samplewise,
                custom_anchor=anchor,
                align_lambda=base.align_lambda if swa else 0.0,
            )
    elif axis == "gamma":
        for g in (0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1):
            yield f"gamma={g}", replace(base, gamma=g)
    elif axis == "k":
        for k in (0, 1, 2, 3, 4, 5):
            yield f"k={k}", replace(base, k=k)
    elif axis == "m":
        for m in (0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1):
            yield f"m={m}", replace(base, anchor_ema=m)
    elif axis == "mu":
        for mu in (0.015, 0.03, 0.06, 0.12):
            yield f"mu={mu}", replace(base, mu=mu)
    elif axis == "batch-size":
        for lr in (base.lr / 4.0, base.lr, base.lr * 4.0):
            for b in (4, 8, 16, 32, 64):
                yield f"batch={b},lr={lr:g}", replace(base, batch=b, lr=lr)
    elif axis == "estimator":
        for mode in ("no-adapt", "one-sided", "batch-shared", "plain-entropy-zo",
                     "zofa-entropy", "zofa"):
            yield f"mode={mode}", replace(base, mode=mode)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def cmd_sweep(cfg: RunConfig, axis: str, seeds) -> int:
    settings = list(_sweep_settings(cfg, axis))
    jobs = []
    for label, acfg in settings:
        for seed in seeds:
            jobs.append((label, replace(acfg, seed=seed)))

    def run(job):
        label, acfg = job
        report = _run_one(replace(cfg, adapt=acfg))
        return label, acfg.seed, report.avg_acc, report.final_drift

    workers = max(1, int(os.environ.get("ZOFA_THREADS", "1")))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    rows = {}
    for label, seed, acc, drift in results:
        rows.setdefault(label, []).append((acc, drift))
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "setting", "seeds", "avg_acc", "avg_final_drift"])
    for label, _ in settings:
        pairs = rows[label]
        w.writerow([
            axis, label, len(pairs),
            repr(float(np.mean([p[0] for p in pairs]))),
            repr(float(np.mean([p[1] for p in pairs]))),
        ])
    (out / f"sweep_{axis}.csv").write_text(buf.getvalue())
    print(f"{len(settings)} settings x {len(seeds)} seeds -> {out / f'sweep_{axis}.csv'}")
    return EXIT_OK


def cmd_probe(cfg: RunConfig, kind: str, trials: int) -> int:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "alignment":
        net, stats = load_model(cfg.run.model)
        _, test = _build_task(cfg)
        spec = data.preset_domains(cfg.protocol.preset, cfg.protocol.severity)[0]
        stream = data.domain_stream(
            data.build_protocol(test, [spec], trials * cfg.adapt.batch,
                                cfg.protocol.order_seed), spec
        )
        sw, sh = [], []
        for p in range(trials):
            xb = stream.x[p * cfg.adapt.batch:(p + 1) * cfg.adapt.batch]
            seed = derive_key(cfg.adapt.seed, p)
            sw.append(engine.gradient_alignment_probe(
                net, xb, replace(cfg.adapt, mode="zofa", k=0), stats, seed))
            sh.append(engine.gradient_alignment_probe(
                net, xb, replace(cfg.adapt, mode="batch-shared"), stats, seed))
        payload = {
            "samplewise_mean": float(np.mean(sw)),
            "shared_mean": float(np.mean(sh)),
            "paired_diff_mean": float(np.mean(np.array(sw) - np.array(sh))),
            "trials": trials,
        }
    elif kind == "shortcut":
        rows = {}
        n = 16
        v = np.zeros(n)
        v[1] = 1.0
        for amp in (1.0, 5.0, 10.0):
            mean, var = zo.shortcut_variance_probe(
                amp, v.copy(), v, max(trials, 1000), seed=cfg.adapt.seed)
            rows[f"A={amp:g}"] = {"mean": mean, "var": var, "var_floor": amp * amp}
        payload = {"projections": rows, "trials": max(trials, 1000)}
    else:
        raise ConfigError(f"unknown probe kind {kind!r}")
    (out / f"probe_{kind}.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zofa", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="TOML-subset config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)

    sp = sub.add_parser("pretrain", help="train and save a source model")
    common(sp)

    sp = sub.add_parser("adapt", help="run one online adaptation experiment")
    common(sp)
    sp.add_argument("--mode", default=None, choices=list(engine.MODES))
    sp.add_argument("--quantize-bits", dest="quantize_bits", type=int, default=None)
    sp.add_argument("--protocol", default=None, choices=["single", "continual"])

    sp = sub.add_parser("sweep", help="run an ablation axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=list(SWEEP_AXES))
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--mode", default=None, choices=list(engine.MODES))
    sp.add_argument("--quantize-bits", dest="quantize_bits", type=int, default=None)
    sp.add_argument("--protocol", default=None, choices=["single", "continual"])

    sp = sub.add_parser("probe", help="run estimator diagnostics")
    common(sp)
    sp.add_argument("--kind", required=True, choices=["alignment", "shortcut"])
    sp.add_argument("--trials", type=int, default=50)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "adapt":
            return cmd_adapt(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.axis, args.seeds)
        if args.command == "probe":
            return cmd_probe(cfg, args.kind, args.trials)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
