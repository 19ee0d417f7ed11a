#!/usr/bin/env python3
"""Hyperparameter calibration for the desk-scale benchmark presets.

Reruns the frozen experiment grid (or scans around it) and prints the
quantities the acceptance thresholds were calibrated against. Not part of
the test suite; use it when the task or corruption constants change.
"""

from __future__ import annotations

import argparse
import time
from dataclasses import replace

import numpy as np

from zofa import data, engine
from zofa.grads import pretrain_source
from zofa.net import forward, make_mlp, quantize_weights, with_adapted

PRESET = dict(
    mu=0.12, lr=0.03, gamma=0.001, k=1, align_lambda=10.0, align_rho=0.05,
    center_ema=0.9, moment_ema=0.9, anchor_ema=0.0, batch=8, balance=True,
    params="norm:0",
)


def build(seed, d=32, classes=10, hidden=(32,), n_train=4000, n_test=2000,
          steps=300, lr=0.05):
    train, test = data.make_source_task(seed, d, classes, n_train, n_test)
    net = make_mlp(seed, d, classes, hidden)
    res = pretrain_source(net, train, steps, lr)
    logits, _ = forward(res.net, test.x)
    acc = float((logits.argmax(1) == test.y).mean())
    return res.net, res.stats, test, acc


def run(net, stats, test, cfg, spd=2400, policy="single", severity=5):
    doms = data.preset_domains("synthetic15", severity)
    proto = data.build_protocol(test, doms, spd, 0, policy)
    return engine.run_stream(net, proto, cfg, stats)


def pattern(args):
    agg = {}
    t0 = time.time()
    for seed in args.seeds:
        net, stats, test, src = build(seed)
        base = engine.AdaptConfig(seed=seed, **PRESET)
        r = {
            "na": run(net, stats, test, replace(base, mode="no-adapt")),
            "zs": run(net, stats, test, replace(base, mode="zofa")),
            "zc": run(net, stats, test, replace(base, mode="zofa"), policy="continual"),
            "os": run(net, stats, test, replace(base, mode="one-sided")),
            "ns": run(net, stats, test, replace(base, mode="custom", custom_anchor=False)),
            "nc": run(net, stats, test, replace(base, mode="custom", custom_anchor=False),
                      policy="continual"),
        }
        vals = dict(
            src=src,
            noadapt=r["na"].avg_acc,
            gain=r["zs"].avg_acc - r["na"].avg_acc,
            margin=r["zs"].avg_acc - r["os"].avg_acc,
            stability=r["zc"].avg_acc - r["zs"].avg_acc,
            drop=r["ns"].avg_acc - r["nc"].avg_acc,
            drift_ratio=r["zc"].final_drift / r["nc"].final_drift,
            anchored_drift=r["zc"].final_drift,
        )
        print(f"seed {seed}:", {k: round(v, 3) for k, v in vals.items()})
        for k, v in vals.items():
            agg.setdefault(k, []).append(v)
    print("MEANS:", {k: round(float(np.mean(v)), 3) for k, v in agg.items()})
    print(f"({time.time()-t0:.0f}s)")


def dagger(args):
    gains = []
    for seed in args.seeds:
        net, stats, test, _ = build(seed)
        q8 = quantize_weights(with_adapted(net, "norm:0"), 8)
        base = engine.AdaptConfig(seed=seed, **PRESET)
        r0 = run(q8, None, test, replace(base, mode="no-adapt"), spd=9000)
        rd = run(q8, None, test, replace(base, mode="zofa-entropy", lr=0.04), spd=9000)
        gains.append(rd.avg_acc - r0.avg_acc)
        print(f"seed {seed}: quantized no-adapt {r0.avg_acc:.3f} "
              f"entropy-only {rd.avg_acc:.3f} ({gains[-1]:+.3f})")
    print(f"mean gain {np.mean(gains):+.3f}")


def scan(args):
    for seed in args.seeds:
        net, stats, test, src = build(seed)
        base = engine.AdaptConfig(seed=seed, **PRESET)
        r0 = run(net, stats, test, replace(base, mode="no-adapt"), spd=args.spd)
        print(f"== seed {seed}: source {src:.3f} no-adapt {r0.avg_acc:.3f}")
        for lr in (0.02, 0.03, 0.05):
            for lam in (5.0, 10.0, 20.0):
                cfg = replace(base, mode="zofa", lr=lr, align_lambda=lam)
                rep = run(net, stats, test, cfg, spd=args.spd)
                print(f"   lr={lr} lam={lam}: {rep.avg_acc:.3f} "
                      f"({rep.avg_acc - r0.avg_acc:+.3f})")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--stage", choices=["pattern", "dagger", "scan"], default="pattern")
    ap.add_argument("--seeds", type=int, nargs="+", default=[11, 12, 13])
    ap.add_argument("--spd", type=int, default=2400)
    args = ap.parse_args()
    {"pattern": pattern, "dagger": dagger, "scan": scan}[args.stage](args)


if __name__ == "__main__":
    main()
