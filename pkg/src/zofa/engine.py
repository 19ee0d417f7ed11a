"""Online adaptation engine.

Each step receives one unlabeled batch and spends exactly two forward passes
per sample: the symmetric pair (theta + mu z_i, theta - mu z_i). Their average
is the prediction, their loss difference drives the update. The same loop
also hosts the simplified baselines (one-sided, batch-shared, plain-entropy,
backprop-entropy, no-adapt) so experiment rows differ only in configuration.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import objectives as obj
from . import zo
from .data import StreamProtocol, domain_stream
from .errors import ConfigError
from .grads import SiLossContext, grad_backprop
from .net import (
    ForwardTally,
    Network,
    apply_params,
    forward,
    make_layout,
    pack_params,
    with_adapted,
)
from .perturb import (
    GAUSSIAN,
    PerturbationSpec,
    accumulate_update,
    perturbed_forward,
    symmetric_forward,
)
from .rng import derive_key

log = logging.getLogger(__name__)

MODES = (
    "zofa",             # symmetric sample-wise probes, scale-invariant objective, anchor on
    "zofa-entropy",     # same but without the alignment term (no source stats needed)
    "one-sided",        # perturbed-vs-clean estimator, plain entropy + alignment, no anchor
    "batch-shared",     # one shared direction per batch, otherwise like zofa without anchor
    "plain-entropy-zo", # symmetric sample-wise probes on raw entropy, no anchor
    "bp-entropy",       # backprop entropy descent reference
    "no-adapt",         # frozen model
    "custom",           # explicit toggles, used by ablation sweeps
)


@dataclass
class AdaptConfig:
    mode: str = "zofa"
    mu: float = 0.06
    lr: float = 0.002
    gamma: float = 0.001
    k: int = 1
    align_lambda: float = 500.0
    align_rho: float = 0.999
    center_ema: float = 0.9
    moment_ema: float = 0.9
    anchor_ema: float = 0.0
    batch: int = 64
    balance: bool = True
    params: str = "norm"
    seed: int = 0
    diagnostics: bool = False
    # read only when mode == "custom"
    custom_objective: str = "si"  # "si" or "plain"
    custom_samplewise: bool = True
    custom_anchor: bool = True


@dataclass(frozen=True)
class ResolvedMode:
    estimator: str      # "two-sided" | "one-sided" | "bp" | "none"
    samplewise: bool
    objective: str      # "si" | "plain"
    lam: float
    anchor_on: bool
    predict_from: str   # "average" | "clean"


def resolve_mode(cfg: AdaptConfig) -> ResolvedMode:
    lam = cfg.align_lambda
    m = cfg.mode
    if m == "zofa":
        return ResolvedMode("two-sided", True, "si", lam, True, "average")
    if m == "zofa-entropy":
        return ResolvedMode("two-sided", True, "si", 0.0, True, "average")
    if m == "one-sided":
        return ResolvedMode("one-sided", True, "plain", lam, False, "clean")
    if m == "batch-shared":
        return ResolvedMode("two-sided", False, "si", lam, False, "average")
    if m == "plain-entropy-zo":
        return ResolvedMode("two-sided", True, "plain", 0.0, False, "average")
    if m == "bp-entropy":
        return ResolvedMode("bp", False, "plain", 0.0, False, "clean")
    if m == "no-adapt":
        return ResolvedMode("none", False, "plain", 0.0, False, "clean")
    if m == "custom":
        return ResolvedMode(
            "two-sided", cfg.custom_samplewise, cfg.custom_objective, lam,
            cfg.custom_anchor, "average",
        )
    raise ConfigError(f"unknown mode {m!r}; expected one of {MODES}")


def validate_config(cfg: AdaptConfig, src: obj.SourceStats | None) -> ResolvedMode:
    if cfg.batch < 1:
        raise ConfigError("batch size must be >= 1")
    if cfg.mu <= 0.0:
        raise ConfigError("mu must be positive")
    if cfg.lr < 0.0:
        raise ConfigError("learning rate must be nonnegative")
    for name in ("gamma", "align_rho", "center_ema", "moment_ema", "anchor_ema"):
        v = getattr(cfg, name)
        if not (0.0 <= v <= 1.0):
            raise ConfigError(f"{name} must lie in [0, 1], got {v}")
    if not (0 <= cfg.k):
        raise ConfigError("k must be nonnegative")
    resolved = resolve_mode(cfg)
    if resolved.lam > 0.0 and src is None:
        raise ConfigError(
            "alignment weight > 0 requires source statistics; "
            "use mode zofa-entropy (or align_lambda = 0) without them"
        )
    return resolved


@dataclass(frozen=True)
class OnlineState:
    center: obj.OnlineCenter
    moments: obj.TargetMoments
    anchor: zo.AnchorState
    balance: zo.BalanceState
    theta0: np.ndarray
    step: int = 0


def initial_state(net: Network, cfg: AdaptConfig) -> OnlineState:
    theta0 = pack_params(net, "adapted")
    return OnlineState(
        center=obj.OnlineCenter(None, cfg.center_ema),
        moments=obj.TargetMoments(None, None, cfg.moment_ema),
        anchor=zo.AnchorState(theta0.copy(), cfg.anchor_ema, cfg.gamma),
        balance=zo.BalanceState(),
        theta0=theta0,
    )


@dataclass
class StepRecord:
    step: int
    domain: str
    preds: np.ndarray
    correct: np.ndarray | None
    loss_plus: float
    loss_minus: float
    update_norm: float
    drift: float
    logit_norm: float
    si_entropy: float
    entropy: float
    grad_cosine: float | None
    forwards: int
    excluded: int


def _bootstrap(state: OnlineState, o_bar, h_bar, h_sq_bar) -> OnlineState:
    # first-step statistics are seeded from the batch itself, before any loss
    center, moments = state.center, state.moments
    if center.c is None:
        center = obj.OnlineCenter(o_bar.mean(axis=0), center.ema_factor)
    if moments.m is None:
        moments = obj.TargetMoments(
            h_bar.mean(axis=0), h_sq_bar.mean(axis=0), moments.ema_factor
        )
    return replace(state, center=center, moments=moments)


def _side_losses(resolved, o, o_bar, h, state, src, rho):
    if resolved.objective == "si":
        return obj.combined_loss_batch(
            o, o_bar, h, state.center, state.moments, src, rho, resolved.lam
        )
    loss = obj.entropy_batch(o)
    if resolved.lam > 0.0:
        loss = loss + resolved.lam * obj.moment_alignment_loss_batch(
            h, state.moments, src, rho
        )
    return loss


def adapt_step(
    net: Network,
    state: OnlineState,
    x: np.ndarray,
    y: np.ndarray | None,
    cfg: AdaptConfig,
    src: obj.SourceStats | None,
    tally: ForwardTally,
    domain_key: int = 0,
    domain_tag: str = "",
):
    """Process one batch; returns (predictions, net', state', StepRecord)."""
    resolved = resolve_mode(cfg)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    start_count = tally.count
    step_seed = derive_key(cfg.seed, domain_key, state.step)

    if resolved.estimator == "none":
        o, _ = forward(net, x, tally=tally)
        preds = o.argmax(axis=1)
        rec = _record(state, o, preds, y, 0.0, 0.0, 0.0, None,
                      tally.count - start_count, 0, domain_tag)
        return preds, net, replace(state, step=state.step + 1), rec

    if resolved.estimator == "bp":
        o, _ = forward(net, x, tally=tally)
        preds = o.argmax(axis=1)
        g = grad_backprop(net, x, loss_kind="entropy", subset="adapted")
        theta = pack_params(net, "adapted")
        theta_new = zo.sgd_step(theta, g, cfg.lr)
        net2 = apply_params(net, theta_new, "adapted")
        upd = float(np.linalg.norm(theta_new - theta))
        state2 = replace(state, step=state.step + 1)
        ent = float(obj.entropy_batch(o).mean())
        rec = _record(state2, o, preds, y, ent, ent, upd, None,
                      tally.count - start_count, 0, domain_tag, theta_new=theta_new)
        return preds, net2, state2, rec

    layout = make_layout(net, "adapted")
    if layout.size == 0:
        raise ConfigError("adaptation requested but no parameters are adapted")
    theta = pack_params(net, "adapted")

    kinds = [GAUSSIAN] * B
    dbar = None
    if resolved.anchor_on and cfg.k > 0:
        kinds = zo.sample_perturbation_kinds(B, min(cfg.k, B), step_seed)
        dbar = zo.anchor_direction(theta, state.anchor)
    if resolved.samplewise:
        specs = [
            PerturbationSpec(step_seed, i, cfg.mu, kinds[i], dbar) for i in range(B)
        ]
    else:
        shared = PerturbationSpec(step_seed, 0, cfg.mu, GAUSSIAN, None)
        specs = [shared] * B

    if resolved.estimator == "two-sided":
        o_p, h_p, o_m, h_m = symmetric_forward(net, x, specs, layout, tally)
        o_bar = 0.5 * (o_p + o_m)
        h_bar = 0.5 * (h_p + h_m)
        h_sq_bar = 0.5 * (h_p * h_p + h_m * h_m)
        ok = (
            np.isfinite(o_p).all(axis=1) & np.isfinite(o_m).all(axis=1)
            & np.isfinite(h_p).all(axis=1) & np.isfinite(h_m).all(axis=1)
        )
        preds, pred_logits, fallback = _compose_predictions(
            net, x, o_bar, o_p, o_m, ok, tally
        )
        if not ok.any():
            log.warning("all samples non-finite at step %d; state unchanged", state.step)
            rec = _record(state, pred_logits, preds, y, np.nan, np.nan, 0.0, None,
                          tally.count - start_count, B, domain_tag)
            return preds, net, replace(state, step=state.step + 1), rec
        state = _bootstrap(state, o_bar[ok], h_bar[ok], h_sq_bar[ok])
        lp = _side_losses(resolved, o_p[ok], o_bar[ok], h_p[ok], state, src, cfg.align_rho)
        lm = _side_losses(resolved, o_m[ok], o_bar[ok], h_m[ok], state, src, cfg.align_rho)
        keep = np.isfinite(lp) & np.isfinite(lm)
        idx = np.flatnonzero(ok)[keep]
        scalars = (lp[keep] - lm[keep]) / (2.0 * cfg.mu)
        g_hat = (
            accumulate_update([specs[i] for i in idx], scalars, layout)
            if idx.size else np.zeros(layout.size)
        )
        excluded = B - int(idx.size)
        loss_p = float(lp[keep].mean()) if idx.size else float("nan")
        loss_m = float(lm[keep].mean()) if idx.size else float("nan")
    else:  # one-sided: clean pass for inference, one perturbed pass for the probe
        o0, h0 = forward(net, x, tally=tally)
        o_p, h_p = perturbed_forward(net, x, specs, layout, 1.0, tally)
        o_bar, h_bar, h_sq_bar = o0, h0, h0 * h0
        ok = (
            np.isfinite(o0).all(axis=1) & np.isfinite(h0).all(axis=1)
            & np.isfinite(o_p).all(axis=1) & np.isfinite(h_p).all(axis=1)
        )
        preds = o0.argmax(axis=1)
        pred_logits = o0
        if not ok.any():
            log.warning("all samples non-finite at step %d; state unchanged", state.step)
            rec = _record(state, pred_logits, preds, y, np.nan, np.nan, 0.0, None,
                          tally.count - start_count, B, domain_tag)
            return preds, net, replace(state, step=state.step + 1), rec
        state = _bootstrap(state, o0[ok], h_bar[ok], h_sq_bar[ok])
        lp = _side_losses(resolved, o_p[ok], o0[ok], h_p[ok], state, src, cfg.align_rho)
        l0 = _side_losses(resolved, o0[ok], o0[ok], h0[ok], state, src, cfg.align_rho)
        keep = np.isfinite(lp) & np.isfinite(l0)
        idx = np.flatnonzero(ok)[keep]
        scalars = (lp[keep] - l0[keep]) / cfg.mu
        g_hat = (
            accumulate_update([specs[i] for i in idx], scalars, layout)
            if idx.size else np.zeros(layout.size)
        )
        excluded = B - int(idx.size)
        loss_p = float(lp[keep].mean()) if idx.size else float("nan")
        loss_m = float(l0[keep].mean()) if idx.size else float("nan")

    grad_cos = None
    if cfg.diagnostics:
        grad_cos = _oracle_cosine(net, x[ok], resolved, state, src, cfg, g_hat)

    delta = -cfg.lr * g_hat
    balance = state.balance
    if resolved.anchor_on and cfg.balance:
        delta, balance = zo.balance_update(delta, theta, state.anchor, balance)
    theta_prime = theta + delta
    anchor = replace(state.anchor, relax=cfg.gamma)
    theta_new = zo.relax_weights(theta_prime, anchor) if resolved.anchor_on else theta_prime
    anchor = zo.update_anchor(anchor, theta_new)
    net2 = apply_params(net, theta_new, "adapted")

    incl = np.flatnonzero(ok)
    state2 = OnlineState(
        center=obj.update_center(state.center, o_bar[incl]),
        moments=obj.update_moments(
            state.moments, h_bar[incl].mean(axis=0), h_sq_bar[incl].mean(axis=0)
        ),
        anchor=anchor,
        balance=balance,
        theta0=state.theta0,
        step=state.step + 1,
    )
    rec = _record(
        state2, pred_logits, preds, y, loss_p, loss_m,
        float(np.linalg.norm(theta_new - theta)), grad_cos,
        tally.count - start_count, excluded, domain_tag,
        theta_new=theta_new,
    )
    return preds, net2, state2, rec


def _compose_predictions(net, x, o_bar, o_p, o_m, ok, tally):
    """Average where both sides are finite, else the finite side, else a clean
    forward for just those rows (degenerate path, logged)."""
    fin_p = np.isfinite(o_p).all(axis=1)
    fin_m = np.isfinite(o_m).all(axis=1)
    logits = np.where(ok[:, None], o_bar, np.nan)
    only_p = fin_p & ~fin_m
    only_m = fin_m & ~fin_p
    logits[only_p] = o_p[only_p]
    logits[only_m] = o_m[only_m]
    neither = ~(fin_p | fin_m)
    fallback = int(neither.sum())
    if fallback:
        log.warning("clean-forward fallback for %d samples", fallback)
        o_clean, _ = forward(net, x[neither], tally=tally)
        logits[neither] = o_clean
    return logits.argmax(axis=1), logits, fallback


def _oracle_cosine(net, x, resolved, state, src, cfg, g_hat):
    if x.shape[0] == 0:
        return 0.0
    ctx = SiLossContext(
        center=state.center.c, moments=state.moments, src=src,
        rho=cfg.align_rho, lam=resolved.lam,
    )
    kind = "si-entropy" if resolved.objective == "si" else "entropy"
    oracle = grad_backprop(net, x, loss_kind=kind, ctx=ctx, subset="adapted")
    return cosine(g_hat, oracle)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        log.warning("cosine of zero-norm vector reported as 0")
        return 0.0
    return float(a @ b) / (na * nb)


def _record(state, logits, preds, y, loss_p, loss_m, upd, grad_cos, forwards,
            excluded, domain_tag, theta_new=None):
    fin = np.isfinite(logits).all(axis=1)
    logits_f = logits[fin] if fin.any() else np.zeros((1, logits.shape[1]))
    drift = (
        float(np.linalg.norm((theta_new if theta_new is not None else state.theta0)
                             - state.theta0))
    )
    return StepRecord(
        step=state.step,
        domain=domain_tag,
        preds=np.asarray(preds, dtype=np.int64),
        correct=None if y is None else (np.asarray(preds) == np.asarray(y)),
        loss_plus=loss_p,
        loss_minus=loss_m,
        update_norm=upd,
        drift=drift,
        logit_norm=float(np.linalg.norm(logits_f, axis=1).mean()),
        si_entropy=float(
            obj.scale_invariant_entropy_batch(logits_f, logits_f, state.center).mean()
        ),
        entropy=float(obj.entropy_batch(logits_f).mean()),
        grad_cosine=grad_cos,
        forwards=forwards,
        excluded=excluded,
    )


# ---------------------------------------------------------------------------
# streams

@dataclass
class RunReport:
    domains: list
    avg_acc: float
    final_drift: float
    total_forwards: int
    total_samples: int
    config: dict
    records: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def run_stream(
    net0: Network,
    protocol: StreamProtocol,
    cfg: AdaptConfig,
    src: obj.SourceStats | None = None,
) -> RunReport:
    """Run the protocol; single policy resets model and state per domain,
    continual carries everything across. Deterministic given seeds."""
    resolved = validate_config(cfg, src)
    net0 = with_adapted(net0, cfg.params) if resolved.estimator != "none" else net0
    if resolved.estimator not in ("none",) and not net0.adapted:
        raise ConfigError("adaptation requested but the adapted set is empty")
    tally = ForwardTally()
    records: list[StepRecord] = []
    domains = []
    net = net0
    state = initial_state(net0, cfg)
    for spec in protocol.domains:
        if protocol.policy == "single":
            net = net0
            state = initial_state(net0, cfg)
        ds = domain_stream(protocol, spec)
        dkey = spec.stable_key()
        n_correct = 0
        for start in range(0, ds.n, cfg.batch):
            xb = ds.x[start:start + cfg.batch]
            yb = ds.y[start:start + cfg.batch]
            preds, net, state, rec = adapt_step(
                net, state, xb, yb, cfg, src, tally, dkey, spec.tag()
            )
            n_correct += int((preds == yb).sum())
            records.append(rec)
        domains.append(
            {
                "domain": spec.tag(),
                "kind": spec.kind,
                "severity": spec.severity,
                "seed": spec.seed,
                "n": ds.n,
                "acc": n_correct / ds.n if ds.n else 0.0,
                "drift": records[-1].drift if records else 0.0,
            }
        )
    avg = float(np.mean([d["acc"] for d in domains])) if domains else 0.0
    total = sum(d["n"] for d in domains)
    return RunReport(
        domains=domains,
        avg_acc=avg,
        final_drift=records[-1].drift if records else 0.0,
        total_forwards=tally.count,
        total_samples=total,
        config=asdict(cfg),
        records=records,
    )


def gradient_alignment_probe(
    net: Network,
    x: np.ndarray,
    cfg: AdaptConfig,
    src: obj.SourceStats | None = None,
    step_seed: int = 0,
) -> float:
    """Cosine between the configured zeroth-order estimate and the exact
    gradient of the same objective on the same batch."""
    resolved = validate_config(cfg, src)
    net = with_adapted(net, cfg.params)
    layout = make_layout(net, "adapted")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    if resolved.samplewise:
        specs = [PerturbationSpec(step_seed, i, cfg.mu, GAUSSIAN, None) for i in range(B)]
    else:
        specs = [PerturbationSpec(step_seed, 0, cfg.mu, GAUSSIAN, None)] * B
    o_p, h_p, o_m, h_m = symmetric_forward(net, x, specs, layout)
    o_bar = 0.5 * (o_p + o_m)
    h_bar = 0.5 * (h_p + h_m)
    h_sq = 0.5 * (h_p * h_p + h_m * h_m)
    state = initial_state(net, cfg)
    state = _bootstrap(state, o_bar, h_bar, h_sq)
    lp = _side_losses(resolved, o_p, o_bar, h_p, state, src, cfg.align_rho)
    lm = _side_losses(resolved, o_m, o_bar, h_m, state, src, cfg.align_rho)
    g_hat = accumulate_update(specs, (lp - lm) / (2.0 * cfg.mu), layout)
    return _oracle_cosine(net, x, resolved, state, src, cfg, g_hat)


# ---------------------------------------------------------------------------
# reports on disk

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def trace_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        [
            "step", "domain", "n", "n_correct", "acc", "loss_plus", "loss_minus",
            "update_norm", "drift", "logit_norm", "si_entropy", "entropy",
            "grad_cosine", "forwards", "excluded", "preds", "correct",
        ]
    )
    for r in report.records:
        n = len(r.preds)
        nc = int(r.correct.sum()) if r.correct is not None else ""
        acc = (nc / n) if r.correct is not None and n else ""
        w.writerow(
            [
                r.step, r.domain, n, nc, _fmt(acc if acc == "" else float(acc)),
                _fmt(r.loss_plus), _fmt(r.loss_minus), _fmt(r.update_norm),
                _fmt(r.drift), _fmt(r.logit_norm), _fmt(r.si_entropy),
                _fmt(r.entropy), _fmt(r.grad_cosine), r.forwards, r.excluded,
                ";".join(str(int(p)) for p in r.preds),
                "".join("1" if c else "0" for c in r.correct) if r.correct is not None else "",
            ]
        )
    return buf.getvalue()


def summary_dict(report: RunReport) -> dict:
    return {
        "avg_acc": report.avg_acc,
        "domains": report.domains,
        "final_drift": report.final_drift,
        "total_forwards": report.total_forwards,
        "total_samples": report.total_samples,
        "config": report.config,
    }


def write_report(report: RunReport, outdir) -> None:
    from pathlib import Path

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.csv").write_text(trace_csv(report))
    (out / "summary.json").write_text(
        json.dumps(summary_dict(report), sort_keys=True, indent=2) + "\n"
    )
