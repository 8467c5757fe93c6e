"""Command line entry point: simulate | estimate | montecarlo | coverage | check-orthogonality.

Exit codes: 0 ok, 1 a checked criterion failed, 2 bad configuration or input.
"""

import argparse
import json
import os
import sys

import numpy as np

from .. import dgp, firststage, setestim
from . import criteria
from .experiments import (ConfigError, Context, ExperimentConfig, audit_report, estimate,
                          manifest, orthogonality_audit, run_study)

OK, FAILED, CONFIG_ERROR = 0, 1, 2


def _config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    d = cfg.to_dict()
    if getattr(args, "n", None):
        d["N"] = list(args.n)
    for name in ("reps", "seed", "rule", "mode", "out", "workers", "w_rule", "n_paths"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    return ExperimentConfig.from_dict(d)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def cmd_simulate(args):
    cfg = _config(args)
    model, truth = cfg.model, cfg.truth
    table = dgp.OracleTable(model, truth)
    panel = dgp.simulate_panel(model, truth, cfg.N[0], cfg.seed, table=table)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "panel.csv")
    dgp.save_panel(panel, path)
    gam = table.oracle(panel.x).gamma_at(panel.s)
    info = {"rows": len(panel), "share_a1": float(panel.a.mean()), "mean_gamma0": float(gam.mean()),
            "clipped_mass": dgp.clipped_mass(panel) if model.kind == dgp.BUS else None}
    _write_json(os.path.join(cfg.out, "simulate_manifest.json"), manifest(cfg, {"summary": info}))
    print(json.dumps(info, indent=2))
    return OK


def cmd_estimate(args):
    cfg = _config(args)
    if args.panel:
        try:
            panel = dgp.load_panel(args.panel)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot read panel {args.panel}: {exc}") from exc
    else:
        panel = dgp.simulate_panel(cfg.model, cfg.truth, cfg.N[0], cfg.seed)
    os.makedirs(cfg.out, exist_ok=True)
    est = estimate(panel, cfg, cfg.seed, coverage=True)
    est.surface.to_csv(os.path.join(cfg.out, "surface.csv"), est.set_est.members)
    est.surface.to_csv(os.path.join(cfg.out, "region.csv"), est.region.members)
    est.subsample.to_json(os.path.join(cfg.out, "subsample.json"))
    if cfg.mode != "oracle":
        plan = firststage.make_crossfit_plan(len(panel), cfg.folds, cfg.seed)
        fits = firststage.fit_nuisances(panel, plan, cfg.lam_ccp, cfg.lam_trans, cfg.eps_clip,
                                        cfg.features, cfg.post_lasso)
        fits.to_json(os.path.join(cfg.out, "nuisances.json"))
    theta0 = np.asarray(cfg.truth.theta(cfg.kind))
    summary = {
        "N": len(panel), "mode": cfg.mode, "c_hat": est.c_hat, "rule": cfg.rule,
        "set_size": int(est.set_est.members.sum()), "set_empty": est.set_est.empty,
        "theta0_in_set": est.set_est.contains(theta0) if _on_grid(est.set_est, theta0) else None,
        "c_tau": est.subsample.c_tau, "region_size": int(est.region.members.sum()),
        "moment_mean_theta0": est.moments.sample_mean(theta0[None, :], "g")[0].tolist(),
    }
    _write_json(os.path.join(cfg.out, "estimate_manifest.json"), manifest(cfg, {"summary": summary}))
    print(json.dumps(summary, indent=2))
    return OK


def _on_grid(est, theta):
    try:
        est.grid.index_of(theta)
        return True
    except KeyError:
        return False


def _study(cfg, checks):
    def log(rec):
        print(f"N={rec['N']} rep={rec['rep']} d_H={rec['hausdorff']:.3f} "
              f"theta0_in={rec['contains_theta0']} {rec['wall']:.1f}s", file=sys.stderr)
    report = run_study(cfg, log)
    report.write(cfg.out)
    verdicts = [chk(report) for chk in checks]
    for v in verdicts:
        print(v.line())
    return OK if all(v.passed for v in verdicts) else FAILED


def cmd_montecarlo(args):
    cfg = _config(args)
    if cfg.reps < 2:
        raise ConfigError("montecarlo needs at least 2 replications")
    if args.experiment == "bias":
        n = cfg.N[0]
        checks = [lambda r: criteria.bias_reduction(r, n)]
    else:
        checks = [criteria.rate_shrinkage, criteria.containment]
    return _study(cfg, checks)


def cmd_coverage(args):
    cfg = _config(args)
    d = cfg.to_dict()
    d["coverage"] = True
    cfg = ExperimentConfig.from_dict(d)
    n = cfg.N[0]
    return _study(cfg, [lambda r: criteria.coverage(r, n)])


def cmd_check_orthogonality(args):
    cfg = _config(args)
    res = orthogonality_audit(cfg, N=args.obs, conditional=not args.raw)
    rep = audit_report(res)
    os.makedirs(cfg.out, exist_ok=True)
    _write_json(os.path.join(cfg.out, "orthogonality.json"), dict(rep, manifest=manifest(cfg)))
    v = criteria.orthogonality(rep)
    print(v.line())
    return OK if v.passed else FAILED


def build_parser():
    p = argparse.ArgumentParser(prog="orthoddc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--n", type=int, nargs="+", help="sample size(s)")
        sp.add_argument("--reps", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--rule", choices=setestim.RULES)
        sp.add_argument("--mode", choices=("naive", "orthogonal", "oracle"))
        sp.add_argument("--w-rule", dest="w_rule", choices=("identity", "inverse_sd"))
        sp.add_argument("--paths", dest="n_paths", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out")
        return sp

    common(sub.add_parser("simulate", help="draw a panel and write it as CSV")).set_defaults(fn=cmd_simulate)
    sp = common(sub.add_parser("estimate", help="run the estimation pipeline on one panel"))
    sp.add_argument("--panel", help="panel CSV written by 'simulate' (default: simulate one)")
    sp.set_defaults(fn=cmd_estimate)
    sp = common(sub.add_parser("montecarlo", help="bias or rate Monte Carlo study"))
    sp.add_argument("--experiment", choices=("bias", "rate"), default="bias")
    sp.set_defaults(fn=cmd_montecarlo)
    common(sub.add_parser("coverage", help="subsampling coverage study")).set_defaults(fn=cmd_coverage)
    sp = common(sub.add_parser("check-orthogonality", help="numerical Gateaux-derivative audit"))
    sp.add_argument("--obs", type=int, default=4000)
    sp.add_argument("--raw", action="store_true", help="use observed outcomes instead of their conditional means")
    sp.set_defaults(fn=cmd_check_orthogonality)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
