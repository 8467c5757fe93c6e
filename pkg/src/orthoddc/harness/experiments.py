"""Experiment configuration, the end-to-end estimation pipeline and Monte Carlo studies."""

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .. import __version__, backend
from .. import dgp, firststage, orthomoment, setestim, valuesim

MODES = ("naive", "orthogonal", "oracle")
EXPERIMENTS = ("bias", "rate", "coverage")
PROBE = ((5.0, 1.0), (3.0, 0.6), (7.0, 1.5), (4.0, 1.2), (6.0, 0.8))


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str = dgp.BUS
    d_x: int = 50
    N: list = field(default_factory=lambda: [2000])
    reps: int = 200
    reps_by_n: dict = None
    seed: int = 20240601
    folds: int = 2
    lam_ccp: float = None
    lam_trans: float = None
    eps_clip: float = 0.01
    features: str = "linear"
    post_lasso: bool = False
    n_paths: int = 40
    tol_tail: float = 1e-3
    grid: dict = field(default_factory=lambda: setestim.ThetaGrid.default().to_dict())
    rule: str = setestim.LOGN
    kappa: float = 1.0
    c_fixed: float = None
    w_rule: str = "identity"
    tau: float = 0.1
    b_rule: str = "size"
    mode: str = "orthogonal"
    coverage: bool = False
    oracle_obs: int = 40_000
    oracle_paths: int = 100
    workers: int = 1
    out: str = "results"
    cache: str = ".orthoddc-cache"

    def validate(self):
        if self.kind not in (dgp.BUS, dgp.ENTRY):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.rule not in setestim.RULES:
            raise ConfigError(f"rule must be one of {setestim.RULES}")
        if self.rule == setestim.FIXED and self.c_fixed is None:
            raise ConfigError("rule 'fixed' needs c_fixed")
        if self.w_rule not in ("identity", "inverse_sd"):
            raise ConfigError("w_rule must be identity or inverse_sd")
        if self.features not in ("linear", "quadratic"):
            raise ConfigError("features must be linear or quadratic")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)")
        if self.reps < 1 or self.folds < 2 or self.n_paths < 2 or self.workers < 1:
            raise ConfigError("reps >= 1, folds >= 2, n_paths >= 2 and workers >= 1 required")
        if self.reps_by_n and any(int(v) < 1 for v in self.reps_by_n.values()):
            raise ConfigError("reps_by_n values must be >= 1")
        if not self.N or any(int(n) < 20 for n in self.N):
            raise ConfigError("every N must be at least 20")
        try:
            setestim.ThetaGrid.from_dict(self.grid)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad grid: {exc}") from exc
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        d = dict(d)
        if "N" in d and not isinstance(d["N"], list):
            d["N"] = [d["N"]]
        return cls(**d).validate()

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self):
        return asdict(self)

    def digest(self, skip=("workers", "out", "cache")):
        d = {k: v for k, v in self.to_dict().items() if k not in skip}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def reps_for(self, N):
        if self.reps_by_n and str(N) in self.reps_by_n:
            return int(self.reps_by_n[str(N)])
        return self.reps

    @property
    def model(self):
        return dgp.default_model(self.kind, self.d_x)

    @property
    def truth(self):
        return dgp.default_truth(self.kind)

    @property
    def theta_grid(self):
        return setestim.ThetaGrid.from_dict(self.grid)

    @property
    def sim(self):
        return valuesim.SimConfig(n_paths=self.n_paths, tol_tail=self.tol_tail)


def code_fingerprint():
    """Hash of the package sources; cached results are tied to it."""
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            if name.endswith((".py", ".pyx")):
                with open(os.path.join(dirpath, name), "rb") as fh:
                    h.update(name.encode() + fh.read())
    return h.hexdigest()[:16]


def manifest(cfg, extra=None):
    d = {"config": cfg.to_dict(), "config_hash": cfg.digest(), "code": code_fingerprint(),
         "version": __version__, "backend": backend.NAME, "numpy": np.__version__}
    d.update(extra or {})
    return d


# ---------------------------------------------------------------------------
# shared oracle objects

class Context:
    """Oracle tables and the population identified set, built once per config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.model, self.truth = cfg.model, cfg.truth
        self.table = dgp.OracleTable(self.model, self.truth)
        self.grid = cfg.theta_grid
        self.theta0 = np.asarray(self.truth.theta(self.model.kind))
        self._idset = None

    @property
    def identified_set(self):
        if self._idset is None:
            self._idset = oracle_set(self.cfg, self.table)
        return self._idset

    def pop_moment(self, theta):
        return self.identified_set.at(theta)[0][0]


def oracle_set(cfg, table=None):
    """Population identified set on the config grid, cached on disk."""
    key = hashlib.sha256(json.dumps(
        {"kind": cfg.kind, "d_x": cfg.d_x, "grid": cfg.grid, "obs": cfg.oracle_obs,
         "paths": cfg.oracle_paths, "tol": cfg.tol_tail, "code": code_fingerprint()},
        sort_keys=True).encode()).hexdigest()[:16]
    path = os.path.join(cfg.cache, f"idset-{key}.json")
    if os.path.exists(path):
        return dgp.IdentifiedSet.from_json(path)
    out = dgp.true_identified_set(cfg.model, cfg.truth, cfg.theta_grid.points,
                                  n_obs=cfg.oracle_obs, n_paths=cfg.oracle_paths, table=table)
    os.makedirs(cfg.cache, exist_ok=True)
    out.to_json(path)
    return out


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class Estimate:
    panel: object
    nuis: object
    moments: object
    surface: object
    c_hat: float
    set_est: object
    subsample: object = None
    region: object = None


def fit_tables(panel, cfg, seed, table=None):
    if cfg.mode == "oracle":
        table = table or dgp.OracleTable(panel.model, panel.truth)
        return valuesim.oracle_tables(panel.model, table, panel.x), None
    plan = firststage.make_crossfit_plan(len(panel), cfg.folds, seed)
    est = firststage.fit_nuisances(panel, plan, cfg.lam_ccp, cfg.lam_trans, cfg.eps_clip, cfg.features,
                                   cfg.post_lasso)
    return firststage.nuisance_tables(panel, est), est


def estimate(panel, cfg: ExperimentConfig, seed, table=None, coverage=None):
    """First stage, simulated moments, criterion surface, contour set and, optionally,
    the subsampling confidence region."""
    nuis, _ = fit_tables(panel, cfg, seed, table)
    mcfg = orthomoment.MomentConfig()
    if cfg.mode == "naive":
        mcfg = mcfg.naive()
    sim = replace(cfg.sim, base_seed=seed)
    ev = orthomoment.build_moments(panel, nuis, sim, mcfg)
    aff = ev.m if cfg.mode == "naive" else ev.g
    surface = setestim.surface_from_affine(aff, cfg.theta_grid, cfg.w_rule)
    c_hat = setestim.choose_contour_level(surface, cfg.rule, kappa=cfg.kappa, c_fixed=cfg.c_fixed)
    est = setestim.contour_set(surface, c_hat, rule=cfg.rule)
    out = Estimate(panel, nuis, ev, surface, c_hat, est)
    if cfg.coverage if coverage is None else coverage:
        sub = setestim.subsample_quantile(aff, surface, c_hat, cfg.tau, cfg.b_rule, seed=seed)
        out.subsample = sub
        out.region = setestim.contour_set(surface, sub.c_tau, rule=setestim.FIXED)
    return out


def replication(cfg, ctx, N, rep):
    """One seeded replication; returns a JSON-ready record."""
    seed = int(np.random.SeedSequence([cfg.seed, N, rep]).generate_state(1)[0])
    t0 = time.perf_counter()
    panel = dgp.simulate_panel(ctx.model, ctx.truth, N, seed, table=ctx.table)
    est = estimate(panel, cfg, seed, ctx.table)
    th0 = ctx.theta0[None, :]
    ev = est.moments
    pop = ctx.pop_moment(ctx.theta0)
    m0 = ev.sample_mean(th0, "m")[0]
    g0 = ev.sample_mean(th0, "g")[0]
    idset = ctx.identified_set
    rec = {
        "N": N, "rep": rep, "seed": seed,
        "m_theta0": m0.tolist(), "g_theta0": g0.tolist(), "pop_theta0": pop.tolist(),
        "bias_naive": (m0 - pop).tolist(), "bias_orth": (g0 - pop).tolist(),
        "c_hat": est.c_hat, "set_size": int(est.set_est.members.sum()),
        "contains_theta0": est.set_est.contains(ctx.theta0),
        "hausdorff": setestim.hausdorff(est.set_est.points, idset.member_points),
        "min_NQ": float(est.surface.NQ.min()),
    }
    if est.subsample is not None:
        region = est.region.members
        rec.update({"b": est.subsample.b, "B_N": est.subsample.B_N, "c_tau": est.subsample.c_tau,
                    "subsample_fallback": est.subsample.fallback,
                    "covered": bool(np.all(region[idset.members])),
                    "sup_NQ_identified": float(est.surface.NQ[idset.members].max()),
                    "region_size": int(region.sum())})
    rec["wall"] = time.perf_counter() - t0
    return rec


_WORKER = {}


def _worker_run(args):
    cfg_dict, N, rep = args
    key = json.dumps(cfg_dict, sort_keys=True)
    if key not in _WORKER:
        cfg = ExperimentConfig.from_dict(cfg_dict)
        _WORKER.clear()
        _WORKER[key] = (cfg, Context(cfg))
    cfg, ctx = _WORKER[key]
    return replication(cfg, ctx, N, rep)


def run_study(cfg: ExperimentConfig, log=None):
    """All replications for every N; records ordered by (N, rep) whatever the worker count."""
    ctx = Context(cfg)
    ctx.identified_set  # build (or load) before forking
    jobs = [(cfg.to_dict(), int(N), r) for N in cfg.N for r in range(cfg.reps_for(N))]
    records = []
    if cfg.workers == 1:
        _WORKER[json.dumps(cfg.to_dict(), sort_keys=True)] = (cfg, ctx)
        for j in jobs:
            records.append(_worker_run(j))
            if log:
                log(records[-1])
    else:
        with ProcessPoolExecutor(cfg.workers) as pool:
            for rec in pool.map(_worker_run, jobs):
                records.append(rec)
                if log:
                    log(rec)
    records.sort(key=lambda r: (r["N"], r["rep"]))
    return ExperimentReport(cfg, records, ctx.identified_set)


# ---------------------------------------------------------------------------
# reports

@dataclass
class ExperimentReport:
    cfg: ExperimentConfig
    records: list
    identified_set: object = None

    def by_n(self, N):
        return [r for r in self.records if r["N"] == N]

    def summary(self):
        out = {"config_hash": self.cfg.digest(), "n_records": len(self.records), "by_N": {}}
        for N in sorted({r["N"] for r in self.records}):
            rs = self.by_n(N)
            d = {
                "reps": len(rs),
                "median_abs_bias_naive": np.median(np.abs([r["bias_naive"] for r in rs]), axis=0).tolist(),
                "median_abs_bias_orth": np.median(np.abs([r["bias_orth"] for r in rs]), axis=0).tolist(),
                "median_abs_m_theta0": np.median(np.abs([r["m_theta0"] for r in rs]), axis=0).tolist(),
                "median_abs_g_theta0": np.median(np.abs([r["g_theta0"] for r in rs]), axis=0).tolist(),
                "mean_bias_naive": np.mean([r["bias_naive"] for r in rs], axis=0).tolist(),
                "mean_bias_orth": np.mean([r["bias_orth"] for r in rs], axis=0).tolist(),
                "median_hausdorff": float(np.median([r["hausdorff"] for r in rs])),
                "hausdorff_quartiles": np.quantile([r["hausdorff"] for r in rs], [0.25, 0.75]).tolist(),
                "containment": float(np.mean([r["contains_theta0"] for r in rs])),
                "median_set_size": float(np.median([r["set_size"] for r in rs])),
            }
            if "covered" in rs[0]:
                d["coverage"] = float(np.mean([r["covered"] for r in rs]))
                d["median_c_tau"] = float(np.median([r["c_tau"] for r in rs]))
                d["fallbacks"] = int(sum(r["subsample_fallback"] for r in rs))
            out["by_N"][str(N)] = d
        return out

    def write(self, out_dir):
        """Deterministic report files plus a separate timing file."""
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "records.jsonl"), "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps({k: v for k, v in r.items() if k != "wall"}, sort_keys=True) + "\n")
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, "timing.csv"), "w", encoding="utf-8") as fh:
            fh.write("N,rep,wall_seconds\n")
            for r in self.records:
                fh.write(f"{r['N']},{r['rep']},{r['wall']:.3f}\n")
        with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest(self.cfg), fh, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, "rate_curve.csv"), "w", encoding="utf-8") as fh:
            fh.write("N,median_hausdorff,containment\n")
            for N, d in self.summary()["by_N"].items():
                fh.write(f"{N},{d['median_hausdorff']!r},{d['containment']!r}\n")

    @classmethod
    def read(cls, out_dir):
        with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as fh:
            man = json.load(fh)
        with open(os.path.join(out_dir, "records.jsonl"), encoding="utf-8") as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        for r in recs:
            r.setdefault("wall", float("nan"))
        return cls(ExperimentConfig.from_dict(man["config"]), recs), man


# ---------------------------------------------------------------------------
# orthogonality audit

def orthogonality_audit(cfg: ExperimentConfig, N=4000, seed=None, families=("ccp", "transition"),
                        probe=PROBE, conditional=True, table=None):
    """Gateaux slopes of the naive, orthogonal and sign-flipped moments at the truth.

    With ``conditional`` the outcomes (a, s') are replaced by their exact
    conditional means given w, which removes outcome noise from the slopes
    without changing their expectation.
    """
    seed = cfg.seed if seed is None else seed
    model, truth = cfg.model, cfg.truth
    table = table or dgp.OracleTable(model, truth)
    panel = dgp.simulate_panel(model, truth, N, seed, table=table)
    if conditional:
        panel = dgp.conditional_outcomes(panel, table)
    nuis = valuesim.oracle_tables(model, table, panel.x)
    sim = replace(cfg.sim, base_seed=seed)
    if model.kind == dgp.ENTRY:
        probe = [tuple(p) + (1.0,) for p in probe]
        families = tuple("opponent" if f == "transition" else f for f in families)
    out = {}
    for fam in families:
        res = orthomoment.orthogonality_check(panel, np.asarray(probe), nuis, fam, sim,
                                              orthomoment.MomentConfig())
        out[fam] = res
    return out


def audit_report(results):
    rep = {"families": {}}
    ok = True
    for fam, res in results.items():
        d = {"probe": res.thetas.tolist(), "r_grid": res.r_grid.tolist()}
        for name in ("naive", "orthogonal", "flipped"):
            d[f"slope_{name}"] = res.slope[name].tolist()
            d[f"se_{name}"] = res.se[name].tolist()
        d["orthogonal_pass"] = res.passes()
        d["flipped_pass"] = res.passes(name="flipped")
        d["ratio"] = float(np.linalg.norm(res.slope["orthogonal"]) / np.linalg.norm(res.slope["naive"]))
        ok = ok and d["orthogonal_pass"] and not d["flipped_pass"]
        rep["families"][fam] = d
    rep["pass"] = ok
    return rep
