"""Experiment drivers behind the command line: build, run, emit, assert."""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .config import ExperimentConfig, fmt
from .escape import (EscapeRow, FitError, escape_row, extrapolate_limit, invariant_density, open_eigenpair, qk_terms,
                     theoretical_limit)
from .maps import PiecewiseMap, affine_map, make_doubling, make_metastable
from .metastable import PerturbedFamily, balance_check, benchmark_family, stationary_and_compare
from .montecarlo import FitError as McFitError
from .montecarlo import RngSpec, fit_survival, mc_vs_spectral, simulate_stationary, simulate_survival
from .noise import (HoleFamily, NoiseModel, make_condition_C_noise, make_deterministic_noise, make_uniform_noise)
from .ulam import build_averaged_closed, build_closed, build_grid, build_open, dump_binary, export_mtx


def build_map(cfg: ExperimentConfig) -> PiecewiseMap:
    m = cfg.map
    if m.family == "doubling":
        return make_doubling()
    if m.family == "metastable":
        return make_metastable(m.c, m.omega)
    return affine_map(m.pieces, m.expansion_bound, circle=m.circle)


def build_holes(cfg: ExperimentConfig) -> HoleFamily:
    h = cfg.holes
    return HoleFamily(h.z, h.kind, circle=h.circle)


def noise_builder(cfg: ExperimentConfig) -> Callable[[float], NoiseModel]:
    n = cfg.noise

    def build(eps: float) -> NoiseModel:
        if n.kind == "uniform":
            return make_uniform_noise(eps, n.L)
        if n.kind == "conditionC":
            return make_condition_C_noise(eps, n.upsilon, n.L, n.placement)
        return make_deterministic_noise(eps)

    return build


def build_family(cfg: ExperimentConfig, c: Optional[float] = None) -> PerturbedFamily:
    if cfg.map.family != "metastable":
        raise ValueError("metastable experiments need map family 'metastable'")
    return benchmark_family(cfg.map.c if c is None else c)


# ---------------------------------------------------------------- emission

def _clean(x):
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, (np.floating,)):
        return _clean(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


class OutputWriter:
    """Single writer for one output directory; remembers what it emitted."""

    def __init__(self, directory, formats=("csv", "json", "dat")):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.formats = set(formats)
        self.written: list[str] = []

    def path(self, name: str) -> Path:
        """Register ``name`` as emitted and return its location."""
        self.written.append(name)
        return self.dir / name

    def wants(self, fmt_name: str) -> bool:
        return fmt_name in self.formats

    def text(self, name: str, content: str):
        with open(self.path(name), "w", newline="\n") as fh:
            fh.write(content)

    def csv(self, name: str, header, rows):
        if not self.wants("csv"):
            return
        lines = [",".join(header)] + [",".join(_cell(v) for v in r) for r in rows]
        self.text(name, "\n".join(lines) + "\n")

    def json(self, name: str, obj):
        if not self.wants("json"):
            return
        self.text(name, json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")

    def columns(self, name: str, *cols):
        if not self.wants("dat"):
            return
        lines = [" ".join(_cell(v) for v in row) for row in zip(*cols)]
        self.text(name, "\n".join(lines) + "\n")


@dataclass
class RunResult:
    metrics: dict = field(default_factory=dict)
    findings: dict = field(default_factory=dict)


# ---------------------------------------------------------------- escape

def _row_task(args):
    cfg, eps, rho = args
    tmap = build_map(cfg)
    return escape_row(tmap, build_holes(cfg), noise_builder(cfg)(eps), cfg.grid.N, rho,
                      allow_unaligned=cfg.grid.allow_unaligned, ly_steps=cfg.sweep.ly_steps)


def _pool_map(fn, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, tasks))
    return [fn(t) for t in tasks]


ESCAPE_HEADER = ("eps", "e_eps", "rate", "A_eps", "Delta_eps", "ratio", "grid_N", "residual")


def run_escape(cfg: ExperimentConfig, out: OutputWriter, jobs: int = 1) -> RunResult:
    tmap = build_map(cfg)
    z = cfg.holes.z
    res = RunResult()
    limit, info = theoretical_limit(tmap, z)
    rho = None if tmap.uniform_density else invariant_density(tmap, cfg.grid.N)
    rows: list[EscapeRow] = _pool_map(_row_task, [(cfg, e, rho) for e in cfg.sweep.eps], jobs)
    out.csv("escape_table.csv", ESCAPE_HEADER,
            [(r.eps, r.e_eps, r.rate, r.A_eps, r.Delta_eps, r.ratio, r.grid_N, r.residual) for r in rows])
    good = [r for r in rows if r.ok]
    m = res.metrics
    m.update(theoretical_limit=limit, period=info.period or 0, n_rows=len(rows), n_rows_failed=len(rows) - len(good))
    summary = {"map": tmap.name, "z": z, "period_info": asdict(info), "theoretical_limit": limit,
               "extrapolated_limit": None, "abs_error": None, "rows": [asdict(r) for r in rows]}
    try:
        ex = extrapolate_limit(rows)
        m.update(extrapolated_limit=ex.r0, abs_error=abs(ex.r0 - limit), rel_error=abs(ex.r0 - limit) / abs(limit),
                 fit_slope=ex.slope, fit_residual=ex.residual)
        summary.update(extrapolated_limit=ex.r0, abs_error=abs(ex.r0 - limit), fit_slope=ex.slope,
                       fit_residual=ex.residual)
    except FitError as exc:
        summary["extrapolation_error"] = str(exc)
    for i, r in enumerate(rows):
        m[f"e_eps_{i}"] = r.e_eps
        m[f"ratio_{i}"] = r.ratio
    if good:
        m.update(identity_max=max(r.identity_residual for r in good), residual_max=max(r.residual for r in good))
        if cfg.sweep.ly_steps > 0:
            m.update(ly_sup_max=max(r.ly_sup for r in good), ly_growth_max=max(r.ly_growth for r in good))
    out.json("escape_summary.json", summary)
    if cfg.qk is not None:
        _qk_part(cfg, out, res)
    if cfg.mc is not None and cfg.mc.eps:
        _survival_part(cfg, out, res, jobs)
    return res


def _qk_part(cfg: ExperimentConfig, out: OutputWriter, res: RunResult):
    tmap = build_map(cfg)
    holes = build_holes(cfg)
    tables = []
    gaps = []
    for i, eps in enumerate(cfg.qk.eps):
        t = qk_terms(tmap, None, None, noise_builder(cfg)(eps), holes, cfg.qk.k_max, N=cfg.grid.N)
        tables.append(t)
        gaps.append(t.consistency_gap / t.ratio)
        out.csv(f"qk_table_{i}.csv", ("k", "q_k"), list(enumerate(t.q)))
        for k, q in enumerate(t.q):
            res.metrics[f"q{k}_{i}"] = q
        res.metrics[f"qk_gap_rel_{i}"] = gaps[-1]
    last = tables[-1]
    for k, q in enumerate(last.q):
        res.metrics[f"q{k}"] = q
    res.metrics.update(qk_gap_rel_max=max(gaps), qk_sum=last.partial_sum, qk_ratio=last.ratio)
    out.json("qk_summary.json", [{"eps": t.eps, "q": list(t.q), "sum": t.partial_sum, "ratio": t.ratio,
                                  "Delta_eps": t.Delta_eps, "gap": t.consistency_gap} for t in tables])


def run_qk(cfg: ExperimentConfig, out: OutputWriter, jobs: int = 1) -> RunResult:
    res = RunResult()
    _qk_part(cfg, out, res)
    return res


# ---------------------------------------------------------------- Monte Carlo

def _survival_part(cfg: ExperimentConfig, out: OutputWriter, res: RunResult, jobs: int):
    tmap = build_map(cfg)
    holes = build_holes(cfg)
    mc = cfg.mc
    zs, r2s, report = [], [], []
    for i, eps in enumerate(mc.eps):
        noise = noise_builder(cfg)(eps)
        pair, _ = open_eigenpair(tmap, holes, noise, cfg.grid.N, allow_unaligned=cfg.grid.allow_unaligned)
        curve = simulate_survival(tmap, holes, noise, mc.n_steps, mc.n_traj, RngSpec(mc.seed), jobs=jobs, fit=False)
        out.csv(f"survival_{i}.csv", ("k", "survivors"), list(enumerate(curve.survivors.tolist())))
        out.columns(f"survival_{i}.dat", range(curve.survivors.size), curve.survivors.tolist())
        entry = {"eps": eps, "n_traj": mc.n_traj, "seed": mc.seed, "e_eps": pair.eigenvalue,
                 "spectral_rate": -math.log(pair.eigenvalue)}
        try:
            curve = fit_survival(curve)
            z = mc_vs_spectral(curve, pair)
            entry.update(lambda_hat=curve.lambda_hat, stderr=curve.stderr, window=list(curve.window),
                         r_squared=curve.r_squared, z_score=z)
            zs.append(abs(z))
            r2s.append(curve.r_squared)
            res.metrics[f"mc_z_{i}"] = z
            res.metrics[f"mc_lambda_{i}"] = curve.lambda_hat
        except McFitError as exc:
            entry["fit_error"] = str(exc)
            zs.append(math.inf)
        report.append(entry)
    res.metrics.update(mc_z_max=max(zs), mc_r2_min=min(r2s) if r2s else math.nan)
    out.json("mc_summary.json", report)


def _stationary_part(cfg: ExperimentConfig, out: OutputWriter, res: RunResult, jobs: int,
                     alpha_mass: Optional[float] = None):
    mc = cfg.mc
    c = mc.c if mc.c is not None else cfg.map.c
    eps = mc.eps[0] if mc.eps else cfg.noise.epsilon
    if eps is None:
        raise ValueError("[mc] eps or [noise] epsilon is required for a stationary run")
    fam = build_family(cfg, c)
    noise = noise_builder(cfg)(eps)
    N = cfg.metastable.N if cfg.metastable is not None else cfg.grid.N
    if alpha_mass is None:
        alpha_mass = stationary_and_compare(fam, noise, N, with_subsystems=False).alpha_mass
    s = simulate_stationary(fam, noise, mc.n_steps, mc.burn_in, RngSpec(mc.seed), bins=mc.bins,
                            n_chains=mc.n_chains, jobs=jobs)
    out.columns("mc_histogram.dat", s.density.grid.centers.tolist(), s.density.values.tolist())
    gap = abs(s.left_mass - alpha_mass)
    res.metrics.update(mc_left_mass=s.left_mass, mc_left_se=s.left_mass_se, mc_left_gap=gap,
                       mc_left_z=gap / s.left_mass_se if s.left_mass_se > 0 else math.inf)
    out.json("mc_stationary.json", {"c": c, "eps": eps, "seed": mc.seed, "n_chains": mc.n_chains,
                                    "n_steps": mc.n_steps, "burn_in": mc.burn_in, "bins": mc.bins,
                                    "left_mass": s.left_mass, "left_mass_se": s.left_mass_se,
                                    "operator_left_mass": alpha_mass, "gap": gap})


def run_mc(cfg: ExperimentConfig, out: OutputWriter, jobs: int = 1) -> RunResult:
    res = RunResult()
    if cfg.map.family == "metastable":
        _stationary_part(cfg, out, res, jobs)
    else:
        if not cfg.mc.eps:
            raise ValueError("[mc] eps is required for survival runs")
        _survival_part(cfg, out, res, jobs)
    return res


# ---------------------------------------------------------------- metastable

META_HEADER = ("c", "eps", "grid_N", "alpha_pred", "alpha_mass", "l1_error", "balance_residual", "e_left", "e_right",
               "ratio_forward", "ratio_reverse")


def _cell_task(args):
    cfg, c, eps = args
    fam = build_family(cfg, c)
    noise = noise_builder(cfg)(eps)
    rep = stationary_and_compare(fam, noise, cfg.metastable.N)
    fine = math.nan
    if cfg.metastable.refine_check:
        fine = stationary_and_compare(fam, noise, 2 * cfg.metastable.N, with_subsystems=False).balance_residual
    return rep, fine


def _ckey(c: float) -> str:
    return "c" + ("%g" % c)


def run_metastable(cfg: ExperimentConfig, out: OutputWriter, jobs: int = 1) -> RunResult:
    ms = cfg.metastable
    cells = [(c, e) for c in ms.c for e in ms.eps]
    results = _pool_map(_cell_task, [(cfg, c, e) for c, e in cells], jobs)
    res = RunResult()
    m = res.metrics
    rows, reports = [], []
    l1_ok, bal_ok, l1_final, bal_all, flat, spread, plateau_err, ergodic = True, True, [], [], [], [], [], True
    by_c: dict = {}
    for (c, eps), (rep, fine) in zip(cells, results):
        by_c.setdefault(c, []).append((eps, rep, fine))
    for ci, c in enumerate(ms.c):
        seq = by_c[c]
        l1 = [r.l1_error for _, r, _ in seq]
        dec = all(b < a for a, b in zip(l1, l1[1:]))
        l1_ok &= dec
        k = _ckey(c)
        m[f"l1_decreasing_{k}"] = dec
        for ei, (eps, rep, fine) in enumerate(seq):
            rows.append((c, eps, rep.grid_N, rep.alpha_pred, rep.alpha_mass, rep.l1_error, rep.balance_residual,
                         rep.e_left, rep.e_right, rep.ratio_forward, rep.ratio_reverse))
            s = rep.summary()
            s["balance_residual_2N"] = fine
            s["balance_nonincreasing"] = bool(fine <= rep.balance_residual) if not math.isnan(fine) else None
            reports.append(s)
            bal_all.append(rep.balance_residual)
            if not math.isnan(fine):
                bal_ok &= fine <= rep.balance_residual
            ergodic &= rep.ergodic
            x = rep.rho_eps.grid.centers
            out.columns(f"rho_{k}_eps{ei}.dat", x.tolist(), rep.rho_eps.values.tolist())
        eps, rep, _ = seq[-1]
        l1_final.append(rep.l1_error)
        m[f"l1_final_{k}"] = rep.l1_error
        m[f"orientation_{k}"] = rep.orientation
        m[f"ratio_forward_{k}"] = rep.ratio_forward
        m[f"ratio_reverse_{k}"] = rep.ratio_reverse
        m[f"alpha_pred_{k}"] = rep.alpha_pred
        m[f"alpha_mass_{k}"] = rep.alpha_mass
        if not rep.degenerate:
            fam = build_family(cfg, c)
            a0 = c / (1.0 + c)
            tl, tr = a0 / fam.b, (1.0 - a0) / (1.0 - fam.b)
            pe = max(abs(rep.plateau_left - tl) / tl, abs(rep.plateau_right - tr) / tr)
            m[f"plateau_rel_error_{k}"] = pe
            plateau_err.append(pe)
            flat.append(rep.flatness)
            matched = {"forward": rep.ratio_forward, "reverse": rep.ratio_reverse}.get(rep.orientation)
            if rep.orientation == "both":
                matched = rep.ratio_reverse
            a3 = matched / (1.0 + matched) if matched is not None and math.isfinite(matched) else math.nan
            trio = [rep.alpha_pred, rep.alpha_mass, a3]
            sp = max(abs(a - b) / max(abs(a), abs(b)) for i, a in enumerate(trio) for b in trio[i + 1:])
            m[f"alpha_spread_{k}"] = sp
            spread.append(sp)
        res.findings[f"orientation_{k}"] = rep.orientation
    m.update(l1_decreasing=l1_ok, l1_final_max=max(l1_final), balance_max=max(bal_all), balance_nonincreasing=bal_ok,
             ergodic=ergodic)
    if plateau_err:
        m.update(plateau_rel_error_max=max(plateau_err), flatness_max=max(flat), alpha_spread_max=max(spread))
    out.csv("metastable_table.csv", META_HEADER, rows)
    out.json("metastable_report.json", reports)
    if cfg.mc is not None:
        c = cfg.mc.c if cfg.mc.c is not None else cfg.map.c
        eps = cfg.mc.eps[0] if cfg.mc.eps else None
        known = next((r.alpha_mass for (cc, ee), (r, _) in zip(cells, results) if cc == c and ee == eps), None)
        _stationary_part(cfg, out, res, jobs, known)
    return res


# ---------------------------------------------------------------- operator dump

def run_dump_operator(cfg: ExperimentConfig, out: OutputWriter, jobs: int = 1) -> RunResult:
    eps = cfg.noise.epsilon
    N = cfg.grid.N
    allow = cfg.grid.allow_unaligned
    if cfg.map.family == "metastable" and eps is not None:
        fam = build_family(cfg)
        noise = noise_builder(cfg)(eps)
        op = build_averaged_closed(fam, build_grid(N, fam.refinement(noise)), noise, allow)
    else:
        tmap = build_map(cfg)
        if cfg.holes is not None and eps is not None:
            holes = build_holes(cfg)
            noise = noise_builder(cfg)(eps)
            grid = build_grid(N, list(tmap.breakpoints) + ([] if allow else holes.endpoints(noise)))
            op = build_open(tmap, grid, noise, holes, allow)
        else:
            op = build_closed(tmap, build_grid(N, tmap.breakpoints), allow)
    dump_binary(op, out.path("operator.bin"))
    export_mtx(op, out.path("operator.mtx"))
    sums = op.row_sums()
    info = {"kind": op.kind, "n": op.grid.n, "nnz": int(op.matrix.nnz), "row_sum_min": float(sums.min()),
            "row_sum_max": float(sums.max())}
    out.json("operator.json", info)
    res = RunResult(metrics=dict(info))
    return res


RUNNERS = {"escape": run_escape, "qk": run_qk, "metastable": run_metastable, "mc": run_mc,
           "dump-operator": run_dump_operator}


# ---------------------------------------------------------------- manifest

def _timestamp() -> str:
    sde = os.environ.get("SOURCE_DATE_EPOCH")
    t = _dt.datetime.fromtimestamp(int(sde), _dt.timezone.utc) if sde else _dt.datetime.now(_dt.timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def _sha(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_sha256: str
    version: str
    started: str
    finished: str
    experiment: str
    kind: str
    seed: Optional[int]
    files: list
    assertions: list
    findings: dict
    all_passed: bool

    def to_json(self) -> str:
        return json.dumps(_clean(asdict(self)), indent=2, sort_keys=True) + "\n"


def run_experiment(cfg: ExperimentConfig, kind: Optional[str] = None, jobs: int = 1) -> tuple[RunManifest, RunResult]:
    """Run one experiment, write every output and the manifest, evaluate assertions."""
    kind = kind or cfg.kind
    if kind not in RUNNERS:
        raise ValueError(f"unknown experiment kind {kind!r}")
    out = OutputWriter(cfg.output.directory, cfg.output.formats)
    old = out.dir / "manifest.json"
    if old.exists():
        # clear what the previous run in this directory emitted
        try:
            for f in json.loads(old.read_text()).get("files", []):
                p = out.dir / f["path"]
                if p.is_file() and p.resolve().parent == out.dir.resolve():
                    p.unlink()
        except (ValueError, KeyError, TypeError):
            pass
    started = _timestamp()
    # the copy is location independent so identical runs give identical bytes
    out.text("config.ini", cfg.with_output(".").serialize())
    res = RUNNERS[kind](cfg, out, jobs)
    checks = []
    for a in cfg.acceptance:
        ok, got = a.check(res.metrics)
        checks.append({"metric": a.metric, "condition": a.text(), "value": got, "passed": ok})
    files = []
    for p in sorted(out.dir.iterdir()):
        if p.is_file() and p.name != "manifest.json":
            files.append({"path": p.name, "sha256": _sha(p), "bytes": p.stat().st_size})
    files.append({"path": "manifest.json", "sha256": None, "bytes": None})
    man = RunManifest(cfg.sha256(), __version__, started, _timestamp(), cfg.name, kind,
                      cfg.mc.seed if cfg.mc is not None else None, files, checks, res.findings,
                      all(c["passed"] for c in checks))
    (out.dir / "manifest.json").write_text(man.to_json())
    return man, res
