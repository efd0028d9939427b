"""Configuration-driven experiment runner.

One JSON config file (versioned schema, unknown keys rejected) describes
the group, grid, engine, norm parameters, scale grid, function family
and characterization set.  Subcommands run slices of the experiment and
emit ``report.csv``, ``summary.json`` and per-pair SVG ratio plots.

Exit codes: 0 success, 1 failed hard assertion (named), 2 config error,
3 resource limit exceeded.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .besov import INF, BesovParams, TGrid, lp_norm
from .groups import (
    Grid,
    GridFunction,
    GroupModel,
    euclid_line,
    euclid_plane,
    heisenberg,
    torus,
    default_grid,
)
from .heat import (
    HeatOperator,
    heat_apply,
    make_heat,
    mass_defect,
    semigroup_residual,
)
from .paraproduct import (
    calderon_decompose,
    calderon_scalar_identity,
    leibniz_ratio,
    paraproduct_decompose,
)
from .svgplot import loglog_scatter
from .verify import (
    FamilySpec,
    build_family,
    embedding_check,
    equivalence_report,
    interval_drift,
    validate_characterizations,
)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class AssertionFailure(RuntimeError):
    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        super().__init__(f"{invariant}: {detail}" if detail else invariant)


class ResourceLimitError(RuntimeError):
    pass


_GROUPS = {
    "euclid_line": euclid_line,
    "euclid_plane": euclid_plane,
    "torus": torus,
    "heisenberg1": heisenberg,
}

_KNOWN_KEYS = {
    "": {
        "version", "seed", "output_dir", "group", "grid", "engine", "tgrid",
        "params", "family", "characterizations", "refine", "tolerances",
        "max_seconds", "heat_check", "algebra",
    },
    "group": {"kind", "dim"},
    "grid": {"extents", "counts", "guard_fraction"},
    "engine": {"kind", "n_walkers", "n_steps", "seed", "mode_cutoff", "cache_capacity"},
    "tgrid": {"j_min", "per_octave", "include_endpoint"},
    "params": {"alpha", "p", "q", "m", "t0"},
    "family": {"kind", "count", "seed", "degree"},
    "tolerances": {
        "ratio_drift", "residual", "semigroup", "mass", "contraction", "positivity",
    },
    "heat_check": {"ts", "mc_points", "mc_walkers", "mc_halfwidth"},
    "algebra": {"n_pairs", "m", "calderon_m"},
}


def _check_keys(section: str, obj: dict):
    if not isinstance(obj, dict):
        raise ConfigError(f"section {section or 'top level'} must be an object")
    unknown = set(obj) - _KNOWN_KEYS[section]
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} in section {section or 'top level'}"
        )


def _exponent(v):
    if v == "inf":
        return INF
    if isinstance(v, (int, float)) and v >= 1:
        return float(v)
    raise ConfigError(f"exponent must be >= 1 or 'inf', got {v!r}")


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    group: GroupModel
    grid: Grid
    engine_kind: str
    engine_params: dict
    tgrid: TGrid
    params_list: list[BesovParams]
    family_spec: FamilySpec
    characterizations: list[str]
    refine: bool
    tolerances: dict
    max_seconds: float
    heat_check: dict
    algebra: dict
    group_raw: dict
    grid_raw: dict | None

    def make_group_grid(self, scale: int = 1):
        group = self.group
        if self.grid_raw is None:
            return group, default_grid(group, scale)
        grid = Grid(
            tuple(tuple(e) for e in self.grid_raw["extents"]),
            tuple(int(n) * scale for n in self.grid_raw["counts"]),
            group.periodic,
            float(self.grid_raw.get("guard_fraction", 0.1)),
        )
        return group, grid

    def make_heat(self, grid: Grid) -> HeatOperator:
        return make_heat(self.group, grid, self.engine_kind, **self.engine_params)


_DEFAULT_TOLERANCES = {
    "ratio_drift": 0.2,
    "residual": 0.01,
    "semigroup": None,  # per engine below
    "mass": 1e-6,
    "contraction": 1e-6,
    "positivity": 1e-3,
}


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    return parse_config(raw)


def parse_config(raw: dict) -> ExperimentConfig:
    _check_keys("", raw)
    if raw.get("version") != SCHEMA_VERSION:
        raise ConfigError(f"config version must be {SCHEMA_VERSION}")

    group_raw = raw.get("group")
    if not group_raw:
        raise ConfigError("config needs a group section")
    _check_keys("group", group_raw)
    kind = group_raw.get("kind")
    if kind not in _GROUPS:
        raise ConfigError(f"unknown group kind {kind!r}; pick from {sorted(_GROUPS)}")
    group = _GROUPS[kind](group_raw["dim"]) if kind == "torus" and "dim" in group_raw \
        else _GROUPS[kind]()

    grid_raw = raw.get("grid")
    if grid_raw is not None:
        _check_keys("grid", grid_raw)
        if "extents" not in grid_raw or "counts" not in grid_raw:
            raise ConfigError("grid section needs extents and counts")
        if len(grid_raw["extents"]) != group.dim or len(grid_raw["counts"]) != group.dim:
            raise ConfigError("grid extents/counts must match the group dimension")

    engine_raw = dict(raw.get("engine") or {"kind": "auto"})
    _check_keys("engine", engine_raw)
    engine_kind = engine_raw.pop("kind", "auto")

    tg_raw = dict(raw.get("tgrid") or {})
    _check_keys("tgrid", tg_raw)
    try:
        tgrid = TGrid(**tg_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad tgrid: {exc}")

    params_raw = raw.get("params")
    if not params_raw:
        raise ConfigError("config needs a nonempty params list")
    params_list = []
    for item in params_raw:
        _check_keys("params", item)
        kw = dict(item)
        if "p" in kw:
            kw["p"] = _exponent(kw["p"])
        if "q" in kw:
            kw["q"] = _exponent(kw["q"])
        try:
            params_list.append(BesovParams(**kw))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad params entry {item}: {exc}")

    fam_raw = raw.get("family")
    if not fam_raw:
        raise ConfigError("config needs a family section")
    _check_keys("family", fam_raw)
    try:
        family = FamilySpec(**fam_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad family: {exc}")

    chars = raw.get("characterizations")
    if not chars:
        raise ConfigError("characterization set must be nonempty")

    tol = dict(_DEFAULT_TOLERANCES)
    tol_raw = raw.get("tolerances") or {}
    _check_keys("tolerances", tol_raw)
    tol.update(tol_raw)

    hc = dict(raw.get("heat_check") or {})
    _check_keys("heat_check", hc)
    hc.setdefault("ts", [1.0 / 64.0, 1.0 / 16.0])
    hc.setdefault("mc_points", 0)
    hc.setdefault("mc_walkers", 30000)
    hc.setdefault("mc_halfwidth", 0.12)

    alg = dict(raw.get("algebra") or {})
    _check_keys("algebra", alg)
    alg.setdefault("n_pairs", 5)
    alg.setdefault("m", 1)
    alg.setdefault("calderon_m", [1, 2])

    return ExperimentConfig(
        seed=int(raw.get("seed", 42)),
        output_dir=str(raw.get("output_dir", "out")),
        group=group,
        grid=None if grid_raw is None else Grid(
            tuple(tuple(e) for e in grid_raw["extents"]),
            tuple(int(n) for n in grid_raw["counts"]),
            group.periodic,
            float(grid_raw.get("guard_fraction", 0.1)),
        ),
        engine_kind=engine_kind,
        engine_params=engine_raw,
        tgrid=tgrid,
        params_list=params_list,
        family_spec=family,
        characterizations=list(chars),
        refine=bool(raw.get("refine", False)),
        tolerances=tol,
        max_seconds=float(raw.get("max_seconds", 0.0)),
        heat_check=hc,
        algebra=alg,
        group_raw=group_raw,
        grid_raw=grid_raw,
    )


# ---------------------------------------------------------------------------
# runners


class _Clock:
    def __init__(self, budget: float):
        self.start = time.monotonic()
        self.budget = budget

    def check(self, stage: str):
        if self.budget > 0 and time.monotonic() - self.start > self.budget:
            raise ResourceLimitError(f"time budget exceeded during {stage}")


def _fmt_exponent(v: float) -> str:
    return "inf" if v == INF else repr(v)


def run_norms(cfg: ExperimentConfig, clock: _Clock):
    """Norm values for every (function, characterization, params)."""
    group, grid = cfg.make_group_grid()
    H = cfg.make_heat(grid)
    family = build_family(cfg.family_spec, group, grid)
    rows = []
    reports = {}
    for params in cfg.params_list:
        validate_characterizations(cfg.characterizations, group, params)
        rep = equivalence_report(H, family, params, cfg.characterizations, cfg.tgrid)
        reports[_params_key(params)] = rep
        for fid in sorted(rep.values):
            for char in cfg.characterizations:
                rows.append(
                    (
                        fid,
                        char,
                        params.alpha,
                        _fmt_exponent(params.p),
                        _fmt_exponent(params.q),
                        params.m,
                        rep.values[fid][char],
                    )
                )
        clock.check("norm computation")
    return rows, reports


def _params_key(params: BesovParams) -> str:
    return (
        f"alpha={params.alpha:g},p={_fmt_exponent(params.p)},"
        f"q={_fmt_exponent(params.q)},m={params.m}"
    )


def run_equivalence(cfg: ExperimentConfig, clock: _Clock):
    rows, reports = run_norms(cfg, clock)
    summary = {"pairs": {}, "degenerate": {}, "embedding": {}, "refinement": {}}
    hard_failures = []
    for key, rep in reports.items():
        summary["degenerate"][key] = rep.degenerate
        summary["pairs"][key] = {
            f"{a}/{b}": {
                "min": st.ratio_min,
                "max": st.ratio_max,
                "geomean": st.ratio_geomean,
                "n": st.n,
            }
            for (a, b), st in rep.pairs.items()
        }
    group, grid = cfg.make_group_grid()
    H = cfg.make_heat(grid)
    family = build_family(cfg.family_spec, group, grid)
    emb_params = cfg.params_list[0]
    emb = embedding_check(H, family, emb_params, [1.0, 1.5, 2.0, 4.0, INF], cfg.tgrid)
    summary["embedding"] = {
        "q_list": ["inf" if q == INF else q for q in emb.q_list],
        "violations": emb.violations,
    }
    if emb.violations:
        hard_failures.append(("embedding_q_monotonicity", f"{len(emb.violations)} violations"))
    clock.check("embedding check")

    if cfg.refine:
        drift_tol = cfg.tolerances["ratio_drift"]
        for direction, (gscale, tscale) in (("grid", (2, 1)), ("tgrid", (1, 2))):
            _, grid_r = cfg.make_group_grid(scale=gscale)
            H_r = cfg.make_heat(grid_r)
            fam_r = build_family(cfg.family_spec, group, grid_r)
            tg_r = cfg.tgrid.refined() if tscale == 2 else cfg.tgrid
            for params in cfg.params_list:
                rep_r = equivalence_report(
                    H_r, fam_r, params, cfg.characterizations, tg_r
                )
                key = _params_key(params)
                base_rep = reports[key]
                drifts = {}
                for pair, st in base_rep.pairs.items():
                    st_r = rep_r.pairs.get(pair)
                    if st_r is None:
                        continue
                    d = interval_drift(
                        (st.ratio_min, st.ratio_max), (st_r.ratio_min, st_r.ratio_max)
                    )
                    drifts[f"{pair[0]}/{pair[1]}"] = d
                    if not math.isfinite(d) or d > drift_tol:
                        hard_failures.append(
                            (
                                "ratio_interval_stability",
                                f"{key} {pair[0]}/{pair[1]} {direction} drift {d:.3f}",
                            )
                        )
                summary["refinement"].setdefault(key, {})[direction] = drifts
                clock.check("refinement study")
    return rows, reports, summary, hard_failures


def run_algebra(cfg: ExperimentConfig, clock: _Clock):
    group, grid = cfg.make_group_grid()
    H = cfg.make_heat(grid)
    family = build_family(cfg.family_spec, group, grid)
    fids = sorted(family)
    tol = cfg.tolerances["residual"]
    summary = {"calderon": {}, "scalar_identity": {}, "paraproduct": {}, "leibniz": {}}
    hard = []
    for m in cfg.algebra["calderon_m"]:
        resids = {
            fid: calderon_decompose(H, family[fid], m, cfg.tgrid).residual
            for fid in fids
        }
        summary["calderon"][f"m={m}"] = resids
        worst = max(resids.values())
        if worst > tol:
            hard.append(("calderon_residual", f"m={m} worst {worst:.3e}"))
    for u in (0.5, 1.0, 2.0):
        for m in (1, 2, 3):
            lhs, rhs = calderon_scalar_identity(u, m)
            summary["scalar_identity"][f"u={u},m={m}"] = abs(lhs - rhs)
            if abs(lhs - rhs) > 1e-6:
                hard.append(("calderon_scalar_identity", f"u={u} m={m}"))
    clock.check("reproducing formula")

    rng = np.random.default_rng(cfg.seed)
    n_pairs = int(cfg.algebra["n_pairs"])
    m = int(cfg.algebra["m"])
    params = cfg.params_list[0]
    ratios = []
    for k in range(n_pairs):
        fa, fb = rng.choice(fids, size=2, replace=True)
        rep = paraproduct_decompose(H, family[fa], family[fb], m, cfg.tgrid)
        res = rep.validated.residual
        summary["paraproduct"][f"pair_{k}:{fa}*{fb}"] = {
            "variant": rep.validating_variant,
            "residual": res,
        }
        if res > tol:
            hard.append(("paraproduct_residual", f"{fa}*{fb} residual {res:.3e}"))
        ratio = leibniz_ratio(H, family[fa], family[fb], params, tgrid=cfg.tgrid)
        ratios.append(ratio)
        if not math.isfinite(ratio):
            hard.append(("leibniz_finite", f"{fa}*{fb}"))
        clock.check("paraproduct pairs")
    summary["leibniz"] = {"max_ratio": max(ratios) if ratios else 0.0, "ratios": ratios}
    return summary, hard


def run_heat_check(cfg: ExperimentConfig, clock: _Clock):
    group, grid = cfg.make_group_grid()
    H = cfg.make_heat(grid)
    family = build_family(cfg.family_spec, group, grid)
    tol_semi = cfg.tolerances["semigroup"]
    if tol_semi is None:
        tol_semi = 1e-6 if H.name == "spectral" else 1e-3
    summary = {"semigroup": {}, "mass": {}, "contraction": {}, "positivity": {}}
    hard = []
    ts = cfg.heat_check["ts"]
    for fid, f in sorted(family.items()):
        res = max(semigroup_residual(H, f, t, t) for t in ts)
        summary["semigroup"][fid] = res
        if res > tol_semi:
            hard.append(("semigroup_law", f"{fid} residual {res:.2e}"))
        md = max(mass_defect(H, f, t) for t in ts)
        summary["mass"][fid] = md
        if md > cfg.tolerances["mass"]:
            hard.append(("mass_conservation", f"{fid} defect {md:.2e}"))
        worst_contraction = 0.0
        for p in (1.0, 2.0, INF):
            n0 = lp_norm(f, p, use_guard=False)
            if n0 == 0:
                continue
            for t in ts:
                n1 = lp_norm(heat_apply(H, f, t), p, use_guard=False)
                worst_contraction = max(worst_contraction, n1 / n0 - 1.0)
        summary["contraction"][fid] = worst_contraction
        if worst_contraction > cfg.tolerances["contraction"]:
            hard.append(("lp_contraction", f"{fid} excess {worst_contraction:.2e}"))
        if np.all(f.values >= 0):
            low = min(float(heat_apply(H, f, t).values.min()) for t in ts)
            summary["positivity"][fid] = low
            if low < -cfg.tolerances["positivity"] * float(f.values.max()):
                hard.append(("positivity", f"{fid} min {low:.2e}"))
        clock.check("heat checks")
    if cfg.heat_check["mc_points"] > 0:
        from .heat import ClosedFormHeat, MonteCarloHeat, kernel_bin_average

        mc = MonteCarloHeat(
            group, grid, n_walkers=int(cfg.heat_check["mc_walkers"]), seed=cfg.seed
        )
        kernel_engine = (
            H if H.name in ("spectral", "closed_form") else ClosedFormHeat(group, grid)
        )
        rng = np.random.default_rng(cfg.seed)
        n_pts = int(cfg.heat_check["mc_points"])
        t = 0.25
        if group.kind == "heisenberg1":
            pts = rng.uniform(-0.9, 0.9, size=(n_pts, 3)) * np.array([1.0, 1.0, 0.5])
        else:
            pts = rng.uniform(-0.9, 0.9, size=(n_pts, group.dim))
        halfwidth = float(cfg.heat_check["mc_halfwidth"])
        est, se = mc.kernel_estimate(t, pts, halfwidth=halfwidth)
        exact = kernel_bin_average(kernel_engine, t, pts, halfwidth)
        zscores = np.abs(est - exact) / np.maximum(se, 1e-300)
        summary["mc_kernel"] = {
            "t": t,
            "max_z": float(zscores.max()),
            "n_points": n_pts,
        }
        if zscores.max() > 3.0:
            hard.append(("mc_kernel_agreement", f"max z {zscores.max():.2f}"))
    return summary, hard


# ---------------------------------------------------------------------------
# outputs


def emit_csv(rows, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("function,characterization,alpha,p,q,m,value\n")
        for fid, char, alpha, p, q, m, value in rows:
            fh.write(f"{fid},{char},{alpha!r},{p},{q},{m},{value!r}\n")


def emit_summary(summary: dict, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def emit_pair_plots(reports, outdir: str):
    written = []
    for key, rep in reports.items():
        for (a, b), st in rep.pairs.items():
            pts = [
                (rep.values[fid][a], rep.values[fid][b])
                for fid in sorted(rep.values)
                if fid not in rep.degenerate
            ]
            safe_key = key.replace("=", "").replace(",", "_").replace(".", "p")
            name = f"ratio_{a}_vs_{b}_{safe_key}.svg"
            path = os.path.join(outdir, name)
            loglog_scatter(
                pts,
                path,
                title=f"{a} vs {b} ({key})",
                xlabel=f"{a} norm",
                ylabel=f"{b} norm",
                guides=(1.0 / st.ratio_min if st.ratio_min > 0 else 1.0,
                        1.0 / st.ratio_max if st.ratio_max > 0 else 1.0),
            )
            written.append(name)
    return written


# ---------------------------------------------------------------------------
# entry point


def run_experiment(mode: str, config_path: str, output_dir: str | None = None) -> int:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if output_dir:
        cfg.output_dir = output_dir
    os.makedirs(cfg.output_dir, exist_ok=True)
    clock = _Clock(cfg.max_seconds)
    summary: dict = {
        "mode": mode,
        "seed": cfg.seed,
        "group": cfg.group.kind,
        "engine": cfg.engine_kind,
        "schema_version": SCHEMA_VERSION,
    }
    rows = []
    reports = {}
    failures: list[tuple[str, str]] = []
    try:
        if mode == "norm":
            rows, reports = run_norms(cfg, clock)
        elif mode == "equivalence":
            rows, reports, eq_summary, failures = run_equivalence(cfg, clock)
            summary["equivalence"] = eq_summary
        elif mode == "algebra":
            alg_summary, failures = run_algebra(cfg, clock)
            summary["algebra"] = alg_summary
        elif mode == "heat-check":
            hc_summary, failures = run_heat_check(cfg, clock)
            summary["heat_check"] = hc_summary
        elif mode == "report":
            rows, reports, eq_summary, failures = run_equivalence(cfg, clock)
            summary["equivalence"] = eq_summary
            alg_summary, f2 = run_algebra(cfg, clock)
            summary["algebra"] = alg_summary
            hc_summary, f3 = run_heat_check(cfg, clock)
            summary["heat_check"] = hc_summary
            failures = failures + f2 + f3
        else:
            print(f"unknown mode {mode!r}", file=sys.stderr)
            return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ResourceLimitError as exc:
        summary["incomplete"] = str(exc)
        emit_summary(summary, os.path.join(cfg.output_dir, "summary.json"))
        print(f"resource limit: {exc}", file=sys.stderr)
        return 3

    emit_csv(rows, os.path.join(cfg.output_dir, "report.csv"))
    if reports:
        summary["plots"] = emit_pair_plots(reports, cfg.output_dir)
    summary["failures"] = [f"{name}: {detail}" for name, detail in failures]
    summary["passed"] = not failures
    emit_summary(summary, os.path.join(cfg.output_dir, "summary.json"))
    if failures:
        for name, detail in failures:
            print(f"FAILED invariant {name}: {detail}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="heatbesov",
        description="Heat-semigroup Besov norm experiments on unimodular groups",
    )
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode, help_text in (
        ("norm", "compute norm values for the configured family"),
        ("equivalence", "cross-characterization ratio report"),
        ("algebra", "product decomposition and Leibniz checks"),
        ("heat-check", "semigroup, mass, contraction and kernel checks"),
        ("report", "run everything"),
    ):
        p = sub.add_parser(mode, help=help_text)
        p.add_argument("config", help="path to the JSON experiment config")
        p.add_argument("--output-dir", default=None, help="override output directory")
    args = parser.parse_args(argv)
    return run_experiment(args.mode, args.config, args.output_dir)


if __name__ == "__main__":
    sys.exit(main())
