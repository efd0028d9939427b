"""Experiment harness: frozen function families, cross-characterization
ratio reports, an independent Fourier oracle, and refinement studies."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .besov import (
    INF,
    BesovParams,
    NormBreakdown,
    TGrid,
    besov_breakdown,
    difference_functional,
    dyadic_norm,
    lp_norm,
    lq_norm,
    recursive_norm,
    slice_l1_norm,
    xsup_norm,
)
from .groups import (
    EUCLID_LINE,
    EUCLID_PLANE,
    HEISENBERG,
    TORUS,
    Grid,
    GridFunction,
    GroupModel,
    VolumeTable,
    default_grid,
    euclid_line,
    grid_distances,
    heisenberg,
    torus,
)
from .heat import HeatOperator, make_heat

CHARACTERIZATIONS = ("heat", "dyadic", "slice_l1", "xsup", "difference", "fourier")


class CharacterizationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# deterministic function families


@dataclass(frozen=True)
class FamilySpec:
    kind: str  # gaussian | trig | bump3d
    count: int = 10
    seed: int = 42
    degree: int = 4  # trig only

    def __post_init__(self):
        if self.kind not in ("gaussian", "trig", "bump3d"):
            raise ValueError(f"unknown family kind {self.kind!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")


def build_family(spec: FamilySpec, group: GroupModel, grid: Grid) -> dict[str, GridFunction]:
    """Smooth, decaying (where needed) members, deterministic in the seed."""
    rng = np.random.default_rng(spec.seed)
    out: dict[str, GridFunction] = {}
    for i in range(spec.count):
        fid = f"{spec.kind}_{i:02d}"
        if spec.kind == "gaussian":
            center = rng.uniform(-1.5, 1.5, size=group.dim)
            width = rng.uniform(0.6, 1.4, size=group.dim)
            amp = rng.uniform(0.5, 2.0)

            def fn(*coords, c=center, s=width, a=amp):
                expo = sum(((x - ci) / si) ** 2 for x, ci, si in zip(coords, c, s))
                return a * np.exp(-0.5 * expo)

        elif spec.kind == "trig":
            deg = spec.degree
            a_coef = rng.normal(0.0, 1.0, size=(deg + 1, group.dim))
            b_coef = rng.normal(0.0, 1.0, size=(deg + 1, group.dim))
            a_coef /= (1.0 + np.arange(deg + 1))[:, None]
            b_coef /= (1.0 + np.arange(deg + 1))[:, None]
            b_coef[0] = 0.0

            def fn(*coords, A=a_coef, B=b_coef, deg=deg):
                total = np.full(coords[0].shape, float(A[0].sum()))
                for k in range(1, deg + 1):
                    for ax, x in enumerate(coords):
                        total = total + A[k, ax] * np.cos(k * x) + B[k, ax] * np.sin(k * x)
                return total

        else:  # bump3d
            center = rng.uniform(-0.3, 0.3, size=3)
            width = rng.uniform(0.4, 0.6, size=3)
            amp = rng.uniform(0.5, 1.5)

            def fn(x, y, z, c=center, s=width, a=amp):
                return a * np.exp(
                    -0.5 * (((x - c[0]) / s[0]) ** 2 + ((y - c[1]) / s[1]) ** 2
                            + ((z - c[2]) / s[2]) ** 2)
                )

        out[fid] = GridFunction.from_callable(group, grid, fn)
    return out


@dataclass
class SuiteMember:
    function_id: str
    group: GroupModel
    grid: Grid
    f: GridFunction


def standard_suite(seed: int = 42, scale: int = 1):
    """Frozen 30-function suite: 10 line Gaussians, 10 torus trig
    polynomials, 10 Heisenberg bump products."""
    blocks = []
    g1 = euclid_line()
    grid1 = default_grid(g1, scale)
    blocks.append((g1, grid1, FamilySpec("gaussian", 10, seed)))
    g2 = torus(1)
    grid2 = default_grid(g2, scale)
    blocks.append((g2, grid2, FamilySpec("trig", 10, seed + 1)))
    g3 = heisenberg()
    grid3 = default_grid(g3, scale)
    blocks.append((g3, grid3, FamilySpec("bump3d", 10, seed + 2)))
    members = []
    for group, grid, spec in blocks:
        for fid, f in build_family(spec, group, grid).items():
            members.append(SuiteMember(f"{group.kind}:{fid}", group, grid, f))
    return members


# ---------------------------------------------------------------------------
# independent Fourier oracle on the torus (p = q = 2)


def fourier_oracle_norm(f: GridFunction, params: BesovParams) -> float:
    """Sobolev-type multiplier norm ((2 pi)^d sum (1+|k|^2)^alpha |c_k|^2)^(1/2)
    from discrete Fourier coefficients; only meaningful on the torus with
    p = q = 2, where it is an equivalent norm."""
    if f.group.kind != TORUS:
        raise CharacterizationError("the Fourier oracle needs a torus model")
    if not (f.grid.periodic and all(f.grid.periodic)):
        raise CharacterizationError("the Fourier oracle needs a periodic grid")
    if f.group.period != 2.0 * math.pi:
        raise CharacterizationError("the Fourier oracle assumes period 2 pi")
    if not (params.p == 2.0 and params.q == 2.0):
        raise CharacterizationError("the Fourier oracle is exact only for p = q = 2")
    coeffs = np.fft.fftn(f.values) / f.values.size
    k2 = np.zeros(f.values.shape)
    for ax, n in enumerate(f.values.shape):
        k = np.fft.fftfreq(n, d=1.0 / n)
        sh = [1] * f.values.ndim
        sh[ax] = n
        k2 = k2 + k.reshape(sh) ** 2
    weight = (1.0 + k2) ** params.alpha
    total = float(np.sum(weight * np.abs(coeffs) ** 2))
    return math.sqrt((2.0 * math.pi) ** f.group.dim * total)


# ---------------------------------------------------------------------------
# characterization dispatch


def available_characterizations(group: GroupModel, params: BesovParams) -> list[str]:
    chars = ["heat", "dyadic"]
    if params.alpha > 0:
        chars += ["slice_l1", "xsup"]
    if 0 < params.alpha < 1:
        chars.append("difference")
    if group.kind == TORUS and params.p == 2.0 and params.q == 2.0:
        chars.append("fourier")
    return chars


def characterization_value(
    char: str,
    H: HeatOperator,
    f: GridFunction,
    params: BesovParams,
    tgrid: TGrid,
    volume_table: VolumeTable | None = None,
) -> float:
    if char == "heat":
        return besov_breakdown(H, f, params, tgrid).total
    if char == "dyadic":
        return dyadic_norm(H, f, params, tgrid).total
    if char == "slice_l1":
        return slice_l1_norm(H, f, params, tgrid).total
    if char == "xsup":
        return xsup_norm(H, f, params, tgrid=tgrid).total
    if char == "difference":
        return difference_functional(f, params, volume_table) + lp_norm(f, params.p)
    if char == "fourier":
        return fourier_oracle_norm(f, params)
    if char == "recursive":
        return recursive_norm(H, f, params, tgrid)
    raise CharacterizationError(f"unknown characterization {char!r}")


def validate_characterizations(chars, group: GroupModel, params: BesovParams):
    ok = set(available_characterizations(group, params)) | {"recursive"}
    for c in chars:
        if c not in CHARACTERIZATIONS + ("recursive",):
            raise CharacterizationError(f"unknown characterization {c!r}")
        if c not in ok:
            raise CharacterizationError(
                f"characterization {c!r} is not valid for group {group.kind} "
                f"with alpha={params.alpha}, p={params.p}, q={params.q}"
            )


def _thread_count() -> int:
    raw = os.environ.get("HEATBESOV_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# equivalence reports


@dataclass
class PairStats:
    ratio_min: float
    ratio_max: float
    ratio_geomean: float
    n: int


@dataclass
class EquivalenceReport:
    params: BesovParams
    characterizations: list[str]
    values: dict[str, dict[str, float]]  # function id -> char -> value
    pairs: dict[tuple[str, str], PairStats]
    degenerate: list[str]

    def ratio_interval(self, a: str, b: str) -> tuple[float, float]:
        st = self.pairs[(a, b)]
        return st.ratio_min, st.ratio_max


def equivalence_report(
    H: HeatOperator,
    family: dict[str, GridFunction],
    params: BesovParams,
    chars,
    tgrid: TGrid | None = None,
) -> EquivalenceReport:
    """Norms for every (function, characterization) plus pairwise ratio
    intervals.  Zero functions are flagged degenerate and skipped in the
    ratios; any non-finite norm aborts with a diagnostic."""
    tgrid = tgrid or TGrid()
    chars = list(chars)
    validate_characterizations(chars, H.group, params)
    vt = None
    if "difference" in chars:
        vt = VolumeTable(grid_distances(H.group, H.grid), H.grid.cell_measure,
                         min(H.grid.steps))

    items = sorted(family.items())

    def one(item):
        fid, f = item
        return fid, {
            c: characterization_value(c, H, f, params, tgrid, vt) for c in chars
        }

    workers = _thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, items))
    else:
        rows = [one(it) for it in items]

    values = dict(rows)
    degenerate = []
    for fid, row in values.items():
        for c, v in row.items():
            if not math.isfinite(v):
                raise CharacterizationError(
                    f"non-finite value for function {fid!r}, characterization {c!r}"
                )
        if all(v == 0.0 for v in row.values()):
            degenerate.append(fid)
    pairs = {}
    for i, a in enumerate(chars):
        for b in chars[i + 1 :]:
            ratios = [
                values[fid][a] / values[fid][b]
                for fid in values
                if fid not in degenerate and values[fid][b] > 0
            ]
            if not ratios:
                continue
            arr = np.asarray(ratios)
            pairs[(a, b)] = PairStats(
                ratio_min=float(arr.min()),
                ratio_max=float(arr.max()),
                ratio_geomean=float(np.exp(np.mean(np.log(arr)))),
                n=arr.size,
            )
    return EquivalenceReport(
        params=params,
        characterizations=chars,
        values=values,
        pairs=pairs,
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# exact embedding monotonicity in q


@dataclass
class EmbeddingReport:
    q_list: list[float]
    values: dict[str, list[float]]  # function id -> norm per q
    violations: list[tuple[str, float, float]]


def embedding_check(
    H: HeatOperator,
    family: dict[str, GridFunction],
    params: BesovParams,
    q_list,
    tgrid: TGrid | None = None,
) -> EmbeddingReport:
    """Exact l^q monotonicity of the dyadic characterization: larger q,
    same per-scale terms, never a larger norm.  No tolerance."""
    q_list = list(q_list)
    if sorted(q_list) != q_list:
        raise ValueError("q list must be sorted ascending")
    tgrid = tgrid or TGrid()
    violations = []
    values = {}
    for fid, f in sorted(family.items()):
        bd = dyadic_norm(H, f, params, tgrid)
        norms = [lq_norm(bd.terms, q) + bd.base_term for q in q_list]
        values[fid] = norms
        for (qa, va), (qb, vb) in zip(
            zip(q_list, norms), list(zip(q_list, norms))[1:]
        ):
            if vb > va:
                violations.append((fid, qa, qb))
    return EmbeddingReport(q_list=q_list, values=values, violations=violations)


# ---------------------------------------------------------------------------
# refinement studies


@dataclass
class StabilityReport:
    base: dict[str, float]
    refined: dict[str, dict[str, float]]  # direction -> scalars
    deltas: dict[str, dict[str, float]]  # direction -> relative change
    tolerance: float
    passed: bool
    incomplete: bool = False


def refinement_stability(
    run, tolerance: float, directions=("grid", "tgrid")
) -> StabilityReport:
    """Run an experiment at base resolution and with the grid and the
    t-grid doubled independently; report relative changes per scalar.

    ``run(grid_scale, tgrid_scale)`` must return a dict of finite floats.
    """
    base = run(1, 1)
    refined = {}
    deltas = {}
    passed = True
    for direction in directions:
        gs = 2 if direction == "grid" else 1
        ts = 2 if direction == "tgrid" else 1
        got = run(gs, ts)
        refined[direction] = got
        d = {}
        for key, v0 in base.items():
            v1 = got[key]
            if v0 == 0.0 and v1 == 0.0:
                d[key] = 0.0
            else:
                scale = max(abs(v0), abs(v1))
                d[key] = abs(v1 - v0) / scale
            if d[key] > tolerance:
                passed = False
        deltas[direction] = d
    return StabilityReport(
        base=base, refined=refined, deltas=deltas, tolerance=tolerance, passed=passed
    )


def interval_drift(base: tuple[float, float], refined: tuple[float, float]) -> float:
    """Worst multiplicative endpoint movement between two ratio intervals."""
    drift = 0.0
    for v0, v1 in zip(base, refined):
        if v0 <= 0 or v1 <= 0:
            return math.inf
        r = v1 / v0
        drift = max(drift, abs(r - 1.0))
    return drift
