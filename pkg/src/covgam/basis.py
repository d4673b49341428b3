"""Design-matrix blocks and quadratic penalties for additive effects.

Supported effect kinds: intercept, linear (optionally with polynomial
powers, so a linear trend in t and t^2 is one effect), factor, cubic
regression splines with knots at quantiles, B-splines with equally spaced
knots and a difference penalty, per-level factor smooths sharing one
smoothing parameter, tensor products of two univariate smooths, and
varying-coefficient terms (a smooth multiplied by another covariate).

Continuous covariates are standardised before basis construction and the
transform is stored for prediction.  Smooth blocks absorb a sum-to-zero
constraint so no column is confounded with the intercept.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .data import Dataset
from . import mcd


class BasisError(ValueError):
    pass


class SpecError(ValueError):
    pass


class PredictionError(ValueError):
    pass


SMOOTH_KINDS = ("smooth-cr", "smooth-bs", "factor-smooth", "tensor", "varying-coefficient")
KINDS = ("intercept", "linear", "factor") + SMOOTH_KINDS


@dataclass(frozen=True)
class EffectSpec:
    kind: str
    covariates: tuple[str, ...] = ()
    k: tuple[int, ...] = ()
    penalty_order: int = 2
    by: str = ""                   # multiplier covariate (varying-coefficient)
    degree: int = 1                # polynomial degree for "linear"
    penalised: bool = True         # factor: ridge vs drop-first-level dummies
    transform: str = ""            # "" or "sqrt", applied before standardisation

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown effect kind {self.kind!r}")
        if self.transform not in ("", "sqrt"):
            raise SpecError(f"unknown covariate transform {self.transform!r}")
        for kk in self.k:
            if self.kind in SMOOTH_KINDS and kk < 3:
                raise SpecError(f"basis dimension {kk} < 3 for {self.kind}")

    def label(self) -> str:
        parts = [self.kind, *self.covariates]
        if self.transform:
            parts.append(self.transform)
        if self.by:
            parts.append(f"by={self.by}")
        if self.k:
            parts.append("k=" + "x".join(str(v) for v in self.k))
        if self.kind == "linear" and self.degree > 1:
            parts.append(f"deg={self.degree}")
        return ":".join(parts)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.covariates:
            out["covariates"] = list(self.covariates)
        if self.k:
            out["k"] = list(self.k)
        if self.kind == "smooth-bs" and self.penalty_order != 2:
            out["penalty_order"] = self.penalty_order
        if self.by:
            out["by"] = self.by
        if self.kind == "linear" and self.degree != 1:
            out["degree"] = self.degree
        if self.kind == "factor" and not self.penalised:
            out["penalised"] = False
        if self.transform:
            out["transform"] = self.transform
        return out

    @staticmethod
    def from_dict(cfg: dict) -> "EffectSpec":
        return EffectSpec(
            kind=cfg["kind"],
            covariates=tuple(cfg.get("covariates", ())),
            k=tuple(cfg.get("k", ())),
            penalty_order=cfg.get("penalty_order", 2),
            by=cfg.get("by", ""),
            degree=cfg.get("degree", 1),
            penalised=cfg.get("penalised", True),
            transform=cfg.get("transform", ""),
        )


# ---------------------------------------------------------------------------
# Raw univariate bases
# ---------------------------------------------------------------------------

def cr_knots(x: np.ndarray, k: int) -> np.ndarray:
    """Knots at quantiles; fails when the covariate cannot support k knots.

    Heavily tied covariates (e.g. irradiance, zero at night) collapse some
    quantiles; collapsed knots are replaced by midpoints of the widest gaps.
    """
    if np.unique(x).shape[0] < k:
        raise BasisError(
            f"covariate has too few distinct values for a k={k} spline basis")
    knots = np.unique(np.quantile(x, np.linspace(0.0, 1.0, k)))
    while knots.shape[0] < k:
        gaps = np.diff(knots)
        widest = int(np.argmax(gaps))
        knots = np.insert(knots, widest + 1, knots[widest] + 0.5 * gaps[widest])
    return knots


def _cr_maps(knots: np.ndarray):
    k = knots.shape[0]
    h = np.diff(knots)
    D = np.zeros((k - 2, k))
    for i in range(k - 2):
        D[i, i] = 1.0 / h[i]
        D[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
        D[i, i + 2] = 1.0 / h[i + 1]
    B = np.zeros((k - 2, k - 2))
    for i in range(k - 2):
        B[i, i] = (h[i] + h[i + 1]) / 3.0
        if i + 1 < k - 2:
            B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6.0
    F = np.linalg.solve(B, D)            # beta -> interior second derivatives
    Fm = np.vstack([np.zeros(k), F, np.zeros(k)])
    return h, Fm, D, B


def cr_design(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Natural cubic regression spline basis, parameterised by knot values.

    Linear extrapolation outside the knot range.
    """
    k = knots.shape[0]
    h, Fm, _, _ = _cr_maps(knots)
    X = np.zeros((x.shape[0], k))
    j = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, k - 2)
    inside = (x >= knots[0]) & (x <= knots[-1])
    xi, ji = x[inside], j[inside]
    hj = h[ji]
    am = (knots[ji + 1] - xi) / hj
    ap = (xi - knots[ji]) / hj
    cm = ((knots[ji + 1] - xi) ** 3 / hj - hj * (knots[ji + 1] - xi)) / 6.0
    cp = ((xi - knots[ji]) ** 3 / hj - hj * (xi - knots[ji])) / 6.0
    rows = np.zeros((xi.shape[0], k))
    rows[np.arange(xi.shape[0]), ji] += am
    rows[np.arange(xi.shape[0]), ji + 1] += ap
    rows += cm[:, None] * Fm[ji] + cp[:, None] * Fm[ji + 1]
    X[inside] = rows

    below = x < knots[0]
    if below.any():
        base = np.zeros(k)
        base[0] = 1.0
        slope = np.zeros(k)
        slope[0], slope[1] = -1.0 / h[0], 1.0 / h[0]
        slope -= (h[0] / 6.0) * Fm[1]
        X[below] = base + (x[below] - knots[0])[:, None] * slope
    above = x > knots[-1]
    if above.any():
        base = np.zeros(k)
        base[-1] = 1.0
        slope = np.zeros(k)
        slope[-1], slope[-2] = 1.0 / h[-1], -1.0 / h[-1]
        slope += (h[-1] / 6.0) * Fm[-2]
        X[above] = base + (x[above] - knots[-1])[:, None] * slope
    return X


def cr_penalty(knots: np.ndarray) -> np.ndarray:
    """Integrated squared second derivative penalty: D' B^{-1} D."""
    _, _, D, B = _cr_maps(knots)
    S = D.T @ np.linalg.solve(B, D)
    return 0.5 * (S + S.T)


def bs_knot_vector(lo: float, hi: float, k: int) -> np.ndarray:
    """Uniform cubic B-spline knots covering [lo, hi] with k basis functions."""
    if k < 4:
        raise BasisError(f"cubic B-spline basis needs k >= 4, got {k}")
    dx = (hi - lo) / (k - 3)
    return lo + dx * np.arange(-3, k + 1)


def bs_design(x: np.ndarray, knot_vector: np.ndarray) -> np.ndarray:
    lo, hi = knot_vector[3], knot_vector[-4]
    xc = np.clip(x, lo, hi)          # clamp rather than extrapolate
    return BSpline.design_matrix(xc, knot_vector, 3).toarray()


def difference_penalty(k: int, order: int) -> np.ndarray:
    Dm = np.diff(np.eye(k), n=order, axis=0)
    return Dm.T @ Dm


def matrix_rank_psd(S: np.ndarray, tol: float = 1e-9) -> int:
    if S.size == 0:
        return 0
    eig = np.linalg.eigvalsh(S)
    top = max(eig.max(), 1.0)
    return int(np.sum(eig > tol * top))


# ---------------------------------------------------------------------------
# Effect construction
# ---------------------------------------------------------------------------

@dataclass
class _Standardiser:
    mean: float
    sd: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.sd


def _standardiser(x: np.ndarray) -> _Standardiser:
    sd = float(x.std())
    return _Standardiser(float(x.mean()), sd if sd > 0 else 1.0)


def _constraint_basis(colsum: np.ndarray) -> np.ndarray:
    """Orthonormal basis Z of {b : colsum' b = 0}; columns of X @ Z sum to 0."""
    c = colsum.reshape(-1, 1)
    if np.allclose(c, 0.0):
        return np.eye(c.shape[0])
    Q, _ = np.linalg.qr(c, mode="complete")
    return Q[:, 1:]


@dataclass
class EffectBlock:
    """A built design block: columns, penalties, and a prediction recipe."""

    spec: EffectSpec
    design: np.ndarray
    penalties: list[np.ndarray]
    ranks: list[int]
    centered: bool
    _predictor: object = field(repr=False, default=None)

    @property
    def p(self) -> int:
        return self.design.shape[1]

    def predict_design(self, dataset: Dataset) -> np.ndarray:
        return self._predictor(dataset)


def _continuous_values(dataset: Dataset, name: str, transform: str = "") -> np.ndarray:
    col = dataset.column(name)
    if col.role != "continuous":
        raise BasisError(f"covariate {name!r} is not continuous")
    if transform == "sqrt":
        return np.sqrt(np.clip(col.values, 0.0, None))
    return col.values


def _smooth_parts(dataset, name, k, kind, penalty_order, transform=""):
    x = _continuous_values(dataset, name, transform)
    std = _standardiser(x)
    xs = std(x)
    if kind == "smooth-bs":
        kv = bs_knot_vector(xs.min(), xs.max(), k)
        S = difference_penalty(k, penalty_order)
        def raw(ds):
            return bs_design(std(_continuous_values(ds, name, transform)), kv)
    else:
        knots = cr_knots(xs, k)
        S = cr_penalty(knots)
        def raw(ds):
            return cr_design(std(_continuous_values(ds, name, transform)), knots)
    return raw, S


def build_effect(spec: EffectSpec, dataset: Dataset) -> EffectBlock:
    """Build the design block and penalty for one effect."""
    n = dataset.n
    kind = spec.kind

    if kind == "intercept":
        def predict(ds):
            return np.ones((ds.n, 1))
        return EffectBlock(spec, np.ones((n, 1)), [], [], False, predict)

    if kind == "linear":
        tr = spec.transform
        stds = []
        for name in spec.covariates:
            stds.append((name, _standardiser(_continuous_values(dataset, name, tr))))
        degree = spec.degree

        def predict(ds):
            cols = []
            for name, std in stds:
                x = std(_continuous_values(ds, name, tr))
                for power in range(1, degree + 1):
                    cols.append(x ** power)
            return np.column_stack(cols)
        return EffectBlock(spec, predict(dataset), [], [], False, predict)

    if kind == "factor":
        (name,) = spec.covariates
        col = dataset.column(name)
        if col.role != "categorical":
            raise BasisError(f"covariate {name!r} is not categorical")
        levels = col.levels
        drop_first = not spec.penalised

        def predict(ds):
            c = ds.column(name)
            if c.role != "categorical":
                raise PredictionError(f"covariate {name!r} is not categorical")
            labels = c.label_values()
            unknown = set(labels) - set(levels)
            if unknown:
                raise PredictionError(
                    f"unknown level(s) {sorted(unknown)} for factor {name!r}")
            lut = {lev: i for i, lev in enumerate(levels)}
            codes = np.array([lut[v] for v in labels])
            X = np.eye(len(levels))[codes]
            return X[:, 1:] if drop_first else X
        X = predict(dataset)
        if spec.penalised:
            S = np.eye(len(levels))
            return EffectBlock(spec, X, [S], [len(levels)], False, predict)
        return EffectBlock(spec, X, [], [], False, predict)

    if kind in ("smooth-cr", "smooth-bs"):
        (name,) = spec.covariates
        raw, S = _smooth_parts(dataset, name, spec.k[0], kind, spec.penalty_order,
                               spec.transform)
        X0 = raw(dataset)
        Z = _constraint_basis(X0.sum(axis=0))
        Sz = Z.T @ S @ Z

        def predict(ds):
            return raw(ds) @ Z
        return EffectBlock(spec, X0 @ Z, [Sz], [matrix_rank_psd(Sz)], True, predict)

    if kind == "varying-coefficient":
        (name,) = spec.covariates
        if not spec.by:
            raise SpecError("varying-coefficient effect needs a 'by' covariate")
        raw, S = _smooth_parts(dataset, name, spec.k[0], "smooth-cr", spec.penalty_order,
                               spec.transform)
        by = spec.by

        def raw_vc(ds):
            return raw(ds) * _continuous_values(ds, by)[:, None]
        X0 = raw_vc(dataset)
        Z = _constraint_basis(X0.sum(axis=0))
        Sz = Z.T @ S @ Z

        def predict(ds):
            return raw_vc(ds) @ Z
        return EffectBlock(spec, X0 @ Z, [Sz], [matrix_rank_psd(Sz)], True, predict)

    if kind == "factor-smooth":
        cont, fac = spec.covariates
        col = dataset.column(fac)
        if col.role != "categorical":
            raise BasisError(f"covariate {fac!r} is not categorical")
        levels = col.levels
        raw, S = _smooth_parts(dataset, cont, spec.k[0], "smooth-cr", spec.penalty_order,
                               spec.transform)
        X0 = raw(dataset)
        codes = col.values
        Zs = []
        for lev in range(len(levels)):
            sel = codes == lev
            if sel.sum() <= spec.k[0]:
                raise BasisError(
                    f"level {levels[lev]!r} of {fac!r} has too few rows for k={spec.k[0]}")
            Zs.append(_constraint_basis(X0[sel].sum(axis=0)))
        lut = {lev: i for i, lev in enumerate(levels)}

        def predict(ds):
            c = ds.column(fac)
            labels = c.label_values()
            unknown = set(labels) - set(levels)
            if unknown:
                raise PredictionError(
                    f"unknown level(s) {sorted(unknown)} for factor {fac!r}")
            codes_new = np.array([lut[v] for v in labels])
            Xr = raw(ds)
            blocks = []
            for lev, Z in enumerate(Zs):
                blocks.append((Xr @ Z) * (codes_new == lev)[:, None])
            return np.column_stack(blocks)
        pl = Zs[0].shape[1]
        Sz = np.zeros((pl * len(levels), pl * len(levels)))
        for lev, Z in enumerate(Zs):
            Sz[lev * pl:(lev + 1) * pl, lev * pl:(lev + 1) * pl] = Z.T @ S @ Z
        return EffectBlock(spec, predict(dataset), [Sz], [matrix_rank_psd(Sz)], True, predict)

    if kind == "tensor":
        n1, n2 = spec.covariates
        k1, k2 = spec.k
        raw1, S1 = _smooth_parts(dataset, n1, k1, "smooth-cr", spec.penalty_order,
                                 spec.transform)
        raw2, S2 = _smooth_parts(dataset, n2, k2, "smooth-cr", spec.penalty_order)

        def raw_tensor(ds):
            A, B = raw1(ds), raw2(ds)
            return (A[:, :, None] * B[:, None, :]).reshape(ds.n, k1 * k2)
        X0 = raw_tensor(dataset)
        Z = _constraint_basis(X0.sum(axis=0))
        P1 = Z.T @ np.kron(S1, np.eye(k2)) @ Z
        P2 = Z.T @ np.kron(np.eye(k1), S2) @ Z

        def predict(ds):
            return raw_tensor(ds) @ Z
        return EffectBlock(spec, X0 @ Z, [P1, P2],
                           [matrix_rank_psd(P1), matrix_rank_psd(P2)], True, predict)

    raise SpecError(f"unknown effect kind {kind!r}")


# ---------------------------------------------------------------------------
# Effective degrees of freedom calibration
# ---------------------------------------------------------------------------

def effective_dof(X: np.ndarray, S: np.ndarray, zeta: float) -> float:
    """tr{X (X'X + zeta S)^{-1} X'}."""
    XtX = X.T @ X
    return float(np.trace(np.linalg.solve(XtX + zeta * S, XtX)))


def calibrate_edf(block: EffectBlock, target: float, tol: float = 1e-6) -> float:
    """Ridge scale making the block's effective degrees of freedom hit target."""
    if len(block.penalties) != 1:
        raise BasisError("edf calibration needs exactly one penalty on the block")
    X, S = block.design, block.penalties[0]
    XtX = X.T @ X
    try:
        R = np.linalg.cholesky(XtX)
    except np.linalg.LinAlgError:
        raise BasisError("design block is column rank deficient") from None
    Rinv = np.linalg.inv(R)
    gam = np.linalg.eigvalsh(Rinv @ S @ Rinv.T)
    gam = np.clip(gam, 0.0, None)
    p = X.shape[1]
    s = int(np.sum(gam > 1e-10 * max(gam.max(), 1.0)))
    if not (p - s - tol <= target <= p + tol):
        raise BasisError(
            f"target edf {target} outside the feasible range [{p - s}, {p}]")

    def edf(log_zeta):
        return float(np.sum(1.0 / (1.0 + np.exp(log_zeta) * gam)))

    lo, hi = -45.0, 45.0
    if edf(lo) < target - tol or edf(hi) > target + tol:
        # target sits at (or numerically beyond) one of the limits
        return float(np.exp(lo if edf(lo) < target else hi))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if edf(mid) > target:
            lo = mid
        else:
            hi = mid
    return float(np.exp(0.5 * (lo + hi)))


# ---------------------------------------------------------------------------
# Whole-model assembly
# ---------------------------------------------------------------------------

@dataclass
class ModelSpec:
    """Effects attached to each linear predictor (1-based, eta layout)."""

    d: int
    effects: dict[int, list[EffectSpec]] = field(default_factory=dict)

    @property
    def q(self) -> int:
        return self.d + self.d * (self.d + 1) // 2

    def with_effect(self, predictor: int, spec: EffectSpec) -> "ModelSpec":
        effects = {j: list(v) for j, v in self.effects.items()}
        effects.setdefault(predictor, []).append(spec)
        return ModelSpec(self.d, effects)

    def to_dict(self) -> dict:
        return {"d": self.d,
                "predictors": {str(j): [e.to_dict() for e in specs]
                               for j, specs in sorted(self.effects.items())}}

    @staticmethod
    def from_dict(cfg: dict) -> "ModelSpec":
        effects = {int(j): [EffectSpec.from_dict(e) for e in specs]
                   for j, specs in cfg.get("predictors", {}).items()}
        return ModelSpec(cfg["d"], effects)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @staticmethod
    def from_json(path) -> "ModelSpec":
        with open(path) as fh:
            return ModelSpec.from_dict(json.load(fh))


@dataclass
class BuiltEffect:
    spec: EffectSpec
    block: EffectBlock
    cols: slice                   # local to the predictor's design


@dataclass
class PredictorBlock:
    index: int                    # 0-based predictor position in eta
    effects: list[BuiltEffect]
    X: np.ndarray                 # (n, p_j), p_j may be 0
    offset: np.ndarray            # (n,)

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass
class PenaltyBlock:
    predictor: int                # 0-based
    effect_label: str
    S: np.ndarray
    rank: int
    rows: slice                   # global coefficient slice the penalty acts on
    group: int                    # penalties sharing a slice share a group


@dataclass
class Assembly:
    tables: mcd.McdTables
    predictors: list[PredictorBlock]
    penalties: list[PenaltyBlock]
    beta_slices: list[slice]
    p: int

    @property
    def q(self) -> int:
        return self.tables.q

    @property
    def n(self) -> int:
        return self.predictors[0].offset.shape[0]

    def eta(self, beta: np.ndarray) -> np.ndarray:
        out = np.empty((self.n, self.q))
        for blk, sl in zip(self.predictors, self.beta_slices):
            out[:, blk.index] = blk.offset
            if blk.p:
                out[:, blk.index] += blk.X @ beta[sl]
        return out

    def predict_eta(self, beta: np.ndarray, dataset: Dataset,
                    offsets: np.ndarray | None = None) -> np.ndarray:
        """Evaluate the linear predictors on new data.

        Offsets default to the per-predictor training means of the stored
        offsets, which is exact for the constant offsets used here.
        """
        out = np.zeros((dataset.n, self.q))
        for blk, sl in zip(self.predictors, self.beta_slices):
            if offsets is not None:
                out[:, blk.index] = offsets[:, blk.index] if offsets.ndim == 2 \
                    else offsets[blk.index]
            elif blk.offset.size:
                out[:, blk.index] = blk.offset.mean()
            for eff in blk.effects:
                out[:, blk.index] += eff.block.predict_design(dataset) @ beta[sl][eff.cols]
        return out

    def design_for(self, predictor: int, dataset: Dataset) -> np.ndarray:
        """Design rows of one predictor evaluated on new data (0-based index)."""
        blk = self.predictors[predictor]
        if not blk.effects:
            return np.zeros((dataset.n, 0))
        return np.column_stack([e.block.predict_design(dataset) for e in blk.effects])


def assemble_design(spec: ModelSpec, dataset: Dataset,
                    offsets: np.ndarray | None = None) -> Assembly:
    """Build per-predictor designs and penalty blocks for a whole model.

    ``offsets`` is a length-q vector (or n-by-q matrix) of fixed additive
    terms; predictors with no effects stay frozen at their offset.
    """
    if dataset.d != spec.d:
        raise SpecError(f"dataset has d={dataset.d}, spec has d={spec.d}")
    tables = mcd.build_index_tables(spec.d)
    n, q = dataset.n, tables.q
    if offsets is None:
        off = np.zeros((n, q))
    else:
        offsets = np.asarray(offsets, dtype=float)
        off = np.broadcast_to(offsets, (n, q)).copy() if offsets.ndim == 1 else offsets

    predictors: list[PredictorBlock] = []
    penalties: list[PenaltyBlock] = []
    beta_slices: list[slice] = []
    pos = 0
    group = 0
    for j in range(q):
        specs = spec.effects.get(j + 1, [])
        labels = [s.label() for s in specs]
        if len(set(labels)) != len(labels):
            raise SpecError(f"duplicate effect on predictor {j + 1}")
        built: list[BuiltEffect] = []
        cols = []
        local = 0
        for s in specs:
            block = build_effect(s, dataset)
            built.append(BuiltEffect(s, block, slice(local, local + block.p)))
            cols.append(block.design)
            local += block.p
        X = np.column_stack(cols) if cols else np.zeros((n, 0))
        blk = PredictorBlock(j, built, X, off[:, j].copy())
        sl = slice(pos, pos + local)
        for eff in built:
            rows = slice(pos + eff.cols.start, pos + eff.cols.stop)
            for S, rank in zip(eff.block.penalties, eff.block.ranks):
                penalties.append(PenaltyBlock(j, eff.spec.label(), S, rank, rows, group))
            if eff.block.penalties:
                group += 1
        predictors.append(blk)
        beta_slices.append(sl)
        pos += local
    return Assembly(tables, predictors, penalties, beta_slices, pos)
