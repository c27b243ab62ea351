"""Shape-dictionary refinement of predicted centroids.

1. keep the longest run of landmarks whose z strictly descends along the chain;
2. on those rows, code each axis of the prediction as a sparse combination of
   training spines (LASSO, shared row subset and lambda for x, y, z);
3. reconstruct every row, including the dropped ones, from the codes.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ArtifactError, ConfigError, ConvergenceError, MissingArtifactError, ShapeError
from .landmarks import parse_labels

logger = logging.getLogger(__name__)

AXES = ("x", "y", "z")
SUPPORT_EPS = 1e-12
DESCENT_TOL = 1e-9
LAMBDA_RATIO = 0.01


@dataclass(frozen=True, eq=False)
class ShapeDictionary:
    """Training coordinates in mm, one M x N matrix per axis; column j is training spine j."""

    labels: tuple
    dx: np.ndarray
    dy: np.ndarray
    dz: np.ndarray
    constant_column: bool = True

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        mats = [np.atleast_2d(np.asarray(m, dtype=float)) for m in (self.dx, self.dy, self.dz)]
        if len({m.shape for m in mats}) != 1:
            raise ShapeError(f"dictionary axes disagree in shape: {[m.shape for m in mats]}")
        if mats[0].shape[0] != len(self.labels):
            raise ShapeError(f"dictionary has {mats[0].shape[0]} rows for {len(self.labels)} labels")
        if mats[0].shape[1] < 1:
            raise ShapeError("dictionary needs at least one training column")
        for name, m in zip(("dx", "dy", "dz"), mats):
            object.__setattr__(self, name, m)

    @classmethod
    def from_landmark_sets(cls, train, constant_column=True):
        train = list(train)
        if not train:
            raise ShapeError("cannot build a dictionary from zero training spines")
        labels = train[0].labels
        for sample in train[1:]:
            if sample.labels != labels:
                raise ShapeError("all training spines must share the same label order")
        cols = np.stack([s.positions for s in train], axis=2)  # (M, 3, N)
        return cls(labels, cols[:, 0, :], cols[:, 1, :], cols[:, 2, :], constant_column)

    @property
    def atoms(self):
        return self.dx.shape[1]

    def matrix(self, axis):
        return {"x": self.dx, "y": self.dy, "z": self.dz}[axis]

    def design(self, axis, rows):
        """Rows of one axis' dictionary, with the unit column appended when enabled."""
        d = self.matrix(axis)[list(rows)]
        if self.constant_column:
            d = np.hstack([d, np.ones((d.shape[0], 1))])
        return d

    def with_constant_column(self, flag):
        return ShapeDictionary(self.labels, self.dx, self.dy, self.dz, flag)


@dataclass(frozen=True, eq=False)
class SparseCode:
    a: np.ndarray
    lam: float
    offset: float = 0.0
    residual: float = 0.0
    sweeps: int = 0

    @property
    def support(self):
        return tuple(int(k) for k in np.flatnonzero(np.abs(self.a) > SUPPORT_EPS))


@dataclass
class RefinementResult:
    landmarks: object
    skipped: bool = False
    subset: tuple = ()
    codes: dict = field(default_factory=dict)
    lam: float = 0.0
    extrapolated: tuple = ()


def max_descending_subsequence(values, tol=DESCENT_TOL):
    """Indices of a longest strictly decreasing subsequence; ties go to the lexicographically smallest set."""
    v = np.asarray(values, dtype=float).ravel()
    m = v.size
    if m == 0:
        return ()
    # longest[i]: length of the longest decreasing run that starts at i
    longest = [1] * m
    for i in range(m - 2, -1, -1):
        for j in range(i + 1, m):
            if v[i] - v[j] > tol and longest[j] + 1 > longest[i]:
                longest[i] = longest[j] + 1
    best = max(longest)
    picked = [longest.index(best)]
    while longest[picked[-1]] > 1:
        i = picked[-1]
        picked.append(next(j for j in range(i + 1, m) if v[i] - v[j] > tol and longest[j] == longest[i] - 1))
    return tuple(picked)


def soft_threshold(x, t):
    return np.sign(x) * max(abs(x) - t, 0.0)


def objective(d, v, a, lam, unpenalized=()):
    r = v - d @ a
    penalized = np.ones(a.size, dtype=bool)
    penalized[list(unpenalized)] = False
    return 0.5 * float(r @ r) + lam * float(np.abs(a[penalized]).sum())


def kkt_residual(d, v, a, lam, unpenalized=()):
    """Largest violation of the LASSO optimality conditions."""
    d = np.asarray(d, dtype=float)
    g = d.T @ (np.asarray(v, dtype=float) - d @ a)
    worst = 0.0
    free = set(unpenalized)
    for k, (gk, ak) in enumerate(zip(g, a)):
        if k in free:
            worst = max(worst, abs(gk))
        elif ak != 0.0:
            worst = max(worst, abs(gk - lam * np.sign(ak)))
        else:
            worst = max(worst, abs(gk) - lam)
    return float(worst)


def _polish(d, v, a, lam, free):
    """Stationary point on the current active set with the current signs held fixed.

    With lam > 0 a candidate that flips a sign fails the KKT check by 2 * lam.
    """
    active = [k for k in range(a.size) if a[k] != 0.0 or k in free]
    if not active:
        return None
    sub = d[:, active]
    if not np.any(sub):
        return None
    signs = np.array([0.0 if k in free else np.sign(a[k]) for k in active])
    # w solves sub' w = signs with minimum norm; then sub' (v - sub x) = lam * signs
    w = np.linalg.lstsq(sub.T, signs, rcond=None)[0]
    x = np.linalg.lstsq(sub, v - lam * w, rcond=None)[0]
    if not np.all(np.isfinite(x)):
        return None
    out = np.zeros_like(a)
    out[active] = x
    return out


def lasso_solve(d, v, lam, unpenalized=(), tol=1e-8, max_sweeps=10000, polish_every=10):
    """min_a 1/2 |v - d a|^2 + lam * sum_{k not unpenalized} |a_k| by cyclic coordinate descent.

    Converged once the KKT residual is at most tol * max(1, |d' v|_inf).
    """
    d = np.atleast_2d(np.asarray(d, dtype=float))
    v = np.asarray(v, dtype=float).ravel()
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    if d.shape[0] != v.size or v.size < 1:
        raise ShapeError(f"dictionary rows {d.shape[0]} do not match {v.size} observations")
    free = set(unpenalized)
    n = d.shape[1]
    a = np.zeros(n)
    r = v.copy()
    norms = (d**2).sum(axis=0)
    target = tol * max(1.0, float(np.abs(d.T @ v).max(initial=0.0)))
    residual = kkt_residual(d, v, a, lam, free)
    sweeps = 0
    while residual > target and sweeps < max_sweeps:
        sweeps += 1
        for k in range(n):
            if norms[k] == 0.0:
                continue
            rho = d[:, k] @ r + norms[k] * a[k]
            new = rho / norms[k] if k in free else soft_threshold(rho, lam) / norms[k]
            if new != a[k]:
                r -= d[:, k] * (new - a[k])
                a[k] = new
        residual = kkt_residual(d, v, a, lam, free)
        if residual > target and sweeps % polish_every == 0:
            candidate = _polish(d, v, a, lam, free)
            # a certified candidate ends the solve; any other leaves the descent iterate alone
            if candidate is not None:
                cand_residual = kkt_residual(d, v, candidate, lam, free)
                if cand_residual <= target:
                    a, residual = candidate, cand_residual
        logger.debug("lasso sweep %d kkt residual %.3g", sweeps, residual)
    if residual > target:
        raise ConvergenceError(
            f"LASSO did not converge in {max_sweeps} sweeps (KKT residual {residual:.3g})",
            residual=residual,
            sweeps=sweeps,
        )
    return a, residual, sweeps


def default_lambda(dictionary, rows, vz, ratio=LAMBDA_RATIO):
    dz = dictionary.matrix("z")[list(rows)]
    return ratio * float(np.abs(dz.T @ np.asarray(vz, dtype=float)).max(initial=0.0))


def solve_axis(dictionary, axis, rows, values, lam):
    """Sparse code of one axis on the given rows."""
    design = dictionary.design(axis, rows)
    free = (dictionary.atoms,) if dictionary.constant_column else ()
    a, residual, sweeps = lasso_solve(design, values, lam, unpenalized=free)
    offset = float(a[-1]) if dictionary.constant_column else 0.0
    return SparseCode(a[: dictionary.atoms].copy(), lam, offset, residual, sweeps)


def reconstruct(dictionary, axis, code):
    return dictionary.matrix(axis) @ code.a + code.offset


def refine(pred, dictionary, lam=None, lambda_ratio=LAMBDA_RATIO, descending=True):
    """Refined landmarks reconstructed from a sparse combination of training shapes."""
    if tuple(pred.labels) != dictionary.labels:
        raise ShapeError(f"prediction labels {pred.labels} do not match dictionary rows {dictionary.labels}")
    present = np.flatnonzero(pred.present)
    if present.size < 2:
        logger.warning("refinement skipped: %d present landmarks", present.size)
        return RefinementResult(pred, skipped=True)
    positions = pred.positions
    sign = 1.0 if descending else -1.0
    keep = max_descending_subsequence(sign * positions[present, 2])
    rows = present[list(keep)]
    if lam is None:
        lam = default_lambda(dictionary, rows, positions[rows, 2], lambda_ratio)
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    codes = {}
    refined = np.empty_like(positions)
    for axis_index, axis in enumerate(AXES):
        codes[axis] = solve_axis(dictionary, axis, rows, positions[rows, axis_index], lam)
        refined[:, axis_index] = reconstruct(dictionary, axis, codes[axis])
    kept = set(rows.tolist())
    dropped = [pred.labels[i] for i in present if i not in kept]
    if dropped:
        logger.info("refinement replaced out-of-order landmarks: %s", ", ".join(dropped))
    extrapolated = tuple(label for label, flag in zip(pred.labels, pred.present) if not flag)
    return RefinementResult(
        landmarks=pred.with_positions(refined),
        subset=tuple(pred.labels[i] for i in rows),
        codes=codes,
        lam=float(lam),
        extrapolated=extrapolated,
    )


def dictionary_paths(directory):
    directory = Path(directory)
    return {axis: directory / f"dictionary_{axis}.csv" for axis in AXES}


def write_dictionary(dictionary, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    columns = [f"sample_{j}" for j in range(dictionary.atoms)]
    for axis, path in dictionary_paths(directory).items():
        df = pd.DataFrame(dictionary.matrix(axis), columns=columns)
        df.insert(0, "label", list(dictionary.labels))
        df.to_csv(path, index=False, float_format="%.17g")
    return directory


def read_dictionary(directory, constant_column=True):
    frames = {}
    for axis, path in dictionary_paths(directory).items():
        if not path.is_file():
            raise MissingArtifactError(f"dictionary file not found: {path}")
        try:
            frames[axis] = pd.read_csv(path, dtype={"label": str}, float_precision="round_trip")
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise ArtifactError(f"cannot parse {path}: {e}") from e
        if "label" not in frames[axis].columns:
            raise ArtifactError(f"{path}: missing label column")
    labels = list(frames["x"]["label"])
    for axis, df in frames.items():
        if list(df["label"]) != labels or df.shape != frames["x"].shape:
            raise ArtifactError(f"dictionary files disagree in rows or columns ({axis})")
    try:
        parse_labels(labels)
        mats = [frames[axis].drop(columns="label").to_numpy(dtype=float) for axis in AXES]
        return ShapeDictionary(tuple(labels), *mats, constant_column=constant_column)
    except (ConfigError, ValueError) as e:
        raise ArtifactError(f"invalid dictionary in {directory}: {e}") from e
