"""Backward elimination of predictors by leave-one-out MSPE.

Each candidate subset is scored with the non-spatial model under a flat
prior on beta, whose leave-one-out predictive mean is the least-squares
fit on the remaining observations.  That gives the closed form
``e_i / (1 - h_ii)`` for the held-out error, so no refits are needed.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import Dataset, design_matrix

DEFAULT_COND_THRESHOLD = 1e4


@dataclass(frozen=True)
class SelectionConfig:
    cond_threshold: float = DEFAULT_COND_THRESHOLD
    workers: int = 1


@dataclass(frozen=True)
class SubsetScore:
    step: int
    predictors: tuple
    mspe: float
    condition_number: float
    collinear: bool
    removed: str | None = None
    on_path: bool = False


@dataclass
class SelectionTrace:
    path: list
    evaluated: list = field(default_factory=list)
    chosen: tuple = ()

    @property
    def chosen_mspe(self) -> float:
        return next(s.mspe for s in self.path if s.predictors == self.chosen)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "predictors", "n_predictors", "removed", "loo_mspe",
                        "condition_number", "collinear", "on_path", "chosen"])
            for s in self.evaluated:
                w.writerow([s.step, ";".join(s.predictors), len(s.predictors), s.removed or "",
                            repr(s.mspe), repr(s.condition_number), int(s.collinear),
                            int(s.on_path), int(s.on_path and s.predictors == self.chosen)])


def condition_number(ds: Dataset, predictors) -> float:
    """Condition number of the design with standardized predictor columns."""
    if not predictors:
        return 1.0
    X = design_matrix(ds, predictors)[:, 1:]
    sd = X.std(axis=0)
    if np.any(sd == 0):
        return float("inf")
    Z = np.column_stack([np.ones(ds.n), (X - X.mean(axis=0)) / sd])
    s = np.linalg.svd(Z, compute_uv=False)
    return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")


def loo_residuals(X, y):
    """Leave-one-out least-squares prediction errors ``y_i - yhat_(-i)``."""
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    rank = int(np.sum(s > s[0] * max(X.shape) * np.finfo(float).eps))
    U = U[:, :rank]
    h = np.sum(U * U, axis=1)
    e = y - U @ (U.T @ y)
    return e / (1.0 - h)


def loo_mspe(ds: Dataset, predictors) -> float:
    r = loo_residuals(design_matrix(ds, predictors), ds.y)
    return float(np.mean(r * r))


def _order(ds, names):
    return tuple(n for n in ds.names if n in names)


def _score(ds, predictors, step, removed, cfg):
    kappa = condition_number(ds, predictors)
    return SubsetScore(step, predictors, loo_mspe(ds, predictors), kappa,
                       bool(kappa > cfg.cond_threshold), removed)


def _better(a: SubsetScore, b: SubsetScore | None) -> bool:
    if b is None:
        return True
    if a.collinear != b.collinear:
        return not a.collinear
    return a.mspe < b.mspe


def backward_select(ds: Dataset, candidates=None, cfg: SelectionConfig = SelectionConfig()
                    ) -> SelectionTrace:
    """Drop one predictor at a time, always the one whose removal gives the
    lowest LOO MSPE, down to the intercept-only model.

    The chosen set is the lowest-MSPE subset on the path among those not
    flagged as collinear; ties go to the smaller set.  Ties within a step go
    to the predictor listed first.
    """
    current = _order(ds, ds.names if candidates is None else candidates)
    if candidates is not None and len(current) != len(set(candidates)):
        raise KeyError(f"unknown candidate predictor(s) in {list(candidates)}")
    if not current:
        raise ValueError("need at least one candidate predictor")
    if ds.n <= len(current) + 2:
        raise ValueError(f"need n > {len(current) + 2} observations for {len(current)} candidates")

    first = _score(ds, current, 0, None, cfg)
    path = [SubsetScore(**{**first.__dict__, "on_path": True})]
    evaluated = [path[0]]
    step = 0
    while current:
        step += 1
        subsets = [(name, tuple(n for n in current if n != name)) for name in current]
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
                scores = list(ex.map(lambda a: _score(ds, a[1], step, a[0], cfg), subsets))
        else:
            scores = [_score(ds, sub, step, name, cfg) for name, sub in subsets]
        best = None
        for s in scores:
            if _better(s, best):
                best = s
        best = SubsetScore(**{**best.__dict__, "on_path": True})
        evaluated += [best if s.predictors == best.predictors else s for s in scores]
        path.append(best)
        current = best.predictors

    eligible = [s for s in path if not s.collinear] or path
    top = min(eligible, key=lambda s: (s.mspe, len(s.predictors)))
    # exact ties and near ties from rounding both resolve toward parsimony
    tol = 1e-12 * max(top.mspe, 1.0)
    chosen = min((s for s in eligible if s.mspe <= top.mspe + tol), key=lambda s: len(s.predictors))
    return SelectionTrace(path, evaluated, chosen.predictors)
