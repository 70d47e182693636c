"""Metrics and the experimental protocol: tie-aware bag AUC, stratified
cross-validation planning, nested grid search with hygiene tracking,
Spearman correlation, Fisher r-to-z comparison, Dice overlap, and the
density (low-attenuation) baseline.

Model selection inside the nested CV maximizes mean inner-fold bag AUC;
ties within 1e-6 fall back to larger mean Separability, then smaller C,
then smaller q, then enumeration order.
"""

from __future__ import annotations

import itertools
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import betainc

from lesionmil.mil import (
    Bag,
    MilDataset,
    MilModel,
    milesq_train,
    misvmq_train,
    predict_bag,
    predict_instance,
    separability,
)
from lesionmil.svm import ConvergenceError, Kernel, Standardization, kernel_matrix
from lesionmil.volume import Volume


# ---------------------------------------------------------------------------
# metrics


def _midranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def bag_auc(posteriors, labels) -> float:
    """Mann-Whitney AUC with midrank tie handling."""
    p = np.asarray(posteriors, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if p.size != y.size:
        raise ValueError("posteriors and labels length mismatch")
    pos = y > 0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = _midranks(p)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def spearman(x, y, method: str = "auto") -> tuple[float, float]:
    """Spearman rank correlation with a two-sided p-value.

    ``method`` is ``"t"`` (t-distribution approximation), ``"permutation"``
    (exact enumeration, only for n <= 9) or ``"auto"`` which switches to the
    exact test below n = 10.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.size
    if n != y.size:
        raise ValueError("length mismatch")
    if n < 3:
        raise ValueError("need at least 3 points")
    rx, ry = _midranks(x), _midranks(y)
    if rx.std() == 0.0 or ry.std() == 0.0:
        raise ValueError("zero variance in ranks")
    rho = float(np.corrcoef(rx, ry)[0, 1])

    if method == "auto":
        method = "permutation" if n < 10 else "t"
    if method == "permutation":
        if n > 9:
            raise ValueError("permutation test supported only for n <= 9")
        cx = rx - rx.mean()
        cy = ry - ry.mean()
        perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
        stats = cy[perms] @ cx
        observed = float(cy @ cx)
        p = float(np.mean(np.abs(stats) >= abs(observed) - 1e-12))
        return rho, p
    if abs(rho) >= 1.0:
        return rho, 0.0
    t2 = rho * rho * (n - 2) / (1.0 - rho * rho)
    df = n - 2
    p = float(betainc(df / 2.0, 0.5, df / (df + t2)))
    return rho, min(max(p, 0.0), 1.0)


def fisher_rz(r1: float, n1: int, r2: float, n2: int) -> tuple[float, float]:
    """Compare two independent correlations through the r-to-z transform.
    Returns the z statistic and its two-sided normal p-value."""
    for r, n in ((r1, n1), (r2, n2)):
        if abs(r) >= 1.0:
            raise ValueError(f"|r| must be < 1, got {r}")
        if n <= 3:
            raise ValueError(f"need n > 3, got {n}")
    z = (math.atanh(r1) - math.atanh(r2)) / math.sqrt(1.0 / (n1 - 3) + 1.0 / (n2 - 3))
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return z, p


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap 2|a&b| / (|a|+|b|); two empty masks count as 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        warnings.warn("dice of two empty masks defined as 1.0")
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def laa_percentage(v: Volume, threshold: float) -> float:
    """Share of masked voxels strictly below the intensity threshold, as a
    percentage (the classical low-attenuation-area score)."""
    if v.mask is None or not v.mask.any():
        raise ValueError("laa_percentage needs a non-empty mask")
    inside = v.data[v.mask]
    return 100.0 * float((inside < threshold).sum()) / inside.size


# ---------------------------------------------------------------------------
# cross-validation planning


@dataclass(frozen=True)
class CvPlan:
    """Subject-to-fold assignment; stratified, deterministic for a seed."""

    assignment: dict[str, int]
    n_folds: int
    seed: int

    def test_subjects(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def train_subjects(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f != fold)

    def to_dict(self) -> dict:
        return {"assignment": dict(sorted(self.assignment.items())),
                "n_folds": self.n_folds, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "CvPlan":
        return cls(assignment=dict(d["assignment"]), n_folds=int(d["n_folds"]),
                   seed=int(d["seed"]))


def make_cv_plan(
    subjects: Sequence[str],
    strata: Mapping[str, str],
    seed: int,
    n_folds: int = 4,
) -> CvPlan:
    """Stratified fold assignment: subjects are shuffled within each stratum
    and dealt round-robin with a running counter, so every stratum (and
    every class, when strata keys start with the class label) is spread
    across folds within one subject."""
    subjects = list(subjects)
    if len(subjects) < n_folds:
        raise ValueError(f"{len(subjects)} subjects cannot fill {n_folds} folds")
    rng = np.random.Generator(np.random.PCG64(seed))
    groups: dict[str, list[str]] = {}
    for s in subjects:
        groups.setdefault(str(strata[s]), []).append(s)
    assignment: dict[str, int] = {}
    counter = 0
    for key in sorted(groups):
        members = sorted(groups[key])
        for idx in rng.permutation(len(members)):
            assignment[members[idx]] = counter % n_folds
            counter += 1
    return CvPlan(assignment=assignment, n_folds=n_folds, seed=seed)


@dataclass(frozen=True)
class ParamGrid:
    """Hyperparameter grid; defaults mirror the full experimental grids."""

    poly_degrees: tuple[int, ...] = (1, 2)
    rbf_sigmas: tuple[float, ...] = (8.0, 10.0, 12.0, 14.0, 16.0, 20.0)
    costs: tuple[float, ...] = (0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0)
    quantiles: tuple[float, ...] = (0.25, 0.5, 0.75, 0.9, 1.0)

    def kernels(self) -> list[Kernel]:
        ks = [Kernel("polynomial", degree=p) for p in self.poly_degrees]
        ks += [Kernel("rbf", sigma=s) for s in self.rbf_sigmas]
        return ks

    def combos(self) -> list[tuple[Kernel, float, float]]:
        """Cartesian enumeration: kernels (polynomial degrees ascending,
        then rbf sigmas ascending), then C ascending, then q ascending."""
        return [
            (k, c, q)
            for k in self.kernels()
            for c in self.costs
            for q in self.quantiles
        ]

    def size(self) -> int:
        return (len(self.poly_degrees) + len(self.rbf_sigmas)) * len(self.costs) * len(self.quantiles)


# ---------------------------------------------------------------------------
# feature sources (fold-dependent feature materialization) and hygiene


@dataclass(frozen=True)
class SubjectFeatures:
    features: np.ndarray
    label: int
    stratum: str
    instance_labels: np.ndarray | None = None


class FixedFeatureSource:
    """Features that involve no data-dependent fitting (e.g. fixed-window
    co-occurrence descriptors); materialization ignores the training set."""

    def __init__(self, subjects: Mapping[str, SubjectFeatures], schema_id: str = ""):
        self._subjects = dict(subjects)
        self.schema_id = schema_id

    def subject_ids(self) -> list[str]:
        return sorted(self._subjects)

    def label(self, sid: str) -> int:
        return self._subjects[sid].label

    def strata(self) -> dict[str, str]:
        return {sid: sf.stratum for sid, sf in self._subjects.items()}

    def materialize(self, train_ids: Sequence[str]) -> "MaterializedFeatures":
        bags = {
            sid: Bag(id=sid, label=sf.label, instances=sf.features,
                     instance_labels=sf.instance_labels)
            for sid, sf in self._subjects.items()
        }
        return MaterializedFeatures(bags=bags, fitted_on=frozenset(train_ids),
                                    provenance=f"fixed:{self.schema_id}")


@dataclass(frozen=True)
class MaterializedFeatures:
    """Per-subject bags produced under one fitting context; ``fitted_on``
    names every subject whose data influenced any data-dependent fit.
    ``bins`` carries the fitted BinningScheme when the features needed one."""

    bags: dict[str, Bag]
    fitted_on: frozenset
    provenance: str = ""
    bins: object | None = None

    def bag_list(self, ids: Sequence[str]) -> list[Bag]:
        return [self.bags[s] for s in ids]


def source_from_dataset(data: MilDataset) -> FixedFeatureSource:
    subjects = {
        b.id: SubjectFeatures(features=b.instances, label=b.label,
                              stratum=str(b.label), instance_labels=b.instance_labels)
        for b in data.bags
    }
    return FixedFeatureSource(subjects, schema_id=data.schema_id)


class HygieneLog:
    """Record of every (fit, evaluation) pairing; a violation is any subject
    appearing on both sides."""

    def __init__(self):
        self.events: list[dict] = []

    def record(self, kind: str, train_ids: Iterable[str], eval_ids: Iterable[str]):
        train_set, eval_set = frozenset(train_ids), frozenset(eval_ids)
        overlap = sorted(train_set & eval_set)
        self.events.append({
            "kind": kind,
            "n_train": len(train_set),
            "n_eval": len(eval_set),
            "overlap": overlap,
        })

    def violations(self) -> int:
        return sum(1 for e in self.events if e["overlap"])


# ---------------------------------------------------------------------------
# nested cross-validation


@dataclass
class FoldResult:
    fold: int
    params: dict
    bag_auc: float
    separability: float
    instance_auc: float | None
    n_test_bags: int
    converged: bool
    skipped_cells: list[str] = field(default_factory=list)


@dataclass
class EvaluationReport:
    """Everything the protocol measures; JSON round-trippable."""

    variant: str
    schema_id: str
    folds: list[FoldResult] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    correlations: list[dict] = field(default_factory=list)
    dice_scores: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    hygiene_events: int = 0
    hygiene_violations: int = 0

    def validate(self):
        for fr in self.folds:
            if not (0.0 <= fr.bag_auc <= 1.0):
                raise ValueError(f"fold {fr.fold}: AUC {fr.bag_auc} outside [0, 1]")
            if not (-1.0 <= fr.separability <= 1.0):
                raise ValueError(f"fold {fr.fold}: separability outside [-1, 1]")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "schema_id": self.schema_id,
            "folds": [asdict(fr) for fr in self.folds],
            "aggregate": self.aggregate,
            "correlations": self.correlations,
            "dice_scores": self.dice_scores,
            "metadata": self.metadata,
            "hygiene_events": self.hygiene_events,
            "hygiene_violations": self.hygiene_violations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        report = cls(variant=d["variant"], schema_id=d["schema_id"])
        report.folds = [FoldResult(**fr) for fr in d["folds"]]
        report.aggregate = d["aggregate"]
        report.correlations = d["correlations"]
        report.dice_scores = d["dice_scores"]
        report.metadata = d["metadata"]
        report.hygiene_events = d["hygiene_events"]
        report.hygiene_violations = d["hygiene_violations"]
        return report


@dataclass
class FoldArtifacts:
    """Non-serialized per-fold products of a nested CV run."""

    fold: int
    model: MilModel
    materialized: MaterializedFeatures
    params: dict
    test_ids: list[str] = field(default_factory=list)
    test_posteriors: list[float] = field(default_factory=list)
    test_labels: list[int] = field(default_factory=list)


@dataclass
class NestedCvRun:
    report: EvaluationReport
    artifacts: list[FoldArtifacts]


def _params_dict(kernel: Kernel, C: float, q: float) -> dict:
    d = {"kernel": kernel.kind, "C": C, "q": q}
    if kernel.kind == "polynomial":
        d["degree"] = kernel.degree
    else:
        d["sigma"] = kernel.sigma
    return d


def _train_variant(variant, bags, kernel, C, q, max_iters, gram=None) -> MilModel:
    ds = MilDataset(bags=tuple(bags))
    if variant == "misvm_q":
        return misvmq_train(ds, kernel, C, q, max_iters=max_iters, gram=gram)
    return milesq_train(ds, kernel, C, q)


_CELL_ERRORS = (ConvergenceError, ValueError, FloatingPointError, np.linalg.LinAlgError)


def _run_cell_group(args) -> list[tuple]:
    """Evaluate all (C, q) cells of one kernel on one inner fold.  Runs in a
    worker process; the kernel matrix of the training instances is shared
    across cells for the instance-level variant."""
    inner_fold, kernel, cells, train_bags, val_bags, variant, max_iters = args
    gram = None
    if variant == "misvm_q":
        X = np.vstack([b.instances for b in train_bags])
        Xs = Standardization.fit(X).apply(X)
        gram = kernel_matrix(kernel, Xs, Xs)
    val_labels = [b.label for b in val_bags]
    out = []
    for cell_idx, C, q in cells:
        try:
            model = _train_variant(variant, train_bags, kernel, C, q, max_iters, gram=gram)
            post = [predict_bag(model, b) for b in val_bags]
            auc = bag_auc(post, val_labels)
            sep = separability(model, MilDataset(bags=tuple(val_bags)))
            out.append((cell_idx, inner_fold, auc, sep, None))
        except _CELL_ERRORS as exc:
            out.append((cell_idx, inner_fold, math.nan, math.nan, repr(exc)))
    return out


def _select_best(cells, mean_auc, mean_sep) -> int:
    """Lexicographic choice: AUC, then Separability (1e-6 tie bands), then
    smaller C, then smaller q, then enumeration order."""
    best = None
    for idx in range(len(cells)):
        if math.isnan(mean_auc[idx]):
            continue
        if best is None:
            best = idx
            continue
        a, b = mean_auc[idx], mean_auc[best]
        if a > b + 1e-6:
            best = idx
            continue
        if a < b - 1e-6:
            continue
        sa, sb = mean_sep[idx], mean_sep[best]
        if sa > sb + 1e-6:
            best = idx
            continue
        if sa < sb - 1e-6:
            continue
        _, c_new, q_new = cells[idx]
        _, c_old, q_old = cells[best]
        if (c_new, q_new) < (c_old, q_old):
            best = idx
    return best


def nested_cv(
    data,
    variant: str,
    grid: ParamGrid,
    plan: CvPlan,
    inner_folds: int = 3,
    seed: int = 0,
    workers: int = 1,
    max_iters: int = 20,
    hygiene: HygieneLog | None = None,
    metadata: dict | None = None,
) -> NestedCvRun:
    """Outer-fold evaluation with an inner grid search.

    ``data`` is a feature source (or a plain MilDataset, which is wrapped);
    feature materialization, standardization and model fitting only ever see
    the fold's training subjects, and every fit/eval pairing is recorded in
    the hygiene log.  Failed grid cells are skipped and flagged.  Results
    are independent of ``workers``.
    """
    if variant not in ("misvm_q", "miles_q"):
        raise ValueError(f"unknown variant {variant!r}")
    source = source_from_dataset(data) if isinstance(data, MilDataset) else data
    hygiene = hygiene if hygiene is not None else HygieneLog()
    strata = source.strata()
    cells = grid.combos()
    by_kernel: dict[Kernel, list[tuple[int, float, float]]] = {}
    for idx, (k, c, q) in enumerate(cells):
        by_kernel.setdefault(k, []).append((idx, c, q))

    fold_results: list[FoldResult] = []
    artifacts: list[FoldArtifacts] = []
    for fold in range(plan.n_folds):
        outer_train = plan.train_subjects(fold)
        outer_test = plan.test_subjects(fold)
        inner_seed = seed + 1_000_003 * (fold + 1)
        inner_plan = make_cv_plan(outer_train, strata, seed=inner_seed, n_folds=inner_folds)

        jobs = []
        for g in range(inner_folds):
            tr_ids = inner_plan.train_subjects(g)
            va_ids = inner_plan.test_subjects(g)
            mat = source.materialize(tr_ids)
            hygiene.record("bins", mat.fitted_on, va_ids)
            tr_bags = mat.bag_list(tr_ids)
            va_bags = mat.bag_list(va_ids)
            for kernel, kcells in by_kernel.items():
                hygiene.record("model+standardization", tr_ids, va_ids)
                jobs.append((g, kernel, kcells, tr_bags, va_bags, variant, max_iters))

        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                job_results = list(pool.map(_run_cell_group, jobs))
        else:
            job_results = [_run_cell_group(j) for j in jobs]

        auc_sum = np.zeros(len(cells))
        sep_sum = np.zeros(len(cells))
        n_ok = np.zeros(len(cells), dtype=int)
        errors: dict[int, list[str]] = {}
        for group in job_results:
            for cell_idx, g, auc, sep, err in group:
                if err is None:
                    auc_sum[cell_idx] += auc
                    sep_sum[cell_idx] += sep
                    n_ok[cell_idx] += 1
                else:
                    errors.setdefault(cell_idx, []).append(f"inner{g}: {err}")

        complete = n_ok == inner_folds
        mean_auc = np.where(complete, auc_sum / np.maximum(n_ok, 1), np.nan)
        mean_sep = np.where(complete, sep_sum / np.maximum(n_ok, 1), np.nan)
        skipped = [
            f"{_params_dict(*cells[i])}: {'; '.join(errors.get(i, ['incomplete']))}"
            for i in range(len(cells))
            if not complete[i]
        ]
        best = _select_best(cells, mean_auc, mean_sep)
        if best is None:
            raise ConvergenceError(f"outer fold {fold}: every grid cell failed", math.nan)
        kernel, C, q = cells[best]

        mat_outer = source.materialize(outer_train)
        hygiene.record("bins", mat_outer.fitted_on, outer_test)
        hygiene.record("model+standardization", outer_train, outer_test)
        model = _train_variant(variant, mat_outer.bag_list(outer_train), kernel, C, q, max_iters)
        test_bags = mat_outer.bag_list(outer_test)
        post = [predict_bag(model, b) for b in test_bags]
        auc = bag_auc(post, [b.label for b in test_bags])
        sep = separability(model, MilDataset(bags=tuple(test_bags)))

        inst_auc = None
        inst_scores, inst_labels = [], []
        for b in test_bags:
            if b.instance_labels is not None:
                inst_scores.append(predict_instance(model, b.instances))
                inst_labels.append(np.asarray(b.instance_labels))
        if inst_labels:
            pooled_labels = np.concatenate(inst_labels)
            if (pooled_labels > 0).any() and (pooled_labels <= 0).any():
                inst_auc = bag_auc(np.concatenate(inst_scores), pooled_labels)

        params = _params_dict(kernel, C, q)
        fold_results.append(FoldResult(
            fold=fold, params=params, bag_auc=auc, separability=sep,
            instance_auc=inst_auc, n_test_bags=len(test_bags),
            converged=model.converged, skipped_cells=skipped,
        ))
        artifacts.append(FoldArtifacts(
            fold=fold, model=model, materialized=mat_outer, params=params,
            test_ids=list(outer_test), test_posteriors=[float(p) for p in post],
            test_labels=[b.label for b in test_bags],
        ))

    aucs = np.array([fr.bag_auc for fr in fold_results])
    seps = np.array([fr.separability for fr in fold_results])
    inst = [fr.instance_auc for fr in fold_results if fr.instance_auc is not None]
    aggregate = {
        "mean_bag_auc": float(aucs.mean()),
        "sd_bag_auc": float(aucs.std(ddof=1)) if len(aucs) > 1 else 0.0,
        "mean_separability": float(seps.mean()),
        "sd_separability": float(seps.std(ddof=1)) if len(seps) > 1 else 0.0,
        "mean_instance_auc": float(np.mean(inst)) if inst else None,
    }
    report = EvaluationReport(
        variant=variant,
        schema_id=getattr(source, "schema_id", ""),
        folds=fold_results,
        aggregate=aggregate,
        metadata=dict(metadata or {}, seed=seed, grid_size=grid.size(),
                      n_folds=plan.n_folds, inner_folds=inner_folds),
        hygiene_events=len(hygiene.events),
        hygiene_violations=hygiene.violations(),
    )
    report.validate()
    s = report.aggregate["mean_separability"]
    if not 0.05 <= s <= 0.75:
        # soft expectation from experience with real data, not a hard bound
        warnings.warn(f"mean separability {s:.3f} outside the usual 0.05-0.75 band")
    return NestedCvRun(report=report, artifacts=artifacts)
