"""On-disk artifacts: the cohort manifest, the per-subject feature store,
feature-matrix exports, and model bundles.

Everything written here is byte-deterministic for fixed inputs: JSON is
dumped with sorted keys, arrays go through ``numpy.save`` or raw
little-endian blobs, and no timestamps are embedded (run logs carry those).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from lesionmil.evaluation import SubjectFeatures, FixedFeatureSource, MaterializedFeatures
from lesionmil.mil import Bag, MilModel
from lesionmil.svm import Kernel, L1LinearModel, Standardization, SvmModel
from lesionmil.texture import (
    BinningScheme,
    channel_ids,
    fit_adaptive_bins,
    sketch_features,
)

FORMAT_VERSION = 1


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_json(path: Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# cohort manifest


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    seed: int
    lesion_fraction: float
    label: int


def write_manifest(entries: Sequence[ManifestEntry], path: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["subject_id", "seed", "lesion_fraction", "label"])
    for e in entries:
        writer.writerow([e.subject_id, e.seed, repr(e.lesion_fraction), e.label])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_manifest(path: Path) -> list[ManifestEntry]:
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            entries.append(ManifestEntry(
                subject_id=row["subject_id"], seed=int(row["seed"]),
                lesion_fraction=float(row["lesion_fraction"]), label=int(row["label"]),
            ))
    return entries


def severity_strata(entries: Sequence[ManifestEntry]) -> dict[str, str]:
    """Stratum key per subject: class label crossed with the quartile bin of
    the lesion fraction (the severity surrogate)."""
    fracs = np.array([e.lesion_fraction for e in entries])
    qs = np.quantile(fracs, [0.25, 0.5, 0.75])
    return {
        e.subject_id: f"{e.label:+d}|phantom|q{int(np.searchsorted(qs, e.lesion_fraction, side='right'))}"
        for e in entries
    }


# ---------------------------------------------------------------------------
# feature store


class FeatureStore:
    """Directory of per-subject feature artifacts.

    ``<sid>_cooc.npy``   (n_patches, 780) co-occurrence descriptors
    ``<sid>_sketch.npy`` (n_patches, n_channels, sketch_size) response sketches
    ``<sid>_patches.csv`` patch origins and lesion fractions
    ``store.json``       schema, channel order, shared parameters
    """

    def __init__(self, root: Path):
        self.root = Path(root)

    def write_meta(self, meta: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        dump_json(dict(meta, format_version=FORMAT_VERSION), self.root / "store.json")

    @property
    def meta(self) -> dict:
        return load_json(self.root / "store.json")

    def write_subject(
        self,
        sid: str,
        cooc: np.ndarray | None,
        sketch: np.ndarray | None,
        origins: np.ndarray,
        lesion_fractions: np.ndarray,
    ) -> None:
        if cooc is not None:
            np.save(self.root / f"{sid}_cooc.npy", np.asarray(cooc, dtype=np.float64))
        if sketch is not None:
            np.save(self.root / f"{sid}_sketch.npy", np.asarray(sketch, dtype=np.float32))
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["patch_index", "x", "y", "z", "lesion_fraction"])
        for i, (o, f) in enumerate(zip(origins, lesion_fractions)):
            writer.writerow([i, int(o[0]), int(o[1]), int(o[2]), repr(float(f))])
        (self.root / f"{sid}_patches.csv").write_text(buf.getvalue(), encoding="utf-8")

    def cooc(self, sid: str) -> np.ndarray:
        return np.load(self.root / f"{sid}_cooc.npy")

    def sketch(self, sid: str) -> np.ndarray:
        return np.load(self.root / f"{sid}_sketch.npy")

    def patch_lesion_fractions(self, sid: str) -> np.ndarray:
        with open(self.root / f"{sid}_patches.csv", newline="", encoding="utf-8") as fh:
            return np.array([float(r["lesion_fraction"]) for r in csv.DictReader(fh)])


class SketchFeatureSource:
    """Feature source whose filter-bank histograms are re-binned per fold.

    ``materialize(train_ids)`` fits decile edges on the pooled response
    sketches of the training subjects only, then rebuilds every subject's
    histogram features under those edges, so no test subject can influence
    the binning.  Co-occurrence descriptors (when the schema includes them)
    are fixed and simply concatenated in front.
    """

    def __init__(
        self,
        store: FeatureStore,
        entries: Sequence[ManifestEntry],
        schema: str,
        scales: Sequence[float],
        instance_label_threshold: float = 0.05,
    ):
        if schema not in ("gauss", "both"):
            raise ValueError("SketchFeatureSource is for schemas with filter-bank features")
        self.store = store
        self.entries = {e.subject_id: e for e in entries}
        self.schema_id = schema
        self.channels = channel_ids(scales)
        self.instance_label_threshold = instance_label_threshold
        self._strata = severity_strata(list(entries))
        self._sketches = {sid: store.sketch(sid) for sid in self.entries}
        self._cooc = (
            {sid: store.cooc(sid) for sid in self.entries} if schema == "both" else {}
        )
        self._fracs = {sid: store.patch_lesion_fractions(sid) for sid in self.entries}

    def subject_ids(self) -> list[str]:
        return sorted(self.entries)

    def label(self, sid: str) -> int:
        return self.entries[sid].label

    def strata(self) -> dict[str, str]:
        return dict(self._strata)

    def fit_bins(self, train_ids: Sequence[str]) -> BinningScheme:
        pooled = {
            ch: np.concatenate([self._sketches[sid][:, row, :].ravel() for sid in train_ids])
            for row, ch in enumerate(self.channels)
        }
        return fit_adaptive_bins(pooled, provenance=f"train-folds:{','.join(sorted(train_ids))}")

    def materialize(self, train_ids: Sequence[str]) -> MaterializedFeatures:
        bins = self.fit_bins(train_ids)
        bags = {}
        for sid, entry in self.entries.items():
            sk = self._sketches[sid]
            gauss = np.vstack([
                sketch_features(sk[p], bins, self.channels) for p in range(sk.shape[0])
            ])
            feats = gauss
            if self.schema_id == "both":
                feats = np.hstack([self._cooc[sid], gauss])
            inst_labels = np.where(
                self._fracs[sid] >= self.instance_label_threshold, 1, -1
            )
            bags[sid] = Bag(id=sid, label=entry.label, instances=feats,
                            instance_labels=inst_labels)
        return MaterializedFeatures(
            bags=bags, fitted_on=frozenset(train_ids), provenance=bins.provenance,
            bins=bins,
        )


def fixed_source_from_store(
    store: FeatureStore,
    entries: Sequence[ManifestEntry],
    instance_label_threshold: float = 0.05,
) -> FixedFeatureSource:
    """Co-occurrence-only source: features involve no data-dependent fit."""
    strata = severity_strata(list(entries))
    subjects = {}
    for e in entries:
        fracs = store.patch_lesion_fractions(e.subject_id)
        subjects[e.subject_id] = SubjectFeatures(
            features=store.cooc(e.subject_id),
            label=e.label,
            stratum=strata[e.subject_id],
            instance_labels=np.where(fracs >= instance_label_threshold, 1, -1),
        )
    return FixedFeatureSource(subjects, schema_id="cooc")


# ---------------------------------------------------------------------------
# feature matrix exports


def export_features_csv(path: Path, subject_id: str, matrix: np.ndarray) -> None:
    """One row per patch: subject_id, patch_index, then the d values."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    d = matrix.shape[1]
    writer.writerow(["subject_id", "patch_index"] + [f"f{i}" for i in range(d)])
    for i, row in enumerate(matrix):
        writer.writerow([subject_id, i] + [repr(float(v)) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def export_features_blob(path_bin: Path, path_json: Path, matrix: np.ndarray, schema_id: str) -> None:
    """Column-major float64 blob plus a JSON sidecar with the shape."""
    m = np.asarray(matrix, dtype="<f8")
    Path(path_bin).write_bytes(m.ravel(order="F").tobytes())
    dump_json({"schema_id": schema_id, "d": m.shape[1], "rows": m.shape[0],
               "order": "column-major", "dtype": "float64-le"}, Path(path_json))


def import_features_blob(path_bin: Path, path_json: Path) -> tuple[np.ndarray, str]:
    meta = load_json(path_json)
    raw = np.frombuffer(Path(path_bin).read_bytes(), dtype="<f8")
    m = raw.reshape((meta["rows"], meta["d"]), order="F").copy()
    return m, meta["schema_id"]


# ---------------------------------------------------------------------------
# model bundles


def _collect_arrays(model: MilModel) -> dict[str, np.ndarray]:
    arrays = {
        "standardization_mean": model.standardization.mean,
        "standardization_std": model.standardization.std,
    }
    if model.variant == "misvm_q":
        arrays["support_vectors"] = model.svm.support_vectors
        arrays["dual_coef"] = model.svm.dual_coef
    else:
        arrays["prototypes"] = model.prototypes
        arrays["prototype_weights"] = model.prototype_weights
        arrays["miles_weights"] = model.miles.weights
    return arrays


def save_model_bundle(
    directory: Path,
    model: MilModel,
    bins: BinningScheme | None,
    extra: dict | None = None,
) -> None:
    """Write ``model.json`` (parameters, calibration, binning edges, array
    layout) and ``model.bin`` (all arrays as little-endian float64)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = _collect_arrays(model)
    layout, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        layout.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
        offset += arr.size
    (directory / "model.bin").write_bytes(b"".join(chunks))

    kernel = {"kind": model.kernel.kind}
    if model.kernel.kind == "polynomial":
        kernel["degree"] = model.kernel.degree
    else:
        kernel["sigma"] = model.kernel.sigma
    meta = {
        "format_version": FORMAT_VERSION,
        "variant": model.variant,
        "q": model.q,
        "kernel": kernel,
        "converged": model.converged,
        "n_rounds": model.n_rounds,
        "train_subjects": sorted(model.train_subjects),
        "arrays": layout,
        "blob_file": "model.bin",
        "bins": bins.to_dict() if bins is not None else None,
        "extra": extra or {},
    }
    if model.variant == "misvm_q":
        meta["svm"] = {
            "bias": model.svm.bias, "C": model.svm.C,
            "calibration": list(model.svm.calibration),
            "kkt_residual": model.svm.kkt_residual, "n_iter": model.svm.n_iter,
        }
    else:
        meta["miles"] = {"bias": model.miles.bias, "C": model.miles.C}
    dump_json(meta, directory / "model.json")


def load_model_bundle(directory: Path) -> tuple[MilModel | float, BinningScheme | None, dict]:
    """Load a bundle; a ``constant`` bundle returns the stub posterior value
    instead of a model."""
    directory = Path(directory)
    meta = load_json(directory / "model.json")
    if meta.get("variant") == "constant":
        return float(meta["value"]), None, meta.get("extra", {})
    raw = np.frombuffer((directory / meta["blob_file"]).read_bytes(), dtype="<f8")
    arrays = {}
    for entry in meta["arrays"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arrays[entry["name"]] = raw[entry["offset"] : entry["offset"] + size].reshape(entry["shape"]).copy()
    stand = Standardization(mean=arrays["standardization_mean"],
                            std=arrays["standardization_std"])
    kmeta = meta["kernel"]
    kernel = (Kernel("polynomial", degree=int(kmeta["degree"]))
              if kmeta["kind"] == "polynomial" else Kernel("rbf", sigma=float(kmeta["sigma"])))
    if meta["variant"] == "misvm_q":
        svm = SvmModel(
            kernel=kernel, support_vectors=arrays["support_vectors"],
            dual_coef=arrays["dual_coef"], bias=meta["svm"]["bias"], C=meta["svm"]["C"],
            calibration=tuple(meta["svm"]["calibration"]),
            kkt_residual=meta["svm"]["kkt_residual"], n_iter=meta["svm"]["n_iter"],
        )
        model = MilModel(
            variant="misvm_q", q=meta["q"], kernel=kernel, standardization=stand,
            svm=svm, converged=meta["converged"], n_rounds=meta["n_rounds"],
            train_subjects=tuple(meta["train_subjects"]),
        )
    else:
        miles = L1LinearModel(weights=arrays["miles_weights"],
                              bias=meta["miles"]["bias"], C=meta["miles"]["C"])
        model = MilModel(
            variant="miles_q", q=meta["q"], kernel=kernel, standardization=stand,
            miles=miles, prototypes=arrays["prototypes"],
            prototype_weights=arrays["prototype_weights"],
            converged=meta["converged"], n_rounds=meta["n_rounds"],
            train_subjects=tuple(meta["train_subjects"]),
        )
    bins = BinningScheme.from_dict(meta["bins"]) if meta.get("bins") else None
    return model, bins, meta.get("extra", {})


def save_constant_bundle(directory: Path, value: float) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dump_json({"format_version": FORMAT_VERSION, "variant": "constant", "value": value},
              directory / "model.json")
