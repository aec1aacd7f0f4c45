"""Procrustes shape error and the removal / flip / adversarial experiment drivers.

Every driver fits the same unattacked baseline (clean ground-truth keypoints)
so percent increases are comparable across experiments. Errors are reported as
mean RMS rest-pose joint distance in cm after similarity alignment. Absolute
values live at template scale and are not comparable to full-scale published
numbers; only orderings and increases transfer, which the report footers state.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import attacks
from . import bodymodel as bm
from . import detector as det
from . import synth
from .errors import DegenerateGeometryError, FitFailureError
from .fitter import FitConfig, fit

# Restarts off: clean and attacked fits share one deterministic hypothesis, so
# differences between columns come from the attack, not the restart lottery.
# Squared loss with a weak shape prior resists the prior's pull toward the
# template hard enough that keypoints with redundant length evidence (wrists:
# the elbow still pins the arm) stay cheap to remove, while keypoints carrying
# sole evidence (hips, shoulders: widths) become expensive, which is the
# removal structure the attack studies rank.
EVAL_FIT_CONFIG = FitConfig(restarts=1, max_outer_iters=60, robust=False,
                            lambda_shape=0.05)

# For flip studies: the robust loss with a free shape vector ranks flips by
# geometric infeasibility (head-hip worst, same-side elbow-knee next, the
# left/right knee swap least) instead of by how far the squared loss drags.
FLIP_FIT_CONFIG = FitConfig(restarts=1, max_outer_iters=60, lambda_shape=0.0)

DEFAULT_CORPUS_SEED = 42
DEFAULT_SUBJECTS = 100
DEFAULT_POSES = 3

# Pair list for the flip study: cross-body identity swaps plus the
# left/right knee control, which barely moves near-symmetric poses.
DEFAULT_FLIP_PAIRS = (
    ("head_top", "right_hip"),
    ("head_top", "left_hip"),
    ("right_elbow", "right_knee"),
    ("left_elbow", "left_knee"),
    ("right_shoulder", "left_knee"),
    ("right_knee", "left_knee"),
)

_FOOTER_SCALE = (
    "absolute cm values are template-scale and depend on the synthetic corpus; "
    "only orderings and increases are meaningful across implementations"
)
_FOOTER_BASELINE = (
    "baseline is the clean ground-truth-keypoint fit, shared by all drivers"
)


def default_corpus(image_size=(96, 96), preset="calibration"):
    """The documented evaluation corpus: 100 subjects, 3 poses each, seed 42.

    Evaluation defaults to the calibration regime (close camera, mild poses)
    because that is where keypoint evidence actually pins the shape vector;
    under the standard regime the monocular fit is prior-dominated and attack
    columns collapse onto the baseline.
    """
    return synth.build_records(
        DEFAULT_CORPUS_SEED, DEFAULT_SUBJECTS, DEFAULT_POSES, image_size, preset
    )


# --------------------------------------------------------------------------
# Procrustes alignment


def _centered(points, name):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 3:
        raise ValueError(f"{name} must be (n >= 3, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{name} contains non-finite values")
    mu = pts.mean(axis=0)
    return pts - mu, mu


def _require_spread(centered, name):
    # coincident points have no scale; collinear points leave the rotation
    # about the line free, so neither admits a meaningful alignment
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[0] <= 1e-12 or svals[1] <= 1e-9 * svals[0]:
        raise DegenerateGeometryError(
            f"{name} points are coincident or collinear; alignment is undefined"
        )


def procrustes_error(fitted, truth) -> float:
    """RMS per-joint distance in cm after similarity-aligning fitted onto truth.

    Closed-form optimal rotation, uniform scale, and translation; reflections
    are excluded (rotation determinant forced to +1).
    """
    x, _ = _centered(fitted, "fitted")
    y, _ = _centered(truth, "truth")
    if x.shape[0] != y.shape[0]:
        raise ValueError(
            f"joint counts differ: {x.shape[0]} vs {y.shape[0]}"
        )
    _require_spread(x, "fitted")
    _require_spread(y, "truth")

    n = x.shape[0]
    cov = y.T @ x / n
    u, dvals, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    flip = np.ones(3)
    flip[-1] = sign if sign != 0 else 1.0
    rot = u @ np.diag(flip) @ vt
    var_x = float(np.sum(x * x)) / n
    scale = float(np.sum(dvals * flip)) / var_x
    aligned = scale * x @ rot.T
    return float(np.sqrt(np.mean(np.sum((aligned - y) ** 2, axis=1))))


def shape_error(beta_fit: bm.ShapeParams, beta_gt: bm.ShapeParams) -> float:
    """Pose-independent shape discrepancy: Procrustes RMS over rest joints."""
    fit_joints = bm.observable(bm.rest_joints(beta_fit))
    gt_joints = bm.observable(bm.rest_joints(beta_gt))
    return procrustes_error(fit_joints, gt_joints)


# --------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class ReportRow:
    """One attack family: a mean shape error per attacked target."""

    label: str
    errors_cm: tuple
    fit_failures: int = 0
    budget_mse: Optional[tuple] = None  # adversarial rows only
    budget_linf_max: Optional[tuple] = None
    attack_success: Optional[tuple] = None  # fraction of subjects, per column


@dataclass(frozen=True)
class EvalReport:
    """Attack-vs-baseline shape errors in a fixed column layout."""

    columns: tuple
    rows: tuple
    baseline_cm: float
    subject_count: int
    config_fingerprint: str
    footers: tuple = (_FOOTER_SCALE, _FOOTER_BASELINE)

    def __post_init__(self):
        for row in self.rows:
            if len(row.errors_cm) != len(self.columns):
                raise ValueError(
                    f"row {row.label!r} has {len(row.errors_cm)} entries for "
                    f"{len(self.columns)} columns"
                )

    def row(self, label: str) -> ReportRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(f"no row labelled {label!r}")

    def percent_increase(self, label: str) -> np.ndarray:
        """Per-column 100 * (err - baseline) / baseline."""
        if self.baseline_cm <= 0:
            raise ValueError("baseline error must be positive for increases")
        err = np.asarray(self.row(label).errors_cm)
        return 100.0 * (err - self.baseline_cm) / self.baseline_cm

    def average_cm(self, label: str) -> float:
        return float(np.mean(self.row(label).errors_cm))

    def mean_increase(self, label: str) -> float:
        return float(np.mean(self.percent_increase(label)))

    def csv_text(self) -> str:
        head = ["attack"] + list(self.columns) + ["average", "baseline"]
        lines = [",".join(head)]
        for row in self.rows:
            cells = [row.label]
            cells += [_fmt(v) for v in row.errors_cm]
            cells += [_fmt(self.average_cm(row.label)), _fmt(self.baseline_cm)]
            lines.append(",".join(cells))
        lines.append(f"# subjects: {self.subject_count}")
        lines.append(f"# fingerprint: {self.config_fingerprint}")
        for note in self.footers:
            lines.append(f"# {note}")
        return "\n".join(lines) + "\n"

    def json_text(self) -> str:
        payload = {
            "columns": list(self.columns),
            "baseline_cm": self.baseline_cm,
            "subject_count": self.subject_count,
            "config_fingerprint": self.config_fingerprint,
            "rows": [],
            "footers": list(self.footers),
        }
        for row in self.rows:
            entry = {
                "label": row.label,
                "errors_cm": list(row.errors_cm),
                "average_cm": self.average_cm(row.label),
                "percent_increase": list(self.percent_increase(row.label)),
                "mean_increase": self.mean_increase(row.label),
                "fit_failures": row.fit_failures,
            }
            if row.budget_mse is not None:
                entry["budget_mse"] = list(row.budget_mse)
            if row.budget_linf_max is not None:
                entry["budget_linf_max"] = list(row.budget_linf_max)
            if row.attack_success is not None:
                entry["attack_success"] = list(row.attack_success)
            payload["rows"].append(entry)
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _fmt(value: float) -> str:
    return format(float(value), ".9g")


def merge_reports(reports) -> EvalReport:
    """Stack rows of reports that share columns, baseline, and corpus."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to merge")
    first = reports[0]
    rows = []
    for rep in reports:
        if rep.columns != first.columns:
            raise ValueError("reports have different column layouts")
        if rep.baseline_cm != first.baseline_cm:
            raise ValueError("reports have different baselines")
        if rep.subject_count != first.subject_count:
            raise ValueError("reports cover different corpora")
        rows.extend(rep.rows)
    digest = hashlib.sha256(
        "|".join(rep.config_fingerprint for rep in reports).encode()
    ).hexdigest()[:16]
    footers = []
    for rep in reports:
        for note in rep.footers:
            if note not in footers:
                footers.append(note)
    return EvalReport(first.columns, tuple(rows), first.baseline_cm,
                      first.subject_count, digest, tuple(footers))


# --------------------------------------------------------------------------
# Shared driver plumbing


def _fingerprint(corpus, fit_config: FitConfig, extra: str = "") -> str:
    h = hashlib.sha256()
    h.update(synth.manifest_text(corpus).encode())
    h.update(repr(dataclasses.astuple(fit_config)).encode())
    h.update(extra.encode())
    return h.hexdigest()[:16]


def _fit_error(keypoints, camera, beta_gt, fit_config) -> Optional[float]:
    try:
        result = fit(keypoints, camera, fit_config)
    except FitFailureError:
        return None
    return shape_error(result.params.shape, beta_gt)


def baseline_errors(corpus, fit_config: FitConfig = EVAL_FIT_CONFIG):
    """Per-record shape error of the unattacked ground-truth-keypoint fit."""
    return [
        _fit_error(rec.keypoints, rec.subject.camera, rec.subject.beta_gt,
                   fit_config)
        for rec in corpus
    ]


def _mean(values) -> float:
    kept = [v for v in values if v is not None]
    if not kept:
        raise FitFailureError("every fit in a report cell failed")
    return float(np.mean(kept))


def _removed(keypoints: bm.KeypointSet, index: int) -> bm.KeypointSet:
    # a miss-detection: weight zero and not detected
    conf = keypoints.confidence.copy()
    detected = keypoints.detected.copy()
    conf[index] = 0.0
    detected[index] = False
    return bm.KeypointSet(keypoints.locations.copy(), conf, detected)


def _flipped(keypoints: bm.KeypointSet, i: int, j: int) -> bm.KeypointSet:
    loc = keypoints.locations.copy()
    loc[[i, j]] = loc[[j, i]]
    return bm.KeypointSet(loc, keypoints.confidence.copy(),
                          keypoints.detected.copy())


# --------------------------------------------------------------------------
# Experiment drivers


def run_synthetic_removal(corpus,
                          fit_config: FitConfig = EVAL_FIT_CONFIG) -> EvalReport:
    """Drop each keypoint in turn from clean GT detections and refit."""
    corpus = list(corpus)
    base = baseline_errors(corpus, fit_config)
    errors, failures = [], 0
    for k in range(bm.NUM_KEYPOINTS):
        cell = []
        for rec in corpus:
            e = _fit_error(_removed(rec.keypoints, k), rec.subject.camera,
                           rec.subject.beta_gt, fit_config)
            cell.append(e)
            failures += e is None
        errors.append(_mean(cell))
    row = ReportRow("synthetic", tuple(errors), failures)
    return EvalReport(
        tuple(bm.KEYPOINT_NAMES), (row,), _mean(base), len(corpus),
        _fingerprint(corpus, fit_config, "removal"),
    )


def _pair_indices(pairs):
    out = []
    for a, b in pairs:
        i = a if isinstance(a, int) else bm.KEYPOINT_INDEX[a]
        j = b if isinstance(b, int) else bm.KEYPOINT_INDEX[b]
        for k in (i, j):
            if not 0 <= k < bm.NUM_KEYPOINTS:
                raise ValueError(f"keypoint index {k} out of range")
        if i == j:
            raise ValueError("cannot flip a keypoint with itself")
        out.append((i, j))
    if not out:
        raise ValueError("pair list is empty")
    return out


def pair_label(i: int, j: int) -> str:
    return f"{bm.KEYPOINT_NAMES[i]}-{bm.KEYPOINT_NAMES[j]}"


def run_synthetic_flip(corpus, fit_config: FitConfig = EVAL_FIT_CONFIG,
                       pairs=DEFAULT_FLIP_PAIRS) -> EvalReport:
    """Swap each keypoint pair's GT locations and refit."""
    corpus = list(corpus)
    indices = _pair_indices(pairs)
    base = baseline_errors(corpus, fit_config)
    errors, failures = [], 0
    for i, j in indices:
        cell = []
        for rec in corpus:
            e = _fit_error(_flipped(rec.keypoints, i, j), rec.subject.camera,
                           rec.subject.beta_gt, fit_config)
            cell.append(e)
            failures += e is None
        errors.append(_mean(cell))
    row = ReportRow("synthetic", tuple(errors), failures)
    columns = tuple(pair_label(i, j) for i, j in indices)
    return EvalReport(
        columns, (row,), _mean(base), len(corpus),
        _fingerprint(corpus, fit_config, f"flip:{columns}"),
    )


def _spec_label(spec: attacks.AttackSpec) -> str:
    if spec.kind == "remove":
        return bm.KEYPOINT_NAMES[spec.index]
    return pair_label(spec.index, spec.other)


def _spec_keypoints(keypoints: bm.KeypointSet, spec: attacks.AttackSpec):
    if spec.kind == "remove":
        return _removed(keypoints, spec.index)
    return _flipped(keypoints, spec.index, spec.other)


def run_synthetic_for_specs(corpus, attack_specs,
                            fit_config: FitConfig = EVAL_FIT_CONFIG) -> EvalReport:
    """The synthetic analogue of each attack spec, column for column.

    Applies the spec's effect directly to the ground-truth keypoints (drop for
    remove, swap for flip) so the resulting row merges with a run_adversarial
    report into one table comparing oracle tampering against pixel attacks.
    """
    corpus = list(corpus)
    specs = list(attack_specs)
    if not specs:
        raise ValueError("no attack specs given")
    base = baseline_errors(corpus, fit_config)
    errors, failures = [], 0
    for spec in specs:
        cell = []
        for rec in corpus:
            e = _fit_error(_spec_keypoints(rec.keypoints, spec),
                           rec.subject.camera, rec.subject.beta_gt, fit_config)
            cell.append(e)
            failures += e is None
        errors.append(_mean(cell))
    row = ReportRow("synthetic", tuple(errors), failures)
    columns = tuple(_spec_label(s) for s in specs)
    return EvalReport(
        columns, (row,), _mean(base), len(corpus),
        _fingerprint(corpus, fit_config, f"spec-synthetic:{columns}"),
    )


def run_adversarial(corpus, weights: det.DetectorWeights, attack_specs,
                    fit_config: FitConfig = EVAL_FIT_CONFIG) -> EvalReport:
    """Full pipeline per record: render, attack the image, detect, refit.

    One column per attack spec; budgets and success rates ride along so the
    report can show what each attack cost in perturbation terms.
    """
    corpus = list(corpus)
    specs = list(attack_specs)
    if not specs:
        raise ValueError("no attack specs given")
    base = baseline_errors(corpus, fit_config)

    errors, mses, linfs, success = [], [], [], []
    failures = 0
    for spec in specs:
        cell, cell_mse, cell_linf, cell_ok = [], [], [], []
        for rec in corpus:
            image, _ = synth.render(rec.subject)
            result = attacks.run_attack(image, weights, spec)
            adv_kps = det.nms_keypoints(det.forward(result.adversarial, weights))
            e = _fit_error(adv_kps, rec.subject.camera, rec.subject.beta_gt,
                           fit_config)
            cell.append(e)
            failures += e is None
            cell_mse.append(result.final_stats.mse)
            cell_linf.append(result.final_stats.linf)
            cell_ok.append(result.success)
        errors.append(_mean(cell))
        mses.append(float(np.mean(cell_mse)))
        linfs.append(float(np.max(cell_linf)))
        success.append(float(np.mean(cell_ok)))
    row = ReportRow("adversarial", tuple(errors), failures,
                    budget_mse=tuple(mses), budget_linf_max=tuple(linfs),
                    attack_success=tuple(success))
    columns = tuple(_spec_label(s) for s in specs)
    return EvalReport(
        columns, (row,), _mean(base), len(corpus),
        _fingerprint(corpus, fit_config, f"adversarial:{columns}"),
    )
