"""Instance segmentation scoring.

Average precision follows a greedy matching protocol: predictions are
ranked by descending confidence (ties by scene index, then by instance
order), each is matched to the unmatched same-class same-scene truth of
maximum IoU when that IoU clears the threshold, and the area under the
raw precision-recall steps is accumulated without interpolation. The
headline number averages over IoU thresholds 0.50:0.05:0.95, then over
classes; AP at 0.50 alone is reported separately.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .clustering import ClusterResult, cluster_with_oracle_centers
from .geometry import margin_of
from .labels import InstanceLabelMap

DEFAULT_IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class MatchSpec:
    iou_thresholds: tuple = DEFAULT_IOU_THRESHOLDS

    def __post_init__(self):
        ts = tuple(float(t) for t in self.iou_thresholds)
        object.__setattr__(self, "iou_thresholds", ts)
        if not ts:
            raise ValueError("need at least one IoU threshold")
        if any(not (0.0 < t < 1.0) for t in ts):
            raise ValueError(f"thresholds must lie in (0, 1), got {ts}")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"thresholds must be strictly increasing, got {ts}")


@dataclass
class EvalReport:
    ap: float
    ap50: float
    per_class: dict = field(default_factory=dict)
    per_class_ap50: dict = field(default_factory=dict)
    n_truths: int = 0
    n_predictions: int = 0
    classes_evaluated: tuple = ()

    def as_record(self) -> dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "n_truths": self.n_truths,
            "n_predictions": self.n_predictions,
        }


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = int(np.logical_and(a, b).sum())
    if inter == 0:
        return 0.0
    union = int(a.sum()) + int(b.sum()) - inter
    return inter / union


def instance_extent(mask: np.ndarray) -> int:
    """Long side of the mask's bounding box, in pixels (0 for empty)."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return 0
    return int(max(rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1))


def _step_area(tp_flags: list, n_truth: int) -> float:
    if n_truth == 0:
        return 0.0
    tp = fp = 0
    area = 0.0
    prev_recall = 0.0
    for is_tp in tp_flags:
        if is_tp:
            tp += 1
        else:
            fp += 1
        recall = tp / n_truth
        area += (tp / (tp + fp)) * (recall - prev_recall)
        prev_recall = recall
    return area


def _ap_from_entries(pred_scenes: list, truth_scenes: list, spec: MatchSpec):
    """pred_scenes[s] = [(class_id, confidence, mask), ...] in instance order;
    truth_scenes[s] = [(class_id, mask), ...]."""
    classes = sorted(
        {c for scene in truth_scenes for c, _ in scene}
        | {c for scene in pred_scenes for c, _, _ in scene}
    )
    per_class = {}
    per_class_50 = {}
    for cls in classes:
        ranked = sorted(
            (
                (-conf, s, i, mask)
                for s, scene in enumerate(pred_scenes)
                for i, (c, conf, mask) in enumerate(scene)
                if c == cls
            ),
            key=lambda e: e[:3],
        )
        truths = [
            [(s, j, mask) for j, (c, mask) in enumerate(scene) if c == cls]
            for s, scene in enumerate(truth_scenes)
        ]
        n_truth = sum(len(t) for t in truths)
        # IoU of each ranked prediction against every same-scene truth.
        ious = []
        for _, s, _, mask in ranked:
            ious.append([(j, _mask_iou(mask, tmask)) for _, j, tmask in truths[s]])
        ap_at = {}
        for t in spec.iou_thresholds:
            matched = set()
            flags = []
            for (_, s, _, _), cand in zip(ranked, ious):
                best_j, best_iou = -1, 0.0
                for j, iou in cand:
                    if (s, j) in matched:
                        continue
                    if iou > best_iou:
                        best_j, best_iou = j, iou
                if best_j >= 0 and best_iou >= t:
                    matched.add((s, best_j))
                    flags.append(True)
                else:
                    flags.append(False)
            ap_at[t] = _step_area(flags, n_truth)
        per_class[cls] = sum(ap_at.values()) / len(ap_at)
        per_class_50[cls] = ap_at.get(0.5, ap_at[min(ap_at)])
    n_preds = sum(len(scene) for scene in pred_scenes)
    n_truths = sum(len(scene) for scene in truth_scenes)
    return per_class, per_class_50, n_truths, n_preds, tuple(classes)


def _report(per_class, per_class_50, n_truths, n_preds, classes) -> EvalReport:
    if classes:
        ap = sum(per_class.values()) / len(classes)
        ap50 = sum(per_class_50.values()) / len(classes)
    else:
        ap = ap50 = 0.0
    return EvalReport(
        ap=ap,
        ap50=ap50,
        per_class=per_class,
        per_class_ap50=per_class_50,
        n_truths=n_truths,
        n_predictions=n_preds,
        classes_evaluated=classes,
    )


def average_precision(predictions: list, truths: list,
                      spec: MatchSpec = None) -> EvalReport:
    """Score ClusterResults against InstanceLabelMaps, scene-aligned.

    Classes with neither truths nor predictions anywhere are excluded
    from the mean; a class with only one side present scores 0 for it.
    """
    spec = spec or MatchSpec()
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} prediction scenes vs {len(truths)} truth scenes")
    pred_scenes = [
        [(inst.class_id, float(inst.confidence), inst.mask) for inst in result.instances]
        for result in predictions
    ]
    truth_scenes = [
        [(labels.class_of[k], labels.ids == k) for k in range(1, labels.num_instances + 1)]
        for labels in truths
    ]
    return _report(*_ap_from_entries(pred_scenes, truth_scenes, spec))


def ap_gt(outputs: list, truths: list, spec: MatchSpec = None,
          fixed_sigma: float = None, size_range: tuple = None,
          size_measure: str = "pixels") -> EvalReport:
    """AP with oracle centers: clusters every output via
    cluster_with_oracle_centers and scores the result, so the number
    isolates embedding and bandwidth quality from seed quality.

    size_range = (lo, hi) keeps only truths whose size n satisfies
    lo <= n < hi (either bound may be None) along with the clusters those
    truths produced. size_measure picks what n is: "pixels" for area,
    "extent" for the bounding-box long side (elongated shapes have small
    areas but large extents, which is what a radial margin has to cover).
    """
    spec = spec or MatchSpec()
    if len(outputs) != len(truths):
        raise ValueError(f"{len(outputs)} outputs vs {len(truths)} truth scenes")
    if size_measure not in ("pixels", "extent"):
        raise ValueError(f"size_measure must be 'pixels' or 'extent', got {size_measure!r}")
    lo, hi = size_range if size_range is not None else (None, None)

    def in_range(n: int) -> bool:
        return (lo is None or n >= lo) and (hi is None or n < hi)

    pred_scenes = []
    truth_scenes = []
    for output, labels in zip(outputs, truths):
        result = cluster_with_oracle_centers(output, labels, fixed_sigma=fixed_sigma)
        if size_measure == "pixels":
            size_of = labels.pixel_count
        else:
            size_of = lambda k: instance_extent(labels.ids == k)
        keep = {
            k for k in range(1, labels.num_instances + 1)
            if in_range(size_of(k))
        }
        pred_scenes.append([
            (inst.class_id, float(inst.confidence), inst.mask)
            for inst in result.instances
            if inst.source_id in keep
        ])
        truth_scenes.append([
            (labels.class_of[k], labels.ids == k)
            for k in range(1, labels.num_instances + 1)
            if k in keep
        ])
    return _report(*_ap_from_entries(pred_scenes, truth_scenes, spec))


@dataclass
class MarginSizeReport:
    # (pixel count, margin in pixels) per ground-truth instance
    pairs: list
    spearman: float


def margin_size_correlation(outputs: list, truths: list) -> MarginSizeReport:
    """Rank correlation between instance size and learned margin.

    For each true instance the margin is computed from the mean sigma over
    the instance's pixels (geometric mean across sigma channels) and
    converted to pixels. Requires at least 3 instances; a constant margin
    or size column yields correlation 0 by convention.
    """
    if len(outputs) != len(truths):
        raise ValueError(f"{len(outputs)} outputs vs {len(truths)} truth scenes")
    pairs = []
    for output, labels in zip(outputs, truths):
        sigma = output.sigma.detach().cpu().numpy().astype(np.float64) \
            if not isinstance(output, dict) else np.asarray(output["sigma"], dtype=np.float64)
        h = labels.shape[0]
        for k in range(1, labels.num_instances + 1):
            mask = labels.ids == k
            mean_sigma = sigma[:, mask].mean(axis=1)
            margin_px = float(np.exp(np.log(margin_of(mean_sigma)).mean()) * h)
            pairs.append((int(mask.sum()), margin_px))
    if len(pairs) < 3:
        raise ValueError(f"need at least 3 instances for a rank correlation, got {len(pairs)}")
    sizes = np.array([p[0] for p in pairs], dtype=np.float64)
    margins = np.array([p[1] for p in pairs], dtype=np.float64)

    def near_constant(v):
        # mean-reduction noise on identical values must not be ranked
        return np.ptp(v) <= 1e-9 * max(1.0, float(np.abs(v).max()))

    if near_constant(sizes) or near_constant(margins):
        rho = 0.0
    else:
        rho = float(stats.spearmanr(sizes, margins).statistic)
        if not np.isfinite(rho):
            rho = 0.0
    return MarginSizeReport(pairs=pairs, spearman=rho)


def save_margin_size_csv(path, pairs: list) -> None:
    lines = ["pixel_count,margin_px"]
    lines += [f"{int(n)},{m:.6f}" for n, m in pairs]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
