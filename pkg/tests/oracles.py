"""Independent reference implementations used to verify the package.

Everything here is written naively: explicit loops, python sets, and
direct transcriptions of the defining formulas, with no code shared with
the package internals beyond elementary numpy scalar math.
"""

import numpy as np


def lovasz_extension_bruteforce(scores, truth) -> float:
    """Lovasz extension of the Jaccard loss evaluated from its definition.

    Sort hinge errors in decreasing order (ties by original index), then
    accumulate relu(error_p) * (J(S_{p+1}) - J(S_p)) where S_p is the set
    of the first p sorted positions and J(S) = 1 - |FG \\ S| / |FG u S|.
    """
    scores = [float(s) for s in scores]
    truth = [int(t) for t in truth]
    n = len(scores)
    assert n == len(truth) and n > 0
    errors = [1.0 - scores[i] * (2.0 * truth[i] - 1.0) for i in range(n)]
    order = sorted(range(n), key=lambda i: (-errors[i], i))
    fg = {i for i in range(n) if truth[i] == 1}

    def jaccard_loss(prefix: set) -> float:
        missed = len(fg - prefix)
        union = len(fg | prefix)
        if union == 0:
            return 0.0
        return 1.0 - missed / union

    total = 0.0
    prefix = set()
    prev = jaccard_loss(prefix)
    for p in range(n):
        prefix.add(order[p])
        current = jaccard_loss(prefix)
        total += max(errors[order[p]], 0.0) * (current - prev)
        prev = current
    return total


def _phi_scalar(ex, ey, cx, cy, sig) -> float:
    """Gaussian assignment at one pixel; sig has 1 or 2 entries."""
    sx = float(sig[0])
    sy = float(sig[-1])
    q = (ex - cx) ** 2 / (2.0 * sx ** 2) + (ey - cy) ** 2 / (2.0 * sy ** 2)
    return float(np.exp(-q))


def reference_sequential_cluster(embeddings, sigma, seeds, fg_threshold=0.5,
                                 seed_threshold=0.5, min_pixels=16,
                                 phi_threshold=0.5):
    """Seed-driven clustering with explicit per-pixel loops and sets.

    Returns a list of dicts: {class_id, confidence, center, sigma, pixels}
    where pixels is a frozenset of (r, c), in creation order.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    seeds = np.asarray(seeds, dtype=np.float64)
    h, w = embeddings.shape[1:]
    clusters = []
    for class_id in range(seeds.shape[0]):
        available = {(r, c) for r in range(h) for c in range(w)
                     if seeds[class_id, r, c] > fg_threshold}
        while available:
            best = None
            best_val = None
            for r in range(h):
                for c in range(w):
                    if (r, c) not in available:
                        continue
                    v = seeds[class_id, r, c]
                    if best_val is None or v > best_val:
                        best, best_val = (r, c), v
            if not best_val > seed_threshold:
                break
            r0, c0 = best
            cx, cy = embeddings[0, r0, c0], embeddings[1, r0, c0]
            sig = [sigma[s, r0, c0] for s in range(sigma.shape[0])]
            if any(not np.isfinite(s) for s in sig) or any(s <= 0 for s in sig):
                available.discard(best)
                continue
            members = set()
            for (r, c) in available:
                phi = _phi_scalar(embeddings[0, r, c], embeddings[1, r, c],
                                  cx, cy, sig)
                if phi > phi_threshold:
                    members.add((r, c))
            members.add(best)
            available -= members
            if len(members) < min_pixels:
                continue
            clusters.append({
                "class_id": class_id,
                "confidence": float(best_val),
                "center": (float(cx), float(cy)),
                "sigma": tuple(float(s) for s in sig),
                "pixels": frozenset(members),
            })
    return clusters


def reference_flatten(clusters, shape):
    """Overlap resolution: higher confidence wins, ties to lower id."""
    h, w = shape
    out = [[0] * w for _ in range(h)]
    conf = [[None] * w for _ in range(h)]
    for idx, cl in enumerate(clusters, start=1):
        for (r, c) in cl["pixels"]:
            if conf[r][c] is None or cl["confidence"] > conf[r][c]:
                out[r][c] = idx
                conf[r][c] = cl["confidence"]
    return np.array(out, dtype=np.int32)


def reference_oracle_cluster(embeddings, sigma, label_ids, class_of,
                             fixed_sigma=None):
    """Ground-truth-center clustering with per-pixel loops.

    Returns (instance_map, instances) where instances is a list of dicts
    {source_id, class_id, pixels}; contested pixels go to the higher phi,
    exact ties to the earlier instance.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    label_ids = np.asarray(label_ids)
    h, w = label_ids.shape
    ks = sorted(class_of)
    params = {}
    for k in ks:
        pts = [(r, c) for r in range(h) for c in range(w) if label_ids[r, c] == k]
        cx = np.mean([embeddings[0, r, c] for r, c in pts])
        cy = np.mean([embeddings[1, r, c] for r, c in pts])
        if fixed_sigma is not None:
            sig = [float(fixed_sigma)] * sigma.shape[0]
        else:
            sig = [np.mean([sigma[s, r, c] for r, c in pts])
                   for s in range(sigma.shape[0])]
        params[k] = ((cx, cy), sig)
    assign = {}
    for r in range(h):
        for c in range(w):
            best_k, best_phi = 0, 0.5
            for k in ks:
                (cx, cy), sig = params[k]
                phi = _phi_scalar(embeddings[0, r, c], embeddings[1, r, c],
                                  cx, cy, sig)
                if phi > best_phi:
                    best_k, best_phi = k, phi
            if best_k:
                assign[(r, c)] = best_k
    instance_map = np.zeros((h, w), dtype=np.int32)
    instances = []
    for k in ks:
        pixels = frozenset(p for p, kk in assign.items() if kk == k)
        if not pixels:
            continue
        new_id = len(instances) + 1
        instances.append({
            "source_id": k,
            "class_id": class_of[k],
            "pixels": pixels,
        })
        for (r, c) in pixels:
            instance_map[r, c] = new_id
    return instance_map, instances


def reference_nearest_centroid(embeddings, centers):
    embeddings = np.asarray(embeddings, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    h, w = embeddings.shape[1:]
    out = np.zeros((h, w), dtype=np.int32)
    for r in range(h):
        for c in range(w):
            best_i, best_d = None, None
            for i in range(centers.shape[0]):
                d = (embeddings[0, r, c] - centers[i, 0]) ** 2 \
                    + (embeddings[1, r, c] - centers[i, 1]) ** 2
                if best_d is None or d < best_d:
                    best_i, best_d = i, d
            out[r, c] = best_i + 1
    return out


def reference_fixed_margin(embeddings, centers, delta):
    embeddings = np.asarray(embeddings, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    h, w = embeddings.shape[1:]
    out = np.zeros((h, w), dtype=np.int32)
    for r in range(h):
        for c in range(w):
            best_i, best_d = None, None
            for i in range(centers.shape[0]):
                d = np.sqrt((embeddings[0, r, c] - centers[i, 0]) ** 2
                            + (embeddings[1, r, c] - centers[i, 1]) ** 2)
                if best_d is None or d < best_d:
                    best_i, best_d = i, d
            if best_d < delta:
                out[r, c] = best_i + 1
    return out


def _iou_sets(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def reference_average_precision(pred_scenes, truth_scenes, thresholds):
    """AP with explicit loops over python sets.

    pred_scenes[s] = [(class_id, confidence, pixelset), ...],
    truth_scenes[s] = [(class_id, pixelset), ...].
    Returns (mean_ap, ap50, per_class dict).
    """
    classes = sorted({c for sc in truth_scenes for c, _ in sc}
                     | {c for sc in pred_scenes for c, _, _ in sc})
    per_class = {}
    per_class_50 = {}
    for cls in classes:
        preds = []
        for s, scene in enumerate(pred_scenes):
            for i, (c, conf, pixels) in enumerate(scene):
                if c == cls:
                    preds.append((s, i, conf, pixels))
        preds.sort(key=lambda p: (-p[2], p[0], p[1]))
        truth_index = {}
        n_truth = 0
        for s, scene in enumerate(truth_scenes):
            truth_index[s] = [(j, pixels) for j, (c, pixels) in enumerate(scene)
                              if c == cls]
            n_truth += len(truth_index[s])
        ap_sum = 0.0
        ap_50 = 0.0
        for t in thresholds:
            used = set()
            tps = []
            for (s, i, conf, pixels) in preds:
                best_j, best_iou = None, 0.0
                for (j, tp) in truth_index[s]:
                    if (s, j) in used:
                        continue
                    iou = _iou_sets(pixels, tp)
                    if iou > best_iou:
                        best_j, best_iou = j, iou
                if best_j is not None and best_iou >= t:
                    used.add((s, best_j))
                    tps.append(True)
                else:
                    tps.append(False)
            if n_truth == 0:
                ap_t = 0.0
            else:
                ap_t = 0.0
                tp_count = 0
                prev_recall = 0.0
                for rank, is_tp in enumerate(tps, start=1):
                    if is_tp:
                        tp_count += 1
                        recall = tp_count / n_truth
                        ap_t += (tp_count / rank) * (recall - prev_recall)
                        prev_recall = recall
            ap_sum += ap_t
            if t == 0.5:
                ap_50 = ap_t
        per_class[cls] = ap_sum / len(thresholds)
        per_class_50[cls] = ap_50
    if not classes:
        return 0.0, 0.0, {}
    mean_ap = sum(per_class.values()) / len(classes)
    mean_50 = sum(per_class_50.values()) / len(classes)
    return mean_ap, mean_50, per_class
