"""Stand-alone log-average miss rate, written with plain loops and no
package imports so it can serve as an independent reference.

Every distinct score is tried as a threshold; for each one the detections at
or above it are matched from scratch, giving one (fppi, miss) point.
"""
import json
import math


def _area(b):
    return max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])


def _inter(a, b):
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return w * h if w > 0 and h > 0 else 0.0


def _corners(xywh):
    x, y, w, h = xywh
    return (x, y, x + w, y + h)


def load(ann_path, det_path, min_height=50.0, max_occ=0.35):
    with open(ann_path) as fh:
        doc = json.load(fh)
    images = {}
    for im in doc["images"]:
        gts = []
        for ob in im.get("objects", []):
            full, vis = _corners(ob["bbox"]), _corners(ob["vis_bbox"])
            occ = 1.0 - _area(vis) / _area(full)
            care = not ob.get("ignore", 0) and full[3] - full[1] >= min_height and occ <= max_occ
            gts.append((full, not care))
        images[str(im["id"])] = (gts, [])
    with open(det_path) as fh:
        for line in fh.read().splitlines()[1:]:
            if line.strip():
                i, x, y, w, h, s = line.split(",")
                images[i][1].append((_corners((float(x), float(y), float(w), float(h))), float(s)))
    return images


def _match(gts, dets, thr=0.5):
    """Return (#fp, #matched care gts) for one image."""
    order = sorted(range(len(dets)), key=lambda k: (-dets[k][1], k))
    used = [False] * len(gts)
    fp = tp = 0
    for k in order:
        box = dets[k][0]
        best, best_iou = -1, thr
        for g, (gbox, ign) in enumerate(gts):
            if ign or used[g]:
                continue
            inter = _inter(box, gbox)
            iou = inter / (_area(box) + _area(gbox) - inter)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = g, iou
        if best >= 0:
            used[best] = True
            tp += 1
            continue
        if any(ign and _area(box) > 0 and _inter(box, gbox) / _area(box) >= thr for gbox, ign in gts):
            continue
        fp += 1
    return fp, tp


def curve_points(images):
    n_img = len(images)
    n_gt = sum(1 for gts, _ in images.values() for _, ign in gts if not ign)
    scores = sorted({s for _, dets in images.values() for _, s in dets}, reverse=True)
    points = [(0.0, 1.0)]
    for t in scores:
        fp = tp = 0
        for gts, dets in images.values():
            f, m = _match(gts, [d for d in dets if d[1] >= t])
            fp += f
            tp += m
        points.append((fp / n_img, 1.0 - tp / n_gt))
    return points


def log_average_miss_rate(images, n=9, lo=1e-2, hi=1.0):
    points = curve_points(images)
    samples = []
    for k in range(n):
        ref = 10 ** (math.log10(lo) + k * (math.log10(hi) - math.log10(lo)) / (n - 1))
        ok = [m for f, m in points if f <= ref]
        samples.append(min(ok) if ok else 1.0)
    if min(samples) <= 0:
        return 0.0
    return 100.0 * math.exp(sum(math.log(s) for s in samples) / n)
