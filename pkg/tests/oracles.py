"""Reference implementations shared by several test files."""
import math


def scalar_metric_oracle(pred, gt, cap=10.0, d_min=0.1):
    """Plain per-pixel loops, no numpy reductions."""
    n = 0
    abs_rel = sq = lg = 0.0
    hits = [0, 0, 0]
    for p, d in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if not 0.0 < d <= cap:
            continue
        p = min(max(p, d_min), cap)
        n += 1
        abs_rel += abs(p - d) / d
        sq += (p - d) ** 2
        lg += abs(math.log10(p) - math.log10(d))
        r = max(p / d, d / p)
        for i in range(3):
            hits[i] += r < 1.25 ** (i + 1)
    return abs_rel / n, math.sqrt(sq / n), lg / n, hits[0] / n, hits[1] / n, hits[2] / n
