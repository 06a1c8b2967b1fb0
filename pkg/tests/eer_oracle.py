"""Brute-force threshold sweep used to bracket the interpolated EER."""


def sweep(genuine, impostor):
    """(FAR, FRR) in percent at every distinct score and above all scores, ascending."""
    thresholds = sorted(set(genuine) | set(impostor)) + [float("inf")]
    out = []
    for t in thresholds:
        far = 100.0 * sum(1 for s in impostor if s < t) / len(impostor)
        frr = 100.0 * sum(1 for s in genuine if s >= t) / len(genuine)
        out.append((far, frr))
    return out


def bracket(genuine, impostor):
    """Interval any FAR = FRR crossing value must fall in.

    At the first threshold where FAR >= FRR and its predecessor, FAR and
    FRR pass each other; the crossing lies between the smaller and larger
    of the four rates there.
    """
    pts = sweep(genuine, impostor)
    for k, (far, frr) in enumerate(pts):
        if far >= frr:
            if far == frr:
                return far, far
            pf, pr = pts[k - 1]
            return max(pf, frr), min(far, pr)
    raise AssertionError("sweep never crosses")
