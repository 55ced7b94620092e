"""Pure-Python/numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` must agree with them.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def window_stats(values, win, bin_width):
    """Per sliding window: densest-bin mass fraction and population std.

    The densest bin is the half-open interval ``[v, v + bin_width)`` anchored
    at a member sample ``v`` that holds the most members.
    """
    x = np.ascontiguousarray(values, dtype=np.float64)
    n = x.shape[0]
    if win < 1 or n < win:
        return np.zeros(0), np.zeros(0)
    w = np.sort(sliding_window_view(x, win), axis=1)
    counts = np.empty(w.shape[0], dtype=np.int64)
    # chunked to bound the (n_windows, win, win) temporary
    step = max(1, 200_000 // (win * win))
    for lo in range(0, w.shape[0], step):
        blk = w[lo:lo + step]
        inside = blk[:, None, :] < (blk[:, :, None] + bin_width)
        ge = blk[:, None, :] >= blk[:, :, None]
        counts[lo:lo + step] = (inside & ge).sum(axis=2).max(axis=1)
    mean = w.mean(axis=1)
    std = np.sqrt(((w - mean[:, None]) ** 2).mean(axis=1))
    return counts / float(win), std


def draw_line(canvas, r0, c0, r1, c1, color):
    """Bresenham line into an (H, W, 3) float canvas; off-frame pixels skipped."""
    h, w = canvas.shape[0], canvas.shape[1]
    r0, c0, r1, c1 = int(r0), int(c0), int(r1), int(c1)
    dr = abs(r1 - r0)
    dc = abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        if 0 <= r < h and 0 <= c < w:
            canvas[r, c, 0] = color[0]
            canvas[r, c, 1] = color[1]
            canvas[r, c, 2] = color[2]
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def max_concurrency(starts, ends):
    """Maximum number of simultaneously open half-open intervals [s, e)."""
    events = [(float(e), 0) for e in ends] + [(float(s), 1) for s in starts]
    # at equal times closings (0) sort before openings (1)
    events.sort()
    open_now = 0
    best = 0
    for _, kind in events:
        if kind:
            open_now += 1
            if open_now > best:
                best = open_now
        else:
            open_now -= 1
    return best
