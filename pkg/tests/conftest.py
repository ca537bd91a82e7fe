"""Shared test helpers."""

from collections import defaultdict

import numpy as np
import pytest


def balanced(mesh) -> bool:
    """2:1 balance oracle: exhaustive neighbor-level scan via edge sweeps.

    Cells sharing a vertical (resp. horizontal) edge line are paired by
    interval overlap along the line, so every edge-adjacent pair is
    visited exactly once without the quadratic all-pairs loop.
    """
    hmin = mesh.h_min

    def key(v):
        return int(round(v / hmin))

    for axis in (0, 1):
        other = 1 - axis
        lines = defaultdict(lambda: ([], []))  # line coord -> (low side, high side)
        for c in range(mesh.n_cells):
            lo = mesh.cell_origin[c]
            h = mesh.cell_size[c]
            lines[key(lo[axis] + h)][0].append(c)   # cell's high edge on this line
            lines[key(lo[axis])][1].append(c)       # cell's low edge on this line
        for _, (lows, highs) in lines.items():
            lows.sort(key=lambda c: mesh.cell_origin[c][other])
            highs.sort(key=lambda c: mesh.cell_origin[c][other])
            i = j = 0
            while i < len(lows) and j < len(highs):
                a, b = lows[i], highs[j]
                a0 = mesh.cell_origin[a][other]
                a1 = a0 + mesh.cell_size[a]
                b0 = mesh.cell_origin[b][other]
                b1 = b0 + mesh.cell_size[b]
                if min(a1, b1) - max(a0, b0) > 1e-12:  # shared edge segment
                    if abs(int(mesh.cell_level[a]) - int(mesh.cell_level[b])) > 1:
                        return False
                if a1 <= b1 + 1e-12:
                    i += 1
                else:
                    j += 1
    return True


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
