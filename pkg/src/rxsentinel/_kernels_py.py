"""Pure-numpy fallback for the isolation-tree traversal kernel.

Traversal is level-synchronous: every point advances one tree level per
vectorized step. Produces bit-identical path lengths to the compiled kernel
(same comparisons, same float64 adjustment add).
"""
import numpy as np

BACKEND = "python"


def tree_path_lengths(x, feature, threshold, left, right, adjust, roots):
    """Path length of every row of `x` through every tree.

    Trees are flattened into shared node arrays: `feature` < 0 marks a leaf,
    `adjust` carries the leaf's average-subtree-depth correction, `roots`
    indexes each tree's root node. Returns an (n_rows, n_trees) float64 array.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    out = np.empty((n, roots.shape[0]), dtype=np.float64)
    rows = np.arange(n)
    for t, root in enumerate(roots):
        node = np.full(n, root, dtype=np.int32)
        depth = np.zeros(n, dtype=np.int64)
        while True:
            feats = feature[node]
            live = feats >= 0
            if not live.any():
                break
            idx = rows[live]
            live_nodes = node[live]
            goes_left = x[idx, feats[live]] < threshold[live_nodes]
            node[idx] = np.where(goes_left, left[live_nodes], right[live_nodes])
            depth[idx] += 1
        out[:, t] = depth + adjust[node]
    return out
