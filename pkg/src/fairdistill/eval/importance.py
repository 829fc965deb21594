"""Per-column feature importance of a fitted forest (impurity and permutation)."""
from __future__ import annotations

import numpy as np

from .fairness import utility_scores


def column_blocks(schema) -> list[tuple[str, slice]]:
    """Original columns and their slices in the forest input ``X ++ onehot(s)``."""
    blocks = [(c.name, sl) for c, sl in schema.blocks()]
    w = schema.encoded_width
    blocks.append((schema.protected.name, slice(w, w + schema.n_groups)))
    return blocks


def feature_importance(model, test, n_repeats: int = 5, seed: int = 0) -> dict:
    """Rankings ``{"impurity": [(column, share)], "permutation": [(column, acc_drop)]}``.

    Impurity shares sum one-hot blocks and are normalised to 1. Permutation
    importance shuffles a column's whole block and averages the accuracy drop.
    """
    blocks = column_blocks(test.schema)
    imp = np.asarray(model.feature_importances_)
    impurity = {name: float(imp[sl].sum()) for name, sl in blocks}
    total = sum(impurity.values())
    impurity = {k: v / total for k, v in impurity.items()} if total > 0 else impurity
    X = test.with_group()
    base = utility_scores(model.predict(X), test.y)[0]
    rng = np.random.default_rng(seed)
    perm = {}
    for name, sl in blocks:
        drops = []
        for _ in range(n_repeats):
            Xp = X.copy()
            Xp[:, sl] = X[rng.permutation(len(X))][:, sl]
            drops.append(base - utility_scores(model.predict(Xp), test.y)[0])
        perm[name] = float(np.mean(drops))
    rank = lambda d: sorted(d.items(), key=lambda kv: (-kv[1], kv[0]))
    return {"impurity": rank(impurity), "permutation": rank(perm)}
