"""
Reweighting hard samples and rare classes
=========================================

How a batch's loss weights are formed from the true-class probability,
then tempered by class statistics gathered across clients.
"""

import numpy as np

from fed3d.correction import (
    class_distribution_stats,
    corrected_coefficients,
    global_coefficients,
    grad_measure,
    local_coefficients,
)

# true-class probabilities for a batch of four
p_true = np.array([0.9, 0.8, 0.7, 0.6])
labels = np.array([0, 0, 1, 1])

g = grad_measure(p_true)  # 1 - p, the gradient size on the true logit
print("g =", g)

R = local_coefficients(g)  # hard samples weigh more; the weights sum to B
print("local weights  =", R, "sum", R.sum())

# every client reports the mean g per class; absent classes are NaN
stats = np.array([class_distribution_stats(g, labels, 3), [0.2, np.nan, 0.5]])
print("client stats:\n", stats)

G = global_coefficients(stats, 3)  # ln(1 + 2 * S * O * share)
print("global coefficients =", np.round(G, 4))

R_hat = corrected_coefficients(g, labels, G)
print("corrected weights =", np.round(R_hat, 4), "sum", R_hat.sum())

# scaling every statistic leaves G alone, only shares matter
print("scale invariant:", np.allclose(global_coefficients(stats * 7.0, 3), G))
