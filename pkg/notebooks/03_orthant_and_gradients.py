# %% [markdown]
# # Pattern probabilities under a Gaussian emission
#
# A binary enrollment pattern has probability equal to an orthant
# probability of the emission.  For small dimensions a quadrature rule
# gives it to ~1e-7; the Monte-Carlo estimator scales to any dimension.

# %%
import numpy as np

from enrollmix.cmm import pattern_reward_gradient
from enrollmix.gaussian_core import MvnParams, orthant_prob_exact_small, orthant_prob_mc

cov = np.full((3, 3), 0.5) + 0.5 * np.eye(3)
mvn = MvnParams(np.zeros(3), cov)
for bits in [(1, 1, 1), (1, 0, 1), (0, 0, 0)]:
    exact = orthant_prob_exact_small(mvn, bits)
    for mode in ("product_cdf", "nested_mc"):
        est = orthant_prob_mc(mvn, bits, 50_000, seed=0, tail_mode=mode)
        print(bits, mode.ljust(11), "%.5f +- %.5f   exact %.5f" % (est.value, est.std_error, exact))

# %% [markdown]
# `product_cdf` ignores correlation among the negative coordinates, so
# for `(0, 0, 0)` it is biased; `nested_mc` is not.
#
# ## Gradient of a pattern probability
#
# The score-function estimate with a batch-mean baseline, plus the direct
# term for the negative coordinates.  Raising the mean of a positive
# course should raise the probability of a pattern that takes it.

# %%
g = pattern_reward_gradient(MvnParams(np.zeros(3), cov), np.array([1, 0, 1]), 50_000, seed=1)
print("value", round(g.value, 5))
print("d/d mean", np.round(g.grad_mean, 4))
print("d/d chol\n", np.round(g.grad_chol, 4))
