# %% [markdown]
# # CMM against naive Bayes and TAN mixtures
#
# The benchmark cohort has eight states per term, each co-enrolling its
# own pair of courses, and transitions that never repeat a state twice in
# a row.  A CMM captures this with eight states; a mixture over whole
# records needs one class per path, and paths multiply with every term.
#
# One replication takes a minute or two.

# %%
from enrollmix import evaluation, scenarios

cfg = scenarios.BENCHMARK
print(cfg)

# %%
errors = scenarios.run_benchmark(0)
for model, per_k in errors.items():
    print(model.ljust(4), "  ".join("K=%d %.5f" % (k, v) for k, v in per_k.items()))
print("best of K:", evaluation.best_of_k(errors))

# %% [markdown]
# ## Sampling noise
#
# The error of a model against a holdout never reaches zero: both sides
# are finite samples.  With the generating parameters themselves the
# error shrinks with the sample count until the holdout's own noise is
# all that is left.

# %%
from enrollmix.cmm import sample_students

truth, train, holdout = scenarios.benchmark_cohorts(0)
floor = evaluation.mean_field_error(holdout, train)
for n in (100, 1000, 10_000, 50_000):
    s = sample_students(truth, n, seed=n, vocab=holdout.vocab)
    print(n, round(evaluation.mean_field_error(holdout, s), 5))
print("train vs holdout:", round(floor, 5))
