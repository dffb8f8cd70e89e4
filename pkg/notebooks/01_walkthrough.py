# %% [markdown]
# # A contextual mixture model on a synthetic cohort
#
# We simulate students from a small known chain, fit a CMM to them, and
# look at what the fitted model says about pathways and about a hidden
# term.  Run the cells top to bottom; everything is seeded.

# %%
import numpy as np

from enrollmix import cmm, evaluation, scenarios
from enrollmix.data_model import summarize, synth_generate

truth = scenarios.recovery_params(seed=0)
vocab = scenarios.vocabulary(truth.n_courses)
train = synth_generate(truth, 3000, seed=1, vocab=vocab)
holdout = synth_generate(truth, 500, seed=2, vocab=vocab)
print(train.n_students, "students,", train.n_timesteps, "terms,", train.n_courses, "courses")

# %% [markdown]
# Per-term subject counts and the spread of course loads.

# %%
s = summarize(train)
for t, counts in enumerate(s.per_timestep_subject_counts):
    print(t, counts)
print("total courses per student: mean %.2f sd %.2f" % (s.normal_fit["mean"], s.normal_fit["sd"]))

# %% [markdown]
# ## Fitting
#
# EM runs on the -1/+1 relaxation; five restarts, best objective kept.

# %%
fit = cmm.em_fit_pm1(train, 3, seed=3, restarts=5)
print("restart objectives:", [round(float(tr[-1]), 1) for tr in fit.restart_traces])
print("best restart:", fit.best_restart, "iterations:", len(fit.trace))

# %% [markdown]
# Fitted transitions next to the generating ones (states are only
# identified up to a relabelling at each term, so compare by eye or with
# the alignment used in the tests).

# %%
np.set_printoptions(precision=3, suppress=True)
print(truth.phi[0])
print(fit.params.phi[0])

# %% [markdown]
# ## Pathways
#
# Expected transition counts between adjacent terms, ready for a Sankey
# diagram.

# %%
flows = cmm.transition_flows(fit.params, holdout)
doc = cmm.sankey_json(flows)
print(len(doc["nodes"]), "nodes,", len(doc["links"]), "links")
print(sorted(doc["links"], key=lambda link: -link["value"])[:3])

# %% [markdown]
# Which hidden state each course belongs to.

# %%
for cid, (state, conf) in zip(vocab.course_ids, evaluation.latent_assignment(fit.params, holdout)):
    print(cid, state, round(conf, 3))

# %% [markdown]
# ## A hidden term
#
# Hide term 1 and predict a few courses from the other terms.  The
# majority label from the training cohort is the baseline.

# %%
courses = [0, 1, 2, 3]
rep = evaluation.inference_accuracy(fit.params, holdout.subset(range(200)), 1, courses, k_mc=1000)
base = evaluation.majority_accuracy(train, holdout.subset(range(200)), 1, courses)
print("model %.3f   majority %.3f" % (rep.accuracy, base))
print(rep.confusion())
