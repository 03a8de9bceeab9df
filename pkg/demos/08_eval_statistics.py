"""The evaluation statistics on worked examples.

Win/tie/loss percentages with the difference metric, the exact
two-sided binomial test, the Pearson chi-squared test on a safety
table, and judge agreement with its random baselines.
"""
import numpy as np

from langlift import evallab as ev

# %% pairwise scores -> win/tie/loss and the difference
scores_model = [10, 10, 10, 5, 5, 1, 10, 10]
scores_rival = [1, 1, 10, 5, 10, 1, 1, 1]
r = ev.compute_delta(scores_model, scores_rival)
print(f"win {r.win:.2f}%  tie {r.tie:.2f}%  loss {r.loss:.2f}%  delta {r.delta:.2f}")

# %% exact binomial test on the non-tied pairs
p = ev.binomial_test(5, 1)
print(f"5 wins / 1 loss: two-sided p = {p:.4f} (significant: {p < 0.05})")
print(f"58 wins / 8 losses: p = {ev.binomial_test(58, 8):.2e}")
print(f"equal wins and losses: p = {ev.binomial_test(6, 6)}")

# %% chi-squared on a bypass/reject/unclear safety table
table = [[3, 90, 7],    # model A
         [25, 60, 15]]  # model B
chi = ev.chi2_test(table)
print(f"\nsafety table chi2 = {chi.statistic:.3f}, dof = {chi.dof}, p = {chi.p_value:.2e}")

# %% judge agreement and its random baselines
rng = np.random.default_rng(0)
opts = np.array(["win", "tie", "loss"])
a = opts[rng.integers(0, 3, size=20000)].tolist()
b = opts[rng.integers(0, 3, size=20000)].tolist()
print(f"\nrandom judges, with ties:    {ev.agreement_rate(a, b, include_ties=True):.1f}% (baseline 33%)")
print(f"random judges, without ties: {ev.agreement_rate(a, b, include_ties=False):.1f}% (baseline 50%)")
print(f"identical judges:            {ev.agreement_rate(a, a, include_ties=True):.1f}%")

# %% forgetting arithmetic: the report is just a paired difference
report = ev.ForgettingReport(p_model=0.1666, p_original=0.2363,
                             difference=abs(0.2363 - 0.1666))
print(f"\ngeneration probabilities {report.p_original} vs {report.p_model}"
      f" -> difference {report.difference:.4f}")
