# %% [markdown]
# # Confusing sets and preference losses
#
# For a privileged anchor label, the confusing set holds the labels that
# are ranked on the wrong side of it. One member is drawn and the loss
# pushes the positive label of the pair above the negative one.

# %%
import math

import numpy as np

from fairpo import losses as L

scores = np.array([0.7, 0.8, 0.6, 0.9])
labels = np.array([1, 0, 0, 1])
cs = L.build_confusing_set(scores, labels, anchor=0)
print(cs.kind, sorted(cs.members))

# %% [markdown]
# Label 1 is a negative scored above the positive anchor 0, so the pair is
# (preferred 0, dispreferred 1).

# %%
pair = L.PreferencePair.from_anchor(0, 1, y_anchor=1)
cfg = L.LossConfig()
print("SimPO", L.pref_simpo(pair, scores, cfg).value)
print("CPO  ", L.pref_cpo(pair, scores, 1, cfg).value)
print("DPO against itself", L.pref_dpo(pair, scores, scores, cfg).value, "= ln 2 =", math.log(2))

# %% [markdown]
# Each loss also reports its derivative with respect to the logits it
# touches. The CPO anchor term adds to label 0's entry.

# %%
print(L.pref_cpo(pair, scores, 1, cfg).logit_grad)

# %% [markdown]
# Non-privileged labels only pay when they fall behind the reference by
# more than the slack.

# %%
for live in (0.70, 0.60, 0.45):
    s = L.nonprivileged_hinge(live, 0.7, 1, cfg)
    print(f"live {live:.2f} vs reference 0.70: hinge {s.value:.4f}")
