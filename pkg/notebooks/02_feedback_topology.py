# %% [markdown]
# # Feedback routing
#
# At step t > 1 the GFM in front of RDB b (b <= M) concatenates the previous
# step outputs of RDBs max(b, N)..B. Here the routing is read back from the
# recorded graph rather than from the topology object.

# %%
import numpy as np

from gmfn.model import FeedbackTopology, ModelConfig, build_params, feedback_edges, forward_unroll
from gmfn.model import gfm_param_count
from gmfn.tensor import Tensor

lr = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 4, 4)))
cfg = ModelConfig(B=7, T=2, C0=2, C=2, scale=2, rdb_layers=1)


def edges(M, N, mode="feedback"):
    topo = FeedbackTopology(B=7, M=M, N=N, T=2, mode=mode)
    taps = {}
    forward_unroll(build_params(cfg, topo), topo, cfg, lr, taps=taps)
    return sorted(feedback_edges(taps, 7))


print("M=1 N=4 ", edges(1, 4))
print("M=1 N=7 ", edges(1, 7), "(single-to-single)")
print("M=2 N=7 ", edges(2, 7), "(single-to-multiple)")
print("anti M=3", edges(3, 7, "anti_feedback"))

# %% [markdown]
# GFM cost at the study width (C = 32), with and without the gate. Without it
# the refinement conv reads the raw concatenation, saving C*C + 2C weights.

# %%
for N in range(1, 8):
    topo = FeedbackTopology(B=7, M=1, N=N)
    print(N, gfm_param_count(topo, 32, True), gfm_param_count(topo, 32, False))
