# %% [markdown]
# # Switching attention branches off
#
# The same spec can be built with no attention, only the point branch, only
# the channel branch, or both. Everything else (seed, data, schedule) stays
# fixed, so the table isolates the attention blocks.

# %%
from dtnet.cli import format_ablation_table, run_ablation
from dtnet.config import TOY_CLASSIFICATION_STAGES
from dtnet.data import PointDataset, make_classification_arrays
from dtnet.model import NetworkSpec
from dtnet.train import TrainConfig

X, y = make_classification_arrays(128, 20, seed=3)
data = PointDataset(X, y, "classification", ["sphere", "cube", "torus"])
stages = TOY_CLASSIFICATION_STAGES.replace("N=64", "N=32").replace("N=16", "N=8")
spec = NetworkSpec(stages, n_classes=3, head_dropout=0.2)

rows = run_ablation(spec, TrainConfig(lr=0.003, epochs=3, dropout_max_ratio=0.3), data)
print(format_ablation_table(rows))

# %% [markdown]
# Parameter counts differ by exactly `3 C^2` per branch per attention block,
# since each branch owns a query, key and value matrix of size `C x C`.
