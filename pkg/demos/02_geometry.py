# %% [markdown]
# # Geometry kernels
#
# Sampling, neighborhoods and interpolation are plain numpy and brute force.
# At a few thousand points that is fast enough and easy to verify.

# %%
import numpy as np

from dtnet.data import sample_torus
from dtnet.geometry import ball_query, farthest_point_sample, interpolation_weights, knn

rng = np.random.default_rng(1)
cloud = sample_torus(1024, 1.0, 0.3, rng)

# %% [markdown]
# Farthest point sampling picks well-spread centers. Compare the smallest
# gap between chosen points with that of a random subset of the same size.

# %%
def min_gap(p):
    d = np.linalg.norm(p[:, None] - p[None], axis=-1)
    return d[np.triu_indices(len(p), 1)].min()

centers = farthest_point_sample(cloud, 64)
random = rng.choice(len(cloud), 64, replace=False)
print(f"min gap, FPS: {min_gap(cloud[centers]):.3f}   random: {min_gap(cloud[random]):.3f}")

# %% [markdown]
# Ball query lists the lowest-index neighbors inside the radius and pads
# short lists with the first hit, so every group has the same width.

# %%
groups = ball_query(cloud[centers], cloud, radius=0.2, max_neighbors=16)
counts = np.array([len(set(row)) for row in groups.indices.tolist()])
print("neighbors per center: min", counts.min(), "median", int(np.median(counts)), "max", counts.max())

# %% [markdown]
# Interpolation weights are inverse squared distances over the three nearest
# sources, normalized per query. Every row sums to one.

# %%
w = interpolation_weights(cloud[:5], cloud[centers])
print("row sums:", w.sum(axis=1))
print("nearest centers of point 0:", knn(cloud[:1], cloud[centers], 3).indices[0])
