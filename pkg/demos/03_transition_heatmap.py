"""Inspect the learned transition matrix averaged over query pixels."""
import numpy as np

from gfss import AdaptationConfig, TaskSpec, adapt, generate_task, train_base_classifier
from gfss.head import HeadParams, transition_matrices
from gfss.metrics import export_heatmap

spec = TaskSpec(similarity={5: (1, 0.9), 6: (2, 0.9)}, noise_std=0.1, image_size=(16, 16),
                head_budget=512, n_support_images=2, seed=3)
episode, base = generate_task(spec)
W_b_t = train_base_classifier(base, epochs=100)
Xq, _, _ = episode.query_arrays()


def mean_matrix(params):
    return transition_matrices(Xq, params.theta_r, params.theta_c, params.beta).mean(axis=0)


np.set_printoptions(precision=2, suppress=True)
init = HeadParams.init(W_b_t, episode.partition, np.random.default_rng(0))
print("at initialization (rows: all classes, columns: bg + base classes)")
print(mean_matrix(init))

result = adapt(episode, W_b_t, AdaptationConfig(lr=0.05, epochs=300))
S = mean_matrix(result.params)
print("\nafter adaptation")
print(S)
# the anchor columns should now route mass to their similar novel class
for novel, (anchor, cos) in spec.similarity.items():
    print(f"S[{novel}, {anchor}] = {S[novel, anchor]:.3f}  (novel {novel} ~ base {anchor}, cos {cos})")
print("column sums:", S.sum(axis=0))
print("first heatmap records:", export_heatmap(S)[:3])
