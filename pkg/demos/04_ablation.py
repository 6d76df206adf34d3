"""Ablation over a few seeds: classifier only, no margins, and the full head."""
import numpy as np

from gfss import AdaptationConfig, TaskSpec, adapt, generate_task, train_base_classifier

ARMS = {
    "w/o-transition": dict(arm="classifier-only"),
    "w/o-LDAM": dict(arm="transition", C=0.0),
    "full": dict(arm="transition"),
}
rows = {name: [] for name in ARMS}
for seed in range(1, 4):
    spec = TaskSpec(similarity={5: (1, 0.9), 6: (2, 0.9)}, noise_std=0.2, image_size=(16, 16),
                    head_budget=512, n_support_images=2, seed=seed)
    episode, base = generate_task(spec)
    W_b_t = train_base_classifier(base, epochs=100)
    for name, kw in ARMS.items():
        r = adapt(episode, W_b_t, AdaptationConfig(lr=0.05, epochs=300, seed=seed, **kw)).report
        rows[name].append([r.base_miou, r.novel_miou, r.average_miou, r.weighted_miou])

print(f"{'arm':<16}{'base':>8}{'novel':>8}{'avg':>8}{'weighted':>10}   (median of 3 seeds)")
for name, values in rows.items():
    b, n, a, w = np.median(values, axis=0)
    print(f"{name:<16}{b:8.2f}{n:8.2f}{a:8.2f}{w:10.2f}")
