"""The regression task distribution: random sine curves, few-shot episodes,
and what the loss landscape looks like before any learning.

Each task fixes an amplitude in [0.1, 5] and a phase in [0, pi]; an episode
draws adaptation and evaluation points uniformly from [-5, 5] with exact
(noise-free) targets.
"""
import numpy as np

from metaloss.tasks import (
    linspace_eval_grid,
    sample_episode,
    sample_sine_task,
)

rng = np.random.default_rng(7)

print("five sampled tasks:")
for _ in range(5):
    task = sample_sine_task(rng)
    print(f"  amplitude={task.amplitude:5.2f}  phase={task.phase:4.2f}")

task = sample_sine_task(rng)
episode = sample_episode(task, k_train=10, k_test=5, rng=rng)
print(f"\nepisode from amplitude={task.amplitude:.2f}, phase={task.phase:.2f}:")
print("  adaptation x:", np.round(episode.x_train.ravel(), 2))
print("  adaptation y:", np.round(episode.y_train.ravel(), 2))
print("  residual of y against the task function:",
      np.max(np.abs(episode.y_train - task.targets(episode.x_train))))

# The evaluation grid used throughout: 100 equally spaced points.
grid = linspace_eval_grid(100)
print("\ngrid:", grid[0, 0], "...", grid[-1, 0], f"({len(grid)} points)")

# Expected grid MSE of the all-zero predictor, estimated by sampling. The
# phase average kills the cross term, so the closed form is E[A^2] / 2.
samples = []
r = np.random.default_rng(0)
for _ in range(20000):
    t = sample_sine_task(r)
    samples.append(np.mean(t.targets(grid) ** 2))
closed_form = (0.1**2 + 0.1 * 5.0 + 5.0**2) / 3.0 / 2.0
print("\nzero-predictor grid MSE:")
print("  monte carlo :", round(float(np.mean(samples)), 4))
print("  closed form :", round(closed_form, 4))
print("this is the scale every method starts from before adaptation.")
