"""The two learned losses, taken apart.

A loss network replaces the task loss inside the adaptation step only; the
outer objective stays the true task loss. The simple variant scores each
sample independently from (task loss, prediction, target); the relation
variant scores all ordered pairs of samples, self-pairs included, so the
adaptation signal can use how samples relate to each other.
"""
import numpy as np

from metaloss.autodiff import Graph
from metaloss.models import pair_indices
from metaloss.nn import mount_params
from metaloss.tasks import sample_episode, sample_sine_task
from metaloss.training import (
    MethodSpec,
    init_params,
    inner_update_relviable,
    inner_update_simviable,
    meta_batch_objective,
)

rng = np.random.default_rng(3)
task = sample_sine_task(rng)
episode = sample_episode(task, k_train=4, k_test=6, rng=rng)

print(f"episode with {episode.k_train} adaptation samples")
first, second = pair_indices(episode.k_train)
print(f"the relation loss evaluates {len(first)} ordered pairs:",
      list(zip(first.tolist(), second.tolist())))

for method, label in (("sim_viable", "per-sample loss net"),
                      ("rel_viable", "pairwise loss net")):
    spec = MethodSpec(method=method, context_dim=3, hidden=(16,),
                      loss_net_hidden=(16, 16), inner_lr=1.0)
    theta, psi = init_params(spec, np.random.default_rng(0))
    g = Graph()
    theta_refs = mount_params(g, theta)
    psi_refs = mount_params(g, psi)
    update = (inner_update_simviable if method == "sim_viable"
              else inner_update_relviable)
    context = update(g, spec, theta_refs, psi_refs, episode)
    print(f"\n{label}:")
    print("  adapted context:", np.round(g.value(context).ravel(), 4))

    # The meta-gradient that trains the loss net: differentiate the true
    # post-update test loss with respect to the loss-net weights.
    g = Graph()
    theta_refs = mount_params(g, theta)
    psi_refs = mount_params(g, psi)
    outer = meta_batch_objective(g, spec, theta_refs, psi_refs, [episode])
    grads = g.grad(outer, list(psi_refs.values()))
    norms = {name: float(np.linalg.norm(g.value(grads[ref])))
             for name, ref in psi_refs.items()}
    print("  post-update test loss:", round(g.scalar(outer), 4))
    print("  loss-net gradient norms:",
          {k: round(v, 5) for k, v in list(norms.items())[:3]}, "...")
    assert any(v > 0 for v in norms.values()), "loss net must receive signal"

print("\nboth loss networks receive nonzero meta-gradients: the outer loop")
print("can shape what the inner loop descends.")
