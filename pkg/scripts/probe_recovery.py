"""Calibration probe for Phase I oracle reward recovery (not part of the suite)."""
import sys
import time

import numpy as np

from cfirl.cf_irl import TrainConfig, train
from cfirl.grid_mdp import greedy_rollout
from cfirl.reward_model import HeadConfig, forward, init_params
from cfirl.synth_world import WorldConfig, gen_scene


def hausdorff(a, b):
    pa = np.asarray(a, dtype=float)
    pb = np.asarray(b, dtype=float)
    d = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def main(lr=8.0, epochs=25, temperature=1.0, n_train=60, n_held=20, seed0=0):
    cfg = WorldConfig(height=32, width=32, cell_size=0.25, obstacle_density=0.06,
                      elevation_amplitude=0.0, curb_height=0.0, dynamic_count=2, seed=1)
    t0 = time.time()
    scenes = [gen_scene(cfg, s) for s in range(seed0, seed0 + n_train + n_held)]
    train_scenes, held = scenes[:n_train], scenes[n_train:]
    print(f"gen {len(scenes)} scenes in {time.time()-t0:.1f}s; "
          f"expert len mean {np.mean([len(s.expert) for s in scenes]):.1f}")

    head = HeadConfig(kind="linear", in_channels=train_scenes[0].grid.channel_count)
    params = init_params(head, seed=0)
    tcfg = TrainConfig(alpha=0.0, epochs=epochs, learning_rate=lr, temperature=temperature, seed=0)
    t0 = time.time()
    params, stats = train(train_scenes, params, tcfg)
    print(f"train {time.time()-t0:.1f}s  final loss {stats.mean_loss:.4f} "
          f"J_E {stats.mean_expert_return:.3f} J_pi {stats.mean_policy_return:.3f}")
    print("weights:", np.round(params.tensors["weight"], 3), "bias:", np.round(params.tensors["bias"], 3))

    hits = 0
    dists = []
    for s in held:
        field = forward(s.grid, params)
        roll = greedy_rollout(field, s.start, s.goal, s.mdp(), iters=70, horizon=96)
        d = hausdorff(roll.states, s.expert.states)
        dists.append(d)
        hits += d <= 1.0
    print(f"held-out: {hits}/{len(held)} within 1 cell; mean H {np.mean(dists):.2f}, "
          f"max {np.max(dists):.2f}")
    print("worst:", sorted(dists)[-5:])


if __name__ == "__main__":
    kw = {}
    for arg in sys.argv[1:]:
        k, v = arg.split("=")
        kw[k] = float(v) if "." in v else int(v) if v.lstrip("-").isdigit() else v
    main(**kw)
