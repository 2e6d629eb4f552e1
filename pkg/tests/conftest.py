import numpy as np

from cfirl.cf_gen import CandidateSet, CfGenConfig, Candidate
from cfirl.grid_mdp import Trajectory
from cfirl.reward_model import FeatureGrid
from cfirl.synth_world import OracleCost, Scene, WorldConfig, assemble_scene, gen_expert

RECOVERY_TERRAIN = (
    ("sidewalk", 1.0),
    ("dirt", 4.0),
    ("grass", 9.0),
    ("forbidden", float("inf")),
)


def recovery_world_config(seed: int = 1, height: int = 32, width: int = 32) -> WorldConfig:
    """Road-tree worlds with flat elevation and linear oracle costs."""
    return WorldConfig(
        height=height, width=width, cell_size=0.25, obstacle_density=0.03,
        elevation_amplitude=0.0, curb_height=0.0, dynamic_count=2,
        layout="lattice", min_separation_frac=0.45,
        terrain=RECOVERY_TERRAIN, seed=seed,
    )


def build_scene(
    terrain_index: np.ndarray,
    start: tuple[int, int],
    goal: tuple[int, int],
    unit_costs=(1.0, 4.0, 9.0, float("inf")),
    names=("sidewalk", "dirt", "grass", "forbidden"),
    elevation: np.ndarray | None = None,
    elev_penalty: float = 0.0,
    cell_size: float = 0.25,
    scene_id: str = "test-scene",
) -> Scene:
    """Hand-built scene: one-hot features, oracle costs, Dijkstra expert."""
    terrain_index = np.asarray(terrain_index, dtype=np.int64)
    h, w = terrain_index.shape
    k = len(names)
    one_hot = np.zeros((k, h, w))
    for i in range(k):
        one_hot[i] = terrain_index == i
    if elevation is None:
        elevation = np.zeros((h, w))
    grid = FeatureGrid(cell_size=cell_size, static_semantic=one_hot,
                       dynamic=np.zeros((1, h, w)), elevation=elevation)
    forbidden_idx = next(i for i, c in enumerate(unit_costs) if np.isinf(c))
    oracle = OracleCost(unit_costs=tuple(unit_costs), elevation_penalty_per_m=elev_penalty,
                        forbidden_mask=terrain_index == forbidden_idx)
    scene = Scene(
        id=scene_id, grid=grid, terrain_names=tuple(names), terrain_index=terrain_index,
        oracle=oracle, oracle_cost=oracle.cell_costs(terrain_index),
        start=tuple(start), goal=tuple(goal),
        expert=Trajectory((tuple(start),), kind="expert"),
    )
    scene.expert = gen_expert(scene)
    return scene


def two_corridor_scene(scene_id: str = "corridors") -> Scene:
    """ 8x12 world with a cheap corridor at row 2 and a costly one at row 5."""
    t = np.full((8, 12), 2, dtype=np.int64)  # grass walls
    t[2, :] = 0      # corridor A: sidewalk
    t[5, :] = 1      # corridor B: dirt
    t[2:6, 0] = 0    # connect the corridors at both ends
    t[2:6, 11] = 0
    return build_scene(t, start=(2, 0), goal=(2, 11), scene_id=scene_id)


def label_corridor_candidate(scene: Scene) -> None:
    """Attach a corridor-B candidate labeled counterfactual."""
    states = [(2, 0), (3, 0), (4, 0), (5, 0)]
    states += [(5, c) for c in range(1, 12)]
    states += [(4, 11), (3, 11), (2, 11)]
    cand = Candidate(id=0, trajectory=Trajectory(tuple(states), kind="candidate"), side="right")
    scene.candidates = CandidateSet(candidates=(cand,), config=CfGenConfig(seed=0), seed=0)
    scene.counterfactual_labels = {0: True}
