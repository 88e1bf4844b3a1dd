"""
Cluster-Drift Baseline for SoLA Desk
A clustering router whose centers move as edits arrive, for comparison with fixed-key routing.

Every instance query is clustered. A query within ``radius`` of the nearest
center joins that cluster and the center moves to the running mean of its
members; otherwise it opens a new center. An edit's first instance decides
its module: a new center brings a fresh module, joining a center reuses (and
retrains) that center's module. Centers opened by later instances of the same
edit point to the edit's module, so a router that never merges holds one
center per instance, exactly like the key memory.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import pairwise_distances

from .adapters import LoraModule, init_module
from .editor import LORA_STREAM, EditTask, TrainRecipe, train_module
from .errors import ParameterError
from .model import BaseModel, LabeledSet, forward
from .numerics import SeededRng
from .routing import DEFAULT_ALPHA, DISTANCE_METRICS, Decision, KeyEntry, KeyMemory, mismatch_count, normalize

logger = logging.getLogger(__name__)

DEFAULT_RADIUS_GRID = (1e-9, 0.005, 0.02, 0.05, 0.1, 0.3, 1.0)


@dataclass
class ClusterCenter:
    vector: np.ndarray
    lora_id: int
    member_count: int = 1


class ClusterRouter:
    """
    Online clustering router with movable centers and one trainable module per edit cluster.

    ``update_count`` counts every assignment to an existing center (including
    fixed-point updates); ``mismatch_count`` is filled in after a stream.
    """

    def __init__(self, radius: float, metric: str = "cosine"):
        if not radius > 0:
            raise ParameterError(f"Cluster radius must be positive, got {radius}")
        if metric not in DISTANCE_METRICS:
            raise ParameterError(f"Unknown distance metric: {metric}. Allowed: {DISTANCE_METRICS}")
        self.radius = float(radius)
        self.metric = metric
        self.centers: List[ClusterCenter] = []
        self.modules: Dict[int, LoraModule] = {}
        self.update_count = 0
        self.mismatch_count = 0

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def next_lora_id(self) -> int:
        return len({c.lora_id for c in self.centers})

    def distances(self, q: np.ndarray) -> np.ndarray:
        """Distances from the normalized query to every (normalized) center."""
        centers = np.vstack([normalize(c.vector) for c in self.centers])
        return pairwise_distances(normalize(q)[None, :], centers, metric=self.metric)[0]

    def nearest(self, q: np.ndarray) -> Optional[Tuple[ClusterCenter, float]]:
        if not self.centers:
            return None
        dist = self.distances(q)
        index = int(np.argmin(dist))
        return self.centers[index], float(dist[index])

    def __call__(self, trace) -> Tuple[Decision, Optional[LoraModule]]:
        found = self.nearest(trace.query_vector)
        if found is None:
            return Decision.base_only(), None
        center, distance = found
        if distance < self.radius:
            return Decision.adapted(center.lora_id, distance), self.modules.get(center.lora_id)
        return Decision.base_only(distance), None

    def as_key_memory(self, alpha: float = DEFAULT_ALPHA) -> KeyMemory:
        """Current centers as a KeyMemory with routing threshold ``alpha``, one entry per center."""
        memory = KeyMemory(alpha=alpha, metric=self.metric)
        for index, center in enumerate(self.centers):
            key = normalize(center.vector)
            key.flags.writeable = False
            memory._append(KeyEntry(key, center.lora_id, index, 0))
        return memory


def cluster_assign(router: ClusterRouter, q: np.ndarray, lora_id: Optional[int] = None) -> Tuple[int, bool]:
    """
    Assign a query to a cluster.

    Args:
        router: Router to update
        q: Query vector
        lora_id: Module of a newly opened center; defaults to the next unused id

    Returns:
        (lora_id, is_new_center)
    """
    q = normalize(q)
    found = router.nearest(q)
    if found is not None and found[1] < router.radius:
        center = found[0]
        center.member_count += 1
        center.vector = center.vector + (q - center.vector) / center.member_count
        router.update_count += 1
        return center.lora_id, False
    lora_id = router.next_lora_id if lora_id is None else int(lora_id)
    router.centers.append(ClusterCenter(q.copy(), lora_id))
    return lora_id, True


def run_cluster_stream(model: BaseModel, stream: Sequence[EditTask], radius: float,
                       recipe: TrainRecipe, seed: int = 0, metric: str = "cosine") -> Tuple[ClusterRouter, Dict[int, int]]:
    """
    Apply an edit stream through a ClusterRouter.

    Module init uses the same per-lora_id streams as the lifelong editor, so a
    router that never merges reproduces the editor's modules exactly.

    Returns:
        (router, edit_id -> lora_id assigned at edit time)
    """
    router = ClusterRouter(radius, metric)
    rng = SeededRng(seed).child(LORA_STREAM)
    shapes = model.config.edited_layer_shapes()
    assignments: Dict[int, int] = {}
    for task in stream:
        queries = [forward(model, tokens).query_vector for tokens, _ in task.instances]
        lora_id, is_new = cluster_assign(router, queries[0])
        if is_new:
            router.modules[lora_id] = init_module(lora_id, shapes, recipe.rank, rng.child(lora_id), recipe.init_std)
        for q in queries[1:]:
            cluster_assign(router, q, lora_id)
        train_module(model, router.modules[lora_id], task.instances, recipe)
        assignments[task.edit_id] = lora_id
    return router, assignments


def routed_accuracy(model: BaseModel, router: Optional[ClusterRouter], instances) -> float:
    """Accuracy over (tokens, label) pairs; ``router=None`` measures the base model."""
    if not instances:
        return 1.0
    hits = sum(forward(model, tokens, router=router).prediction == int(label) for tokens, label in instances)
    return hits / len(instances)


def drift_experiment(model: BaseModel, stream: Sequence[EditTask], radius_grid: Sequence[float],
                     holdout: LabeledSet, recipe: Optional[TrainRecipe] = None, seed: int = 0,
                     metric: str = "cosine", alpha: float = DEFAULT_ALPHA) -> List[Dict[str, Any]]:
    """
    Run the whole stream once per radius and tabulate drift against accuracy.

    Mismatches are counted per edit instance with ``routing.mismatch_count``
    over the stream-end centers at the routing threshold ``alpha``: an
    instance whose query no longer retrieves its edit-time module (including
    one that falls back to the base model) is a mismatch.

    Args:
        model: Frozen base model
        stream: Edit stream (non-empty)
        radius_grid: Cluster radii to sweep
        holdout: Upstream holdout for TRR
        recipe: Training recipe
        seed: Root seed for module init
        metric: Distance metric
        alpha: Routing threshold the center keys are matched with

    Returns:
        List of rows: radius, updates, mismatches, err, trr, centers
    """
    if not stream:
        raise ParameterError("Drift experiment needs a non-empty edit stream")
    recipe = recipe or TrainRecipe()
    instances = [inst for task in stream for inst in task.instances]
    holdout_items = list(zip(holdout.tokens, holdout.labels))
    queries = [forward(model, tokens).query_vector for tokens, _ in instances]
    rows = []
    for radius in radius_grid:
        router, assignments = run_cluster_stream(model, stream, radius, recipe, seed, metric)
        assigned = [assignments[task.edit_id] for task in stream for _ in task.instances]
        router.mismatch_count = mismatch_count(router.as_key_memory(alpha), assigned, queries)
        row = {
            "radius": float(radius),
            "updates": router.update_count,
            "mismatches": router.mismatch_count,
            "err": routed_accuracy(model, router, instances),
            "trr": routed_accuracy(model, router, holdout_items),
            "centers": len(router),
        }
        logger.info(f"Radius {radius:g}: {row['centers']} centers, {row['updates']} updates, "
                    f"{row['mismatches']} mismatches, ERR {row['err']:.1%}, TRR {row['trr']:.1%}")
        rows.append(row)
    return rows


def drift_trend_holds(rows: Sequence[Dict[str, Any]]) -> bool:
    """True when no row has more mismatches than a row with more updates."""
    return all(a["mismatches"] <= b["mismatches"] for a in rows for b in rows if a["updates"] < b["updates"])


def drift_failures(rows: Sequence[Dict[str, Any]], fixed_err: float, base_trr: float,
                   alpha: float = DEFAULT_ALPHA, min_updates: int = 20) -> List[str]:
    """
    Check a drift sweep against the fixed-key run on the same stream.

    Args:
        rows: Output of ``drift_experiment``
        fixed_err: ERR of the lifelong editor (its ES rate, no rollbacks)
        base_trr: Base-model accuracy on the same holdout
        alpha: Routing threshold; a smallest radius at or below it must reproduce the fixed-key run
        min_updates: Center updates required at the widest radius

    Returns:
        List of failure messages, empty when the sweep behaves as expected
    """
    if not rows:
        return ["Drift sweep produced no rows"]
    failures = []
    if not drift_trend_holds(rows):
        failures.append("Mismatches decrease somewhere as cluster updates grow")

    smallest = min(rows, key=lambda r: r["radius"])
    if smallest["radius"] <= alpha:
        if smallest["updates"] or smallest["mismatches"]:
            failures.append(f"Radius {smallest['radius']:g}: {smallest['updates']} updates and "
                            f"{smallest['mismatches']} mismatches, expected none")
        if smallest["err"] != fixed_err:
            failures.append(f"Radius {smallest['radius']:g}: ERR {smallest['err']} differs from fixed-key ERR {fixed_err}")
        if smallest["trr"] != base_trr:
            failures.append(f"Radius {smallest['radius']:g}: TRR {smallest['trr']} differs from base TRR {base_trr}")

    widest = max(rows, key=lambda r: r["radius"])
    if widest["updates"] < min_updates:
        failures.append(f"Radius {widest['radius']:g}: {widest['updates']} updates, expected >= {min_updates}")
    if widest["mismatches"] < 1:
        failures.append(f"Radius {widest['radius']:g}: no mismatches")
    if not widest["err"] < fixed_err:
        failures.append(f"Radius {widest['radius']:g}: ERR {widest['err']:.1%} is not below fixed-key ERR {fixed_err:.1%}")
    return failures
