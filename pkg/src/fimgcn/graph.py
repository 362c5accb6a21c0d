"""Skeleton graph, root/centripetal/centrifugal edge partition and normalized adjacencies."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ingest import JOINT_NAMES

DEGREE_EPS = 1e-3

ROOT_GROUP, CENTRIPETAL, CENTRIFUGAL = 0, 1, 2


class GraphError(ValueError):
    pass


class DisconnectedGraph(GraphError):
    pass


class CyclicGraph(GraphError):
    pass


class DuplicateEdge(GraphError):
    pass


@dataclass(frozen=True)
class SkeletonGraph:
    joint_names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    root: int
    reference_pose: np.ndarray  # [J, 3]
    parent: tuple[int, ...]  # parent[root] == root

    @property
    def node_count(self) -> int:
        return len(self.joint_names)

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.node_count, self.node_count))
        for a, b in self.edges:
            adj[a, b] = adj[b, a] = 1.0
        return adj

    def neighbors(self, j: int) -> list[int]:
        return sorted({b for a, b in self.edges if a == j} | {a for a, b in self.edges if b == j})


def build_graph(edges: Sequence[tuple[str, str]], reference_pose: Mapping[str, Sequence[float]] | np.ndarray,
                root: str = "SpineMid", joint_names: Sequence[str] = JOINT_NAMES) -> SkeletonGraph:
    """Validate an edge table as a tree over ``joint_names`` and orient it from ``root``."""
    names = tuple(joint_names)
    index = {n: i for i, n in enumerate(names)}
    if root not in index:
        raise GraphError(f"root {root!r} is not a joint")
    pairs: list[tuple[int, int]] = []
    seen: set[frozenset[int]] = set()
    for a, b in edges:
        for n in (a, b):
            if n not in index:
                raise GraphError(f"edge references unknown joint {n!r}")
        if a == b:
            raise CyclicGraph(f"self-loop on {a}")
        key = frozenset((index[a], index[b]))
        if key in seen:
            raise DuplicateEdge(f"duplicate edge {a}-{b}")
        seen.add(key)
        pairs.append((index[a], index[b]))

    J = len(names)
    adj: list[list[int]] = [[] for _ in range(J)]
    for a, b in pairs:
        adj[a].append(b)
        adj[b].append(a)
    parent = [-1] * J
    parent[index[root]] = index[root]
    queue = [index[root]]
    while queue:
        node = queue.pop(0)
        for nb in sorted(adj[node]):
            if parent[nb] == -1:
                parent[nb] = node
                queue.append(nb)
    unreached = [names[i] for i in range(J) if parent[i] == -1]
    if unreached:
        raise DisconnectedGraph(f"joints not connected to {root}: {unreached}")
    if len(pairs) != J - 1:
        raise CyclicGraph(f"{len(pairs)} edges over {J} joints contain a cycle")

    if isinstance(reference_pose, Mapping):
        missing = [n for n in names if n not in reference_pose]
        if missing:
            raise GraphError(f"reference pose lacks joints {missing}")
        pose = np.array([reference_pose[n] for n in names], dtype=float)
    else:
        pose = np.array(reference_pose, dtype=float)
    if pose.shape != (J, 3) or not np.all(np.isfinite(pose)):
        raise GraphError("reference pose must be a finite [J, 3] array")
    if len(np.unique(pose.round(12), axis=0)) != J:
        raise GraphError("reference pose has coincident joints")

    return SkeletonGraph(names, tuple(pairs), index[root], pose, tuple(parent))


def load_skeleton(path: str | Path | None = None) -> SkeletonGraph:
    """Read a skeleton definition file; the bundled 17-joint skeleton when ``path`` is None."""
    if path is None:
        text = resources.files("fimgcn").joinpath("data/skeleton17.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    pose = doc["reference_pose"]
    names = doc.get("joints") or (JOINT_NAMES if set(pose) == set(JOINT_NAMES) else list(pose))
    return build_graph([tuple(e) for e in doc["edges"]], pose, doc.get("root", "SpineMid"), names)


def default_graph() -> SkeletonGraph:
    return load_skeleton()


def chain_graph(J: int, root: int | None = None) -> SkeletonGraph:
    """A J-joint chain with irregular spacing along x, rooted in the middle by default."""
    names = [f"j{i}" for i in range(J)]
    root = J // 2 if root is None else root
    spacing = 1.0 + 0.1 * np.arange(J)
    x = np.concatenate([[0.0], np.cumsum(spacing[:-1])])
    pose = np.stack([x - x[root], 0.01 * np.arange(J), np.zeros(J)], axis=1)
    edges = [(names[i], names[i + 1]) for i in range(J - 1)]
    return build_graph(edges, pose, names[root], names)


@dataclass(frozen=True)
class Partition:
    labels: dict[tuple[int, int], int]
    A: np.ndarray  # [3, J, J]
    degrees: np.ndarray  # [3, J], row sums + alpha (left factor)
    in_degrees: np.ndarray  # [3, J], column sums + alpha (right factor)
    r: np.ndarray  # [J]
    alpha: float

    @property
    def Lambda(self) -> np.ndarray:
        return np.stack([np.diag(d) for d in self.degrees])

    def scale(self) -> np.ndarray:
        """Entries of d_row^-1/2 d_col^-1/2^T per group, so normalization is an elementwise product."""
        return (1.0 / np.sqrt(self.degrees))[:, :, None] * (1.0 / np.sqrt(self.in_degrees))[:, None, :]


def center_distances(graph: SkeletonGraph, positions: np.ndarray | None = None) -> np.ndarray:
    """Distance of each joint to the root; averaged over frames when ``positions`` is [T, J, 3]."""
    if positions is None:
        pose = graph.reference_pose
        return np.linalg.norm(pose - pose[graph.root], axis=-1)
    positions = np.asarray(positions, dtype=float)
    return np.linalg.norm(positions - positions[:, graph.root:graph.root + 1], axis=-1).mean(axis=0)


def label_partitions(graph: SkeletonGraph, alpha: float = DEGREE_EPS,
                     distances: np.ndarray | None = None) -> Partition:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    r = center_distances(graph) if distances is None else np.asarray(distances, dtype=float)
    J = graph.node_count
    A = np.zeros((3, J, J))
    labels: dict[tuple[int, int], int] = {}
    for j in range(J):
        labels[(j, j)] = ROOT_GROUP
        A[ROOT_GROUP, j, j] = 1.0
    for a, b in graph.edges:
        for j, k in ((a, b), (b, a)):
            if r[k] == r[j]:
                m = ROOT_GROUP
            elif r[k] < r[j]:
                m = CENTRIPETAL
            else:
                m = CENTRIFUGAL
            labels[(j, k)] = m
            A[m, j, k] = 1.0
    # A_1 and A_2 are directed, so a node with an empty row can still receive an edge.
    # Scaling columns by their own in-degree keeps every entry at most 1.
    return Partition(labels, A, A.sum(axis=2) + alpha, A.sum(axis=1) + alpha, r, alpha)


def normalized_adjacency(partition: Partition, M: np.ndarray) -> np.ndarray:
    """Lambda_m^-1/2 (A_m * M) Lambda'_m^-1/2 for each of the three groups (row and column degrees)."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("edge-importance mask contains non-finite values")
    return partition.scale() * (partition.A * M)
