"""Skeleton graphs and differentiable forward kinematics.

Convention: the local rotation of a non-root joint ``j`` turns the bone
``parent(j) -> j`` (and everything below it) about the parent's rest position;
the root turns about its own rest position and then translates by the root
translation.  Bone ``b`` is the edge ending in ``skeleton.bone_joints[b]`` and
moves with that joint's global transform, so the rest pose maps every point
to itself.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, as_tensor, getitem, matmul, stack
from .geometry import quat_to_matrix

log = logging.getLogger(__name__)


class SkeletonError(ValueError):
    """Base class for invalid skeleton input; ``field`` names the offending entry."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(message)
        self.field = field


class CycleError(SkeletonError):
    pass


class DisconnectedError(SkeletonError):
    pass


class DuplicateEdgeError(SkeletonError):
    pass


@dataclass(frozen=True)
class SkeletonGraph:
    rest_positions: np.ndarray  # (J, 3)
    parent: np.ndarray  # (J,), root has -1
    root: int
    order: tuple  # parents before children

    @property
    def num_joints(self) -> int:
        return len(self.parent)

    @property
    def num_bones(self) -> int:
        return len(self.parent) - 1

    @property
    def bone_joints(self) -> np.ndarray:
        """Child joint index of each bone, ascending."""
        return np.array([j for j in range(self.num_joints) if j != self.root], dtype=int)

    def bone_endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """Rest-pose (head, tail) of every bone: head at the parent, tail at the child joint."""
        joints = self.bone_joints
        return self.rest_positions[self.parent[joints]], self.rest_positions[joints]

    def pivots(self) -> np.ndarray:
        piv = self.rest_positions.copy()
        for j in range(self.num_joints):
            if self.parent[j] >= 0:
                piv[j] = self.rest_positions[self.parent[j]]
        return piv

    def to_dict(self) -> dict:
        edges = [[int(self.parent[j]), int(j)] for j in self.bone_joints]
        return {"nodes": self.rest_positions.tolist(), "edges": edges, "root": int(self.root)}


def validate_skeleton(nodes, edges, root: int | None = None) -> SkeletonGraph:
    """Orient an undirected edge list into a tree rooted at ``root`` (default 0)."""
    nodes = np.asarray(nodes, dtype=float)
    if nodes.ndim != 2 or nodes.shape[1] != 3:
        raise SkeletonError(f"nodes must be a list of [x, y, z], got shape {nodes.shape}", "nodes")
    if not np.all(np.isfinite(nodes)):
        raise SkeletonError("nodes contain non-finite coordinates", "nodes")
    J = len(nodes)
    if J < 2:
        raise SkeletonError("a skeleton needs at least 2 nodes", "nodes")
    root = 0 if root is None else int(root)
    if not 0 <= root < J:
        raise SkeletonError(f"root {root} out of range for {J} nodes", "root")

    adjacency: list[list[int]] = [[] for _ in range(J)]
    seen = set()
    for k, edge in enumerate(edges):
        if len(edge) != 2:
            raise SkeletonError(f"edge {k} must have two endpoints", "edges")
        a, b = int(edge[0]), int(edge[1])
        if not (0 <= a < J and 0 <= b < J):
            raise SkeletonError(f"edge {k} references a missing node", "edges")
        if a == b:
            raise CycleError(f"edge {k} is a self-loop on node {a}", "edges")
        key = (min(a, b), max(a, b))
        if key in seen:
            raise DuplicateEdgeError(f"duplicate edge {key}", "edges")
        seen.add(key)
        adjacency[a].append(b)
        adjacency[b].append(a)

    parent = np.full(J, -2, dtype=int)
    parent[root] = -1
    order = []
    queue = deque([root])
    while queue:
        n = queue.popleft()
        order.append(n)
        for m in sorted(adjacency[n]):
            if m == parent[n]:
                continue
            if parent[m] != -2:
                raise CycleError(f"cycle through nodes {n} and {m}", "edges")
            parent[m] = n
            queue.append(m)
    if len(order) != J:
        missing = sorted(set(range(J)) - set(order))
        raise DisconnectedError(f"nodes {missing} are not connected to root {root}", "edges")
    return SkeletonGraph(nodes.copy(), parent, root, tuple(order))


_KNOWN_FIELDS = {"nodes", "edges", "root"}


def parse_skeleton(doc: dict) -> SkeletonGraph:
    if not isinstance(doc, dict):
        raise SkeletonError("skeleton document must be an object", "<root>")
    for key in sorted(set(doc) - _KNOWN_FIELDS):
        log.warning("ignoring unknown skeleton field %r", key)
    for key in ("nodes", "edges"):
        if key not in doc:
            raise SkeletonError(f"missing required field {key!r}", key)
    nodes = doc["nodes"]
    if not isinstance(nodes, list) or not all(isinstance(n, list) and len(n) == 3 for n in nodes):
        raise SkeletonError("field 'nodes' must be a list of [x, y, z]", "nodes")
    try:
        nodes = np.array(nodes, dtype=float)
    except (TypeError, ValueError):
        raise SkeletonError("field 'nodes' contains non-numeric coordinates", "nodes") from None
    edges = doc["edges"]
    if not isinstance(edges, list) or not all(isinstance(e, list) and len(e) == 2 for e in edges):
        raise SkeletonError("field 'edges' must be a list of [parent, child]", "edges")
    root = doc.get("root")
    if root is not None and not isinstance(root, int):
        raise SkeletonError("field 'root' must be an integer", "root")
    return validate_skeleton(nodes, edges, root)


def load_skeleton(path) -> SkeletonGraph:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SkeletonError(f"{path}: not valid JSON ({exc})", "<document>") from None
    return parse_skeleton(doc)


def save_skeleton(skeleton: SkeletonGraph, path) -> None:
    Path(path).write_text(json.dumps(skeleton.to_dict(), indent=2))


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------
@dataclass
class JointPoseSample:
    local_rotations: Tensor  # (J, 4) unit quaternions
    root_translation: Tensor  # (3,)
    time: float = 0.0


@dataclass
class JointGlobalTransforms:
    rotations: Tensor  # (J, 3, 3)
    translations: Tensor  # (J, 3)

    def bone_transforms(self, skeleton: SkeletonGraph) -> tuple[Tensor, Tensor]:
        idx = skeleton.bone_joints
        return getitem(self.rotations, (Ellipsis, idx, slice(None), slice(None))), getitem(
            self.translations, (Ellipsis, idx, slice(None))
        )


def _rotate(R: Tensor, v) -> Tensor:
    return matmul(R, as_tensor(v)[..., None])[..., 0]


def forward_kinematics(skeleton: SkeletonGraph, local_rotations, root_translation) -> JointGlobalTransforms:
    """Global (R, T) for every joint; ``local_rotations`` is ``(..., J, 4)``."""
    q = as_tensor(local_rotations)
    p = as_tensor(root_translation)
    local = quat_to_matrix(q)
    pivots = skeleton.pivots()
    R: dict[int, Tensor] = {}
    T: dict[int, Tensor] = {}
    for j in skeleton.order:
        Rl = local[..., j, :, :]
        offset = pivots[j] - _rotate(Rl, pivots[j])
        par = skeleton.parent[j]
        if par < 0:
            R[j] = Rl
            T[j] = offset + p
        else:
            R[j] = matmul(R[par], Rl)
            T[j] = _rotate(R[par], offset) + T[par]
    J = skeleton.num_joints
    return JointGlobalTransforms(
        stack([R[j] for j in range(J)], axis=-3), stack([T[j] for j in range(J)], axis=-2)
    )


def fk_pose(skeleton: SkeletonGraph, pose: JointPoseSample) -> JointGlobalTransforms:
    return forward_kinematics(skeleton, pose.local_rotations, pose.root_translation)


def apply_global(transforms: JointGlobalTransforms, skeleton: SkeletonGraph, bone: int, point) -> Tensor:
    """``R_b point + T_b`` using the global transform of bone ``bone``'s child joint."""
    if not 0 <= bone < skeleton.num_bones:
        raise IndexError(f"bone index {bone} out of range for {skeleton.num_bones} bones")
    j = int(skeleton.bone_joints[bone])
    return _rotate(transforms.rotations[..., j, :, :], point) + transforms.translations[..., j, :]


def joint_world_positions(transforms: JointGlobalTransforms, skeleton: SkeletonGraph) -> Tensor:
    """World position of each joint: its own transform applied to its rest position."""
    rest = Tensor(skeleton.rest_positions)
    return matmul(transforms.rotations, rest[..., None])[..., 0] + transforms.translations
