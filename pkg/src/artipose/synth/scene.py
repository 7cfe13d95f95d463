"""Scene sampling: joint state + camera + grasp -> fully annotated record."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import EmptyView
from ..geometry import (
    DEFAULT_CONTACT_TAU,
    OrientedBox,
    SimilarityTransform,
    compute_contact_map,
    transform_box,
)
from .hand import (
    HandTemplate,
    KinematicHand,
    capsules_world,
    default_hand_template,
    pose_hand_grasp,
)
from .instances import ArticulatedInstance, part_poses_object
from .render import HAND_LABEL, Camera, render_partial_cloud, sample_camera

DEFAULT_N_POINTS = 1024


@dataclass
class SceneRecord:
    """One observation with every annotation the pipeline consumes.

    seg labels: 0 = hand, p+1 = part p. nocs rows are valid only where
    seg > 0; contact rows are zero at hand points by construction.
    """

    scene_id: str
    category: str
    cloud: np.ndarray  # (N, 3) camera frame
    seg: np.ndarray  # (N,) uint8
    nocs: np.ndarray  # (N, 3) in [0, 1]^3 at object points
    contact: np.ndarray  # (N,) uint8
    part_poses: list  # [SimilarityTransform] camera frame, one per part
    canonical_boxes: list  # [OrientedBox] part-local cuboids (+/- half extents)
    posed_boxes: list  # [OrientedBox] camera frame
    hand: KinematicHand  # camera-frame root
    hand_joints: np.ndarray  # (21, 3)
    hand_surface: np.ndarray  # (S, 3)
    camera: Camera
    joint_state: np.ndarray
    tau: float
    scene_seed: int

    @property
    def part_count(self) -> int:
        return len(self.part_poses)

    def object_mask(self) -> np.ndarray:
        return self.seg > 0

    def half_extents(self) -> np.ndarray:
        return np.stack(
            [b.vertices[7] for b in self.canonical_boxes]
        )  # corner 7 = (+h, +h, +h)


def nocs_normalize(local_points: np.ndarray, half_extents: np.ndarray) -> np.ndarray:
    """Part-local meters -> [0, 1]^3 (each axis scaled by its own extent)."""
    return local_points / (2.0 * half_extents) + 0.5


def nocs_denormalize(nocs: np.ndarray, half_extents: np.ndarray) -> np.ndarray:
    return (nocs - 0.5) * (2.0 * half_extents)


def sample_scene(
    instance: ArticulatedInstance,
    seed,
    n_points: int = DEFAULT_N_POINTS,
    tau: float = DEFAULT_CONTACT_TAU,
    template: HandTemplate | None = None,
    scene_id: str = "",
) -> SceneRecord:
    """Sample joint state, grasp, and camera; render and annotate.

    Deterministic in (instance, seed). Raises GraspFailure / EmptyView when
    the draw is unusable; callers that need a fixed scene count retry with
    fresh sub-seeds.
    """
    rng = np.random.default_rng(seed)
    template = template or default_hand_template()
    limits = instance.joint_limits()
    joint_state = rng.uniform(limits[:, 0], limits[:, 1])

    hand_obj = pose_hand_grasp(
        instance, joint_state, rng.integers(2**63), tau=tau, template=template
    )

    poses_obj = part_poses_object(instance, joint_state)
    canonical = [OrientedBox.from_extents(p.half_extents) for p in instance.parts]
    boxes_obj = [transform_box(c, p) for c, p in zip(canonical, poses_obj)]
    extremes = np.concatenate(
        [b.vertices for b in boxes_obj] + [hand_obj.joints()]
    )
    target = extremes.mean(axis=0)
    scene_radius = float(np.linalg.norm(extremes - target, axis=1).max())

    base_camera = sample_camera(rng, target, scene_radius)
    extr = SimilarityTransform(base_camera.R, base_camera.t, 1.0)
    poses_cam = [extr.compose(p) for p in poses_obj]
    boxes_cam = [transform_box(c, p) for c, p in zip(canonical, poses_cam)]
    hand_cam = hand_obj.rerooted(extr)

    # thin scenes can cover fewer pixels than the point budget at the base
    # zoom; deterministically retry the same viewpoint zoomed in
    camera = base_camera
    for zoom in (1.0, 1.5, 2.2):
        camera = replace(base_camera, fx=base_camera.fx * zoom, fy=base_camera.fy * zoom)
        try:
            cloud, seg, _vis = render_partial_cloud(
                [(box, i + 1) for i, box in enumerate(boxes_cam)],
                capsules_world(hand_cam),
                camera,
                n_points,
                rng,
            )
            break
        except EmptyView:
            if zoom == 2.2:
                raise

    nocs = np.zeros_like(cloud)
    for i, (pose, part) in enumerate(zip(poses_cam, instance.parts)):
        members = seg == i + 1
        if not members.any():
            continue
        local = (cloud[members] - pose.t) @ pose.R / pose.s
        nocs[members] = nocs_normalize(local, part.half_extents)

    contact = np.zeros(n_points, dtype=np.uint8)
    obj_mask = seg != HAND_LABEL
    hand_surface = hand_cam.surface()
    if obj_mask.any():
        contact[obj_mask] = compute_contact_map(cloud[obj_mask], hand_surface, tau)

    return SceneRecord(
        scene_id=scene_id,
        category=instance.category,
        cloud=cloud,
        seg=seg,
        nocs=nocs,
        contact=contact,
        part_poses=poses_cam,
        canonical_boxes=canonical,
        posed_boxes=boxes_cam,
        hand=hand_cam,
        hand_joints=hand_cam.joints(),
        hand_surface=hand_surface,
        camera=camera,
        joint_state=joint_state,
        tau=tau,
        scene_seed=int(seed) if isinstance(seed, (int, np.integer)) else -1,
    )
