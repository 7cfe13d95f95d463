"""Procedural dataset: instances, grasps, rendering, scene annotations, I/O."""

import numpy as np
import pytest

from artipose import geometry as geo
from artipose.synth import (
    Camera,
    KinematicHand,
    default_hand_template,
    generate_dataset,
    load_dataset,
    make_instance,
    part_poses_object,
    pose_hand_grasp,
    render_partial_cloud,
    sample_scene,
)
from artipose.synth.hand import capsules_world
from artipose.synth.scene import nocs_denormalize
from helpers import box_surface_points


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------

class TestMakeInstance:
    def test_laptop_template(self):
        inst = make_instance("laptop", 3)
        assert inst.part_count == 2
        assert len(inst.joints) == 1
        assert inst.joints[0].kind == "revolute"
        lo, hi = inst.joints[0].limits
        assert lo == 0.0 and hi == pytest.approx(np.radians(135))

    def test_three_drawer_template(self):
        inst = make_instance("drawer", 5, drawers=3)
        assert inst.part_count == 4
        assert all(j.kind == "prismatic" for j in inst.joints)
        axes = np.stack([j.axis for j in inst.joints])
        assert np.allclose(axes, axes[0])  # parallel slide axes

    def test_deterministic(self):
        for cat in ("laptop", "drawer", "safe", "microwave", "trashcan"):
            a = make_instance(cat, 42)
            b = make_instance(cat, 42)
            for pa, pb in zip(a.parts, b.parts):
                assert (pa.half_extents == pb.half_extents).all()
                assert (pa.rest_position == pb.rest_position).all()
            assert make_instance(cat, 43).parts[0].half_extents.tolist() != a.parts[
                0
            ].half_extents.tolist()

    def test_jitter_within_quarter(self):
        base = None
        for seed in range(30):
            inst = make_instance("laptop", seed)
            h = inst.parts[0].half_extents
            ref = np.array([0.16, 0.11, 0.012])
            assert (h >= 0.75 * ref - 1e-12).all()
            assert (h <= 1.25 * ref + 1e-12).all()

    def test_unknown_category(self):
        with pytest.raises(ValueError):
            make_instance("toaster", 0)

    def test_drawer_boxes_parallel_edges(self):
        # the structural regularity the articulation prior must learn
        inst = make_instance("drawer", 11, drawers=3)
        rng = np.random.default_rng(0)
        limits = inst.joint_limits()
        q = rng.uniform(limits[:, 0], limits[:, 1])
        poses = part_poses_object(inst, q)
        boxes = [
            geo.transform_box(geo.OrientedBox.from_extents(p.half_extents), pp)
            for p, pp in zip(inst.parts, poses)
        ]
        sliders = boxes[1:]
        for a in sliders:
            for b in sliders:
                ea = a.edge_vectors()
                eb = b.edge_vectors()
                for k in range(3):
                    ua = ea[k] / np.linalg.norm(ea[k])
                    ub = eb[k] / np.linalg.norm(eb[k])
                    assert ua @ ub > 1 - 1e-9


# ---------------------------------------------------------------------------
# hand FK
# ---------------------------------------------------------------------------

class TestHand:
    def test_joint_and_surface_counts(self):
        tmpl = default_hand_template(512)
        hand = KinematicHand(np.eye(3), np.zeros(3), np.zeros(15), tmpl)
        assert hand.joints().shape == (21, 3)
        assert hand.surface().shape == (512, 3)

    def test_surface_count_follows_template(self):
        tmpl = default_hand_template(200)
        hand = KinematicHand(np.eye(3), np.zeros(3), np.full(15, 0.3), tmpl)
        assert hand.surface().shape == (200, 3)

    def test_angle_limits_enforced(self):
        tmpl = default_hand_template()
        with pytest.raises(ValueError):
            KinematicHand(np.eye(3), np.zeros(3), np.full(15, 2.0), tmpl)

    def test_params_round_trip(self):
        tmpl = default_hand_template()
        rng = np.random.default_rng(4)
        hand = KinematicHand(np.eye(3), rng.normal(size=3), rng.uniform(0, 1.2, 15), tmpl)
        clone = KinematicHand.from_params(hand.params(), tmpl)
        assert np.allclose(clone.joints(), hand.joints())
        assert np.allclose(clone.surface(), hand.surface())

    def test_flexion_curls_toward_palm_normal(self):
        tmpl = default_hand_template()
        flat = KinematicHand(np.eye(3), np.zeros(3), np.zeros(15), tmpl)
        bent = KinematicHand(np.eye(3), np.zeros(3), np.full(15, 0.8), tmpl)
        # palm normal is +z in the root frame: tips must move to z > 0
        assert (bent.joints()[4::4, 2] > flat.joints()[4::4, 2] + 0.01).all()

    def test_root_transform_equivariance(self):
        tmpl = default_hand_template()
        rng = np.random.default_rng(5)
        angles = rng.uniform(0, 1.0, 15)
        base = KinematicHand(np.eye(3), np.zeros(3), angles, tmpl)
        pose = geo.SimilarityTransform(
            geo.rot6d_to_matrix(rng.normal(size=6)), rng.normal(size=3), 1.0
        )
        moved = base.rerooted(pose)
        assert np.allclose(moved.joints(), pose.apply(base.joints()), atol=1e-12)


# ---------------------------------------------------------------------------
# grasping
# ---------------------------------------------------------------------------

class TestGrasp:
    def test_laptop_contact_count(self):
        rng = np.random.default_rng(0)
        for seed in range(5):
            inst = make_instance("laptop", seed)
            q = [np.radians(80.0)]
            hand = pose_hand_grasp(inst, q, seed)
            boxes = [
                geo.transform_box(geo.OrientedBox.from_extents(p.half_extents), pp)
                for p, pp in zip(inst.parts, part_poses_object(inst, q))
            ]
            dense = np.vstack([box_surface_points(b, 6000, rng) for b in boxes])
            contact = geo.compute_contact_map(dense, hand.surface(), 0.01)
            assert int(contact.sum()) >= 20

    def test_seeds_differ_but_each_is_deterministic(self):
        inst = make_instance("laptop", 1)
        q = [np.radians(60.0)]
        h1 = pose_hand_grasp(inst, q, 100)
        h2 = pose_hand_grasp(inst, q, 101)
        h1b = pose_hand_grasp(inst, q, 100)
        assert not np.allclose(h1.root_position, h2.root_position)
        assert (h1.params() == h1b.params()).all()

    def test_drawer_contacts_near_front_face(self):
        inst = make_instance("drawer", 7, drawers=1)
        q = [0.2]
        hand = pose_hand_grasp(inst, q, 3)
        pose = part_poses_object(inst, q)[1]
        part = inst.parts[1]
        rng = np.random.default_rng(1)
        boxes = [
            geo.transform_box(geo.OrientedBox.from_extents(p.half_extents), pp)
            for p, pp in zip(inst.parts, part_poses_object(inst, q))
        ]
        dense = np.vstack([box_surface_points(b, 6000, rng) for b in boxes])
        contact = geo.compute_contact_map(dense, hand.surface(), 0.01).astype(bool)
        assert contact.sum() >= 20
        # distance to the drawer front face plane (normal +y of the part)
        front_center = pose.apply([0.0, part.half_extents[1], 0.0])
        normal = pose.R @ np.array([0.0, 1.0, 0.0])
        dist = np.abs((dense[contact] - front_center) @ normal)
        assert (dist < 0.05).mean() >= 0.8


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def overhead_camera(height=1.0, focal=200.0):
    # looking straight down -z from above with a slight offset to avoid the
    # degenerate up-direction case
    pos = np.array([1e-3, 1e-3, height])
    fwd = -pos / np.linalg.norm(pos)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(fwd, up)
    x /= np.linalg.norm(x)
    y = np.cross(fwd, x)
    R = np.stack([x, y, fwd], axis=0)
    return Camera(focal, focal, 79.5, 59.5, 160, 120, R, -R @ pos)


class TestRender:
    def test_only_camera_facing_surfaces(self):
        cam = overhead_camera()
        box = geo.OrientedBox.from_extents([0.2, 0.2, 0.1])
        rng = np.random.default_rng(0)
        extr = geo.SimilarityTransform(cam.R, cam.t, 1.0)
        pts, labs, vis = render_partial_cloud(
            [(geo.transform_box(box, extr), 1)], [], cam, 512, rng
        )
        # back to world: all points must lie on the top face z = +0.1
        world = (pts - cam.t) @ cam.R
        assert np.allclose(world[:, 2], 0.1, atol=1e-9)
        assert (labs == 1).all()

    def test_exact_point_budget(self):
        cam = overhead_camera()
        box = geo.OrientedBox.from_extents([0.2, 0.2, 0.1])
        extr = geo.SimilarityTransform(cam.R, cam.t, 1.0)
        pts, labs, _ = render_partial_cloud(
            [(geo.transform_box(box, extr), 1)], [], cam, 512, np.random.default_rng(1)
        )
        assert pts.shape == (512, 3) and labs.shape == (512,)

    def test_occlusion_reduces_base_visibility(self):
        # an open laptop seen from straight above vs. from a low angle:
        # the lid occludes part of the base at the grazing view
        inst = make_instance("laptop", 2)
        q = [np.radians(120.0)]
        poses = part_poses_object(inst, q)
        boxes = [
            geo.transform_box(geo.OrientedBox.from_extents(p.half_extents), pp)
            for p, pp in zip(inst.parts, poses)
        ]

        def vis_from(pos):
            fwd = -pos / np.linalg.norm(pos)
            up = np.array([0.0, 0.0, 1.0])
            x = np.cross(fwd, up)
            x /= np.linalg.norm(x)
            y = np.cross(fwd, x)
            R = np.stack([x, y, fwd], axis=0)
            cam = Camera(250.0, 250.0, 79.5, 59.5, 160, 120, R, -R @ pos)
            extr = geo.SimilarityTransform(cam.R, cam.t, 1.0)
            _, _, vis = render_partial_cloud(
                [(geo.transform_box(b, extr), i + 1) for i, b in enumerate(boxes)],
                [],
                cam,
                256,
                np.random.default_rng(2),
            )
            return vis

        top = vis_from(np.array([1e-3, 0.3, 1.2]))
        # behind the lid, low: the lid blocks the base
        grazing = vis_from(np.array([1e-3, 0.9, 0.15]))
        assert grazing[1] < top[1]

    def test_capsule_rendering_hits(self):
        cam = overhead_camera()
        A = cam.to_camera(np.array([-0.1, 0.0, 0.2]))
        B = cam.to_camera(np.array([0.1, 0.0, 0.2]))
        pts, labs, vis = render_partial_cloud(
            [], [(A, B, 0.03)], cam, 128, np.random.default_rng(3)
        )
        assert (labs == 0).all()
        world = (pts - cam.t) @ cam.R
        # every point on the capsule surface: distance to segment == radius
        tt = np.clip((world[:, 0] + 0.1) / 0.2, 0, 1)
        nearest = np.stack([-0.1 + 0.2 * tt, np.zeros_like(tt), np.full_like(tt, 0.2)], axis=1)
        assert np.allclose(np.linalg.norm(world - nearest, axis=1), 0.03, atol=1e-9)


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def laptop_scene():
    inst = make_instance("laptop", 4)
    return sample_scene(inst, np.random.SeedSequence([4, 0]), scene_id="s0")


class TestSampleScene:
    def test_posed_boxes_match_transform(self, laptop_scene):
        rec = laptop_scene
        for canon, pose, posed in zip(
            rec.canonical_boxes, rec.part_poses, rec.posed_boxes
        ):
            expect = geo.transform_box(canon, pose)
            assert np.allclose(expect.vertices, posed.vertices, atol=1e-12)

    def test_nocs_in_unit_cube(self, laptop_scene):
        rec = laptop_scene
        obj = rec.seg > 0
        assert (rec.nocs[obj] >= -1e-9).all()
        assert (rec.nocs[obj] <= 1 + 1e-9).all()

    def test_nocs_round_trip(self, laptop_scene):
        rec = laptop_scene
        for i, (pose, canon) in enumerate(zip(rec.part_poses, rec.canonical_boxes)):
            m = rec.seg == i + 1
            if not m.any():
                continue
            local = nocs_denormalize(rec.nocs[m], canon.vertices[7])
            back = pose.s * local @ pose.R.T + pose.t
            assert np.abs(back - rec.cloud[m]).max() < 1e-6

    def test_contact_matches_geometry_oracle(self, laptop_scene):
        rec = laptop_scene
        obj = rec.seg > 0
        expect = geo.compute_contact_map(rec.cloud[obj], rec.hand_surface, rec.tau)
        assert (rec.contact[obj] == expect).all()
        assert (rec.contact[~obj] == 0).all()

    def test_hand_annotations_consistent(self, laptop_scene):
        rec = laptop_scene
        assert np.allclose(rec.hand_joints, rec.hand.joints())
        assert np.allclose(rec.hand_surface, rec.hand.surface())


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------

def tree_bytes(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


class TestDataset:
    def test_generation_deterministic(self, tmp_path):
        a = generate_dataset(tmp_path / "a", "laptop", 3, seed=9)
        b = generate_dataset(tmp_path / "b", "laptop", 3, seed=9)
        ta, tb = tree_bytes(a), tree_bytes(b)
        assert list(ta) == list(tb)
        for k in ta:
            assert ta[k] == tb[k], k

    def test_different_seed_differs(self, tmp_path):
        a = generate_dataset(tmp_path / "a", "laptop", 2, seed=1)
        b = generate_dataset(tmp_path / "b", "laptop", 2, seed=2)
        assert (
            (tmp_path / "a" / "scenes" / "scene_000000" / "cloud.f32").read_bytes()
            != (tmp_path / "b" / "scenes" / "scene_000000" / "cloud.f32").read_bytes()
        )

    def test_load_round_trip(self, tmp_path):
        root = generate_dataset(tmp_path / "ds", "drawer", 2, seed=3, drawers=2)
        manifest, scenes = load_dataset(root)
        assert manifest["part_count"] == 3
        assert len(scenes) == 2
        rec = scenes[0]
        assert rec.cloud.shape == (manifest["n_points"], 3)
        assert rec.part_count == 3
        # loaded annotations stay mutually consistent at float32 precision
        for canon, pose, posed in zip(
            rec.canonical_boxes, rec.part_poses, rec.posed_boxes
        ):
            assert np.allclose(
                geo.transform_box(canon, pose).vertices, posed.vertices, atol=1e-5
            )
        obj = rec.seg > 0
        expect = geo.compute_contact_map(rec.cloud[obj], rec.hand_surface, rec.tau)
        # f32 rounding can flip points that sit exactly at the threshold
        assert (rec.contact[obj] == expect).mean() > 0.999

    def test_min_contacts_respected(self, tmp_path):
        root = generate_dataset(tmp_path / "ds", "laptop", 3, seed=5, min_contacts=8)
        _, scenes = load_dataset(root)
        assert all(int(r.contact.sum()) >= 8 for r in scenes)
