"""Estimator: encoder properties, loss oracle, pose assembly, training."""

import csv

import numpy as np
import pytest

from artipose import autodiff as ad
from artipose import estimator as E
from artipose import nn
from artipose.geometry import matrix_to_rot6d, rot6d_to_matrix, rotation_error
from artipose.synth import make_instance, sample_scene
from helpers import rel_err


@pytest.fixture(scope="module")
def scene():
    inst = make_instance("laptop", 4)
    return sample_scene(inst, np.random.SeedSequence([4, 1]), scene_id="s0")


@pytest.fixture(scope="module")
def net():
    return E.Estimator.create(E.EstimatorSpec(part_count=2), seed=0)


class TestEncoder:
    def test_permutation_equivariance(self, net, scene):
        cloud = scene.cloud.astype(np.float32)
        rng = np.random.default_rng(0)
        enc = net.encode(cloud)
        for _ in range(3):
            perm = rng.permutation(len(cloud))
            enc_p = net.encode(cloud[perm])
            assert np.array_equal(enc.z[perm], enc_p.z)
            assert np.array_equal(enc.global_feat, enc_p.global_feat)

    def test_duplicated_point_duplicated_row(self, net):
        rng = np.random.default_rng(1)
        cloud = rng.normal(size=(32, 3)).astype(np.float32)
        cloud[17] = cloud[3]
        enc = net.encode(cloud)
        assert np.array_equal(enc.z[17], enc.z[3])

    def test_global_feature_is_max_of_locals(self, net):
        # recomputation oracle: run the shared MLP by hand, max-pool
        rng = np.random.default_rng(2)
        cloud = rng.normal(size=(40, 3)).astype(np.float32)
        enc = net.encode(cloud)
        h = cloud
        for i in range(2):
            w = net.store.params[f"enc{i}.w0"]
            b = net.store.params[f"enc{i}.b0"]
            h = np.maximum(h @ w + b, 0)
        local_dim = net.spec.local_dim
        assert np.allclose(enc.z[:, :local_dim], h, atol=1e-6)
        assert np.allclose(enc.global_feat[:local_dim], h.max(axis=0), atol=1e-6)
        assert np.allclose(enc.global_feat[local_dim:], h.mean(axis=0), atol=1e-5)
        # broadcast copy of the max-pool rides along in z
        assert np.allclose(enc.z[:, local_dim:], h.max(axis=0), atol=1e-6)

    def test_too_small_cloud_rejected(self, net):
        with pytest.raises(E.ShapeMismatch):
            net.encode(np.zeros((4, 3), dtype=np.float32))


class TestHeads:
    def test_output_shapes(self, net, scene):
        out = net.head_output(scene.cloud)
        n = len(scene.cloud)
        assert out.seg_logits.shape == (n, 3)
        assert out.nocs.shape == (n, 3)
        assert out.rot6d.shape == (2, 6)
        assert np.isfinite(out.seg_logits).all()

    def test_predict_consumes_encoder_output(self, net, scene):
        enc = net.encode(net.prepare_input(scene.cloud))
        out = net.predict(enc)
        out2 = net.head_output(scene.cloud)
        assert np.array_equal(out.seg_logits, out2.seg_logits)
        assert np.array_equal(out.rot6d, out2.rot6d)


class TestPoseLoss:
    def test_exact_prediction_near_zero(self, scene):
        gt_rot = E.gt_rot6d(scene.part_poses)
        pred = E.HeadOutput(
            seg_logits=np.eye(3)[scene.seg] * 20.0,
            nocs=scene.nocs.copy(),
            rot6d=gt_rot.copy(),
        )
        loss = E.pose_loss(pred, scene.seg, scene.nocs, gt_rot)
        assert 0 <= loss < 1e-6

    def test_unit_rotation_offset(self, scene):
        gt_rot = E.gt_rot6d(scene.part_poses)[:1]
        pred = E.HeadOutput(
            seg_logits=np.eye(3)[scene.seg] * 20.0,
            nocs=scene.nocs.copy(),
            rot6d=gt_rot + np.array([[1.0, 0, 0, 0, 0, 0]]),
        )
        loss = E.pose_loss(
            pred, scene.seg, scene.nocs, gt_rot, lambda_seg=0.0, lambda_rot=1.0, lambda_nocs=0.0
        )
        assert loss == pytest.approx(1.0, abs=1e-12)

    def test_matches_recomputation_oracle(self, scene):
        rng = np.random.default_rng(3)
        n = len(scene.seg)
        pred = E.HeadOutput(
            seg_logits=rng.normal(size=(n, 3)),
            nocs=rng.normal(size=(n, 3)),
            rot6d=rng.normal(size=(2, 6)),
        )
        gt_rot = rng.normal(size=(2, 6))
        ls, lr, ln = 0.7, 1.3, 4.0
        got = E.pose_loss(pred, scene.seg, scene.nocs, gt_rot, ls, lr, ln)
        # independent scalar recomputation
        p = np.exp(pred.seg_logits - pred.seg_logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        ce = -np.log(p[np.arange(n), scene.seg]).mean()
        rot = sum(np.linalg.norm(pred.rot6d[k] - gt_rot[k]) for k in range(2))
        mask = scene.seg > 0
        nocs = np.linalg.norm((pred.nocs - scene.nocs)[mask], axis=1).mean()
        expect = ls * ce + lr * rot + ln * nocs
        assert rel_err(got, expect) < 1e-10

    def test_graph_matches_scalar(self, net, scene):
        gt_rot = E.gt_rot6d(scene.part_poses).astype(np.float32)
        cloud32 = net.prepare_input(scene.cloud)
        tape = ad.Tape()
        z, pooled = net.encode_graph(tape, cloud32[None])
        seg, nocs, rot = net.heads_graph(tape, z, pooled)
        total, _ = E.pose_loss_graph(
            tape, seg, nocs, rot, scene.seg[None], scene.nocs[None].astype(np.float32),
            gt_rot[None], 1.0, 1.0, 10.0,
        )
        out = E.HeadOutput(seg.data, nocs.data, rot.data[0])
        scalar = E.pose_loss(out, scene.seg, scene.nocs, gt_rot)
        assert rel_err(float(total.data), scalar) < 1e-4


class TestAssemblePose:
    def test_ground_truth_round_trip(self, scene):
        pred = E.HeadOutput(
            seg_logits=np.eye(3)[scene.seg] * 20.0,
            nocs=scene.nocs.copy(),
            rot6d=E.gt_rot6d(scene.part_poses),
        )
        ests = E.assemble_pose(scene.cloud, pred, scene.canonical_boxes)
        for est, gt in zip(ests, scene.part_poses):
            assert est.valid
            assert rotation_error(est.pose.R, gt.R) < 1e-5
            assert np.linalg.norm(est.pose.t - gt.t) < 1e-5
            assert abs(est.pose.s - gt.s) < 1e-5
            assert np.allclose(
                est.box.vertices,
                np.asarray([b.vertices for b in scene.posed_boxes])[est.part],
                atol=1e-5,
            )

    def test_starved_parts_marked_invalid(self, scene):
        n = len(scene.cloud)
        pred = E.HeadOutput(
            seg_logits=np.tile([0.0, 20.0, 0.0], (n, 1)),  # everything -> part 0
            nocs=scene.nocs.copy(),
            rot6d=E.gt_rot6d(scene.part_poses),
        )
        ests = E.assemble_pose(scene.cloud, pred, scene.canonical_boxes)
        assert ests[0].valid
        assert not ests[1].valid
        assert len(ests[1].members) == 0

    def test_scale_consistency(self, scene):
        # with a fixed HeadOutput, fitting on k-scaled points scales (s, t)
        # by k and leaves R untouched
        pred = E.HeadOutput(
            seg_logits=np.eye(3)[scene.seg] * 20.0,
            nocs=scene.nocs.copy(),
            rot6d=E.gt_rot6d(scene.part_poses),
        )
        base = E.assemble_pose(scene.cloud, pred, scene.canonical_boxes)
        k = 2.5
        scaled = E.assemble_pose(k * scene.cloud, pred, scene.canonical_boxes)
        for b, s in zip(base, scaled):
            assert np.allclose(s.pose.R, b.pose.R, atol=1e-9)
            assert s.pose.s == pytest.approx(k * b.pose.s, rel=1e-9)
            assert np.allclose(s.pose.t, k * b.pose.t, atol=1e-9)

    def test_member_nocs_perturbation_gradient(self, scene):
        # finite difference of t w.r.t. one member's NOCS entry
        labels = scene.seg.copy()
        sets = E.member_sets(labels, 2)
        half = np.stack([b.vertices[7] for b in scene.canonical_boxes])
        nocs0 = scene.nocs.copy()
        rot = E.gt_rot6d(scene.part_poses)

        def t_of(nocs_arr, return_grad_var=False):
            tape = ad.Tape()
            nv = ad.leaf(nocs_arr, tape)
            got = E.assemble_graph(
                tape, scene.cloud, nv, ad.const(rot, tape), sets, half
            )
            t_sum = ad.vsum(got[0]["t"])
            return t_sum, nv, tape

        out, nv, tape = t_of(nocs0)
        tape.backward(out)
        target = sets[0][0]  # first member of part 0
        h = 1e-6
        for axis in range(3):
            np_, nm = nocs0.copy(), nocs0.copy()
            np_[target, axis] += h
            nm[target, axis] -= h
            fd = (float(t_of(np_)[0].data) - float(t_of(nm)[0].data)) / (2 * h)
            assert rel_err(float(nv.grad[target, axis]), fd, floor=1e-8) < 1e-3


class TestTraining:
    def test_single_scene_overfit(self, scene, tmp_path):
        cfg = E.TrainConfig(epochs=60, batch_size=1, lr=3e-3, seed=1)
        E.train_estimator([scene], cfg, tmp_path)
        rows = list(csv.reader(open(tmp_path / "loss_log.csv")))
        first, last = float(rows[1][1]), float(rows[-1][1])
        assert last < 0.3 * first

    def test_pose_only_config_logs_zero_prior_terms(self, scene, tmp_path):
        cfg = E.TrainConfig(epochs=3, batch_size=1, seed=2)
        E.train_estimator([scene], cfg, tmp_path)
        rows = list(csv.reader(open(tmp_path / "loss_log.csv")))
        head = rows[0]
        for row in rows[1:]:
            rec = dict(zip(head, row))
            assert float(rec["L_adv"]) == 0.0
            assert float(rec["L_diff"]) == 0.0
            assert float(rec["L_D"]) == 0.0

    def test_fixed_seed_bit_identical_checkpoint(self, scene, tmp_path):
        cfg = E.TrainConfig(epochs=4, batch_size=1, lambda_diff=1.0, seed=3)
        a = E.train_estimator([scene], cfg, tmp_path / "a")
        b = E.train_estimator([scene], cfg, tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_config_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"epochs": 3, "warp_drive": true}')
        with pytest.raises(ValueError):
            E.TrainConfig.from_json(path)
