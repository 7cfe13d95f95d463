"""Multi-branch object pose estimator: point encoder, three heads, pose
assembly through the closed-form similarity fit, and the training loop.

Architecture: a shared per-point MLP (3 -> 64 -> 128) max-pooled into a
global feature that is broadcast back and concatenated, giving a per-point
feature of width 256. Three MLP heads predict part segmentation (hand +
P parts), a per-point NOCS 3-vector, and one 6D rotation per part (from the
pooled feature alone). Translation and scale are recovered analytically, so
box corners are differentiable functions of the head outputs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import diffgeom as dg
from . import nn
from .errors import DegenerateCorrespondences, DegenerateRotation, ShapeMismatch, TooFewPoints
from .geometry import OrientedBox, SimilarityTransform, matrix_to_rot6d

HAND_CLASS = 0


@dataclass(frozen=True)
class EstimatorSpec:
    """Widths and part count; per-point feature width F = 2 * local width.

    center_input subtracts the per-scene centroid before encoding (the
    similarity fit still runs on raw camera-frame coordinates). The rotation
    head reads the max+mean pooled summary plus a segmentation-weighted
    per-part pooled feature and a one-hot part id, shared across parts.
    """

    part_count: int
    local_widths: tuple = (3, 64, 128)
    head_hidden: int = 128
    rot_hidden: int = 256
    center_input: bool = True

    @property
    def local_dim(self) -> int:
        return self.local_widths[-1]

    @property
    def feature_dim(self) -> int:
        return 2 * self.local_dim

    @property
    def pooled_dim(self) -> int:
        return 2 * self.local_dim  # max + mean pooled

    @property
    def rot_in_dim(self) -> int:
        return self.pooled_dim + self.local_dim + self.part_count

    @property
    def n_classes(self) -> int:
        return self.part_count + 1

    def head_specs(self) -> dict:
        return {
            "seg": nn.MlpSpec((self.feature_dim, self.head_hidden, self.n_classes)),
            "nocs": nn.MlpSpec((self.feature_dim, self.head_hidden, 3)),
            "rot": nn.MlpSpec((self.rot_in_dim, self.rot_hidden, 6)),
        }


@dataclass
class EncoderOutput:
    z: np.ndarray  # (N, F) per-point features: concat(local, broadcast max-pool)
    global_feat: np.ndarray  # (pooled_dim,) max+mean pooled summary


@dataclass
class HeadOutput:
    seg_logits: np.ndarray  # (N, P+1)
    nocs: np.ndarray  # (N, 3)
    rot6d: np.ndarray  # (P, 6)


@dataclass
class PartPoseEstimate:
    part: int
    valid: bool
    pose: SimilarityTransform | None
    box: OrientedBox | None
    members: np.ndarray  # member point indices
    reason: str = ""


class Estimator:
    """Parameter bundle + forward passes. One instance per category."""

    def __init__(self, spec: EstimatorSpec, store: nn.ParamStore):
        self.spec = spec
        self.store = store

    @classmethod
    def create(cls, spec: EstimatorSpec, seed: int) -> "Estimator":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        store = nn.ParamStore()
        widths = spec.local_widths
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            nn.init_mlp(store, f"enc{i}", nn.MlpSpec((a, b)), rng)
        for name, head_spec in spec.head_specs().items():
            nn.init_mlp(store, name, head_spec, rng)
        return cls(spec, store)

    def clone(self) -> "Estimator":
        return Estimator(self.spec, self.store.clone())

    # -- graph builders -----------------------------------------------------

    def encode_graph(self, tape: ad.Tape, clouds: np.ndarray):
        """clouds (B, N, 3) -> (z (B*N, F), pooled (B, pooled_dim)) Vars."""
        if clouds.ndim != 3 or clouds.shape[2] != 3:
            raise ShapeMismatch(f"expected (B, N, 3) clouds, got {clouds.shape}")
        B, N, _ = clouds.shape
        h = ad.const(clouds.reshape(B * N, 3), tape)
        widths = self.spec.local_widths
        for i in range(len(widths) - 1):
            w = self.store.use(f"enc{i}.w0", tape, dtype=h.data.dtype)
            b = self.store.use(f"enc{i}.b0", tape, dtype=h.data.dtype)
            h = ad.relu(ad.add(ad.matmul(h, w), b))
        local = h  # (B*N, local_dim)
        stacked = ad.reshape(local, (B, N, self.spec.local_dim))
        mx = ad.vmax(stacked, axis=1)
        pooled = ad.concat([mx, ad.vmean(stacked, axis=1)], axis=1)
        z = ad.concat([local, ad.repeat_rows(mx, N)], axis=1)
        return z, pooled

    def heads_graph(self, tape: ad.Tape, z: ad.Var, pooled: ad.Var):
        """-> (seg_logits (B*N, P+1), nocs (B*N, 3), rot6d (B, P, 6)) Vars."""
        dtype = z.data.dtype
        P = self.spec.part_count
        B = pooled.data.shape[0]
        N = z.data.shape[0] // B
        specs = self.spec.head_specs()
        seg = nn.mlp_apply(specs["seg"], self.store, "seg", z, dtype=dtype)
        nocs = nn.mlp_apply(specs["nocs"], self.store, "nocs", z, dtype=dtype)

        # soft per-part pooled feature from the segmentation weights
        local = ad.take(z, np.arange(self.spec.local_dim), axis=-1)
        shift = ad.const(seg.data.max(axis=1, keepdims=True), tape)
        expd = ad.exp(ad.sub(seg, shift))
        weights = ad.div(expd, ad.vsum(expd, axis=1, keepdims=True))
        rows = []
        eye = np.eye(P, dtype=dtype)
        for p in range(P):
            w_p = ad.reshape(ad.take(weights, np.array([p + 1]), axis=-1), (B, N, 1))
            num = ad.vsum(
                ad.mul(ad.reshape(local, (B, N, self.spec.local_dim)), w_p), axis=1
            )
            den = ad.add(ad.vsum(w_p, axis=1), 1e-6)
            part_feat = ad.div(num, den)
            onehot = ad.const(np.tile(eye[p], (B, 1)), tape)
            rows.append(ad.concat([pooled, part_feat, onehot], axis=1))
        rot_in = ad.concat(rows, axis=0)  # (P*B, rot_in_dim), part-major
        rot_flat = nn.mlp_apply(specs["rot"], self.store, "rot", rot_in, dtype=dtype)
        rot = ad.permute(ad.reshape(rot_flat, (P, B, 6)), (1, 0, 2))
        return seg, nocs, rot

    # -- public per-scene forward -------------------------------------------

    def prepare_input(self, cloud: np.ndarray) -> np.ndarray:
        """Encoder input view of a cloud (centered when configured)."""
        cloud = np.asarray(cloud, dtype=np.float32)
        if self.spec.center_input:
            cloud = cloud - cloud.mean(axis=0)
        return cloud

    def encode(self, cloud: np.ndarray) -> EncoderOutput:
        cloud = np.asarray(cloud, dtype=np.float32)
        if cloud.ndim != 2 or cloud.shape[1] != 3 or cloud.shape[0] < 8:
            raise ShapeMismatch(f"expected (N >= 8, 3) cloud, got {cloud.shape}")
        tape = ad.Tape()
        z, pooled = self.encode_graph(tape, cloud[None])
        return EncoderOutput(z=z.data, global_feat=pooled.data[0])

    def predict(self, encoded: EncoderOutput) -> HeadOutput:
        tape = ad.Tape()
        seg, nocs, rot = self.heads_graph(
            tape,
            ad.const(np.asarray(encoded.z, dtype=np.float32), tape),
            ad.const(np.asarray(encoded.global_feat, dtype=np.float32)[None], tape),
        )
        return HeadOutput(seg_logits=seg.data, nocs=nocs.data, rot6d=rot.data[0])

    def head_output(self, cloud: np.ndarray) -> HeadOutput:
        """Full inference pass: prepare -> encode -> heads."""
        return self.predict(self.encode(self.prepare_input(cloud)))


def gt_rot6d(part_poses) -> np.ndarray:
    return np.stack([matrix_to_rot6d(p.R) for p in part_poses])


def pose_loss(
    pred: HeadOutput,
    seg_labels: np.ndarray,
    gt_nocs: np.ndarray,
    gt_rot: np.ndarray,
    lambda_seg: float = 1.0,
    lambda_rot: float = 1.0,
    lambda_nocs: float = 10.0,
) -> float:
    """Scalar pose loss: CE (mean over points) + summed per-part rotation L2
    + NOCS L2 masked to object points (mean over masked points)."""
    logits = np.asarray(pred.seg_logits, dtype=np.float64)
    labels = np.asarray(seg_labels)
    if logits.shape[0] != labels.shape[0]:
        raise ShapeMismatch("seg logits and labels disagree on N")
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    ce = (lse - logits[np.arange(len(labels)), labels]).mean()

    rot_term = np.linalg.norm(
        np.asarray(pred.rot6d, dtype=np.float64) - np.asarray(gt_rot), axis=1
    ).sum()

    mask = labels != HAND_CLASS
    if mask.any():
        diff = np.asarray(pred.nocs, dtype=np.float64)[mask] - np.asarray(gt_nocs)[mask]
        nocs_term = np.linalg.norm(diff, axis=1).mean()
    else:
        nocs_term = 0.0
    return float(lambda_seg * ce + lambda_rot * rot_term + lambda_nocs * nocs_term)


def pose_loss_graph(
    tape: ad.Tape,
    seg: ad.Var,  # (B*N, P+1)
    nocs: ad.Var,  # (B*N, 3)
    rot: ad.Var,  # (B, P, 6)
    seg_labels: np.ndarray,  # (B, N)
    gt_nocs: np.ndarray,  # (B, N, 3)
    gt_rot: np.ndarray,  # (B, P, 6)
    lambda_seg: float,
    lambda_rot: float,
    lambda_nocs: float,
):
    """Batch-mean of the per-scene pose loss; returns (total, parts dict)."""
    B, N = seg_labels.shape
    P = gt_rot.shape[1]
    dtype = seg.data.dtype

    ce = ad.vmean(ad.softmax_cross_entropy(seg, seg_labels.reshape(-1)))

    rot_diff = ad.sub(ad.reshape(rot, (B * P, 6)), ad.const(gt_rot.reshape(B * P, 6).astype(dtype), tape))
    rot_term = ad.mul(ad.vsum(ad.norm_rows(rot_diff)), 1.0 / B)

    mask = (seg_labels.reshape(-1) != HAND_CLASS).astype(dtype)
    per_scene_counts = mask.reshape(B, N).sum(axis=1)
    weights = np.where(
        per_scene_counts > 0, 1.0 / (B * np.maximum(per_scene_counts, 1.0)), 0.0
    )
    point_w = np.repeat(weights, N) * mask  # (B*N,)
    diff = ad.sub(nocs, ad.const(gt_nocs.reshape(B * N, 3).astype(dtype), tape))
    nocs_term = ad.vsum(ad.mul(ad.norm_rows(diff), ad.const(point_w.astype(dtype), tape)))

    total = ad.add(
        ad.add(ad.mul(ce, lambda_seg), ad.mul(rot_term, lambda_rot)),
        ad.mul(nocs_term, lambda_nocs),
    )
    parts = {"seg": ce, "rot": rot_term, "nocs": nocs_term}
    return total, parts


def member_sets(labels: np.ndarray, part_count: int) -> list:
    return [np.flatnonzero(labels == p + 1) for p in range(part_count)]


def assemble_graph(
    tape: ad.Tape,
    cloud: np.ndarray,
    nocs: ad.Var,  # (N, 3) rows aligned with cloud
    rot6d: ad.Var,  # (P, 6)
    members: list,  # per-part index arrays
    half_extents: np.ndarray,  # (P, 3)
):
    """Differentiable per-part pose assembly.

    Returns a list of dicts {R, t, s, box} (Vars) or None for parts with
    fewer than 3 member points. Raises DegenerateRotation /
    DegenerateCorrespondences if the predictions defeat the closed forms.
    """
    dtype = nocs.data.dtype
    out = []
    for p, idx in enumerate(members):
        if len(idx) < 3:
            out.append(None)
            continue
        h = half_extents[p]
        r_p = ad.reshape(ad.take(rot6d, np.array([p]), axis=0), (6,))
        R = dg.rot6d_to_matrix(r_p)
        nocs_m = ad.take(nocs, idx, axis=0)
        denorm = ad.mul(ad.sub(nocs_m, 0.5), ad.const((2.0 * h).astype(dtype), tape))
        obs = ad.const(cloud[idx].astype(dtype), tape)
        s, t = dg.fit_translation_scale(denorm, obs, R)
        corners = ad.const((dg.box_vertices_from_extents(h, tape).data).astype(dtype), tape)
        box = dg.transform_points(corners, R, t, s)
        out.append({"R": R, "t": t, "s": s, "box": box})
    return out


def assemble_pose(
    cloud: np.ndarray,
    pred: HeadOutput,
    canonical_boxes: list,
    member_labels: np.ndarray | None = None,
) -> list:
    """Analytic pose + posed box per part from head outputs (numpy in/out).

    Member points come from the argmax segmentation unless member_labels
    overrides them. Parts that defeat the fit (< 3 points, degenerate
    rotation or correspondences) are marked invalid and excluded.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    labels = (
        np.argmax(pred.seg_logits, axis=1)
        if member_labels is None
        else np.asarray(member_labels)
    )
    part_count = pred.rot6d.shape[0]
    if len(canonical_boxes) != part_count:
        raise ShapeMismatch("canonical box count != predicted part count")
    half_extents = np.stack([b.vertices[7] for b in canonical_boxes])
    sets = member_sets(labels, part_count)

    results = []
    for p, idx in enumerate(sets):
        if len(idx) < 3:
            results.append(
                PartPoseEstimate(p, False, None, None, idx, reason=f"{len(idx)} points")
            )
            continue
        tape = ad.Tape()
        try:
            parts = assemble_graph(
                tape,
                cloud[idx],
                ad.const(np.asarray(pred.nocs, dtype=np.float64)[idx], tape),
                ad.const(np.asarray(pred.rot6d, dtype=np.float64), tape),
                [np.arange(len(idx)) if q == p else np.array([], dtype=int) for q in range(part_count)],
                half_extents,
            )
        except (DegenerateRotation, DegenerateCorrespondences) as err:
            results.append(PartPoseEstimate(p, False, None, None, idx, reason=str(err)))
            continue
        got = parts[p]
        pose = SimilarityTransform(got["R"].data, got["t"].data, float(got["s"].data))
        results.append(
            PartPoseEstimate(p, True, pose, OrientedBox(got["box"].data), idx)
        )
    return results


@dataclass
class TrainConfig:
    """Joint training configuration (JSON-serializable)."""

    dataset: str = ""
    category: str = "laptop"
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    d_lr: float = 1e-3
    lambda_seg: float = 1.0
    lambda_rot: float = 1.0
    lambda_nocs: float = 10.0
    lambda_adv: float = 0.0
    lambda_diff: float = 0.0
    seed: int = 0
    lr_schedule: list = field(default_factory=list)  # [[start_epoch, lr], ...]
    diffusion_points: int = 256  # per-scene point subsample for the diffusion loss
    diffusion_steps: int = 100
    checkpoint: str = "model.ckpt"
    loss_log: str = "loss_log.csv"

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for start, value in sorted(self.lr_schedule):
            if epoch >= start:
                lr = value
        return lr

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


LOG_COLUMNS = ["epoch", "L_pose", "L_seg", "L_nocs", "L_rot", "L_adv", "L_diff", "L_D"]


def train_estimator(scenes: list, config: TrainConfig, out_dir) -> Path:
    """Train estimator (+ optional priors) on in-memory scene records.

    Writes `checkpoint` and a per-epoch `loss_log` CSV under out_dir and
    returns the checkpoint path. Deterministic in (scenes, config).
    """
    from . import priors  # local import: priors depends on nn only

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not scenes:
        raise ValueError("empty dataset")

    part_count = scenes[0].part_count
    n_pts = scenes[0].cloud.shape[0]
    spec = EstimatorSpec(part_count=part_count)
    est = Estimator.create(spec, config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 23]))

    clouds = np.stack([s.cloud for s in scenes]).astype(np.float32)
    clouds_in = (
        clouds - clouds.mean(axis=1, keepdims=True) if spec.center_input else clouds
    )
    seg_labels = np.stack([s.seg for s in scenes]).astype(np.int64)
    gt_nocs = np.stack([s.nocs for s in scenes]).astype(np.float32)
    gt_rots = np.stack([gt_rot6d(s.part_poses) for s in scenes]).astype(np.float32)
    extents = np.stack([s.half_extents() for s in scenes])
    real_boxes = np.stack([np.stack([b.vertices for b in s.posed_boxes]) for s in scenes])
    contact_enc = np.stack([2.0 * s.contact.astype(np.float32) - 1.0 for s in scenes])

    use_adv = config.lambda_adv > 0
    use_diff = config.lambda_diff > 0
    disc = (
        priors.Discriminator.create(part_count, config.seed + 1) if use_adv else None
    )
    diffuser = (
        priors.ContactDiffuser.create(
            spec.feature_dim, config.seed + 2, priors.NoiseSchedule.linear(config.diffusion_steps)
        )
        if use_diff
        else None
    )

    n = len(scenes)
    with open(out / config.loss_log, "w", newline="", encoding="utf-8") as logf:
        writer = csv.writer(logf)
        writer.writerow(LOG_COLUMNS)
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            lr_now = config.lr_at(epoch)
            sums = dict.fromkeys(LOG_COLUMNS[1:], 0.0)
            batches = 0
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                B = len(idx)
                tape = ad.Tape()
                z, pooled = est.encode_graph(tape, clouds_in[idx])
                seg, nocs, rot = est.heads_graph(tape, z, pooled)
                total, parts = pose_loss_graph(
                    tape,
                    seg,
                    nocs,
                    rot,
                    seg_labels[idx],
                    gt_nocs[idx],
                    gt_rots[idx],
                    config.lambda_seg,
                    config.lambda_rot,
                    config.lambda_nocs,
                )
                l_pose = float(total.data)

                l_adv = 0.0
                fake_boxes = []
                if use_adv:
                    fake_vars = []
                    for bi, si in enumerate(idx):
                        labels = np.argmax(
                            seg.data[bi * n_pts : (bi + 1) * n_pts], axis=1
                        )
                        sets = member_sets(labels, part_count)
                        nocs_b = ad.take(
                            nocs, np.arange(bi * n_pts, (bi + 1) * n_pts), axis=0
                        )
                        rot_b = ad.reshape(
                            ad.take(rot, np.array([bi]), axis=0), (part_count, 6)
                        )
                        try:
                            got = assemble_graph(
                                tape, clouds[si], nocs_b, rot_b, sets, extents[si]
                            )
                        except (DegenerateRotation, DegenerateCorrespondences):
                            continue
                        if any(g is None for g in got):
                            continue
                        fake_vars.append(ad.stack([g["box"] for g in got], axis=0))
                    if fake_vars:
                        adv_var = priors.g_adv_loss_graph(disc, tape, fake_vars)
                        l_adv = float(adv_var.data)
                        total = ad.add(total, ad.mul(adv_var, config.lambda_adv))
                        fake_boxes = [fv.data.copy() for fv in fake_vars]

                l_diff = 0.0
                if use_diff:
                    sub = rng.integers(0, n_pts, size=(B, config.diffusion_points))
                    rows = (np.arange(B)[:, None] * n_pts + sub).reshape(-1)
                    z_sub = ad.take(z, rows, axis=0)
                    x0 = np.stack(
                        [contact_enc[si][sub[bi]] for bi, si in enumerate(idx)]
                    ).reshape(-1, 1)
                    t_step = int(rng.integers(1, diffuser.schedule.T + 1))
                    eps = rng.standard_normal(x0.shape).astype(np.float32)
                    diff_var = priors.diff_loss_graph(diffuser, tape, z_sub, x0, t_step, eps)
                    l_diff = float(diff_var.data)
                    total = ad.add(total, ad.mul(diff_var, config.lambda_diff))

                est.store.zero_grads()
                if use_diff:
                    diffuser.store.zero_grads()
                tape.backward(total)
                est.store.flush_tape_grads(tape)
                if use_diff:
                    diffuser.store.flush_tape_grads(tape)
                nn.adam_step(est.store, lr=lr_now)
                if use_diff:
                    nn.adam_step(diffuser.store, lr=lr_now)

                l_d = 0.0
                if use_adv and fake_boxes:
                    l_d = priors.d_train_step(
                        disc, real_boxes[idx], np.stack(fake_boxes), lr=config.d_lr
                    )

                for key, val in (
                    ("L_pose", l_pose),
                    ("L_seg", float(parts["seg"].data)),
                    ("L_nocs", float(parts["nocs"].data)),
                    ("L_rot", float(parts["rot"].data)),
                    ("L_adv", l_adv),
                    ("L_diff", l_diff),
                    ("L_D", l_d),
                ):
                    sums[key] += val
                batches += 1
            writer.writerow(
                [epoch] + [repr(sums[c] / batches) for c in LOG_COLUMNS[1:]]
            )

    ckpt = out / config.checkpoint
    stores = {"estimator": est.store}
    meta = {
        "category": config.category,
        "part_count": part_count,
        "feature_dim": spec.feature_dim,
        "local_widths": list(spec.local_widths),
        "head_hidden": spec.head_hidden,
        "rot_hidden": spec.rot_hidden,
        "center_input": spec.center_input,
        "n_points": n_pts,
        "diffusion_steps": config.diffusion_steps,
        "config": {k: getattr(config, k) for k in config.__dataclass_fields__},
    }
    if use_adv:
        stores["discriminator"] = disc.store
    if use_diff:
        stores["diffuser"] = diffuser.store
    nn.save_checkpoint(ckpt, stores, meta=meta)
    return ckpt


def load_estimator(path) -> tuple:
    """Load (Estimator, meta, stores) from a checkpoint file."""
    stores, meta = nn.load_checkpoint(path)
    spec = EstimatorSpec(
        part_count=meta["part_count"],
        local_widths=tuple(meta["local_widths"]),
        head_hidden=meta["head_hidden"],
        rot_hidden=meta.get("rot_hidden", 256),
        center_input=meta.get("center_input", True),
    )
    return Estimator(spec, stores["estimator"]), meta, stores
