"""Test-time adaptation: discriminator-guided estimator refinement and
contact-guided hand pose optimization.

adapt_object clones the estimator per scene, takes a few Adam steps on the
adversarial box-realism term with the discriminator frozen, and re-assembles
poses. optimize_hand descends the symmetric chamfer between the FK hand
surface and the contact point set over the 24 hand parameters (root 6D
rotation + translation + 15 flexion angles), keeping the best iterate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diffgeom as dg
from . import nn
from .errors import (
    DegenerateCorrespondences,
    DegenerateRotation,
    NonFiniteLoss,
    TooFewPoints,
)
from .estimator import Estimator, HeadOutput, assemble_graph, assemble_pose, member_sets
from .geometry import matrix_to_rot6d
from .priors import Discriminator
from .synth.hand import ANGLE_HI, ANGLE_LO, KinematicHand, fk_vars

HEADS_ONLY = "heads_only"
FULL_ENCODER = "full_encoder"


@dataclass(frozen=True)
class TtaConfig:
    steps: int = 10
    lr: float = 1e-4
    scope: str = HEADS_ONLY
    reset_per_scene: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.scope not in (HEADS_ONLY, FULL_ENCODER):
            raise ValueError(f"unknown scope {self.scope!r}")


@dataclass(frozen=True)
class HandOptConfig:
    iters: int = 200
    lr: float = 1e-2

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be >= 1")


@dataclass
class AdaptResult:
    before: list  # PartPoseEstimate per part
    after: list
    trace: list  # adversarial loss per step (step 0 = initial value)
    aborted: str = ""  # nonempty = adaptation failed, after == before


def _scene_forward(est: Estimator, tape: ad.Tape, cloud32: np.ndarray):
    z, pooled = est.encode_graph(tape, cloud32[None])
    return est.heads_graph(tape, z, pooled)


def adapt_object(
    est: Estimator,
    disc: Discriminator,
    cloud: np.ndarray,
    canonical_boxes: list,
    cfg: TtaConfig = TtaConfig(),
) -> AdaptResult:
    """Refine one scene's estimate by descending (D(boxes) - 1)^2.

    The discriminator is never updated. With reset_per_scene the caller's
    estimator is untouched; otherwise the adapted parameters persist in it.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    cloud32 = est.prepare_input(cloud)
    work = est.clone() if cfg.reset_per_scene else est
    half_extents = np.stack([b.vertices[7] for b in canonical_boxes])

    before = assemble_pose(cloud, work.head_output(cloud), canonical_boxes)
    if not all(p.valid for p in before):
        bad = next(p for p in before if not p.valid)
        raise TooFewPoints(bad.part, len(bad.members))

    encoder_names = [n for n in work.store.names() if n.startswith("enc")]
    trace = []
    for step in range(cfg.steps):
        tape = ad.Tape()
        seg, nocs, rot = _scene_forward(work, tape, cloud32)
        labels = np.argmax(seg.data, axis=1)
        sets = member_sets(labels, work.spec.part_count)
        try:
            got = assemble_graph(
                tape,
                cloud,
                nocs,
                ad.reshape(rot, (work.spec.part_count, 6)),
                sets,
                half_extents,
            )
        except (DegenerateRotation, DegenerateCorrespondences) as err:
            return AdaptResult(before, before, trace, aborted=f"step {step}: {err}")
        if any(g is None for g in got):
            return AdaptResult(before, before, trace, aborted=f"step {step}: part lost its points")
        layout = ad.stack([g["box"] for g in got], axis=0)
        score = disc.score_graph(tape, layout)
        d = ad.sub(score, 1.0)
        loss = ad.mul(d, d)
        value = float(loss.data)
        if not np.isfinite(value):
            return AdaptResult(before, before, trace, aborted=f"step {step}: non-finite loss")
        trace.append(value)

        work.store.zero_grads()
        tape.backward(loss)
        work.store.flush_tape_grads(tape)
        if cfg.scope == HEADS_ONLY:
            for name in encoder_names:
                work.store.grads[name][...] = 0.0
        nn.adam_step(work.store, lr=cfg.lr)

    after = assemble_pose(cloud, work.head_output(cloud), canonical_boxes)
    # final objective value for the trace
    final = _adv_value(work, disc, cloud, cloud32, half_extents)
    if final is not None:
        trace.append(final)
    return AdaptResult(before, after, trace)


def _adv_value(work, disc, cloud, cloud32, half_extents):
    tape = ad.Tape()
    seg, nocs, rot = _scene_forward(work, tape, cloud32)
    labels = np.argmax(seg.data, axis=1)
    sets = member_sets(labels, work.spec.part_count)
    try:
        got = assemble_graph(
            tape, cloud, nocs, ad.reshape(rot, (work.spec.part_count, 6)), sets, half_extents
        )
    except (DegenerateRotation, DegenerateCorrespondences):
        return None
    if any(g is None for g in got):
        return None
    layout = ad.stack([g["box"] for g in got], axis=0)
    return float((disc.score_graph(tape, layout).data - 1.0) ** 2)


@dataclass
class HandOptResult:
    hand: KinematicHand
    trace: list  # chamfer value per iteration (index 0 = initial)
    aborted: str = ""


def hand_param_vector(hand: KinematicHand) -> np.ndarray:
    """(24,) optimization vector: root 6D rotation + translation + angles."""
    return np.concatenate(
        [matrix_to_rot6d(hand.root_rotation), hand.root_position, hand.joint_angles]
    )


def optimize_hand(
    hand_init: KinematicHand,
    contact_map: np.ndarray,
    obj_cloud: np.ndarray,
    cfg: HandOptConfig = HandOptConfig(),
    confidence: np.ndarray | None = None,
) -> HandOptResult:
    """Minimize the symmetric chamfer between the hand surface and the
    contact point set; returns the best iterate.

    confidence is accepted for interface symmetry with the diffusion
    sampler; the objective itself is the unweighted chamfer.
    """
    contact_map = np.asarray(contact_map).astype(bool)
    obj_cloud = np.asarray(obj_cloud, dtype=np.float64)
    C = obj_cloud[contact_map]
    if len(C) == 0:
        return HandOptResult(hand_init, [], aborted="no contact points")

    store = nn.ParamStore()
    store.add("r6", hand_param_vector(hand_init)[:6])
    store.add("t", hand_init.root_position)
    store.add("ang", hand_init.joint_angles)
    template = hand_init.template

    def chamfer_at(tape):
        r6 = store.use("r6", tape, dtype=np.float64)
        t = store.use("t", tape, dtype=np.float64)
        ang = store.use("ang", tape, dtype=np.float64)
        R = dg.rot6d_to_matrix(r6)
        _, surface = fk_vars(template, R, t, ang)
        return dg.chamfer_fixed(surface, ad.const(C, tape))

    def snapshot():
        return KinematicHand(
            dg.rot6d_to_matrix(ad.leaf(store.params["r6"].astype(np.float64), ad.Tape())).data,
            store.params["t"].astype(np.float64),
            np.clip(store.params["ang"].astype(np.float64), ANGLE_LO, ANGLE_HI),
            template,
        )

    trace = []
    best_loss, best_hand = np.inf, hand_init
    for it in range(cfg.iters + 1):
        tape = ad.Tape()
        try:
            loss = chamfer_at(tape)
        except DegenerateRotation:
            return HandOptResult(best_hand, trace, aborted=f"iter {it}: degenerate root rotation")
        value = float(loss.data)
        if not np.isfinite(value):
            return HandOptResult(best_hand, trace, aborted=f"iter {it}: non-finite loss")
        trace.append(value)
        if value < best_loss:
            best_loss, best_hand = value, snapshot()
        if it == cfg.iters:
            break
        store.zero_grads()
        tape.backward(loss)
        store.flush_tape_grads(tape)
        nn.adam_step(store, lr=cfg.lr)
        store.params["ang"][...] = np.clip(store.params["ang"], ANGLE_LO, ANGLE_HI)
        store.version += 1
    return HandOptResult(best_hand, trace)


def optimize_layout(
    disc: Discriminator,
    layout: np.ndarray,
    steps: int = 50,
    lr: float = 5e-3,
) -> tuple:
    """Box-parameterized adaptation: descend (D - 1)^2 over per-part rigid
    corrections applied about each box center. Returns (layout, trace)."""
    layout = np.asarray(layout, dtype=np.float64)
    P = layout.shape[0]
    centers = layout.mean(axis=1)
    store = nn.ParamStore()
    for p in range(P):
        store.add(f"r6_{p}", np.array([1, 0, 0, 0, 1, 0], dtype=np.float64))
        store.add(f"dt_{p}", np.zeros(3))

    trace = []
    for step in range(steps + 1):
        tape = ad.Tape()
        parts = []
        for p in range(P):
            r6 = store.use(f"r6_{p}", tape, dtype=np.float64)
            dt = store.use(f"dt_{p}", tape, dtype=np.float64)
            R = dg.rot6d_to_matrix(r6)
            rel = ad.const(layout[p] - centers[p], tape)
            moved = ad.add(
                ad.add(ad.matmul(rel, ad.transpose(R)), ad.const(centers[p][None, :], tape)),
                ad.reshape(dt, (1, 3)),
            )
            parts.append(moved)
        full = ad.stack(parts, axis=0)
        score = disc.score_graph(tape, full)
        d = ad.sub(score, 1.0)
        loss = ad.mul(d, d)
        trace.append(float(loss.data))
        if step == steps:
            return full.data.copy(), trace
        store.zero_grads()
        tape.backward(loss)
        store.flush_tape_grads(tape)
        nn.adam_step(store, lr=lr)
    return layout, trace
