"""Command-line interface.

Subcommands: synth, train, eval, tta, hand-opt, gradcheck, version.
Exit status: 0 success, 1 usage error, 2 runtime failure. All randomness is
driven by --seed (or the seed inside a config file).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import estimator as est_mod
from . import gradcheck as gradcheck_mod
from . import metrics as metrics_mod
from . import nn
from . import priors as priors_mod
from . import tta as tta_mod
from .errors import ArtiposeError, UsageError
from .geometry import rotation_error
from .synth import CATEGORIES, KinematicHand, generate_dataset, load_dataset
from .synth.hand import default_hand_template


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="artipose", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--category", required=True, choices=CATEGORIES)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--drawers", type=int, default=3, help="sliding parts for the drawer category")
    p.add_argument("--surface-samples", type=int, default=512)
    p.add_argument("--min-contacts", type=int, default=4)

    p = sub.add_parser("train", help="train estimator (+ priors) from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="train_out")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="report.csv")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--iou-samples", type=int, default=metrics_mod.IOU_SAMPLES)

    p = sub.add_parser("tta", help="test-time adaptation report (before/after)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--disc", default=None, help="discriminator checkpoint (defaults to the group inside --checkpoint)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="tta_report.csv")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--scope", choices=[tta_mod.HEADS_ONLY, tta_mod.FULL_ENCODER], default=tta_mod.HEADS_ONLY)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--iou-samples", type=int, default=metrics_mod.IOU_SAMPLES)

    p = sub.add_parser("hand-opt", help="contact-guided hand optimization report")
    p.add_argument("--checkpoint", default=None, help="checkpoint with encoder+diffuser (omit with --gt-contact)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--perturb", type=float, default=0.10, help="initial root displacement (m)")
    p.add_argument("--gt-contact", action="store_true", help="use ground-truth contact maps")
    p.add_argument("--generations", type=int, default=5)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="hand_report.csv")
    p.add_argument("--limit", type=int, default=None)

    p = sub.add_parser("gradcheck", help="run all finite-difference suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=gradcheck_mod.DEFAULT_TOL)

    sub.add_parser("version", help="print version")
    return parser


def _predict_scene(est, rec):
    out = est.head_output(rec.cloud)
    ests = est_mod.assemble_pose(rec.cloud, out, rec.canonical_boxes)
    return out, ests


def _prediction_record(rec, ests) -> metrics_mod.ScenePrediction:
    return metrics_mod.ScenePrediction(
        scene_id=rec.scene_id,
        poses=[e.pose if e.valid else None for e in ests],
        boxes=[e.box if e.valid else None for e in ests],
    )


def cmd_synth(args) -> int:
    generate_dataset(
        args.out,
        args.category,
        args.count,
        seed=args.seed,
        n_points=args.points,
        tau=args.tau,
        surface_samples=args.surface_samples,
        drawers=args.drawers,
        min_contacts=args.min_contacts,
    )
    print(f"wrote {args.count} {args.category} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = est_mod.TrainConfig.from_json(args.config)
    _, scenes = load_dataset(config.dataset)
    ckpt = est_mod.train_estimator(scenes, config, args.out)
    print(f"checkpoint: {ckpt}")
    print(f"loss log:   {Path(args.out) / config.loss_log}")
    return 0


def cmd_eval(args) -> int:
    est, meta, _ = est_mod.load_estimator(args.checkpoint)
    _, scenes = load_dataset(args.dataset, limit=args.limit)
    preds = [_prediction_record(rec, _predict_scene(est, rec)[1]) for rec in scenes]
    report = metrics_mod.eval_object(preds, scenes, iou_samples=args.iou_samples)
    metrics_mod.write_report(args.out, report)
    metrics_mod.write_summary_json(
        Path(args.out).with_suffix(".json"), report, extra={"checkpoint": str(args.checkpoint)}
    )
    for name, value in report.rows():
        print(f"{name}: {value}")
    return 0


def _load_discriminator(args, stores):
    if args.disc is not None:
        d_stores, d_meta = nn.load_checkpoint(args.disc)
        store = d_stores["discriminator"]
        part_count = d_meta.get("part_count")
        hidden = tuple(d_meta.get("hidden", (256, 256)))
    elif "discriminator" in stores:
        store = stores["discriminator"]
        part_count = None
        hidden = (256, 256)
    else:
        raise UsageError("no discriminator: pass --disc or use a jointly trained checkpoint")
    return store, part_count, hidden


def cmd_tta(args) -> int:
    est, meta, stores = est_mod.load_estimator(args.checkpoint)
    store, part_count, hidden = _load_discriminator(args, stores)
    disc = priors_mod.Discriminator(part_count or meta["part_count"], store, hidden)
    _, scenes = load_dataset(args.dataset, limit=args.limit)
    cfg = tta_mod.TtaConfig(steps=args.steps, lr=args.lr, scope=args.scope)

    rows = []
    improved = 0
    for rec in scenes:
        result = tta_mod.adapt_object(est, disc, rec.cloud, rec.canonical_boxes, cfg)
        seed = metrics_mod.scene_iou_seed(rec.scene_id)
        for p, (pb, pa) in enumerate(zip(result.before, result.after)):
            row = {"scene": rec.scene_id, "part": p, "aborted": result.aborted}
            for tag, pe in (("before", pb), ("after", pa)):
                if pe.valid:
                    row[f"r_err_{tag}"] = rotation_error(pe.pose.R, rec.part_poses[p].R)
                    row[f"t_err_{tag}"] = float(np.linalg.norm(pe.pose.t - rec.part_poses[p].t)) * 100
                    row[f"iou_{tag}"] = metrics_mod.box_iou(
                        pe.box, rec.posed_boxes[p], samples=args.iou_samples, seed=seed + p
                    )
                else:
                    row[f"r_err_{tag}"] = row[f"t_err_{tag}"] = row[f"iou_{tag}"] = float("nan")
            rows.append(row)
        if len(result.trace) >= 2 and result.trace[-1] <= result.trace[0]:
            improved += 1
        rows[-1]["l_adv_trace"] = ";".join(repr(v) for v in result.trace)
    fields = [
        "scene", "part", "r_err_before", "t_err_before", "iou_before",
        "r_err_after", "t_err_after", "iou_after", "aborted", "l_adv_trace",
    ]
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields, restval="")
        writer.writeheader()
        writer.writerows(rows)
    print(f"adapted {len(scenes)} scenes; adversarial loss reduced on {improved}")
    print(f"report: {args.out}")
    return 0


def cmd_hand_opt(args) -> int:
    _, scenes = load_dataset(args.dataset, limit=args.limit)
    rng = np.random.default_rng(args.seed)
    diffuser = est = None
    if not args.gt_contact:
        if args.checkpoint is None:
            raise UsageError("--checkpoint required unless --gt-contact is set")
        est, meta, stores = est_mod.load_estimator(args.checkpoint)
        if "diffuser" not in stores:
            raise UsageError("checkpoint has no diffuser group; train with lambda_diff > 0")
        diffuser = priors_mod.ContactDiffuser(
            est.spec.feature_dim,
            stores["diffuser"],
            priors_mod.NoiseSchedule.linear(meta.get("diffusion_steps", 100)),
        )

    cfg = tta_mod.HandOptConfig(iters=args.iters, lr=args.lr)
    rows = []
    reduced = 0
    for rec in scenes:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        init = KinematicHand(
            rec.hand.root_rotation,
            rec.hand.root_position + args.perturb * direction,
            rec.hand.joint_angles,
            rec.hand.template,
        )
        if args.gt_contact:
            contact = rec.contact.astype(bool)
            confidence = None
        else:
            enc = est.encode(est.prepare_input(rec.cloud))
            contact, confidence = priors_mod.sample_contact_map(
                diffuser, enc.z, generations=args.generations, seed=int(rng.integers(2**31))
            )
            contact = contact.astype(bool) & (rec.seg > 0)
        result = tta_mod.optimize_hand(init, contact, rec.cloud, cfg, confidence)
        mpjpe_before, mpvpe_before = metrics_mod.eval_hand(
            [init.joints()], [rec.hand_joints], [init.surface()], [rec.hand_surface]
        )
        mpjpe_after, mpvpe_after = metrics_mod.eval_hand(
            [result.hand.joints()], [rec.hand_joints], [result.hand.surface()], [rec.hand_surface]
        )
        if mpjpe_after < mpjpe_before:
            reduced += 1
        rows.append(
            {
                "scene": rec.scene_id,
                "mpjpe_before": mpjpe_before,
                "mpjpe_after": mpjpe_after,
                "mpvpe_before": mpvpe_before,
                "mpvpe_after": mpvpe_after,
                "contacts": int(np.asarray(contact).sum()),
                "aborted": result.aborted,
                "l_cd_trace": ";".join(repr(v) for v in result.trace[:: max(1, len(result.trace) // 20)]),
            }
        )
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), restval="")
        writer.writeheader()
        writer.writerows(rows)
    frac = reduced / max(1, len(rows))
    print(f"MPJPE reduced on {reduced}/{len(rows)} scenes ({100*frac:.0f}%)")
    print(f"report: {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_all(seed=args.seed, tol=args.tol)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "tta":
            return cmd_tta(args)
        if args.command == "hand-opt":
            return cmd_hand_opt(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "version":
            print(__version__)
            return 0
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (ArtiposeError, ValueError, OSError, KeyError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
