"""Command-line interface.

Subcommands: train, eval, synth, bench-sce, selftest. Every command writes
its results as JSON into the output directory; report paths additionally
emit delimited tables and matplotlib figures.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import datakit, evalkit, plots, training
from .config import TrainConfig, load_config
from .encoder import bench_sce

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so bad flags map to exit 1."""

    def error(self, message):
        raise _CliError(message)


def _write_json(payload: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="sparsematch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model variant")
    p_train.add_argument("--config", required=True, help="JSON TrainConfig document")
    p_train.add_argument("--variant", choices=["baseline", "st", "mt"], default=None,
                         help="override the config's variant")
    p_train.add_argument("--teacher", default=None, help="teacher checkpoint (st variant)")
    p_train.add_argument("--out", default="runs/train", help="output directory")
    p_train.add_argument("--no-figures", action="store_true")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--alphas", default="0.05,0.1,0.15")
    p_eval.add_argument("--basis", choices=["img", "bbox"], default="img")
    p_eval.add_argument("--out", default="runs/eval")
    p_eval.add_argument("--overlays", type=int, default=0,
                        help="dump match overlays for the first N pairs")
    p_eval.add_argument("--no-figures", action="store_true")

    p_synth = sub.add_parser("synth", help="emit a synthetic warp dataset")
    p_synth.add_argument("--seed", type=int, required=True)
    p_synth.add_argument("--n", type=int, required=True)
    p_synth.add_argument("--size", type=int, default=64)
    p_synth.add_argument("--kps", type=int, default=8)
    p_synth.add_argument("--out", default="runs/synth")

    p_bench = sub.add_parser("bench-sce", help="sparse vs dense context-descriptor benchmark")
    p_bench.add_argument("--K", default="3,7,15,31", help="comma-separated odd kernel sizes")
    p_bench.add_argument("--h", type=int, default=16)
    p_bench.add_argument("--w", type=int, default=16)
    p_bench.add_argument("--d", type=int, default=32, help="feature channels")
    p_bench.add_argument("--out", default="runs/bench")
    p_bench.add_argument("--no-figures", action="store_true")

    p_self = sub.add_parser("selftest", help="run the built-in oracle checks")
    p_self.add_argument("--out", default="runs/selftest")
    return parser


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.variant:
        cfg.variant = args.variant
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = training.prepare_data(cfg)

    if cfg.variant == "baseline":
        ckpt = training.train_baseline(cfg, data, log_dir=out)
        checkpoints = {"model": ckpt}
        histories = [ckpt.history]
        labels = ["baseline"]
    elif cfg.variant == "st":
        if args.teacher:
            teacher = training.load_checkpoint(args.teacher)
        else:
            teacher = training.train_baseline(cfg, data, log_dir=out / "teacher")
            training.save_checkpoint(teacher, out / "teacher.pt")
        ckpt = training.train_single_offline_teacher(cfg, teacher, data, log_dir=out)
        checkpoints = {"model": ckpt}
        histories = [ckpt.history]
        labels = ["student"]
    else:
        ckpt_s, ckpt_t, ckpt = training.train_mutual_online_teachers(cfg, data, log_dir=out)
        checkpoints = {"model": ckpt, "net_s": ckpt_s, "net_t": ckpt_t}
        histories = [ckpt_s.history, ckpt_t.history]
        labels = ["net_s", "net_t"]

    for name, c in checkpoints.items():
        training.save_checkpoint(c, out / f"{name}.pt")
    summary = {
        "variant": cfg.variant,
        "best_epoch": checkpoints["model"].epoch,
        "val_pck": checkpoints["model"].val_pck,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "checkpoint": str(out / "model.pt"),
    }
    _write_json(summary, out / "train_summary.json")
    if not args.no_figures and histories[0]:
        plots.plot_training_curves(histories, out / "training_curves.png", labels)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    alphas = [float(a) for a in args.alphas.split(",") if a]
    ckpt = training.load_checkpoint(args.checkpoint)
    model = training.model_from_checkpoint(ckpt)
    cfg = TrainConfig.from_dict(ckpt.config)
    samples = datakit.load_manifest(args.manifest, cfg.image_size)
    report = evalkit.evaluate(model, samples, alphas=alphas, basis=args.basis)
    payload = evalkit.report_to_json(report, out / "report.json")
    evalkit.report_to_csv(report, out / "report.csv")
    if not args.no_figures:
        plots.plot_pck_bars(report, out / "pck_per_class.png")
    for i in range(min(args.overlays, len(samples))):
        sample = samples[i]
        if not sample.keypoints:
            continue
        flow = model.predict_flow(sample.source, sample.target)
        preds, _ = evalkit.transfer_keypoints(flow, [t for _, t in sample.keypoints])
        plots.plot_match_overlay(sample, preds, out / f"overlay{i:03d}.png")
    print(evalkit.format_table(report))
    print(json.dumps(payload["overall"], indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_synth(args) -> int:
    samples = datakit.synth_warp_pairs(args.seed, args.n, args.size, args.kps)
    manifest = datakit.save_dataset(samples, args.out)
    payload = {
        "manifest": str(manifest),
        "n": args.n,
        "seed": args.seed,
        "size": args.size,
        "keypoints_per_pair": args.kps,
        "categories": sorted({s.category for s in samples}),
    }
    _write_json(payload, Path(args.out) / "meta.json")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_bench(args) -> int:
    kernel_sizes = [int(k) for k in args.K.split(",") if k]
    rows = bench_sce(args.h, args.w, args.d, kernel_sizes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json({"rows": rows, "h": args.h, "w": args.w, "d_z": args.d}, out / "bench.json")
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["K", "sparse_elements", "dense_elements", "sparse_time", "dense_time"]
        )
        writer.writeheader()
        writer.writerows(rows)
    if not args.no_figures:
        plots.plot_bench(rows, out / "bench.png")
    header = f"{'K':>4} {'sparse_el':>12} {'dense_el':>12} {'sparse_ms':>12} {'dense_ms':>12}"
    print(header)
    for r in rows:
        print(
            f"{r['K']:>4} {r['sparse_elements']:>12} {r['dense_elements']:>12} "
            f"{r['sparse_time'] * 1e3:>12.3f} {r['dense_time'] * 1e3:>12.3f}"
        )
    return EXIT_OK


def _selftest_checks() -> List[dict]:
    """Small battery of oracle comparisons mirroring the test suite."""
    import math

    from . import encoder, matching, supervision
    from .config import SelectionSchedule

    checks = []

    def run(name, fn):
        try:
            fn()
            checks.append({"name": name, "passed": True, "detail": ""})
        except Exception as exc:  # noqa: BLE001 - report, not crash
            checks.append({"name": name, "passed": False, "detail": str(exc)})

    def check_sparse_dense():
        gen = torch.Generator().manual_seed(11)
        fmap = encoder.FeatureMap(torch.randn((8, 12, 12), generator=gen))
        for k in (3, 5, 7):
            sparse = encoder.self_similarity_sparse(fmap, k).values
            dense = encoder.self_similarity_dense(fmap, k).values
            index = {off: i for i, off in enumerate(encoder.dense_offsets(k))}
            gathered = torch.stack([dense[index[o]] for o in encoder.sparse_offsets(k)])
            err = (sparse - gathered).abs().max().item()
            assert err < 1e-6, f"K={k} max err {err}"

    def check_mnn():
        gen = torch.Generator().manual_seed(12)
        vol = torch.rand((3, 3, 3, 3), generator=gen)
        got = matching.mutual_nn_filter(matching.CorrelationVolume(vol)).values
        eps = matching.MNN_EPS
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    for l in range(3):
                        v = vol[i, j, k, l]
                        want = v * (v / (vol[:, :, k, l].max() + eps)) * (
                            v / (vol[i, j].max() + eps)
                        )
                        assert abs(got[i, j, k, l] - want) < 1e-6

    def check_dilation():
        rng = np.random.default_rng(13)
        for _ in range(5):
            mask = torch.from_numpy((rng.random((9, 9)) < 0.1).astype(np.float32))
            for k in (1, 3, 5):
                got = supervision.dilate_mask(mask, k)
                r = k // 2
                for i in range(9):
                    for j in range(9):
                        window = mask[max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1]
                        assert got[i, j] == (1.0 if window.sum() > 0 else 0.0)

    def check_selection():
        rng = np.random.default_rng(14)
        losses = torch.from_numpy(rng.random((6, 6)))
        mask = torch.from_numpy((rng.random((6, 6)) < 0.5).astype(np.float64))
        ratio = 0.37
        idx = supervision.select_small_loss(losses, mask, ratio)
        fg = (mask.reshape(-1) > 0).nonzero(as_tuple=True)[0].tolist()
        n = math.ceil(ratio * len(fg))
        want = sorted(sorted(fg, key=lambda i: (losses.reshape(-1)[i].item(), i))[:n])
        assert idx.tolist() == want

    def check_soft_argmax():
        vol = torch.zeros((5, 5, 2, 2))
        vol[3, 1] = 1.0
        flow = matching.kernel_soft_argmax(matching.CorrelationVolume(vol, stride=4.0))
        want_x, want_y = (1 + 0.5) * 4.0, (3 + 0.5) * 4.0
        err = max(
            (flow.values[0] - want_x).abs().max().item(),
            (flow.values[1] - want_y).abs().max().item(),
        )
        assert err < 1e-3, f"one-hot recovery err {err}"

    def check_schedule():
        sched = SelectionSchedule()
        assert abs(supervision.selection_ratio(0, sched) - 0.2) < 1e-12
        assert abs(supervision.selection_ratio(5, sched) - 0.55) < 1e-12
        assert abs(supervision.selection_ratio(10, sched) - 0.9) < 1e-12
        assert abs(supervision.selection_ratio(99, sched) - 0.9) < 1e-12

    run("sparse_dense_equivalence", check_sparse_dense)
    run("mutual_nn_formula", check_mnn)
    run("mask_dilation_window_scan", check_dilation)
    run("small_loss_selection_sort", check_selection)
    run("soft_argmax_one_hot", check_soft_argmax)
    run("selection_schedule_ramp", check_schedule)
    return checks


def _cmd_selftest(args) -> int:
    checks = _selftest_checks()
    for check in checks:
        status = "PASS" if check["passed"] else "FAIL"
        detail = f"  ({check['detail']})" if check["detail"] else ""
        print(f"[{status}] {check['name']}{detail}")
    payload = {"checks": checks, "passed": all(c["passed"] for c in checks)}
    _write_json(payload, Path(args.out) / "selftest.json")
    return EXIT_OK if payload["passed"] else EXIT_RUNTIME


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "bench-sce":
            return _cmd_bench(args)
        if args.command == "selftest":
            return _cmd_selftest(args)
        raise _CliError(f"unknown command {args.command!r}")
    except (ValueError, FileNotFoundError, _CliError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:  # noqa: BLE001 - runtime failures map to exit 2
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
