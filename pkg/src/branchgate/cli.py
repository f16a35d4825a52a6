"""Command-line entry point: ``branchgate <command> [options]``.

Machine-readable results go to stdout (JSON or bare numbers); progress and
diagnostics go to stderr.
"""
import argparse
import json
import os
import sys

from .analysis import branch_histogram, build_graph, export_graph, prune
from .arch import build_network, count_parameters, load_arch, spec_parameter_count
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SYNTH_NOISE, load_cifar_splits, synth_splits
from .errors import BranchGateError
from .trainer import OptimizerState, evaluate, load_schedule, run_schedule

CHECKPOINT_NAME = "checkpoint.gckpt"
METRICS_NAME = "metrics.jsonl"


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def dataset_descriptor(args, spec):
    if args.data == "synth":
        _, h, _ = spec.input_shape
        return {
            "kind": "synth",
            "num_classes": args.synth_classes or spec.num_classes,
            "n_train": args.synth_train,
            "n_test": args.synth_test,
            "image_size": h,
            "seed": args.synth_seed,
            "noise": args.synth_noise,
        }
    return {"kind": args.variant, "path": os.path.abspath(args.data)}


def load_data(desc):
    """``(train, test)`` for a dataset descriptor stored in checkpoints."""
    if desc["kind"] == "synth":
        return synth_splits(
            desc["num_classes"], desc["n_train"], desc["n_test"], desc["image_size"], desc["seed"], desc["noise"]
        )
    return load_cifar_splits(desc["path"], desc["kind"])


def _add_data_args(p, default="synth"):
    p.add_argument("--data", default=default, help="'synth' or a CIFAR binary file/directory")
    p.add_argument("--variant", default="cifar100", choices=("cifar10", "cifar100"))
    p.add_argument("--synth-classes", type=int, default=None, help="default: the architecture's class count")
    p.add_argument("--synth-train", type=int, default=200, help="training images per class")
    p.add_argument("--synth-test", type=int, default=100, help="test images per class")
    p.add_argument("--synth-seed", type=int, default=0)
    p.add_argument("--synth-noise", type=float, default=SYNTH_NOISE)


def _write_metrics(path, metrics, append):
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        fh.write(metrics.to_jsonl())


def cmd_train(args):
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, CHECKPOINT_NAME)
    metrics_path = os.path.join(args.out, METRICS_NAME)
    if args.resume:
        ck = load_checkpoint(args.resume)
        net, state, optimizer, schedule, desc = ck.net, ck.state, ck.optimizer, ck.schedule, ck.dataset
        if state is None or schedule is None:
            raise BranchGateError(f"{args.resume} holds no training position to resume from")
        _log(f"resuming at epoch {state.global_epoch} (phase {state.phase_index})")
    else:
        spec = load_arch(args.arch)
        if args.fan_in is not None:
            spec = spec.with_fan_in(args.fan_in)
        schedule = load_schedule(args.schedule)
        if args.epoch_scale != 1.0:
            schedule = schedule.scaled(args.epoch_scale)
        desc = dataset_descriptor(args, spec)
        net = build_network(spec, args.seed)
        state = None
        optimizer = OptimizerState()
    train, test = load_data(desc)
    _log(f"training {net.spec.name or 'custom'} on {len(train)} images for {schedule.total_epochs} epochs")

    def on_epoch_end(net, st, opt, record):
        _log(json.dumps(record))

    net, metrics, state = run_schedule(
        net,
        train,
        schedule,
        args.seed if state is None else state.seed,
        eval_data=test,
        batch_size=args.batch_size,
        augment=not args.no_augment,
        optimizer=optimizer,
        state=state,
        max_epochs=args.max_epochs,
        on_epoch_end=on_epoch_end,
    )
    _write_metrics(metrics_path, metrics, append=bool(args.resume))
    save_checkpoint(ckpt_path, net, state, optimizer, schedule, desc)
    done = state.phase_index >= len(schedule.phases)
    summary = {
        "checkpoint": ckpt_path,
        "metrics": metrics_path,
        "epochs_done": state.global_epoch,
        "finished": done,
        "final_loss": metrics.records[-1]["loss"] if metrics.records else None,
        "eval_acc": metrics.records[-1]["eval_acc"] if metrics.records else None,
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args):
    ck = load_checkpoint(args.checkpoint)
    if args.data is None:
        if ck.dataset is None:
            raise BranchGateError("checkpoint has no dataset descriptor; pass --data")
        _, test = load_data(ck.dataset)
    else:
        desc = dataset_descriptor(args, ck.net.spec)
        _, test = load_data(desc)
    acc = evaluate(ck.net, test)
    print(json.dumps({"accuracy": acc, "num_images": len(test)}, sort_keys=True))
    return 0


def cmd_prune(args):
    ck = load_checkpoint(args.checkpoint)
    before = count_parameters(ck.net, "train")
    pruned = prune(ck.net)
    save_checkpoint(args.out, pruned, ck.state, None, ck.schedule, ck.dataset)
    after = count_parameters(pruned, "train")
    print(json.dumps({"params_before": before, "params_after": after, "out": args.out}, sort_keys=True))
    return 0


def cmd_export(args):
    ck = load_checkpoint(args.checkpoint)
    graph = build_graph(ck.net)
    text = export_graph(graph, args.format)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        _log(f"branch histogram: {branch_histogram(graph)}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_param_count(args):
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint).net
        print(count_parameters(net, "test" if net.frozen else "train"))
        return 0
    if not args.arch:
        raise BranchGateError("param-count needs --arch or --checkpoint")
    spec = load_arch(args.arch)
    print(spec_parameter_count(spec))
    return 0


def cmd_gradcheck(args):
    from .checks import TOLERANCE, run_suite

    results = run_suite(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} rel_err={r.error:.2e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        _log(f"{len(failed)} gradient checks exceed {TOLERANCE:g}: {', '.join(failed)}")
        return 1
    return 0


def cmd_bench(args):
    from .bench import bench_kernels, bench_steps

    spec = load_arch(args.arch)
    report = {
        "kernels": bench_kernels(repeats=args.repeats),
        "steps": bench_steps(spec, args.batch_size, args.steps),
    }
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def cmd_sweep(args):
    """Train one model per fan-in K = 1..C on the same data and budget."""
    base = load_arch(args.arch)
    desc = dataset_descriptor(args, base)
    train, test = load_data(desc)
    schedule = load_schedule(args.schedule)
    if args.epoch_scale != 1.0:
        schedule = schedule.scaled(args.epoch_scale)
    rows = []
    for k in range(1, base.cardinality + 1):
        spec = base.with_fan_in(k)
        net = build_network(spec, args.seed)
        params = count_parameters(net, "train")
        net, metrics, _ = run_schedule(net, train, schedule, args.seed, batch_size=args.batch_size)
        row = {"fan_in": k, "accuracy": evaluate(net, test), "params": params, "final_loss": metrics.losses[-1]}
        _log(json.dumps(row))
        rows.append(row)
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="branchgate", description="Multi-branch networks with learned connectivity.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network through a phase schedule")
    p.add_argument("--arch", default="toy-{11,2,4}", help="preset name or JSON file")
    p.add_argument("--schedule", default="reference", help="reference, reference-full, reference-fixed_random, reference-real_valued, reference-imagenet, or a JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epoch-scale", type=float, default=1.0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fan-in", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-epochs", type=int, default=None, help="stop after this many epochs (resumable)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--no-augment", action="store_true")
    _add_data_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prune", help="drop dead blocks from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("export-connectivity", help="write the gate graph as DOT or JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--format", choices=("dot", "json"), default="dot")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("param-count", help="learnable parameters of an architecture or checkpoint")
    p.add_argument("--arch", default=None)
    p.add_argument("--checkpoint", default=None, help="count only blocks in use (test mode)")
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time kernel backends and training steps")
    p.add_argument("--arch", default="toy-{11,2,4}")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="train one model per fan-in K = 1..C")
    p.add_argument("--arch", default="toy-{11,2,4}")
    p.add_argument("--schedule", default="reference")
    p.add_argument("--epoch-scale", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", default=None, help="metrics file (default: stdout)")
    _add_data_args(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BranchGateError as exc:
        _log(f"error: {exc}")
        return 1
    except OSError as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
