"""Command-line surface: data generation, training, evaluation,
gradient checking, ablation, and artifact inspection.

Exit codes: 0 success, 1 failed check, 2 usage error, 3 missing input,
4 incompatible artifact, 5 numeric abort.

Everything heavier than argument parsing is imported inside the command
handlers so that the CURIO_THREADS cap can be installed into the
numeric libraries' environment before they load.
"""

import argparse
import json
import os
import sys

from .errors import (
    ConfigurationError,
    CurioError,
    DomainError,
    GenerationError,
    IncompatibilityError,
    MissingInputError,
    NumericError,
    ScheduleError,
    UsageError,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_INCOMPATIBLE = 4
EXIT_NUMERIC = 5

GEN_TASKS = ("grasp", "push", "poke", "identity")

# Relative dataset sizes used by ``gen-data --task all``: the corpus the
# trunk was designed around keeps grasp:push:poke:identity at roughly
# 40:5:1:84, so --count is split in those proportions (out of 130).
ALL_RATIO = {"grasp": 40, "push": 5, "poke": 1, "identity": 84}

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _apply_thread_cap() -> None:
    """Honor CURIO_THREADS by capping the numeric libraries' pools."""
    cap = os.environ.get("CURIO_THREADS")
    if cap is None or cap == "":
        return
    if not cap.isdigit() or int(cap) < 1:
        raise UsageError(
            f"CURIO_THREADS must be a positive integer, got {cap!r}")
    for var in _THREAD_ENV_VARS:
        os.environ.setdefault(var, cap)


# ------------------------------------------------------------------ gen-data


def _split_all_counts(count: int) -> dict:
    total = sum(ALL_RATIO.values())
    return {task: round(count * r / total) for task, r in ALL_RATIO.items()}


def _summary(task: str, samples) -> str:
    import numpy as np

    from .sim.push import normalize_action

    if not samples:
        return "empty"
    if task == "grasp":
        pos = float(np.mean([s.label for s in samples]))
        return f"positive rate {pos:.3f}"
    if task == "push":
        targets = np.stack([normalize_action(s.action) for s in samples])
        return f"target variance {float(targets.var(axis=0).mean()):.4f}"
    if task == "poke":
        targets = np.array([s.target for s in samples])
        return f"target variance {float(targets.var(axis=0).mean()):.4f}"
    if task == "identity":
        pos = float(np.mean([1.0 if s.same == 1 else 0.0 for s in samples]))
        return f"positive rate {pos:.3f}"
    instances = len({v.instance_id for v in samples})
    classes = len({v.class_id for v in samples})
    return f"{instances} instances, {classes} classes"


def cmd_gen_data(args) -> int:
    from . import sim
    from .dataio import (
        settings_hash,
        write_gallery_container,
        write_grasp_container,
        write_identity_container,
        write_poke_container,
        write_push_container,
    )

    if args.count < 0:
        raise UsageError("--count must be non-negative")
    if args.task == "all":
        counts = _split_all_counts(args.count)
    else:
        counts = {args.task: args.count}
    os.makedirs(args.out, exist_ok=True)

    generators = {
        "grasp": (sim.gen_grasp_dataset, write_grasp_container),
        "push": (sim.gen_push_dataset, write_push_container),
        "poke": (sim.gen_poke_dataset, write_poke_container),
        "identity": (sim.gen_identity_dataset, write_identity_container),
    }
    for task in (*GEN_TASKS, "gallery"):
        if task not in counts:
            continue
        n = counts[task]
        chash = settings_hash({
            "command": "gen-data", "task": task, "count": n,
            "seed": args.seed, "image_size": args.image_size,
            "views": args.views if task == "gallery" else 0,
        })
        path = os.path.join(args.out, f"{task}.bin")
        if task == "gallery":
            samples = sim.gen_gallery_dataset(
                n, args.views, seed=args.seed, image_size=args.image_size)
            write_gallery_container(path, samples, seed=args.seed,
                                    config_hash=chash)
        else:
            gen, write = generators[task]
            samples = gen(n, seed=args.seed, image_size=args.image_size)
            write(path, samples, seed=args.seed, config_hash=chash)
        print(f"{task:<9} {len(samples):>7} records  "
              f"{_summary(task, samples):<28} -> {path}")
    return EXIT_OK


# --------------------------------------------------------------------- train


def cmd_train(args) -> int:
    from .dataio import load_config
    from .training import train

    config = load_config(args.config)
    out_dir = args.out if args.out else config.out_dir
    result = train(config, stage=args.stage, out_dir=out_dir)
    print(f"config hash  {config.config_hash().hex()}")
    print(f"seed         {result['seed']}")
    for key in ("stage1", "final"):
        if result.get(key):
            print(f"{key:<12} {result[key]}")
    print(f"metrics      {os.path.join(out_dir, 'metrics.ndjson')}")
    return EXIT_OK


# ---------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    from .dataio import ContainerReader, load_config
    from .evaluate import evaluate_checkpoint
    from .training import load_network

    config = load_config(args.config)
    gallery = args.gallery if args.gallery else config.gallery_data
    if not gallery:
        raise MissingInputError(
            "no gallery dataset: set gallery_data in the config or "
            "pass --gallery")
    net = load_network(args.checkpoint, config)
    with ContainerReader(gallery) as reader:
        want = (3, config.input_size, config.input_size)
        if reader.image_shape != want:
            raise IncompatibilityError(
                f"{gallery}: image shape {reader.image_shape} does not "
                f"match the configured input size {config.input_size}")
        report = evaluate_checkpoint(net, reader, config, args.metric,
                                     gallery_n=args.neighbors)
    out_dir = args.out if args.out else config.out_dir
    paths = report.write(out_dir, stem=f"eval_{args.metric}")
    print(f"config hash  {config.config_hash().hex()}")
    print(f"seed         {config.seed}")
    print(report.to_text())
    for path in paths:
        print(f"wrote {path}")
    return EXIT_OK


# ----------------------------------------------------------------- gradcheck


def _op_cases(seed: int):
    """One small double-precision check per differentiable op."""
    import numpy as np

    from . import autodiff as ad

    rng = np.random.default_rng([0x6C1, seed])

    def t(*shape):
        return ad.Tensor(rng.normal(0.0, 1.0, shape), requires_grad=True)

    def arr(*shape):
        return rng.normal(0.0, 1.0, shape)

    cases = []

    x, w, b = t(2, 3, 8, 8), t(4, 3, 3, 3), t(4)
    tgt = arr(2, 4, 4, 4)
    cases.append(("conv2d", lambda: ad.mse_loss(
        ad.conv2d(x, w, b, stride=2, pad=1), tgt), dict(x=x, w=w, b=b)))

    # Keep every sample away from the kink at zero so central
    # differences see a locally linear function.
    raw = rng.normal(0.0, 1.0, (3, 5))
    xr = ad.Tensor(np.where(raw >= 0, raw + 0.2, raw - 0.2),
                   requires_grad=True)
    tgt_relu = arr(3, 5)
    cases.append(("relu", lambda: ad.mse_loss(ad.relu(xr), tgt_relu),
                  dict(x=xr)))

    xl = t(2, 6, 4, 4)
    tgt_lrn = arr(2, 6, 4, 4)
    cases.append(("lrn", lambda: ad.mse_loss(
        ad.lrn(xl, depth_n=5), tgt_lrn), dict(x=xl)))

    xm = t(2, 3, 7, 7)
    tgt_pool = arr(2, 3, 3, 3)
    cases.append(("maxpool", lambda: ad.mse_loss(
        ad.maxpool(xm, kernel=3, stride=2), tgt_pool), dict(x=xm)))

    xf, wf, bf = t(5, 7), t(4, 7), t(4)
    tgt_lin = arr(5, 4)
    cases.append(("linear", lambda: ad.mse_loss(
        ad.linear(xf, wf, bf), tgt_lin), dict(x=xf, w=wf, b=bf)))

    xs = t(2, 3, 4)
    tgt_rs = arr(4, 6)
    cases.append(("reshape", lambda: ad.mse_loss(
        ad.reshape(xs, (4, 6)), tgt_rs), dict(x=xs)))

    ca, cb = t(2, 3), t(2, 4)
    tgt_cat = arr(2, 7)
    cases.append(("concat", lambda: ad.mse_loss(
        ad.concat([ca, cb], axis=1), tgt_cat), dict(a=ca, b=cb)))

    xsum = t(3, 4)
    cases.append(("sum_all", lambda: ad.sum_all(xsum), dict(x=xsum)))

    xsc = t(3, 4)
    tgt_sc = arr(3, 4)
    cases.append(("scale", lambda: ad.mse_loss(
        ad.scale(xsc, -1.7), tgt_sc), dict(x=xsc)))

    xsh = t(3, 4)
    tgt_sh = arr(3, 4)
    cases.append(("shift", lambda: ad.mse_loss(
        ad.shift(xsh, 0.37), tgt_sh), dict(x=xsh)))

    xmse = t(4, 5)
    tgt_mse = arr(4, 5)
    cases.append(("mse_loss", lambda: ad.mse_loss(xmse, tgt_mse),
                  dict(x=xmse)))

    ea, eb = t(4, 6), t(4, 6)
    same = np.array([1, -1, 1, -1])
    cases.append(("cosine_embedding_loss", lambda: ad.cosine_embedding_loss(
        ea, eb, same, margin=0.3), dict(a=ea, b=eb)))

    lg = t(4, 18, 2)
    bins = rng.integers(0, 18, 4)
    labels = rng.integers(0, 2, 4)
    cases.append(("per_bin_softmax_loss", lambda: ad.per_bin_softmax_loss(
        lg, bins, labels), dict(logits=lg)))

    ls = t(5, 7)
    classes = rng.integers(0, 7, 5)
    cases.append(("softmax_cross_entropy", lambda: ad.softmax_cross_entropy(
        ls, classes), dict(logits=ls)))

    return cases


def _network_case(seed: int, input_size: int):
    """The full desk trunk with every head, on simulator batches."""
    import numpy as np

    from . import autodiff as ad
    from . import sim
    from .network import build_network, desk_config
    from .sim.push import normalize_action
    from .training import task_loss

    ncfg = desk_config(dtype="float64", input_size=input_size)
    net = build_network(ncfg, seed=seed, tasks=GEN_TASKS)
    n = 2
    g = sim.gen_grasp_dataset(n, seed=seed + 11, image_size=input_size)
    p = sim.gen_push_dataset(n, seed=seed + 12, image_size=input_size)
    k = sim.gen_poke_dataset(n, seed=seed + 13, image_size=input_size)
    pairs = sim.gen_identity_dataset(n, seed=seed + 14, pool_size=4,
                                     image_size=input_size)
    batches = {
        "grasp": {"images": np.stack([s.patch for s in g]),
                  "bins": np.array([s.angle_bin for s in g]),
                  "labels": np.array([s.label for s in g])},
        "push": {"img_begin": np.stack([s.img_begin for s in p]),
                 "img_final": np.stack([s.img_final for s in p]),
                 "targets": np.stack([normalize_action(s.action)
                                      for s in p])},
        "poke": {"images": np.stack([s.img for s in k]),
                 "targets": np.array([s.target for s in k])},
        "identity": {"img_a": np.stack([q.img_a for q in pairs]),
                     "img_b": np.stack([q.img_b for q in pairs]),
                     "same": np.array([q.same for q in pairs])},
    }

    def loss_fn():
        parts = [ad.reshape(task_loss(net, task, batches[task]), (1, 1))
                 for task in GEN_TASKS]
        return ad.sum_all(ad.concat(parts, axis=1))

    return loss_fn, dict(net.params.items())


def _corrupted_case(seed: int):
    """A deliberately wrong backward pass; the checker must flag it."""
    import numpy as np

    from . import autodiff as ad
    from .autodiff.tensor import from_op

    rng = np.random.default_rng([0xBAD, seed])
    x = ad.Tensor(rng.normal(1.0, 0.2, (3,)), requires_grad=True)

    def loss_fn():
        out = x.data ** 2

        def backward_fn(g):
            x.grad += g * 3.0 * x.data  # wrong on purpose: should be 2x

        return ad.sum_all(from_op("bad_square", (x,), out, backward_fn))

    return loss_fn, dict(x=x)


def cmd_gradcheck(args) -> int:
    from .autodiff import grad_check

    print(f"gradient check  seed {args.seed}  "
          f"tolerance {args.tolerance:.1e}  scope {args.scope}")
    print(f"  {'case':<28} {'max rel err':>12}   result")
    failures = 0

    def run(name, loss_fn, params, **kwargs):
        nonlocal failures
        report = grad_check(loss_fn, params, tolerance=args.tolerance,
                            seed=args.seed, **kwargs)
        verdict = "PASS" if report.passed else "FAIL"
        if not report.passed:
            failures += 1
        print(f"  {name:<28} {report.max_rel_err:>12.3e}   {verdict}")
        return report

    if args.scope in ("ops", "all"):
        for name, loss_fn, params in _op_cases(args.seed):
            run(name, loss_fn, params)
    if args.scope in ("network", "all"):
        loss_fn, params = _network_case(args.seed, args.input_size)
        # Perturbing a trunk bias shifts a whole channel, so the step
        # must stay tiny against the activation scale or relu branch
        # flips pollute the central differences: flip error shrinks
        # linearly with the step while float64 slope noise (~5e-8 at
        # 1e-7) stays under the raised absolute floor.
        run(f"network/desk ({args.input_size} px)", loss_fn, params,
            samples_per_param=args.samples, step=1e-7, abs_floor=3e-7)
    if args.self_test:
        report = run("corrupted-backward fixture", *_corrupted_case(args.seed))
        if report.passed:
            print("self-test failed: the corrupted backward pass was "
                  "not detected")
            return EXIT_CHECK_FAILED
        failures -= 1
        print("self-test ok: corrupted backward flagged as expected")

    if failures:
        print(f"{failures} check(s) failed")
        return EXIT_CHECK_FAILED
    print("all checks passed")
    return EXIT_OK


# -------------------------------------------------------------------- ablate


def cmd_ablate(args) -> int:
    from .dataio import load_config
    from .evaluate import ablation_table, ablation_table_text

    config = load_config(args.config)
    out_dir = args.out if args.out else config.out_dir
    rows = ablation_table(config, out_dir)
    text = ablation_table_text(rows)
    print(text)
    txt_path = os.path.join(out_dir, "ablation.txt")
    with open(txt_path, "w") as fh:
        fh.write(text + "\n")
    nd_path = os.path.join(out_dir, "ablation.ndjson")
    with open(nd_path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"wrote {txt_path}")
    print(f"wrote {nd_path}")
    return EXIT_OK


# ------------------------------------------------------------------ describe


def _describe_one(path: str) -> str:
    from .dataio import describe_artifact, load_config

    try:
        return describe_artifact(path)
    except IncompatibilityError:
        try:
            config = load_config(path)
        except CurioError:
            raise IncompatibilityError(
                f"{path}: unrecognized artifact format")
        return (f"run config: {path}\n"
                f"  config hash   {config.config_hash().hex()}\n"
                f"  seed          {config.seed}")


def cmd_describe(args) -> int:
    for i, path in enumerate(args.paths):
        if i:
            print()
        print(_describe_one(path))
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="curio",
        description="Multi-task visual representation learning on a "
                    "simulated tabletop.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate interaction datasets")
    g.add_argument("--task", required=True,
                   choices=(*GEN_TASKS, "gallery", "all"))
    g.add_argument("--count", type=int, required=True,
                   help="records to generate; for --task all, the total "
                        "split 40:5:1:84 across grasp:push:poke:identity; "
                        "for gallery, the number of object instances")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--views", type=int, default=4,
                   help="views per instance (gallery only)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the two-stage training schedule")
    t.add_argument("--config", required=True, help="run config file")
    t.add_argument("--stage", choices=("1", "2", "all"), default="all")
    t.add_argument("--out", default=None,
                   help="override the config's output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint against a gallery")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True, help="run config file")
    e.add_argument("--metric", required=True,
                   choices=("recall", "knn", "finetune", "gallery"))
    e.add_argument("--gallery", default=None,
                   help="gallery container (default: config gallery_data)")
    e.add_argument("--neighbors", type=int, default=5,
                   help="neighbors per query for --metric gallery")
    e.add_argument("--out", default=None,
                   help="report directory (default: config out_dir)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck",
                       help="compare analytic gradients to central "
                            "differences")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--scope", choices=("ops", "network", "all"),
                   default="all")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--samples", type=int, default=8,
                   help="sampled entries per parameter for the network "
                        "scope")
    c.add_argument("--input-size", type=int, default=64,
                   help="input resolution for the network scope")
    c.add_argument("--self-test", action="store_true",
                   help="also verify that a corrupted backward pass is "
                        "flagged")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate",
                       help="train with each task excluded in turn and "
                            "tabulate transfer accuracy")
    a.add_argument("--config", required=True, help="run config file")
    a.add_argument("--out", default=None,
                   help="table and per-run directory (default: config "
                        "out_dir)")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("describe",
                       help="print seed and config hash of any artifact")
    d.add_argument("paths", nargs="+", metavar="PATH")
    d.set_defaults(func=cmd_describe)

    return parser


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigurationError, DomainError, ScheduleError,
            GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except IncompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
