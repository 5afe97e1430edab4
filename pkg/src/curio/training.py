"""RMSprop, the two-stage schedule, and cross-task gradient aggregation.

Stage 1 trains the lower trunk (conv1..conv4) together with the grasp
head alone. Stage 2 rebuilds the full network with those weights copied
in, then cycles through the four tasks: each task's head is stepped
right after its own backward pass, while trunk gradients accumulate
across the cycle and receive a single mean-aggregated step at the end.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dataio import (ContainerReader, RunConfig, load_batch,
                     load_checkpoint, save_checkpoint)
from .errors import (ConfigurationError, IncompatibilityError,
                     MissingInputError, NumericError, ScheduleError)
from .network import (MultiTaskNetwork, NetworkConfig, build_network,
                      build_stage1_network, build_stage2, desk_config)

TASK_ORDER = ("grasp", "push", "poke", "identity")

_STAGE2_SEED_SALT = 0x57A2       # fresh-layer init for the stage-2 build
_EXCLUDE_SEED_SALT = 0xAB1A      # per-exclusion derived run seeds
_DATA_SEED_SALT = 0xDA7A         # batch shuffling, keyed per task


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if not (0.0 <= self.rho < 1.0):
            raise ConfigurationError("rho must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")


class Rmsprop:
    """Running mean-square step: s <- rho*s + (1-rho)*g^2,
    p <- p - lr*g/(sqrt(s) + eps). Used gradients are cleared so trunk
    accumulation across a cycle starts from zero every time."""

    def __init__(self, store, config: OptimConfig = OptimConfig()):
        self.store = store
        self.config = config
        self._sq = {name: np.zeros_like(t.data)
                    for name, t in store.items()}
        self.steps = 0

    def step(self, names) -> None:
        c = self.config
        for name in names:
            t = self.store[name]
            g = t.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(
                    f"non-finite gradient in parameter {name!r}")
            s = self._sq[name]
            s *= c.rho
            s += (1.0 - c.rho) * g * g
            t.data -= c.learning_rate * g / (np.sqrt(s) + c.epsilon)
            g.fill(0.0)
        self.steps += 1

    def state_arrays(self) -> dict:
        return {name: s.copy() for name, s in self._sq.items()}

    def load_state(self, arrays: dict, steps: int = 0) -> None:
        for name, arr in arrays.items():
            if name in self._sq:
                np.copyto(self._sq[name],
                          arr.astype(self._sq[name].dtype, copy=False))
        self.steps = steps


class BatchIterator:
    """Endless deterministic mini-batches; each epoch reshuffles with a
    generator keyed by (seed, epoch) and the remainder is dropped."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ConfigurationError("cannot iterate over an empty dataset")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.seed = seed
        self.epoch = -1
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = n

    def next_batch(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self.epoch += 1
            self._perm = np.random.default_rng(
                [self.seed, self.epoch]).permutation(self.n)
            self._pos = 0
        out = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


@dataclass
class CycleReport:
    losses: dict
    divisor: int
    root_grads: dict | None = None


def task_loss(net: MultiTaskNetwork, task: str, batch: dict,
              margin: float = 0.5) -> ad.Tensor:
    """Forward + loss for one task's batch (arrays from ``load_batch``)."""
    dt = net.config.np_dtype
    if task == "grasp":
        logits = net.grasp_forward(ad.Tensor(batch["images"], dtype=dt))
        return ad.per_bin_softmax_loss(logits, batch["bins"],
                                       batch["labels"])
    if task == "push":
        pred = net.push_forward(ad.Tensor(batch["img_begin"], dtype=dt),
                                ad.Tensor(batch["img_final"], dtype=dt))
        return ad.mse_loss(pred, batch["targets"])
    if task == "poke":
        pred = net.poke_forward(ad.Tensor(batch["images"], dtype=dt))
        return ad.mse_loss(pred, batch["targets"])
    if task == "identity":
        fa, fb = net.identity_forward(ad.Tensor(batch["img_a"], dtype=dt),
                                      ad.Tensor(batch["img_b"], dtype=dt))
        return ad.cosine_embedding_loss(fa, fb, batch["same"],
                                        margin=margin)
    raise ConfigurationError(f"unknown task {task!r}")


def stage1_train(net: MultiTaskNetwork, reader, iters: int,
                 batch_size: int, optim: Rmsprop, seed: int,
                 margin: float = 0.5, on_iter=None) -> None:
    """Grasp-only loop over the lower trunk; one step per iteration."""
    names = net.params.names()
    it = BatchIterator(len(reader), batch_size, seed)
    for i in range(iters):
        batch = load_batch(reader, it.next_batch())
        loss = task_loss(net, "grasp", batch, margin)
        ad.backward(loss)
        value = loss.item()
        optim.step(names)
        if on_iter is not None:
            on_iter(i, value)


def stage2_cycle(net: MultiTaskNetwork, batches: dict, optim: Rmsprop,
                 margin: float = 0.5,
                 capture_root_grads: bool = False) -> CycleReport:
    """One pass over the task cycle.

    Per task: forward, loss, backward, immediate head step. The twin
    streams of the push head share one first-conv tensor, so its summed
    gradient is halved (mean over the two copies) before that step.
    Trunk gradients ride along untouched until every task has run, then
    get divided by the task count and applied in a single step.
    """
    tasks = [t for t in TASK_ORDER if t in net.tasks]
    missing = [t for t in tasks if t not in batches]
    if missing:
        raise ScheduleError(f"cycle is missing batches for {missing}")
    root_names = net.root_param_names()
    losses = {}
    for task in tasks:
        loss = task_loss(net, task, batches[task], margin)
        ad.backward(loss)
        losses[task] = loss.item()
        head = net.head_param_names(task)
        if task == "push":
            for name in head:
                if name.startswith("push/conv1"):
                    net.params[name].grad /= 2.0
        if head:
            optim.step(head)
    captured = None
    divisor = len(tasks)
    for name in root_names:
        net.params[name].grad /= divisor
    if capture_root_grads:
        captured = {name: net.params[name].grad.copy()
                    for name in root_names}
    optim.step(root_names)
    return CycleReport(losses=losses, divisor=divisor, root_grads=captured)


# ------------------------------------------------------------ orchestration


def network_config_for(config: RunConfig) -> NetworkConfig:
    if config.preset == "desk":
        return desk_config(input_size=config.input_size)
    raise ConfigurationError(
        "preset 'paper-shape-only' supports shape inspection only; "
        "training runs use the 'desk' preset")


def effective_seed(config: RunConfig, tasks=None) -> int:
    """Run seed; exclusion runs get a distinct deterministic derivation
    so ablation rows don't share initialization, while 'none' keeps the
    base seed (matching a standard run bit for bit). An explicit task
    subset (baseline studies) derives from the subset's bitmask."""
    if tasks is not None and tuple(tasks) != config.tasks():
        mask = sum(1 << TASK_ORDER.index(t) for t in tasks)
        return int(np.random.default_rng(
            [_EXCLUDE_SEED_SALT, config.seed, 16 + mask])
            .integers(2 ** 31 - 1))
    if config.exclude == "none":
        return config.seed
    ix = TASK_ORDER.index(config.exclude)
    return int(np.random.default_rng(
        [_EXCLUDE_SEED_SALT, config.seed, ix]).integers(2 ** 31 - 1))


def _open_readers(config: RunConfig, tasks) -> dict:
    readers = {}
    want_shape = (3, config.input_size, config.input_size)
    for task in tasks:
        path = config.data_path(task)
        if not path:
            raise MissingInputError(
                f"no dataset path configured for task {task!r}")
        readers[task] = ContainerReader(path)
        if readers[task].task != task:
            raise ConfigurationError(
                f"{path} holds {readers[task].task!r} records, "
                f"expected {task!r}")
        if readers[task].image_shape != want_shape:
            raise IncompatibilityError(
                f"{path}: image shape {readers[task].image_shape} does "
                f"not match the configured input size {config.input_size}")
    return readers


class _MetricsLog:
    def __init__(self, path):
        self._fh = open(path, "w") if path else None
        self._t0 = time.monotonic()

    def write(self, stage, cycle, task, loss):
        if self._fh is None:
            return
        rec = {"stage": stage, "cycle": cycle, "task": task,
               "loss": loss, "wallclock": time.monotonic() - self._t0}
        self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        if self._fh is not None:
            self._fh.close()


def train(config: RunConfig, stage: str = "all",
          out_dir=None, tasks=None) -> dict:
    """Run the configured stages; writes checkpoints and a metrics log.

    Returns a dict with the trained network, per-stage checkpoint paths
    and the effective seed. On a numeric abort the last completed
    cycle's parameters are written out before the error propagates.

    ``tasks`` overrides the config-derived task set, for baseline runs
    such as identity-only training; the seed derivation keeps distinct
    subsets on distinct initializations, but the config hash embedded in
    checkpoints still records the unmodified config.
    """
    if stage not in ("1", "2", "all"):
        raise ConfigurationError(f"unknown stage {stage!r}")
    ncfg = network_config_for(config)
    if tasks is not None:
        unknown = [t for t in tasks if t not in TASK_ORDER]
        if unknown or not tasks:
            raise ConfigurationError(
                f"task override must be a nonempty subset of {TASK_ORDER}")
        tasks = tuple(t for t in TASK_ORDER if t in set(tasks))
    seed = effective_seed(config, tasks)
    if tasks is None:
        tasks = config.tasks()
    chash = config.config_hash()
    out_dir = config.out_dir if out_dir is None else out_dir
    os.makedirs(out_dir, exist_ok=True)
    stage1_path = os.path.join(out_dir, "stage1.ckpt")
    final_path = os.path.join(out_dir, "final.ckpt")
    optc = OptimConfig(config.learning_rate, config.rho, config.epsilon)
    log = _MetricsLog(os.path.join(out_dir, "metrics.ndjson"))
    if stage == "1" and "grasp" not in tasks:
        raise ConfigurationError(
            "stage 1 trains the grasp task, which this config excludes")
    run_stage1 = stage in ("1", "all") and "grasp" in tasks
    run_stage2 = stage in ("2", "all")
    try:
        net1 = None
        if run_stage1:
            readers = _open_readers(config, ("grasp",))
            net1 = build_stage1_network(ncfg, seed=seed)
            optim1 = Rmsprop(net1.params, optc)
            good1 = net1.params.snapshot()

            def on_iter(i, v):
                nonlocal good1
                log.write(1, i, "grasp", v)
                good1 = net1.params.snapshot()

            try:
                stage1_train(
                    net1, readers["grasp"], config.stage1_iters,
                    config.batch_size, optim1, seed=seed,
                    margin=config.cosine_margin, on_iter=on_iter)
            except NumericError:
                save_checkpoint(stage1_path, good1, stage="stage1",
                                seed=seed, config_hash=chash)
                raise
            save_checkpoint(stage1_path, net1.params.snapshot(),
                            stage="stage1", seed=seed, config_hash=chash)
            readers["grasp"].close()
            if stage == "1":
                return {"network": net1, "stage1": stage1_path,
                        "seed": seed}
        if not run_stage2:
            return {"network": net1, "stage1": stage1_path, "seed": seed}

        stage2_seed = int(np.random.default_rng(
            [_STAGE2_SEED_SALT, seed]).integers(2 ** 31 - 1))
        if "grasp" in tasks:
            if net1 is None:
                ck = load_checkpoint(stage1_path)
                net1 = build_stage1_network(ncfg, seed=seed)
                net1.params.load(ck.arrays)
            net = build_stage2(net1, ncfg, seed=stage2_seed, tasks=tasks)
        else:
            net = build_network(ncfg, seed=stage2_seed, tasks=tasks)
        readers = _open_readers(config, tasks)
        iters = {task: BatchIterator(
            len(readers[task]), config.batch_size,
            int(np.random.default_rng(
                [_DATA_SEED_SALT, seed, TASK_ORDER.index(task)])
                .integers(2 ** 31 - 1))) for task in tasks}
        optim = Rmsprop(net.params, optc)
        good = net.params.snapshot()
        good_opt, good_steps = optim.state_arrays(), 0
        try:
            for cycle in range(config.stage2_cycles):
                batches = {task: load_batch(readers[task],
                                            iters[task].next_batch())
                           for task in tasks}
                report = stage2_cycle(net, batches, optim,
                                      margin=config.cosine_margin)
                for task in tasks:
                    log.write(2, cycle, task, report.losses[task])
                good = net.params.snapshot()
                good_opt, good_steps = optim.state_arrays(), optim.steps
        except NumericError:
            save_checkpoint(final_path, good, stage="final", seed=seed,
                            config_hash=chash, opt_arrays=good_opt,
                            opt_steps=good_steps)
            raise
        for reader in readers.values():
            reader.close()
        save_checkpoint(final_path, net.params.snapshot(), stage="final",
                        seed=seed, config_hash=chash,
                        opt_arrays=optim.state_arrays(),
                        opt_steps=optim.steps)
        return {"network": net, "stage1": stage1_path,
                "final": final_path, "seed": seed}
    finally:
        log.close()


def load_network(checkpoint_path, config: RunConfig) -> MultiTaskNetwork:
    """Rebuild a full network from a final checkpoint."""
    ck = load_checkpoint(checkpoint_path)
    ncfg = network_config_for(config)
    net = build_network(ncfg, seed=0, tasks=config.tasks())
    net.params.load(ck.arrays)
    return net
