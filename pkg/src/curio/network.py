"""Shared convolutional trunk with four interaction-task heads.

The trunk is an AlexNet-style stack whose channel counts shrink by
``channel_scale`` so the whole thing trains on a CPU in minutes. Heads
tap it at different depths: grasp reads conv4, push reads conv3 of two
weight-sharing streams, poke reads fc6, and identity compares fc7
embeddings of two streams. A "clone" is just a second forward graph
over the same parameter tensors, so shared gradients accumulate without
any copying.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff.ops import conv_output_size
from .errors import ConfigurationError, IncompatibilityError

TASKS = ("grasp", "push", "poke", "identity")

# Unscaled channel counts; channel_scale multiplies all of these.
BASE_CHANNELS = {"conv1": 96, "conv2": 256, "conv3": 384, "conv4": 384,
                 "conv5": 256}
BASE_HEAD_WIDTHS = {"grasp/conv1": 256, "grasp/fc1": 4096, "grasp/fc2": 1024,
                    "push/conv1": 48, "push/fc1": 1024, "poke/fc1": 512}

LRN_DEPTH = 5
LRN_K = 2.0
LRN_ALPHA = 1e-4
LRN_BETA = 0.75


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters; the two presets below cover the
    desk-scale training setup and the full-scale shape reference."""

    input_size: int = 64
    channel_scale: float = 0.25
    fc_width: int = 256
    conv1_kernel: int = 7
    conv1_stride: int = 2
    conv1_pad: int = 3
    angle_bins: int = 18
    push_action_dim: int = 5
    poke_target_dim: int = 2
    init_std: float = 0.01
    input_center: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.angle_bins != 18:
            raise ConfigurationError("angle_bins is fixed at 18 (10 degree bins)")
        if self.push_action_dim != 5 or self.poke_target_dim != 2:
            raise ConfigurationError("head output widths are fixed (5 and 2)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"unsupported dtype {self.dtype!r}")
        if self.input_size < 1 or self.channel_scale <= 0 or self.fc_width < 1:
            raise ConfigurationError("input_size, channel_scale and fc_width "
                                     "must be positive")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def desk_config(**overrides) -> NetworkConfig:
    """Small preset that trains on a CPU: 64 px input, quarter channels.

    Weights start at std 0.05, which matches sqrt(2/fan_in) for the
    quarter-width layers and keeps activation magnitudes roughly flat
    through the stack; renders arrive in [0, 1] and are centered before
    conv1 so the DC component does not dominate every feature.
    """
    base = dict(init_std=0.05, input_center=0.5)
    base.update(overrides)
    return NetworkConfig(**base)


def paper_config(**overrides) -> NetworkConfig:
    """Full-scale preset (227 px, AlexNet widths); used for shape checks
    only, never trained in the test suite."""
    base = dict(input_size=227, channel_scale=1.0, fc_width=4096,
                conv1_kernel=11, conv1_stride=4, conv1_pad=0)
    base.update(overrides)
    return NetworkConfig(**base)


def scaled_width(base: int, scale: float) -> int:
    return max(1, int(round(base * scale)))


def layer_plan(config: NetworkConfig, tasks=TASKS, upto: str = "fc7") -> dict:
    """Resolve every layer's shapes for the given config.

    Returns an ordered mapping from layer name to a spec dict. Raises
    ConfigurationError naming the first layer whose window no longer
    fits its input.
    """
    ch = {k: scaled_width(v, config.channel_scale)
          for k, v in BASE_CHANNELS.items()}
    hw = {k: scaled_width(v, config.channel_scale)
          for k, v in BASE_HEAD_WIDTHS.items()}
    plan: dict[str, dict] = {}

    def add_conv(name, in_ch, out_ch, in_hw, kernel, stride, pad):
        try:
            out_hw = conv_output_size(in_hw, kernel, stride, pad)
        except ConfigurationError as e:
            raise ConfigurationError(f"{name}: {e}") from None
        plan[name] = dict(kind="conv", in_ch=in_ch, out_ch=out_ch,
                          kernel=kernel, stride=stride, pad=pad,
                          in_hw=in_hw, out_hw=out_hw)
        return out_hw

    def add_pool(name, channels, in_hw, kernel=3, stride=2):
        try:
            out_hw = conv_output_size(in_hw, kernel, stride, 0)
        except ConfigurationError as e:
            raise ConfigurationError(f"{name}: {e}") from None
        plan[name] = dict(kind="pool", kernel=kernel, stride=stride,
                          channels=channels, in_hw=in_hw, out_hw=out_hw)
        return out_hw

    def add_fc(name, in_dim, out_dim):
        plan[name] = dict(kind="fc", in_dim=in_dim, out_dim=out_dim)

    s = add_conv("root/conv1", 3, ch["conv1"], config.input_size,
                 config.conv1_kernel, config.conv1_stride, config.conv1_pad)
    s = add_pool("root/pool1", ch["conv1"], s)
    s = add_conv("root/conv2", ch["conv1"], ch["conv2"], s, 5, 1, 2)
    s = add_pool("root/pool2", ch["conv2"], s)
    s3 = add_conv("root/conv3", ch["conv2"], ch["conv3"], s, 3, 1, 1)
    s4 = add_conv("root/conv4", ch["conv3"], ch["conv4"], s3, 3, 1, 1)
    if upto not in ("conv3", "conv4"):
        s5 = add_conv("root/conv5", ch["conv4"], ch["conv5"], s4, 3, 1, 1)
        p5 = add_pool("root/pool5", ch["conv5"], s5)
        add_fc("root/fc6", ch["conv5"] * p5 * p5, config.fc_width)
        add_fc("root/fc7", config.fc_width, config.fc_width)

    if "grasp" in tasks:
        g = add_conv("grasp/conv1", ch["conv4"], hw["grasp/conv1"], s4, 3, 1, 1)
        g = add_pool("grasp/pool", hw["grasp/conv1"], g)
        add_fc("grasp/fc1", hw["grasp/conv1"] * g * g, hw["grasp/fc1"])
        add_fc("grasp/fc2", hw["grasp/fc1"], hw["grasp/fc2"])
        add_fc("grasp/fc3", hw["grasp/fc2"], config.angle_bins * 2)
    if "push" in tasks:
        add_conv("push/conv1", ch["conv3"], hw["push/conv1"], s3, 3, 1, 1)
        add_fc("push/fc1", 2 * hw["push/conv1"] * s3 * s3, hw["push/fc1"])
        add_fc("push/fc2", hw["push/fc1"], config.push_action_dim)
    if "poke" in tasks:
        add_fc("poke/fc1", config.fc_width, hw["poke/fc1"])
        add_fc("poke/fc2", hw["poke/fc1"], config.poke_target_dim)
    return plan


def parameter_count(plan: dict) -> int:
    total = 0
    for spec in plan.values():
        if spec["kind"] == "conv":
            total += spec["out_ch"] * (spec["in_ch"] * spec["kernel"] ** 2 + 1)
        elif spec["kind"] == "fc":
            total += spec["out_dim"] * (spec["in_dim"] + 1)
    return total


class ParameterStore:
    """Named leaf tensors in a fixed registration order."""

    def __init__(self):
        self._params: dict[str, ad.Tensor] = {}

    def register(self, name: str, tensor: ad.Tensor):
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter {name!r}")
        self._params[name] = tensor

    def __getitem__(self, name: str) -> ad.Tensor:
        if name not in self._params:
            raise ConfigurationError(f"unknown parameter {name!r}")
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def total_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load(self, arrays: dict[str, np.ndarray], strict: bool = True):
        """Copy values in place; shape or name mismatches are rejected."""
        if strict:
            missing = set(self._params) - set(arrays)
            extra = set(arrays) - set(self._params)
            if missing or extra:
                raise IncompatibilityError(
                    f"parameter names differ (missing {sorted(missing)[:3]}, "
                    f"unexpected {sorted(extra)[:3]})")
        shared = [name for name in arrays if name in self._params]
        for name in shared:
            want = self._params[name].data.shape
            got = arrays[name].shape
            if want != got:
                raise IncompatibilityError(
                    f"parameter {name!r}: checkpoint shape {got} != "
                    f"model shape {want}")
        for name in shared:
            t = self._params[name]
            np.copyto(t.data, arrays[name].astype(t.dtype, copy=False))


def _init_layer_params(store: ParameterStore, plan: dict, rng,
                       config: NetworkConfig):
    dt = config.np_dtype
    for name, spec in plan.items():
        if spec["kind"] == "conv":
            wshape = (spec["out_ch"], spec["in_ch"], spec["kernel"],
                      spec["kernel"])
            bshape = (spec["out_ch"],)
        elif spec["kind"] == "fc":
            wshape = (spec["out_dim"], spec["in_dim"])
            bshape = (spec["out_dim"],)
        else:
            continue
        w = rng.normal(0.0, config.init_std, wshape).astype(dt)
        store.register(name + "/w", ad.Tensor(w, requires_grad=True))
        store.register(name + "/b",
                       ad.Tensor(np.zeros(bshape, dt), requires_grad=True))


class RootNetwork:
    """The shared trunk. Stateless apart from config, plan and params."""

    def __init__(self, config: NetworkConfig, params: ParameterStore,
                 plan: dict, upto: str = "fc7"):
        self.config = config
        self.params = params
        self.plan = plan
        self.upto = upto

    def _conv(self, t, name):
        spec = self.plan[name]
        return ad.conv2d(t, self.params[name + "/w"], self.params[name + "/b"],
                         stride=spec["stride"], pad=spec["pad"], name=name)

    def _fc(self, t, name):
        return ad.linear(t, self.params[name + "/w"], self.params[name + "/b"],
                         name=name)

    def forward(self, x: ad.Tensor, upto: str = "fc7") -> dict[str, ad.Tensor]:
        """Run the trunk, returning named tap activations. conv taps are
        post-ReLU; 'pool5' is the pooled conv5 the fc stack consumes."""
        size = self.config.input_size
        if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (size, size):
            raise ConfigurationError(
                f"root expects [N,3,{size},{size}] input, got {x.shape}")
        taps: dict[str, ad.Tensor] = {}
        t = x
        if self.config.input_center != 0.0:
            t = ad.shift(t, -self.config.input_center)
        t = ad.relu(self._conv(t, "root/conv1"))
        t = ad.maxpool(ad.lrn(t, LRN_DEPTH, LRN_K, LRN_ALPHA, LRN_BETA), 3, 2)
        t = ad.relu(self._conv(t, "root/conv2"))
        t = ad.maxpool(ad.lrn(t, LRN_DEPTH, LRN_K, LRN_ALPHA, LRN_BETA), 3, 2)
        t = ad.relu(self._conv(t, "root/conv3"))
        taps["conv3"] = t
        if upto == "conv3":
            return taps
        t = ad.relu(self._conv(t, "root/conv4"))
        taps["conv4"] = t
        if upto == "conv4":
            return taps
        if "root/conv5" not in self.plan:
            raise ConfigurationError(
                f"trunk was built only up to {self.upto!r}")
        t = ad.relu(self._conv(t, "root/conv5"))
        taps["conv5"] = t
        t = ad.maxpool(t, 3, 2)
        taps["pool5"] = t
        flat = int(np.prod(t.shape[1:]))
        t = ad.reshape(t, (t.shape[0], flat))
        t = ad.relu(self._fc(t, "root/fc6"))
        taps["fc6"] = t
        if upto == "fc6":
            return taps
        t = ad.relu(self._fc(t, "root/fc7"))
        taps["fc7"] = t
        return taps


def clone_view(root: RootNetwork) -> RootNetwork:
    """Second forward view over the same parameter tensors. Gradients
    from both views accumulate into the shared buffers."""
    return RootNetwork(root.config, root.params, root.plan, root.upto)


class MultiTaskNetwork:
    """Trunk plus whichever task heads were built."""

    def __init__(self, config: NetworkConfig, params: ParameterStore,
                 plan: dict, tasks, root_upto: str = "fc7"):
        self.config = config
        self.params = params
        self.plan = plan
        self.tasks = tuple(tasks)
        self.root = RootNetwork(config, params, plan, root_upto)
        self.clone = clone_view(self.root)

    # ---------------------------------------------------------- params

    def root_param_names(self) -> list[str]:
        return [n for n in self.params.names() if n.startswith("root/")]

    def head_param_names(self, task: str) -> list[str]:
        if task not in TASKS:
            raise ConfigurationError(f"unknown task {task!r}")
        prefix = task + "/"
        return [n for n in self.params.names() if n.startswith(prefix)]

    def _require_task(self, task):
        if task != "identity" and task not in self.tasks:
            raise ConfigurationError(
                f"network was built without the {task!r} head")

    # --------------------------------------------------------- forwards

    def grasp_forward(self, patches: ad.Tensor) -> ad.Tensor:
        """Patch batch -> [N, angle_bins, 2] logits."""
        self._require_task("grasp")
        taps = self.root.forward(patches, upto="conv4")
        t = ad.relu(self.root._conv(taps["conv4"], "grasp/conv1"))
        spec = self.plan["grasp/pool"]
        t = ad.maxpool(t, spec["kernel"], spec["stride"])
        t = ad.reshape(t, (t.shape[0], int(np.prod(t.shape[1:]))))
        t = ad.relu(self.root._fc(t, "grasp/fc1"))
        t = ad.relu(self.root._fc(t, "grasp/fc2"))
        t = self.root._fc(t, "grasp/fc3")
        return ad.reshape(t, (t.shape[0], self.config.angle_bins, 2))

    def push_forward(self, before: ad.Tensor, after: ad.Tensor) -> ad.Tensor:
        """Image pair -> [N, 5] action prediction. Both streams share
        push/conv1 weights and the trunk."""
        self._require_task("push")
        ta = self.root.forward(before, upto="conv3")["conv3"]
        tb = self.clone.forward(after, upto="conv3")["conv3"]
        pa = ad.relu(self.root._conv(ta, "push/conv1"))
        pb = ad.relu(self.root._conv(tb, "push/conv1"))
        t = ad.concat([pa, pb], axis=1)
        t = ad.reshape(t, (t.shape[0], int(np.prod(t.shape[1:]))))
        t = ad.relu(self.root._fc(t, "push/fc1"))
        return self.root._fc(t, "push/fc2")

    def poke_forward(self, imgs: ad.Tensor) -> ad.Tensor:
        """Image batch -> [N, 2] force-profile line fit (slope, intercept)."""
        self._require_task("poke")
        t = self.root.forward(imgs, upto="fc6")["fc6"]
        t = ad.relu(self.root._fc(t, "poke/fc1"))
        return self.root._fc(t, "poke/fc2")

    def identity_forward(self, a: ad.Tensor, b: ad.Tensor):
        """Image pair -> (fc7_a, fc7_b) embeddings, one per stream."""
        fa = self.root.forward(a, upto="fc7")["fc7"]
        fb = self.clone.forward(b, upto="fc7")["fc7"]
        return fa, fb


def build_root(config: NetworkConfig, seed: int, upto: str = "fc7") -> RootNetwork:
    """Gaussian-initialized trunk (no heads)."""
    plan = layer_plan(config, tasks=(), upto=upto)
    store = ParameterStore()
    _init_layer_params(store, plan, np.random.default_rng(seed), config)
    return RootNetwork(config, store, plan, upto)


def build_network(config: NetworkConfig, seed: int, tasks=TASKS,
                  root_upto: str = "fc7") -> MultiTaskNetwork:
    """Trunk plus heads for the named tasks, all freshly initialized."""
    tasks = tuple(tasks)
    for t in tasks:
        if t not in TASKS:
            raise ConfigurationError(f"unknown task {t!r}")
    plan = layer_plan(config, tasks=tasks, upto=root_upto)
    store = ParameterStore()
    _init_layer_params(store, plan, np.random.default_rng(seed), config)
    return MultiTaskNetwork(config, store, plan, tasks, root_upto)


def build_stage1_network(config: NetworkConfig, seed: int) -> MultiTaskNetwork:
    """Stage-1 graph: trunk up to conv4 plus the grasp head only."""
    return build_network(config, seed, tasks=("grasp",), root_upto="conv4")


def build_stage2(stage1_net: MultiTaskNetwork, config: NetworkConfig,
                 seed: int, tasks=TASKS) -> MultiTaskNetwork:
    """Full multi-task network seeded from a stage-1 run.

    conv1..conv4 and the trained grasp head are copied; conv5, fc6, fc7
    and the remaining heads start from a fresh Gaussian draw.
    """
    if stage1_net.config != config:
        raise IncompatibilityError("stage-1 network config differs from the "
                                   "requested stage-2 config")
    net = build_network(config, seed, tasks=tasks, root_upto="fc7")
    carried = {name: t.data for name, t in stage1_net.params.items()
               if name in net.params}
    net.params.load(carried, strict=False)
    return net
