"""Model assembly: trunk CNN, deformation-pooling part branches, staged
fully connected branches, and JSON (de)serialization.

Topology (desk scale).  The trunk is a stack of conv3x3/relu/pool2x2
blocks; the last conv activation feeds both the trunk head
(pool -> fc -> relu -> fc -> relu) and, when enabled, one part branch per
declared filter size: conv (same padding) -> relu -> per-channel
deformation pooling -> 1x1 mixing conv -> per-channel global peak.  The
final linear head sees the trunk feature concatenated with every branch's
peak vector and owns the single shared bias.  Each staged branch t is an
independent fc stack off the pooled trunk feature whose output matrix
starts at zero, so an inactive or freshly activated stage contributes
exactly nothing to the scores.
"""

import json
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import defpool as dp
from .layers import ConvLayer, FcLayer, LossKind, MaxPoolLayer, ReluLayer
from .tensorio import TensorRecordError, format_tensor, parse_tensor
from .util import rng_for

MODEL_FORMAT_VERSION = 1


class NetworkGeometryError(ValueError):
    """A layer would produce an empty feature map; names the layer."""


class ModelFormatError(ValueError):
    """Model file is structurally invalid."""


class ModelVersionError(ValueError):
    """Model file has an unsupported format version."""


@dataclass
class DefBranchConfig:
    enabled: bool = True
    filter_sizes: tuple = (3, 5, 9)
    channels: int = 16
    pool_radius: int = 1
    pool_stride: tuple = (2, 2)
    basis_count: int = 1
    share_pool: bool = False

    def __post_init__(self):
        self.filter_sizes = tuple(int(k) for k in self.filter_sizes)
        self.pool_stride = tuple(int(s) for s in self.pool_stride)
        if any(k % 2 == 0 or k < 1 for k in self.filter_sizes):
            raise ValueError(f"part filter sizes must be odd, got {self.filter_sizes}")
        if self.channels < 1 or self.basis_count < 1 or self.pool_radius < 1:
            raise ValueError("channels, basis_count and pool_radius must be positive")

    def to_dict(self):
        return {
            "enabled": self.enabled,
            "filter_sizes": list(self.filter_sizes),
            "channels": self.channels,
            "pool_radius": self.pool_radius,
            "pool_stride": list(self.pool_stride),
            "basis_count": self.basis_count,
            "share_pool": self.share_pool,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class NetworkConfig:
    """Hyperparameters that determine every tensor shape in the model."""

    input_shape: tuple = (3, 24, 24)
    trunk_channels: tuple = (8, 16)
    fc_width: int = 64
    num_classes: int = 4
    def_branch: DefBranchConfig = field(default_factory=DefBranchConfig)
    num_stages: int = 0
    stage_hidden: int = 32
    loss: LossKind = field(default_factory=LossKind.hinge)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.trunk_channels = tuple(int(c) for c in self.trunk_channels)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"bad input shape {self.input_shape}")
        if not self.trunk_channels:
            raise ValueError("trunk needs at least one conv block")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.num_stages < 0:
            raise ValueError("stage count must be >= 0")

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "trunk_channels": list(self.trunk_channels),
            "fc_width": self.fc_width,
            "num_classes": self.num_classes,
            "def_branch": self.def_branch.to_dict(),
            "num_stages": self.num_stages,
            "stage_hidden": self.stage_hidden,
            "loss": {
                "name": self.loss.name,
                "margin": self.loss.margin,
                "squared": self.loss.squared,
            },
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["def_branch"] = DefBranchConfig.from_dict(d["def_branch"])
        loss = d["loss"]
        d["loss"] = LossKind(loss["name"], loss["margin"], loss["squared"])
        return cls(**d)


def _xavier(rng, shape, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


class StagedNetwork:
    """A built model: parameter registry plus forward/backward.

    ``params`` maps a stable name to the live array; layer objects alias
    those arrays, so in-place optimizer updates are seen by the next
    forward.  Instances are single-threaded while training; a loaded model
    used read-only can serve multiple threads.
    """

    def __init__(self, config):
        self.config = config
        self.meta = {}
        self.params = OrderedDict()
        self._trace_geometry()
        self._allocate()

    # -- shape bookkeeping ------------------------------------------------

    def _trace_geometry(self):
        cfg = self.config
        c, h, w = cfg.input_shape
        for i, _out in enumerate(cfg.trunk_channels):
            # conv3x3 same padding keeps h, w
            self.feat_hw = (h, w)
            ph, pw = h // 2, w // 2
            if ph < 1 or pw < 1:
                raise NetworkGeometryError(
                    f"trunk.pool{i} output {ph}x{pw} is empty for input "
                    f"{cfg.input_shape}"
                )
            h, w = ph, pw
        self.pool5_shape = (cfg.trunk_channels[-1], h, w)
        self.flat_dim = cfg.trunk_channels[-1] * h * w
        db = cfg.def_branch
        if db.enabled:
            fh, fw = self.feat_hw
            sy, sx = db.pool_stride
            vo, ho = fh // sy, fw // sx
            if vo < 1 or ho < 1:
                raise NetworkGeometryError(
                    f"part pool output {vo}x{ho} is empty for feature map {fh}x{fw}"
                )
            self.part_pooled_hw = (vo, ho)
            self.head_dim = cfg.fc_width + len(db.filter_sizes) * db.channels
        else:
            self.part_pooled_hw = None
            self.head_dim = cfg.fc_width

    # -- parameter allocation --------------------------------------------

    def _allocate(self):
        cfg = self.config
        db = cfg.def_branch
        add = self.params.__setitem__
        in_ch = cfg.input_shape[0]
        for i, out_ch in enumerate(cfg.trunk_channels):
            add(f"trunk.conv{i}.weights", np.zeros((out_ch, in_ch, 3, 3)))
            add(f"trunk.conv{i}.bias", np.zeros(out_ch))
            in_ch = out_ch
        add("trunk.fc6.weights", np.zeros((cfg.fc_width, self.flat_dim)))
        add("trunk.fc6.bias", np.zeros(cfg.fc_width))
        add("trunk.fc7.weights", np.zeros((cfg.fc_width, cfg.fc_width)))
        add("trunk.fc7.bias", np.zeros(cfg.fc_width))
        if db.enabled:
            side = 2 * db.pool_radius + 1
            pool_lead = 1 if db.share_pool else db.channels
            feat_ch = cfg.trunk_channels[-1]
            for k in db.filter_sizes:
                add(f"part.f{k}.conv.weights", np.zeros((db.channels, feat_ch, k, k)))
                add(f"part.f{k}.conv.bias", np.zeros(db.channels))
                add(f"part.f{k}.pool.coeff", np.zeros((pool_lead, db.basis_count)))
                add(
                    f"part.f{k}.pool.basis",
                    np.zeros((pool_lead, db.basis_count, side, side)),
                )
                add(f"part.f{k}.mix.weights", np.zeros((db.channels, db.channels, 1, 1)))
                add(f"part.f{k}.mix.bias", np.zeros(db.channels))
        add("head.weights", np.zeros((cfg.num_classes, self.head_dim)))
        add("head.bias", np.zeros(cfg.num_classes))
        for t in range(1, cfg.num_stages + 1):
            add(f"stage{t}.fc6.weights", np.zeros((cfg.stage_hidden, self.flat_dim)))
            add(f"stage{t}.fc6.bias", np.zeros(cfg.stage_hidden))
            add(f"stage{t}.fc7.weights", np.zeros((cfg.stage_hidden, cfg.stage_hidden)))
            add(f"stage{t}.fc7.bias", np.zeros(cfg.stage_hidden))
            add(f"stage{t}.out.weights", np.zeros((cfg.num_classes, cfg.stage_hidden)))
        self._relu = ReluLayer()
        self._pool = MaxPoolLayer((2, 2), (2, 2))

    def parameters(self):
        """Live name -> array registry (mutating an array mutates the model)."""
        return self.params

    def stage_param_names(self, t):
        return [n for n in self.params if n.startswith(f"stage{t}.")]

    def initialize(self, seed):
        """Seeded uniform(-s, s) init, s = sqrt(6 / (fan_in + fan_out)).

        Stage-branch tensors stay at zero; pooling penalty coefficients
        start at zero (pure max-pooling) over a non-negative random basis,
        so deformation costs are learned from a neutral start.  The head
        columns over the part-branch features also start at zero — the
        same output-preserving shield the stage branches use — so a model
        with the branch enabled begins as the plain trunk and grows into
        the branch only where it lowers the loss.
        """
        for name, arr in self.params.items():
            if name.startswith("stage"):
                continue
            rng = rng_for(seed, f"network-init.{name}")
            if name.endswith("pool.basis"):
                arr[...] = rng.uniform(0.0, 1.0, size=arr.shape)
                continue
            if name.endswith(".bias") or name.endswith("pool.coeff"):
                continue
            if name == "head.weights":
                # Draw only the trunk block, with the same fan the plain
                # trunk would use, so enabling the branch changes nothing
                # about where training starts.
                k, fc7 = arr.shape[0], self.config.fc_width
                arr[...] = 0.0
                arr[:, :fc7] = _xavier(rng, (k, fc7), fc7, k)
                continue
            if arr.ndim == 4:
                out_ch, in_ch, kh, kw = arr.shape
                fan_in, fan_out = in_ch * kh * kw, out_ch * kh * kw
            else:
                fan_out, fan_in = arr.shape
            arr[...] = _xavier(rng, arr.shape, fan_in, fan_out)
        return self

    # -- layer views ------------------------------------------------------

    def _conv(self, prefix, stride=1, padding=0):
        return ConvLayer(
            self.params[f"{prefix}.weights"],
            self.params[f"{prefix}.bias"],
            stride=stride,
            padding=padding,
        )

    def _fc(self, prefix):
        return FcLayer(self.params[f"{prefix}.weights"], self.params[f"{prefix}.bias"])

    # -- forward / backward ----------------------------------------------

    def forward(self, image):
        cfg = self.config
        x = np.ascontiguousarray(image, dtype=np.float64)
        if x.shape != cfg.input_shape:
            raise ValueError(f"input shape {x.shape} != expected {cfg.input_shape}")
        cache = {"trunk": []}
        for i in range(len(cfg.trunk_channels)):
            conv = self._conv(f"trunk.conv{i}", padding=1)
            pre, ccache = conv.forward(x)
            act, mask = self._relu.forward(pre)
            if i == len(cfg.trunk_channels) - 1:
                cache["feat5"] = act
            x, pcache = self._pool.forward(act)
            cache["trunk"].append((ccache, mask, pcache))
        cache["pool5_shape"] = x.shape
        flat = x.reshape(-1)
        h6_pre, c6 = self._fc("trunk.fc6").forward(flat)
        h6, m6 = self._relu.forward(h6_pre)
        h7_pre, c7 = self._fc("trunk.fc7").forward(h6)
        h7, m7 = self._relu.forward(h7_pre)
        cache["fc"] = (c6, m6, c7, m7)
        pieces = [h7]
        db = cfg.def_branch
        if db.enabled:
            cache["parts"] = {}
            for k in db.filter_sizes:
                conv = self._conv(f"part.f{k}.conv", padding=(k - 1) // 2)
                pre, ccache = conv.forward(cache["feat5"])
                act, mask = self._relu.forward(pre)
                pooled, pool_cache = dp.defpool_channels_forward(
                    act,
                    self.params[f"part.f{k}.pool.coeff"],
                    self.params[f"part.f{k}.pool.basis"],
                    db.pool_radius,
                    *db.pool_stride,
                )
                mix = self._conv(f"part.f{k}.mix")
                mixed, mcache = mix.forward(pooled)
                # Part presence is the best deformation-discounted response
                # anywhere in the window; averaging would bury a single
                # strong peak under background cells.
                flat_maps = mixed.reshape(mixed.shape[0], -1)
                arg = flat_maps.argmax(axis=1)
                peak = np.take_along_axis(flat_maps, arg[:, None], axis=1)[:, 0]
                cache["parts"][k] = (ccache, mask, pool_cache, mcache,
                                     mixed.shape, arg)
                pieces.append(peak)
        head_in = np.concatenate(pieces)
        cache["head_in"] = head_in
        scores, hcache = self._fc("head").forward(head_in)
        cache["head"] = hcache
        cache["stages"] = {}
        for t in range(1, cfg.num_stages + 1):
            s6_pre, sc6 = self._fc(f"stage{t}.fc6").forward(flat)
            s6, sm6 = self._relu.forward(s6_pre)
            s7_pre, sc7 = self._fc(f"stage{t}.fc7").forward(s6)
            s7, sm7 = self._relu.forward(s7_pre)
            scores = scores + self.params[f"stage{t}.out.weights"] @ s7
            cache["stages"][t] = (sc6, sm6, sc7, sm7, s7)
        return scores, cache

    def backward(self, cache, dscores):
        """Gradients for every parameter, keyed like ``params``."""
        cfg = self.config
        db = cfg.def_branch
        grads = {n: np.zeros_like(a) for n, a in self.params.items()}
        dscores = np.asarray(dscores, dtype=np.float64).reshape(-1)

        dflat = np.zeros(self.flat_dim)
        for t in range(cfg.num_stages, 0, -1):
            sc6, sm6, sc7, sm7, s7 = cache["stages"][t]
            w_out = self.params[f"stage{t}.out.weights"]
            grads[f"stage{t}.out.weights"] += np.outer(dscores, s7)
            ds7 = w_out.T @ dscores
            ds7_pre, _ = self._relu.backward(sm7, ds7)
            fc7 = self._fc(f"stage{t}.fc7")
            ds6, g = fc7.backward(sc7, ds7_pre)
            grads[f"stage{t}.fc7.weights"] += g["weights"]
            grads[f"stage{t}.fc7.bias"] += g["bias"]
            ds6_pre, _ = self._relu.backward(sm6, ds6)
            fc6 = self._fc(f"stage{t}.fc6")
            dft, g = fc6.backward(sc6, ds6_pre)
            grads[f"stage{t}.fc6.weights"] += g["weights"]
            grads[f"stage{t}.fc6.bias"] += g["bias"]
            dflat += dft

        dhead_in, g = self._fc("head").backward(cache["head"], dscores)
        grads["head.weights"] += g["weights"]
        grads["head.bias"] += g["bias"]
        dh7 = dhead_in[: cfg.fc_width]
        dfeat5 = np.zeros_like(cache["feat5"])
        if db.enabled:
            off = cfg.fc_width
            for k in db.filter_sizes:
                dpeak = dhead_in[off : off + db.channels]
                off += db.channels
                ccache, mask, pool_cache, mcache, mshape, arg = cache["parts"][k]
                dmixed = np.zeros(mshape)
                dmixed.reshape(mshape[0], -1)[np.arange(mshape[0]), arg] = dpeak
                mix = self._conv(f"part.f{k}.mix")
                dpooled, g = mix.backward(mcache, dmixed)
                grads[f"part.f{k}.mix.weights"] += g["weights"]
                grads[f"part.f{k}.mix.bias"] += g["bias"]
                dact, dcoeff, dbasis = dp.defpool_channels_backward(
                    dpooled,
                    pool_cache,
                    self.params[f"part.f{k}.pool.coeff"],
                    self.params[f"part.f{k}.pool.basis"],
                    db.pool_radius,
                    *db.pool_stride,
                )
                grads[f"part.f{k}.pool.coeff"] += dcoeff
                grads[f"part.f{k}.pool.basis"] += dbasis
                dpre, _ = self._relu.backward(mask, dact)
                conv = self._conv(f"part.f{k}.conv", padding=(k - 1) // 2)
                df, g = conv.backward(ccache, dpre)
                grads[f"part.f{k}.conv.weights"] += g["weights"]
                grads[f"part.f{k}.conv.bias"] += g["bias"]
                dfeat5 += df

        c6, m6, c7, m7 = cache["fc"]
        dh7_pre, _ = self._relu.backward(m7, dh7)
        dh6, g = self._fc("trunk.fc7").backward(c7, dh7_pre)
        grads["trunk.fc7.weights"] += g["weights"]
        grads["trunk.fc7.bias"] += g["bias"]
        dh6_pre, _ = self._relu.backward(m6, dh6)
        dft, g = self._fc("trunk.fc6").backward(c6, dh6_pre)
        grads["trunk.fc6.weights"] += g["weights"]
        grads["trunk.fc6.bias"] += g["bias"]
        dflat += dft

        dx = dflat.reshape(cache["pool5_shape"])
        for i in range(len(cfg.trunk_channels) - 1, -1, -1):
            ccache, mask, pcache = cache["trunk"][i]
            dact, _ = self._pool.backward(pcache, dx)
            if i == len(cfg.trunk_channels) - 1:
                dact = dact + dfeat5
            dpre, _ = self._relu.backward(mask, dact)
            conv = self._conv(f"trunk.conv{i}", padding=1)
            dx, g = conv.backward(ccache, dpre)
            grads[f"trunk.conv{i}.weights"] += g["weights"]
            grads[f"trunk.conv{i}.bias"] += g["bias"]
        return grads

    def feature_dim(self):
        """Length of the penultimate (pre-head) feature vector."""
        return self.head_dim


def build_network(config, seed):
    """Construct and seed a network; staged branches start at exactly zero."""
    return StagedNetwork(config).initialize(seed)


def forward(net, image):
    return net.forward(image)


def model_to_doc(net):
    """The model as a JSON-ready dict with bit-exact decimal tensors."""
    return {
        "version": MODEL_FORMAT_VERSION,
        "config": net.config.to_dict(),
        "meta": net.meta,
        "tensors": {name: format_tensor(arr) for name, arr in net.params.items()},
    }


def save_model(net, path):
    """Write the model as JSON; identical nets produce identical bytes."""
    with open(path, "w") as fh:
        json.dump(model_to_doc(net), fh, sort_keys=True, indent=1)
        fh.write("\n")


def model_from_doc(doc):
    """Rebuild a model from its dict form; raises the format errors."""
    if not isinstance(doc, dict) or "version" not in doc:
        raise ModelFormatError("model file missing version field")
    if doc["version"] != MODEL_FORMAT_VERSION:
        raise ModelVersionError(
            f"unsupported model version {doc['version']!r}, "
            f"expected {MODEL_FORMAT_VERSION}"
        )
    try:
        config = NetworkConfig.from_dict(doc["config"])
        tensors = doc["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad model config: {exc}") from None
    net = StagedNetwork(config)
    net.meta = doc.get("meta", {})
    if set(tensors) != set(net.params):
        missing = sorted(set(net.params) - set(tensors))
        extra = sorted(set(tensors) - set(net.params))
        raise ModelFormatError(
            f"tensor names do not match config (missing {missing}, extra {extra})"
        )
    for name, arr in net.params.items():
        try:
            value = parse_tensor(tensors[name])
        except TensorRecordError as exc:
            raise ModelFormatError(f"tensor {name!r}: {exc}") from None
        if value.shape != arr.shape:
            raise ModelFormatError(
                f"tensor {name!r} has shape {value.shape}, expected {arr.shape}"
            )
        arr[...] = value
    return net


def load_model(path):
    """Read a model back; raises ModelFormatError / ModelVersionError."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file is not valid JSON: {exc}") from None
    return model_from_doc(doc)
