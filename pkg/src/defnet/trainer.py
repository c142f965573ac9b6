"""Momentum SGD with freeze/zero-pin masks, the stage-by-stage branch
training loop, and multi-phase pretraining schedules.

The staged loop follows a strict contract: first the trunk is fine-tuned
with every staged branch pinned to exactly zero; then per stage t the
branch's hidden weights are randomized (its output matrix stays zero, so
the network function is bit-identical before and after), the branch is
trained with everything else frozen, and finally everything activated so
far is trained jointly.  Freezing is exact: a frozen tensor is
bit-unchanged by a step, weight decay included.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .layers import loss_forward_backward
from .network import StagedNetwork, _xavier
from .util import rng_for


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; message carries lr and offending batch ids."""


class LabelSetError(ValueError):
    """Phase datasets changed label sets where no boundary was declared."""


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 2
    # stage-branch-only phases run at a reduced rate before joint training
    stage_lr_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


@dataclass(frozen=True)
class FreezeMask:
    """Which parameters a step may update.

    ``frozen`` names are left bit-unchanged; ``zero_pinned`` names are
    additionally asserted to hold exact zeros (pinning implies freezing,
    which the constructor enforces by union).
    """

    frozen: frozenset = frozenset()
    zero_pinned: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "zero_pinned", frozenset(self.zero_pinned))
        object.__setattr__(
            self, "frozen", frozenset(self.frozen) | self.zero_pinned
        )

    @classmethod
    def train_all(cls):
        return cls()

    @classmethod
    def for_net(cls, net, frozen_prefixes=(), zero_prefixes=()):
        names = list(net.params)
        frozen = {n for n in names if any(n.startswith(p) for p in frozen_prefixes)}
        zero = {n for n in names if any(n.startswith(p) for p in zero_prefixes)}
        return cls(frozenset(frozen), frozenset(zero))

    def validate(self, net):
        unknown = (self.frozen | self.zero_pinned) - set(net.params)
        if unknown:
            raise ValueError(f"mask names unknown parameters: {sorted(unknown)}")
        for name in self.zero_pinned:
            if net.params[name].any():
                raise ValueError(f"zero-pinned parameter {name!r} is not zero")


def _sample_id(sample, index):
    return sample[2] if len(sample) > 2 else index


def batch_gradients(net, batch, loss_kind):
    """Mean loss and mean parameter gradients over a batch."""
    if not batch:
        raise ValueError("batch must be non-empty")
    total = None
    loss_sum = 0.0
    for sample in batch:
        image, label = sample[0], sample[1]
        scores, cache = net.forward(image)
        kind = net.config.loss if loss_kind is None else loss_kind
        loss, dscores = loss_forward_backward(scores, label, kind)
        loss_sum += loss
        grads = net.backward(cache, dscores)
        if total is None:
            total = grads
        else:
            for name in total:
                total[name] += grads[name]
    inv = 1.0 / len(batch)
    for name in total:
        total[name] *= inv
    return loss_sum * inv, total


def sgd_step(net, batch, loss_kind, cfg, mask, velocity=None, lr=None):
    """One momentum-SGD step over a batch; returns (net, batch loss).

    ``velocity`` is the momentum buffer dict, mutated in place; pass the
    same dict across steps.  Raises TrainingDivergedError on a non-finite
    loss.
    """
    mask.validate(net)
    if velocity is None:
        velocity = {}
    loss, grads = batch_gradients(net, batch, loss_kind)
    if not np.isfinite(loss):
        ids = [_sample_id(s, i) for i, s in enumerate(batch)]
        raise TrainingDivergedError(
            f"non-finite batch loss {loss!r} at lr={cfg.learning_rate} "
            f"on batch ids {ids}"
        )
    step_lr = cfg.learning_rate if lr is None else lr
    for name, p in net.params.items():
        if name in mask.frozen:
            continue
        g = grads[name] + cfg.weight_decay * p
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
            velocity[name] = v
        v *= cfg.momentum
        v -= step_lr * g
        p += v
    return net, loss


@dataclass
class PhaseRecord:
    label: str
    losses: list = field(default_factory=list)

    def boundary(self):
        return (self.losses[0], self.losses[-1]) if self.losses else (None, None)


@dataclass
class TrainReport:
    phases: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["phase", "step", "loss"])
            for rec in self.phases:
                for step, loss in enumerate(rec.losses):
                    writer.writerow([rec.label, step, "%.17g" % loss])


def train_phase(
    net,
    samples,
    cfg,
    mask,
    label,
    epochs=None,
    lr=None,
    loss_kind=None,
    step_hook=None,
):
    """Run epochs of shuffled mini-batch SGD under one mask.

    Shuffle order derives from (cfg.seed, phase label), so two runs with the
    same seed see identical batches.  Returns a PhaseRecord of step losses.
    """
    if not samples:
        raise ValueError(f"phase {label!r} has no samples")
    mask.validate(net)
    rng = rng_for(cfg.seed, f"shuffle.{label}")
    velocity = {}
    record = PhaseRecord(label=label)
    n_epochs = cfg.epochs if epochs is None else epochs
    for _epoch in range(n_epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            net, loss = sgd_step(net, batch, loss_kind, cfg, mask, velocity, lr=lr)
            record.losses.append(loss)
            if step_hook is not None:
                step_hook(label, len(record.losses) - 1, net)
    return record


def randomize_stage(net, t, seed):
    """Activate stage t: seed its hidden weights, leave its output at zero.

    Uses the same uniform fan-based scheme as the initial build, keyed by
    the stage index, so activation is deterministic.  Because the stage's
    output matrix remains zero, the network's function is unchanged.
    """
    rng = rng_for(seed, f"stage-init.{t}")
    for part in ("fc6", "fc7"):
        w = net.params[f"stage{t}.{part}.weights"]
        fan_out, fan_in = w.shape
        w[...] = _xavier(rng, w.shape, fan_in, fan_out)


def multistage_train(net, data, t_stages, cfg, probe_hook=None, step_hook=None):
    """The stage-by-stage loop; returns (net, TrainReport).

    data: list of (image, label) samples.  Phases, in order: "trunk"
    (staged branches pinned to zero), then per stage t "stage{t}-solo"
    (only that branch trains, at ``stage_lr_scale`` times the base rate)
    and "stage{t}-joint" (trunk plus stages 1..t).  ``probe_hook(event,
    net)`` fires at "before-activate-{t}" / "after-activate-{t}" so callers
    can verify activation does not change the network function.
    """
    if t_stages > net.config.num_stages:
        raise ValueError(
            f"requested {t_stages} stages but network has {net.config.num_stages}"
        )
    samples = getattr(data, "samples", data)
    all_stage_prefixes = [f"stage{t}." for t in range(1, net.config.num_stages + 1)]
    report = TrainReport()
    mask = FreezeMask.for_net(net, zero_prefixes=all_stage_prefixes)
    report.phases.append(
        train_phase(net, samples, cfg, mask, "trunk", step_hook=step_hook)
    )
    for t in range(1, t_stages + 1):
        if probe_hook is not None:
            probe_hook(f"before-activate-{t}", net)
        randomize_stage(net, t, cfg.seed)
        if probe_hook is not None:
            probe_hook(f"after-activate-{t}", net)
        later = [f"stage{u}." for u in range(t + 1, net.config.num_stages + 1)]
        solo = FreezeMask.for_net(
            net,
            frozen_prefixes=["trunk.", "part.", "head."]
            + [f"stage{u}." for u in range(1, t)],
            zero_prefixes=later,
        )
        report.phases.append(
            train_phase(
                net,
                samples,
                cfg,
                solo,
                f"stage{t}-solo",
                lr=cfg.learning_rate * cfg.stage_lr_scale,
                step_hook=step_hook,
            )
        )
        joint = FreezeMask.for_net(net, zero_prefixes=later)
        report.phases.append(
            train_phase(
                net, samples, cfg, joint, f"stage{t}-joint", step_hook=step_hook
            )
        )
    return net, report


@dataclass
class LabeledDataset:
    """Samples plus the identity of their label set."""

    samples: list
    num_classes: int
    label_set_id: str


@dataclass(frozen=True)
class PhaseSpec:
    label: str
    dataset_key: str
    new_label_set: bool = False
    epochs: int = None


PLAIN = "plain"
MULTISTAGE = "multistage"
SCHEME_ONE = "scheme1"
SCHEME_TWO = "scheme2"


@dataclass
class TrainingSchedule:
    """A named sequence of phases over named datasets.

    scheme1: whole-image classification, then object crops under the source
    label set, then object crops under the target label set.  scheme2 is
    scheme1 without the whole-image phase.  plain is single-phase
    fine-tuning; multistage(T) runs the staged loop on the target crops.
    """

    kind: str
    phases: tuple
    stages: int = 0

    @classmethod
    def plain(cls):
        return cls(PLAIN, (PhaseSpec("fine-tune", "target_crops"),))

    @classmethod
    def multistage(cls, t_stages):
        if t_stages < 1:
            raise ValueError("multistage needs at least one stage")
        return cls(
            MULTISTAGE, (PhaseSpec("multistage", "target_crops"),), stages=t_stages
        )

    @classmethod
    def scheme_one(cls):
        return cls(
            SCHEME_ONE,
            (
                PhaseSpec("whole-image", "whole_images"),
                PhaseSpec("source-crops", "source_crops", new_label_set=True),
                PhaseSpec("target-crops", "target_crops", new_label_set=True),
            ),
        )

    @classmethod
    def scheme_two(cls):
        return cls(
            SCHEME_TWO,
            (
                PhaseSpec("source-crops", "source_crops"),
                PhaseSpec("target-crops", "target_crops", new_label_set=True),
            ),
        )

    @classmethod
    def named(cls, name, t_stages=2):
        builders = {
            PLAIN: cls.plain,
            MULTISTAGE: lambda: cls.multistage(t_stages),
            SCHEME_ONE: cls.scheme_one,
            SCHEME_TWO: cls.scheme_two,
        }
        if name not in builders:
            raise ValueError(f"unknown schedule {name!r}")
        return builders[name]()


def rebind_label_set(net, num_classes, rng):
    """Move a trained body to a new label set.

    Every tensor except the final classifier carries over; the head is
    re-seeded for the new classes and staged output matrices return to
    zero (a stage's classifier is label-set-specific too).
    """
    if num_classes == net.config.num_classes:
        w = net.params["head.weights"]
        w[...] = _xavier(rng, w.shape, w.shape[1], w.shape[0])
        net.params["head.bias"][...] = 0.0
        for t in range(1, net.config.num_stages + 1):
            net.params[f"stage{t}.out.weights"][...] = 0.0
        return net
    new_net = StagedNetwork(replace(net.config, num_classes=num_classes))
    new_net.meta = dict(net.meta)
    for name, arr in new_net.params.items():
        if name.startswith("head.") or (
            name.startswith("stage") and ".out." in name
        ):
            continue
        arr[...] = net.params[name]
    w = new_net.params["head.weights"]
    w[...] = _xavier(rng, w.shape, w.shape[1], w.shape[0])
    return new_net


def run_schedule(schedule, datasets, cfg, net_config, seed, step_hook=None):
    """Execute a schedule's phases in order; returns (net, TrainReport).

    Each phase trains on ``datasets[phase.dataset_key]`` (a LabeledDataset).
    Between phases the network carries over; when the incoming dataset's
    label set differs from the current one, the phase must have declared
    ``new_label_set`` or a LabelSetError is raised, and the final
    classifier is re-initialized for the new classes.
    """
    missing = [p.dataset_key for p in schedule.phases if p.dataset_key not in datasets]
    if missing:
        raise ValueError(f"schedule needs datasets {missing}")
    first = datasets[schedule.phases[0].dataset_key]
    net = StagedNetwork(
        replace(net_config, num_classes=first.num_classes)
    ).initialize(seed)
    net.meta = {"seed": seed, "schedule": schedule.kind}
    current_labels = first.label_set_id
    report = TrainReport()
    for index, phase in enumerate(schedule.phases):
        ds = datasets[phase.dataset_key]
        if ds.label_set_id != current_labels:
            if not phase.new_label_set:
                raise LabelSetError(
                    f"phase {phase.label!r} switches label set "
                    f"{current_labels!r} -> {ds.label_set_id!r} without a "
                    "declared boundary"
                )
            net = rebind_label_set(
                net, ds.num_classes, rng_for(seed, f"head-reinit.{index}")
            )
            current_labels = ds.label_set_id
        if schedule.kind == MULTISTAGE:
            net, stage_report = multistage_train(
                net, ds.samples, schedule.stages, cfg, step_hook=step_hook
            )
            report.phases.extend(stage_report.phases)
        else:
            mask = FreezeMask.for_net(
                net,
                zero_prefixes=[
                    f"stage{t}." for t in range(1, net.config.num_stages + 1)
                ],
            )
            report.phases.append(
                train_phase(
                    net,
                    ds.samples,
                    cfg,
                    mask,
                    phase.label,
                    epochs=phase.epochs,
                    step_hook=step_hook,
                )
            )
    return net, report
