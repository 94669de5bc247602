"""Incremental training protocol: schedule parsing, per-step training loop,
evaluation of every object seen so far, and the strict-incrementality audit.

Each incremental step trains only on that step's objects. There is no
replay buffer and no regularization toward old weights; the data-access
audit raises if the training phase of a step touches any other object's
samples. After every step the model is evaluated on the test split of all
objects seen so far, giving the per-step accuracy history that the
forgetting metric consumes.
"""

from __future__ import annotations

import os
import re
import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import save_checkpoint
from .config import Config, config_hash, model_settings
from .data import Dataset, corrupt_dataset
from .model import DetectionModel, batch_arrays
from .optim import SGD
from .scoring import (
    MetricsHistory,
    UndefinedMetricError,
    aupro,
    auroc,
    forgetting_metric,
    pixel_auroc,
)

__all__ = [
    "IncrementalSchedule",
    "build_schedule",
    "RunReport",
    "run_incremental",
    "AuditViolation",
    "METRIC_KINDS",
]

METRIC_KINDS = ("iauroc", "pauroc", "aupro")

_SETTING_RE = re.compile(r"(\d+)-(\d+) with (\d+) steps?")


class AuditViolation(RuntimeError):
    """A training phase read samples outside its step's objects."""


@dataclass
class IncrementalSchedule:
    """Ordered disjoint object-id groups plus the per-phase epoch counts."""

    steps: list
    base_epochs: int
    incr_epochs: int

    def __post_init__(self):
        if not self.steps:
            raise ValueError("schedule needs at least one step")
        flat = [i for step in self.steps for i in step]
        if len(flat) != len(set(flat)):
            raise ValueError("schedule steps must be disjoint")


def build_schedule(
    n_objects: int, setting: str, base_epochs: int = 60, incr_epochs: int = 40
) -> IncrementalSchedule:
    """Parses a setting like "6-1 with 4 steps" into object-id groups.

    The first group holds the first B objects in dataset order; each of the
    S later groups holds the next I objects. "B-0 with 0 step" is the
    unified single-step protocol.
    """
    m = _SETTING_RE.fullmatch(setting.strip())
    if not m:
        raise ValueError(f"setting {setting!r} does not parse as 'B-I with S steps'")
    base, incr, n_steps = (int(g) for g in m.groups())
    if n_steps == 0:
        if incr != 0 or base != n_objects:
            raise ValueError(
                f"setting {setting!r} with 0 steps requires B == n_objects and I == 0"
            )
    else:
        if incr < 1:
            raise ValueError(f"setting {setting!r} has steps of zero objects")
        if base + incr * n_steps != n_objects:
            raise ValueError(
                f"setting {setting!r} does not cover {n_objects} objects "
                f"({base} + {incr}*{n_steps} != {n_objects})"
            )
    steps = [tuple(range(base))]
    for s in range(n_steps):
        start = base + s * incr
        steps.append(tuple(range(start, start + incr)))
    return IncrementalSchedule(steps=steps, base_epochs=base_epochs, incr_epochs=incr_epochs)


@dataclass
class RunReport:
    """Everything one seeded run produced."""

    seed: int
    history: MetricsHistory
    fm: dict  # metric kind -> forgetting value, or None when undefined
    final_means: dict  # metric kind -> mean over objects at the final step
    final_eval: dict  # object -> dict(maps, masks, scores, labels)
    wall_clock: float
    config_hash: str


def _train_phase(
    model: DetectionModel,
    opt: SGD,
    samples: list,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
) -> None:
    n = len(samples)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = batch_arrays([samples[i] for i in order[start : start + batch_size]])
            opt.zero_grad()
            _, objective, _ = model.forward_train(batch, rng)
            objective.backward()
            opt.step()


def _assert_training_reads(dataset: Dataset, before: dict, allowed: list) -> None:
    allowed_keys = {(name, "train") for name in allowed}
    for key, count in dataset.audit.snapshot().items():
        if count > before.get(key, 0) and key not in allowed_keys:
            raise AuditViolation(
                f"training phase read {key[1]} samples of {key[0]!r}, "
                f"allowed objects: {sorted(allowed)}"
            )


def _build_profiles(model: DetectionModel, dataset: Dataset, names: list) -> dict:
    """Per-object normal reference maps from each object's own training split.

    Built once, at the end of the step that trains the object, so the only
    reads are of that step's own objects. The profile (pixelwise max over the
    training score maps) stays frozen afterwards: as later steps drift the
    model, good images of old objects start exceeding their stale profile,
    which is exactly the degradation the forgetting metric should see.
    """
    profiles = {}
    for name in names:
        maps = [model.score_sample(s).map for s in dataset.train_samples([name])]
        profiles[name] = np.max(np.stack(maps), axis=0)
    return profiles


def _evaluate_objects(
    model: DetectionModel,
    dataset: Dataset,
    names: list,
    step: int,
    history: MetricsHistory,
    profiles: dict | None = None,
) -> dict:
    per_object = {}
    for name in names:
        samples = dataset.test_samples([name])
        maps, masks, scores, labels = [], [], [], []
        ref = None if profiles is None else profiles.get(name)
        for s in samples:
            out = model.score_sample(s, ref)
            maps.append(out.map)
            masks.append(s.anomaly_mask[0])
            scores.append(out.image_score)
            labels.append(int(s.is_anomalous))
        maps_a, masks_a = np.stack(maps), np.stack(masks)
        history.add(
            step,
            name,
            iauroc=100.0 * auroc(scores, labels),
            pauroc=100.0 * pixel_auroc(maps_a, masks_a),
            aupro=100.0 * aupro(maps_a, masks_a),
        )
        per_object[name] = {
            "maps": maps_a,
            "masks": masks_a,
            "scores": np.asarray(scores),
            "labels": np.asarray(labels),
        }
    return per_object


def run_incremental(
    dataset: Dataset, cfg: Config, seed: int, checkpoint_dir: str | None = None
) -> RunReport:
    """Runs the full incremental protocol for one seed.

    The corruption injections (if any) derive the training data before the
    first step, so the audit counters gate only genuine training reads.
    With ``checkpoint_dir`` set, the model state is written to
    ``step_<t>.npz`` in that directory after each step.
    """
    t0 = time.perf_counter()
    if cfg.redundant_intensity > 0.0 or cfg.spurious_strength > 0.0:
        dataset = corrupt_dataset(
            dataset,
            redundant_intensity=cfg.redundant_intensity,
            spurious_strength=cfg.spurious_strength,
            seed=cfg.injection_seed,
        )
    schedule = build_schedule(
        len(dataset.names), cfg.setting, cfg.epochs_base, cfg.epochs_incremental
    )
    settings = model_settings(cfg, n_objects=len(dataset.names))
    model = DetectionModel(settings, seed=seed)
    opt = SGD(
        model.trainable_params(),
        lr=cfg.lr,
        momentum=cfg.momentum,
        clip_norm=cfg.clip_norm,
    )

    history = MetricsHistory()
    seen: list = []
    final_eval: dict = {}
    profiles: dict = {}
    step_streams = np.random.SeedSequence([seed, 1]).spawn(len(schedule.steps))
    for t, ids in enumerate(schedule.steps):
        names = [dataset.names[i] for i in ids]
        epochs = schedule.base_epochs if t == 0 else schedule.incr_epochs
        if cfg.reset_optimizer and t > 0:
            opt.reset_state()
        before = dataset.audit.snapshot()
        samples = dataset.train_samples(names)
        _train_phase(model, opt, samples, epochs, cfg.batch_size,
                     np.random.default_rng(step_streams[t]))
        profiles.update(_build_profiles(model, dataset, names))
        _assert_training_reads(dataset, before, names)
        seen.extend(names)
        final_eval = _evaluate_objects(model, dataset, seen, t, history, profiles)
        if checkpoint_dir is not None:
            arrays = dict(model.state_arrays())
            arrays.update({f"profile_{n}": p for n, p in profiles.items()})
            save_checkpoint(
                arrays,
                os.path.join(checkpoint_dir, f"step_{t}.npz"),
                meta={"step": t, "seed": seed, "config_hash": config_hash(cfg)},
            )

    fm = {}
    for kind in METRIC_KINDS:
        try:
            fm[kind] = forgetting_metric(history, kind)
        except UndefinedMetricError:
            fm[kind] = None
    final_step = history.steps()[-1]
    final_means = {
        kind: float(np.mean([history.value(final_step, o, kind) for o in seen]))
        for kind in METRIC_KINDS
    }
    return RunReport(
        seed=seed,
        history=history,
        fm=fm,
        final_means=final_means,
        final_eval=final_eval,
        wall_clock=time.perf_counter() - t0,
        config_hash=config_hash(cfg),
    )
