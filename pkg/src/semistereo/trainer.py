"""The semi-supervised loop: alternate supervised updates on labeled
synthetic batches with self-supervised updates on unlabeled real batches
(photometric or feature-reconstruction loss under the binarized occlusion
mask), with Adam, gradient clipping, checkpointing and structured logging.

Training is bitwise reproducible given (config, pools): all randomness flows
from seeded generators, and the kernels are deterministic.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import serialization
from .data import schedule_epoch
from .errors import CheckpointError, ConfigError, DataError, DegenerateBatchError
from .model import ModelConfig, forward, init_params, upsample_to_full
from .occlusion import add_synthetic_occluder, derive_occlusion
from .reconstruction import (
    LossReport,
    dfr_loss,
    mask_from_occlusion,
    occlusion_loss,
    photometric_loss,
    supervised_disparity_loss,
)

LOSS_MODES = ("PH", "DFR")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float = 10.0


@dataclass(frozen=True)
class TrainConfig:
    loss_mode: str = "PH"
    dfr_metric: str = "cosine"
    dfr_stop_gradient_features: bool = False
    occlusion_threshold: float = 0.5
    occluder_augmentation: bool = True
    supervised_weight: float = 1.0
    selfsup_weight: float = 1.0
    occlusion_weight: float = 0.1
    optimizer: OptimizerConfig = OptimizerConfig()
    steps_per_epoch: int = 0  # 0: one pass over the (smaller) pool
    n_epochs: int = 1
    batch_size: int = 1
    model: ModelConfig = ModelConfig()
    seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only

    def validate(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.dfr_metric not in ("cosine", "l1", "l2"):
            raise ConfigError("dfr_metric must be cosine, l1 or l2")
        if not 0.0 < self.occlusion_threshold < 1.0:
            raise ConfigError("occlusion_threshold must lie in (0,1)")
        for name in ("supervised_weight", "selfsup_weight", "occlusion_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.steps_per_epoch < 0:
            raise ConfigError("steps_per_epoch must be >= 0 (0 = derive from pools)")
        if self.n_epochs < 0 or self.batch_size < 1 or self.checkpoint_every < 0:
            raise ConfigError("n_epochs/batch_size/checkpoint_every out of range")
        self.model.validate()


@dataclass
class TrainState:
    params: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    step: int
    epoch: int
    rng: np.random.Generator
    config: TrainConfig


@dataclass
class CheckpointRecord:
    params: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    step: int
    epoch: int
    config: TrainConfig
    rng_state: dict


# ------------------------------------------------------------ config <-> text


def _flatten_fields(cfg, prefix=""):
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            yield from _flatten_fields(value, prefix + f.name + ".")
        else:
            yield prefix + f.name, value


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for key, value in sorted(_flatten_fields(cfg)):
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> TrainConfig:
    """Parse the flat key-value experiment format. Unknown keys are hard
    errors: a silently ignored typo is how experiments stop being what their
    config says."""
    known = dict(_flatten_fields(TrainConfig()))
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = val
    merged = {}
    for key, default in known.items():
        if key not in values:
            merged[key] = default
            continue
        raw = values[key]
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ConfigError(f"{key}: expected true/false, got {raw!r}")
            merged[key] = raw.lower() == "true"
        elif isinstance(default, int):
            try:
                merged[key] = int(raw)
            except ValueError as e:
                raise ConfigError(f"{key}: expected integer, got {raw!r}") from e
        elif isinstance(default, float):
            try:
                merged[key] = float(raw)
            except ValueError as e:
                raise ConfigError(f"{key}: expected number, got {raw!r}") from e
        else:
            merged[key] = raw

    def take(prefix, cls):
        kwargs = {k.split(".", 1)[1]: v for k, v in merged.items() if k.startswith(prefix + ".")}
        return cls(**kwargs)

    top = {k: v for k, v in merged.items() if "." not in k}
    cfg = TrainConfig(model=take("model", ModelConfig), optimizer=take("optimizer", OptimizerConfig), **top)
    cfg.validate()
    return cfg


# ------------------------------------------------------------------ plumbing


def batch_images(samples) -> tuple:
    left = np.stack([np.ascontiguousarray(s.left.transpose(2, 0, 1)) for s in samples])
    right = np.stack([np.ascontiguousarray(s.right.transpose(2, 0, 1)) for s in samples])
    return left, right


def _zero_grads(params):
    for t in params.values():
        t.grad = None


def _global_grad_norm(params) -> float:
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def adam_update(state: TrainState, grad_norm: float):
    """One Adam step over every parameter that received a gradient, after
    global-norm clipping."""
    opt = state.config.optimizer
    clip = opt.grad_clip_norm
    scale = 1.0 if clip <= 0 or grad_norm <= clip else clip / grad_norm
    state.adam_t += 1
    t = state.adam_t
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    for name, p in state.params.items():
        if p.grad is None:
            continue
        g = p.grad * np.asarray(scale, dtype=p.data.dtype)
        m = state.adam_m[name]
        v = state.adam_v[name]
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * (g * g)
        state.adam_m[name] = m
        state.adam_v[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        p.data = p.data - opt.learning_rate * update


def feature_variance(features) -> float:
    return float(np.mean([np.var(f.data) for f in features]))


# ---------------------------------------------------------------- train steps


def train_step_supervised(state: TrainState, batch) -> LossReport:
    """Supervised update on a synthetic batch: disparity L1 + occlusion BCE
    over all pixels. Degenerate batches are skipped and flagged."""
    cfg = state.config
    for s in batch:
        if s.domain != "synthetic":
            raise ConfigError(f"supervised step got a {s.domain} sample {s.id}")
        if s.gt_disparity is None:
            raise DataError(f"synthetic sample {s.id} lacks gt_disparity")
    left, right = batch_images(batch)
    gt = np.stack([s.gt_disparity for s in batch])
    valid = np.stack(
        [s.gt_valid if s.gt_valid is not None else np.ones(s.shape, bool) for s in batch]
    )
    occ = np.stack([derive_occlusion(s) for s in batch])
    report = LossReport(weights={"supervised_disparity": cfg.supervised_weight,
                                 "occlusion_bce": cfg.occlusion_weight})
    try:
        out = forward(state.params, left, right, cfg.model)
        sup, sup_scales, sup_n = supervised_disparity_loss(out.disparity_pyramid, gt, valid)
        occ_l, occ_scales, occ_n = occlusion_loss(
            out.occlusion_logits_pyramid, occ, np.ones_like(valid)
        )
    except DegenerateBatchError as e:
        report.skipped = True
        report.note = str(e)
        return report.finalize()
    total = cfg.supervised_weight * sup + cfg.occlusion_weight * occ_l
    _zero_grads(state.params)
    total.backward()
    grad_norm = _global_grad_norm(state.params)
    adam_update(state, grad_norm)
    report.components = {
        "supervised_disparity": float(sup.data),
        "occlusion_bce": float(occ_l.data),
    }
    report.per_scale = {"supervised_disparity": sup_scales, "occlusion_bce": occ_scales}
    report.n_valid_pixels = {"supervised_disparity": sup_n, "occlusion_bce": occ_n}
    report.note = f"grad_norm={grad_norm:.6g}"
    report.feature_var = feature_variance(out.features_left)
    return report.finalize()


def train_step_selfsup(state: TrainState, batch) -> LossReport:
    """Self-supervised update on a real batch. Ground-truth fields are
    stripped before anything touches the samples; the loss sees images and
    the augmentation RNG only."""
    cfg = state.config
    for s in batch:
        if s.domain != "real":
            raise ConfigError(f"self-supervised step got a {s.domain} sample {s.id}")
    batch = [s.without_gt() for s in batch]

    occluder = np.zeros((len(batch),) + batch[0].shape, bool)
    if cfg.occluder_augmentation:
        augmented = []
        for i, s in enumerate(batch):
            aug, occluder[i] = add_synthetic_occluder(s, state.rng)
            augmented.append(aug)
        batch = augmented
    left, right = batch_images(batch)
    h, w = batch[0].shape

    recon_name = "photometric" if cfg.loss_mode == "PH" else "dfr"
    report = LossReport(weights={recon_name: cfg.selfsup_weight,
                                 "occlusion_bce": cfg.occlusion_weight})
    try:
        out = forward(state.params, left, right, cfg.model)
        mask = mask_from_occlusion(out.finest_occlusion_logits, cfg.occlusion_threshold, h, w)
        mask = mask & ~occluder
        if cfg.loss_mode == "PH":
            full_disp = upsample_to_full(out.finest_disparity, h, w)
            recon, recon_n = photometric_loss(ad.Tensor(left), ad.Tensor(right), full_disp, mask)
            per_scale = {recon_name: [float(recon.data)]}
        else:
            recon, recon_n, levels = dfr_loss(
                out.features_left,
                out.features_right,
                out.finest_disparity,
                mask,
                cfg.dfr_metric,
                stop_gradient_features=cfg.dfr_stop_gradient_features,
            )
            per_scale = {recon_name: levels}
        total = cfg.selfsup_weight * recon
        components = {recon_name: float(recon.data)}
        n_valid = {recon_name: recon_n}
        occ_scales = []
        if cfg.occluder_augmentation and occluder.any():
            occ_l, occ_scales, occ_n = occlusion_loss(
                out.occlusion_logits_pyramid, occluder, occluder
            )
            total = total + cfg.occlusion_weight * occ_l
            components["occlusion_bce"] = float(occ_l.data)
            n_valid["occlusion_bce"] = occ_n
    except DegenerateBatchError as e:
        report.skipped = True
        report.note = str(e)
        return report.finalize()
    _zero_grads(state.params)
    total.backward()
    grad_norm = _global_grad_norm(state.params)
    adam_update(state, grad_norm)
    report.components = components
    report.per_scale = per_scale
    if occ_scales:
        report.per_scale["occlusion_bce"] = occ_scales
    report.n_valid_pixels = n_valid
    report.note = f"grad_norm={grad_norm:.6g}"
    report.feature_var = feature_variance(out.features_left)
    return report.finalize()


# -------------------------------------------------------------- orchestration


def _epoch_entries(cfg: TrainConfig, epoch: int, n_synth: int, n_real: int, semisup: bool):
    """Deterministic per-epoch plan: list of (tag, sample index tuple).

    Semi-supervised epochs subsample both pools to the same number of batches
    (per-epoch seed) and strictly alternate S/R; supervised-only epochs are
    one seeded pass over the synthetic pool.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0xE90C4, cfg.seed, epoch]))
    bs = cfg.batch_size
    if semisup:
        if cfg.steps_per_epoch % 2:
            raise ConfigError("steps_per_epoch must be even: S and R counts balance per epoch")
        pairs = cfg.steps_per_epoch // 2 if cfg.steps_per_epoch else min(n_synth, n_real) // bs
        if pairs < 1:
            raise ConfigError("not enough samples for one S/R pair per epoch")
        need = pairs * bs
        if need > n_synth or need > n_real:
            raise ConfigError(
                f"steps_per_epoch={cfg.steps_per_epoch} needs {need} samples per pool, "
                f"have {n_synth} synthetic / {n_real} real"
            )
        sub_s = rng.permutation(n_synth)[:need]
        sub_r = rng.permutation(n_real)[:need]
        sched = schedule_epoch(pairs, pairs, seed=int(rng.integers(1 << 31)))
        entries = []
        for tag, k in sched.entries:
            pool = sub_s if tag == "S" else sub_r
            entries.append((tag, tuple(int(i) for i in pool[k * bs : (k + 1) * bs])))
        return entries
    n_batches = cfg.steps_per_epoch if cfg.steps_per_epoch else n_synth // bs
    if n_batches < 1 or n_batches * bs > n_synth:
        raise ConfigError(f"cannot draw {n_batches} batches of {bs} from {n_synth} samples")
    perm = rng.permutation(n_synth)[: n_batches * bs]
    return [("S", tuple(int(i) for i in perm[k * bs : (k + 1) * bs])) for k in range(n_batches)]


def _fresh_state(cfg: TrainConfig) -> TrainState:
    params = init_params(cfg.model, cfg.seed)
    return TrainState(
        params=params,
        adam_m={k: np.zeros_like(v.data) for k, v in params.items()},
        adam_v={k: np.zeros_like(v.data) for k, v in params.items()},
        adam_t=0,
        step=0,
        epoch=0,
        rng=np.random.default_rng(np.random.SeedSequence([0xA96, cfg.seed])),
        config=cfg,
    )


def state_to_record(state: TrainState) -> CheckpointRecord:
    return CheckpointRecord(
        params={k: v.data.copy() for k, v in state.params.items()},
        adam_m={k: v.copy() for k, v in state.adam_m.items()},
        adam_v={k: v.copy() for k, v in state.adam_v.items()},
        adam_t=state.adam_t,
        step=state.step,
        epoch=state.epoch,
        config=state.config,
        rng_state=state.rng.bit_generator.state,
    )


def record_to_state(record: CheckpointRecord) -> TrainState:
    rng = np.random.default_rng()
    rng.bit_generator.state = record.rng_state
    return TrainState(
        params={k: ad.Tensor(v.copy(), requires_grad=True) for k, v in record.params.items()},
        adam_m={k: v.copy() for k, v in record.adam_m.items()},
        adam_v={k: v.copy() for k, v in record.adam_v.items()},
        adam_t=record.adam_t,
        step=record.step,
        epoch=record.epoch,
        rng=rng,
        config=record.config,
    )


def save_checkpoint(record: CheckpointRecord, path):
    arrays = {}
    for prefix, group in (("param/", record.params), ("adam_m/", record.adam_m), ("adam_v/", record.adam_v)):
        for k, v in group.items():
            arrays[prefix + k] = v
    meta = {
        "kind": "checkpoint",
        "step": record.step,
        "epoch": record.epoch,
        "adam_t": record.adam_t,
        "config": config_to_text(record.config),
        "rng_state": _jsonable_rng(record.rng_state),
    }
    serialization.save_arrays(path, arrays, meta)


def load_checkpoint(path) -> CheckpointRecord:
    arrays, meta = serialization.load_arrays(path)
    if meta.get("kind") != "checkpoint":
        raise CheckpointError(f"{path} is not a training checkpoint")
    groups = {"param/": {}, "adam_m/": {}, "adam_v/": {}}
    for name, arr in arrays.items():
        for prefix, group in groups.items():
            if name.startswith(prefix):
                group[name[len(prefix) :]] = arr
                break
        else:
            raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
    return CheckpointRecord(
        params=groups["param/"],
        adam_m=groups["adam_m/"],
        adam_v=groups["adam_v/"],
        adam_t=meta["adam_t"],
        step=meta["step"],
        epoch=meta["epoch"],
        config=config_from_text(meta["config"]),
        rng_state=_unjsonable_rng(meta["rng_state"]),
    )


def _jsonable_rng(state: dict) -> dict:
    # PCG64 state holds ints beyond 2^64; JSON carries them fine as text
    return json.loads(json.dumps(state))


def _unjsonable_rng(state: dict) -> dict:
    return state


def run_training(
    config: TrainConfig,
    synthetic_pool,
    real_pool=None,
    log_path=None,
    checkpoint_dir=None,
    resume: CheckpointRecord | None = None,
):
    """Run the full schedule; returns (final CheckpointRecord, log records).

    With a real pool the loop alternates S/R batches, balanced per epoch;
    without one it runs supervised-only epochs over the synthetic pool.
    """
    config.validate()
    if not synthetic_pool:
        raise DataError("synthetic pool is empty")
    semisup = bool(real_pool)
    if resume is not None:
        cfg_a = dataclasses.replace(resume.config, n_epochs=config.n_epochs)
        if cfg_a != config:
            raise ConfigError("resume config differs from checkpoint (only n_epochs may change)")
        state = record_to_state(dataclasses.replace(resume, config=config))
    else:
        state = _fresh_state(config)

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "a") if log_path else None
    records = []

    def emit(tag, report: LossReport):
        rec = {
            "step": state.step,
            "epoch": state.epoch,
            "tag": tag,
            "skipped": report.skipped,
            "total": report.total,
            "components": report.components,
            "per_scale": report.per_scale,
            "weights": report.weights,
            "n_valid": report.n_valid_pixels,
            "feature_var": report.feature_var,
            "note": report.note,
        }
        records.append(rec)
        if log_file:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")
            log_file.flush()

    try:
        steps_done_in_epoch = None
        if resume is not None and state.epoch < config.n_epochs:
            probe = _epoch_entries(config, state.epoch, len(synthetic_pool), len(real_pool or []), semisup)
            per_epoch = len(probe)
            steps_done_in_epoch = state.step - state.epoch * per_epoch
        for epoch in range(state.epoch, config.n_epochs):
            entries = _epoch_entries(config, epoch, len(synthetic_pool), len(real_pool or []), semisup)
            start = 0
            if steps_done_in_epoch is not None:
                start = steps_done_in_epoch
                steps_done_in_epoch = None
            for tag, idx in entries[start:]:
                if tag == "S":
                    batch = [synthetic_pool[i] for i in idx]
                    report = train_step_supervised(state, batch)
                else:
                    batch = [real_pool[i] for i in idx]
                    report = train_step_selfsup(state, batch)
                state.step += 1
                emit(tag, report)
                if ckpt_dir and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                    save_checkpoint(state_to_record(state), ckpt_dir / f"ckpt_{state.step:07d}.bin")
            state.epoch = epoch + 1
        record = state_to_record(state)
        if ckpt_dir:
            save_checkpoint(record, ckpt_dir / "final.bin")
        return record, records
    finally:
        if log_file:
            log_file.close()
