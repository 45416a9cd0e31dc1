"""Optimization loop: six-loss assembly per step, Adam updates under a linear
decay schedule, per-epoch validation, checkpointing, and deterministic resume.

Randomness is stateless: the generator for optimization step t is
default_rng([seed, 1, t]) and the shuffle for epoch e is
default_rng([seed, 2, e]), so a resumed run replays exactly the same streams
as an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from transcc.evaluation import image_mae
from transcc.losses import (
    LossReport,
    LossWeights,
    achromatic_loss,
    contrastive_dce_loss,
    default_patch_side,
    edge_loss,
    l1_loss,
    mae_loss,
    patch_similarity_loss,
    sample_contrastive,
    sample_patches,
    total_loss,
)
from transcc.model import (
    ModelConfig,
    NetworkOutputs,
    TransCC,
    build_transcc,
    encode_to_projection,
    to_network_input,
)

CHECKPOINT_MAGIC = b"TCCK"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(ValueError):
    """A loss term went NaN/inf; the offending update was never applied."""

_STEP_STREAM = 1
_SHUFFLE_STREAM = 2

METRICS_FIELDS = (
    "kind",
    "epoch",
    "step",
    "lr",
    "achromatic",
    "edge",
    "l1",
    "mae",
    "surf_sim",
    "contrastive",
    "total",
    "val_mae",
)


@dataclass(frozen=True)
class TrainConfig:
    """Training regimen. Defaults reproduce the published setting; the desk
    scale comes from shrinking epochs/image_size and the model width."""

    epochs: int = 200
    initial_lr: float = 1e-3
    decay_start_epoch: int = 100
    batch_size: int = 1
    image_size: int = 256
    loss_weights: LossWeights = field(default_factory=LossWeights)
    tau: float = 0.07
    negatives_per_anchor: int = 16
    anchors_per_image: int = 64
    patches_per_image: int = 2
    seed: int = 0
    checkpoint_interval: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if not 0 <= self.decay_start_epoch < self.epochs:
            raise ValueError(
                f"decay_start_epoch must lie in [0, epochs), got {self.decay_start_epoch} of {self.epochs}"
            )
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.image_size < 16 or self.image_size % 16 != 0:
            raise ValueError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name in ("negatives_per_anchor", "anchors_per_image", "patches_per_image", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        if not 0 < self.adam_beta1 < 1 or not 0 < self.adam_beta2 < 1 or self.adam_epsilon <= 0:
            raise ValueError("Adam moment hyperparameters out of range")

    @property
    def patch_side(self) -> int:
        # square windows covering ~1/16 of the image area
        return default_patch_side(self.image_size, self.image_size)


@dataclass
class TrainState:
    """Everything needed to continue training exactly where it stopped."""

    net: TransCC
    optimizer: torch.optim.Adam
    model_config: ModelConfig
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    best_val_mae: float = math.inf


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Constant at initial_lr, then linear decay to exactly 0 at `epochs`."""
    if not 0 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")
    if epoch < config.decay_start_epoch:
        return config.initial_lr
    span = config.epochs - config.decay_start_epoch
    return config.initial_lr * (config.epochs - epoch) / span


def init_state(model_config: ModelConfig, config: TrainConfig) -> TrainState:
    if model_config.input_size != config.image_size:
        raise ValueError(
            f"model input_size {model_config.input_size} does not match training image_size {config.image_size}"
        )
    net = build_transcc(model_config, config.seed)
    optimizer = torch.optim.Adam(
        net.parameters(),
        lr=config.initial_lr,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_epsilon,
    )
    return TrainState(net=net, optimizer=optimizer, model_config=model_config, config=config)


def _l2_normalize(z: torch.Tensor) -> torch.Tensor:
    return z / z.norm(dim=0, keepdim=True).clamp_min(1e-12)


def _usable_patches(rng, height, width, config, mask):
    # resample until at least one anchor lands on an included pixel, so the
    # patch loss never sees an all-skipped list just because of the mask
    for _ in range(20):
        patches = sample_patches(height, width, config.patches_per_image, config.patch_side, rng)
        if any(mask[p.center_row, p.center_col] for p in patches):
            return patches
    raise ValueError("could not place any patch anchor on a mask-included pixel")


def _sample_losses(net: TransCC, sample, config: TrainConfig, rng) -> dict:
    """Compute the active loss terms (weight > 0) as tensors; inactive terms
    are reported as 0.0 and skipped entirely."""
    w = config.loss_weights
    mask = sample.mask.included
    x = to_network_input(sample.input.pixels)
    out = net(x)
    gt_t = torch.from_numpy(sample.gt.pixels)
    terms: dict = {name: 0.0 for name in LossReport.TERM_NAMES}
    if w.achromatic > 0:
        terms["achromatic"] = achromatic_loss(gt_t, out.weight_map[0, 0], mask)
    if w.edge > 0:
        terms["edge"] = edge_loss(out.edge_map[0, 0], torch.from_numpy(sample.edge_pseudo))
    wb_hwc = out.wb_image[0].permute(1, 2, 0)
    if w.l1 > 0:
        terms["l1"] = l1_loss(wb_hwc, gt_t, mask)
    if w.mae > 0:
        terms["mae"] = mae_loss(torch.from_numpy(sample.input.pixels), wb_hwc, gt_t, mask)
    if w.surf_sim > 0:
        h, width = mask.shape
        patches = _usable_patches(rng, h, width, config, mask)
        terms["surf_sim"] = patch_similarity_loss(wb_hwc, gt_t, patches, mask)
    if w.contrastive > 0:
        with torch.no_grad():
            z_i = encode_to_projection(net, x)[0]
            z_g = encode_to_projection(net, to_network_input(sample.gt.pixels))[0]
        z_o = encode_to_projection(net, out.wb_image)[0]
        hw = z_o.shape[1] * z_o.shape[2]
        anchors = min(config.anchors_per_image, hw)
        negatives = min(config.negatives_per_anchor, 2 * (hw - 1))
        batch = sample_contrastive(
            _l2_normalize(z_i),
            _l2_normalize(z_o),
            _l2_normalize(z_g),
            anchors,
            negatives,
            config.tau,
            rng,
        )
        terms["contrastive"] = contrastive_dce_loss(batch)
    return terms


def train_step_batch(state: TrainState, samples) -> LossReport:
    """One optimizer update over a batch of samples (gradients averaged).

    Mutates state in place: parameters, optimizer moments, and the step
    counter advance; the returned report holds the pre-update losses.
    """
    if not samples:
        raise ValueError("empty batch")
    config = state.config
    rng = np.random.default_rng([config.seed, _STEP_STREAM, state.step])
    lr = lr_schedule(min(state.epoch, config.epochs), config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    state.net.train()
    sums = dict.fromkeys(LossReport.TERM_NAMES, 0.0)
    scale = 1.0 / len(samples)
    for sample in samples:
        terms = _sample_losses(state.net, sample, config, rng)
        floats = {
            k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
            for k, v in terms.items()
        }
        try:
            total_loss(**floats, weights=config.loss_weights)
        except ValueError as exc:  # abort before the update, naming the term
            raise NonFiniteLossError(str(exc)) from None
        tensor_terms = [
            getattr(config.loss_weights, name) * t
            for name, t in terms.items()
            if isinstance(t, torch.Tensor)
        ]
        if tensor_terms:
            (scale * sum(tensor_terms)).backward()
        for name in sums:
            sums[name] += floats[name] * scale
    report = total_loss(**sums, weights=config.loss_weights)
    state.optimizer.step()
    state.step += 1
    return report


def train_step(state: TrainState, sample) -> LossReport:
    """Single-sample step (the batch_size = 1 regimen)."""
    return train_step_batch(state, [sample])


def infer(source, image) -> NetworkOutputs:
    """Deterministic evaluation-mode forward from a state or checkpoint path.

    Accepts an HxWx3 array/LinearImage or a Bx3xHxW tensor; the spatial size
    must match the checkpointed input_size."""
    state = source if isinstance(source, TrainState) else load_checkpoint(source)
    if isinstance(image, torch.Tensor):
        x = image
    else:
        x = to_network_input(image.pixels if hasattr(image, "pixels") else np.asarray(image))
    state.net.eval()
    with torch.no_grad():
        return state.net(x)


def predictor_from_state(state: TrainState):
    """Wrap a state as a record -> predicted-image callable for evaluation."""

    def predict(record) -> np.ndarray:
        out = infer(state, record.input.pixels)
        return out.wb_image[0].permute(1, 2, 0).numpy()

    return predict


def validate_mae(state: TrainState, records) -> float:
    """Mean masked angular error of the current parameters over records."""
    records = list(records)
    if not records:
        raise ValueError("validation set is empty")
    predict = predictor_from_state(state)
    return float(np.mean([image_mae(r.input, predict(r), r.gt, r.mask) for r in records]))


# ---------------------------------------------------------------------------
# checkpoints


_DTYPE_TAGS = {torch.float32: "f4", torch.float64: "f8"}
_TAG_DTYPES = {"f4": np.float32, "f8": np.float64}


def save_checkpoint(state: TrainState, path) -> None:
    """Binary container: magic, version, canonical JSON header (configs,
    counters, tensor directory), then raw little-endian tensor payloads in
    directory order. Saving a just-loaded checkpoint reproduces it byte for
    byte."""
    entries = []
    payload = bytearray()

    def add(name: str, tensor: torch.Tensor):
        t = tensor.detach().cpu().contiguous()
        entries.append({"name": name, "dtype": _DTYPE_TAGS[t.dtype], "shape": list(t.shape)})
        payload.extend(t.numpy().astype(t.numpy().dtype.newbyteorder("<")).tobytes())

    named = list(state.net.named_parameters())
    for name, p in named:
        add(f"param:{name}", p)
    for name, p in named:
        st = state.optimizer.state.get(p)
        if st:
            step = st["step"]
            if not isinstance(step, torch.Tensor):
                step = torch.tensor(float(step))
            add(f"adam_step:{name}", step)
            add(f"adam_m:{name}", st["exp_avg"])
            add(f"adam_v:{name}", st["exp_avg_sq"])

    header = {
        "model_config": dataclasses.asdict(state.model_config),
        "train_config": dataclasses.asdict(state.config),
        "epoch": state.epoch,
        "step": state.step,
        "best_val_mae": None if math.isinf(state.best_val_mae) else state.best_val_mae,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)) + blob + payload
    Path(path).write_bytes(out)


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<IQ", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version} is not the supported {CHECKPOINT_VERSION}")
    header = json.loads(blob[16 : 16 + header_len].decode())
    mc = dict(header["model_config"])
    mc["stage_channels"] = tuple(mc["stage_channels"])
    model_config = ModelConfig(**mc)
    tc = dict(header["train_config"])
    tc["loss_weights"] = LossWeights(**tc["loss_weights"])
    config = TrainConfig(**tc)

    offset = 16 + header_len
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        dtype = _TAG_DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * np.dtype(dtype).itemsize
        if offset + nbytes > len(blob):
            raise ValueError(f"{path}: truncated checkpoint payload at {entry['name']}")
        arr = np.frombuffer(blob, dtype=np.dtype(dtype).newbyteorder("<"), count=count, offset=offset)
        tensors[entry["name"]] = torch.from_numpy(arr.copy().reshape(entry["shape"]))
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes after tensor payload")

    net = TransCC(model_config)
    with torch.no_grad():
        for name, p in net.named_parameters():
            key = f"param:{name}"
            if key not in tensors:
                raise ValueError(f"{path}: checkpoint is missing parameter {name}")
            p.copy_(tensors[key].reshape(p.shape))
    optimizer = torch.optim.Adam(
        net.parameters(),
        lr=config.initial_lr,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_epsilon,
    )
    for name, p in net.named_parameters():
        key = f"adam_step:{name}"
        if key in tensors:
            optimizer.state[p] = {
                "step": tensors[key].reshape(()),
                "exp_avg": tensors[f"adam_m:{name}"].reshape(p.shape),
                "exp_avg_sq": tensors[f"adam_v:{name}"].reshape(p.shape),
            }
    best = header["best_val_mae"]
    return TrainState(
        net=net,
        optimizer=optimizer,
        model_config=model_config,
        config=config,
        epoch=header["epoch"],
        step=header["step"],
        best_val_mae=math.inf if best is None else float(best),
    )


# ---------------------------------------------------------------------------
# the fit loop


def _metrics_row(kind, epoch, step, lr, report: LossReport | None, val_mae) -> dict:
    row = dict.fromkeys(METRICS_FIELDS, "")
    row.update(kind=kind, epoch=epoch, step=step, lr=repr(lr))
    if report is not None:
        for name in LossReport.TERM_NAMES:
            row[name] = repr(getattr(report, name))
        row["total"] = repr(report.total)
    if val_mae is not None:
        row["val_mae"] = repr(val_mae)
    return row


def _append_metrics(path: Path, rows: list[dict], new_file: bool):
    mode = "w" if new_file else "a"
    with path.open(mode) as fh:
        if new_file:
            fh.write(",".join(METRICS_FIELDS) + "\n")
        for row in rows:
            fh.write(",".join(str(row[k]) for k in METRICS_FIELDS) + "\n")


def fit(
    train_records,
    val_records,
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir,
    resume: bool = False,
    stop_after_epoch: int | None = None,
) -> tuple[TrainState, list[dict]]:
    """Train for config.epochs epochs (or resume from out_dir/latest.ckpt).

    Writes epoch_NNNN.ckpt at the checkpoint interval, latest.ckpt every
    epoch, best.ckpt on validation improvement, and appends to metrics.csv.
    stop_after_epoch ends the run early after that many completed epochs
    (simulating an interruption; resume picks up exactly there).
    """
    train_records = list(train_records)
    val_records = list(val_records)
    if not train_records or not val_records:
        raise ValueError("train and validation splits must be nonempty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"

    if resume:
        latest = out_dir / "latest.ckpt"
        if not latest.exists():
            raise FileNotFoundError(f"cannot resume: {latest} does not exist")
        state = load_checkpoint(latest)
        if state.model_config != model_config or state.config != config:
            raise ValueError("checkpoint configuration does not match the requested one")
        if not metrics_path.exists():
            _append_metrics(metrics_path, [], new_file=True)
    else:
        state = init_state(model_config, config)
        _append_metrics(metrics_path, [], new_file=True)

    all_rows: list[dict] = []
    for epoch in range(state.epoch, config.epochs):
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
        state.epoch = epoch
        order = np.random.default_rng([config.seed, _SHUFFLE_STREAM, epoch]).permutation(
            len(train_records)
        )
        rows = []
        term_sums = dict.fromkeys(LossReport.TERM_NAMES, 0.0)
        total_sum = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_records[i] for i in order[start : start + config.batch_size]]
            lr = lr_schedule(epoch, config)
            report = train_step_batch(state, batch)
            rows.append(_metrics_row("step", epoch, state.step - 1, lr, report, None))
            for name in term_sums:
                term_sums[name] += getattr(report, name)
            total_sum += report.total
            n_batches += 1

        val_mae = validate_mae(state, val_records)
        epoch_report = LossReport(
            **{k: v / n_batches for k, v in term_sums.items()}, total=total_sum / n_batches
        )
        rows.append(_metrics_row("epoch", epoch, state.step, lr_schedule(epoch, config), epoch_report, val_mae))
        state.epoch = epoch + 1

        if val_mae < state.best_val_mae:
            state.best_val_mae = val_mae
            save_checkpoint(state, out_dir / "best.ckpt")
        if (epoch + 1) % config.checkpoint_interval == 0 or epoch + 1 == config.epochs:
            save_checkpoint(state, out_dir / f"epoch_{epoch + 1:04d}.ckpt")
        save_checkpoint(state, out_dir / "latest.ckpt")
        _append_metrics(metrics_path, rows, new_file=False)
        all_rows.extend(rows)
    return state, all_rows
