"""Training loops: optimizer, schedules, augmentation, and staged protocols.

All randomness flows through two explicit generators (a numpy generator for
data order and crops, a torch generator for parameter init), so any seeded
run is bit-reproducible in serial mode and checkpoints can resume a run
step-for-step. Checkpoints are taken at epoch boundaries.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import Checkpoint, config_hash
from .classifier import (
    ClassifierConfig,
    DensityClassifier,
    classification_loss,
    classifier_loss,
    residual_loss,
)
from .density import ALL_LABELS, DensityLabel
from .derainer import (
    DerainerConfig,
    MultiStreamDerainNet,
    RandomConvFeatureExtractor,
    derainer_loss,
)
from .errors import (
    ConfigMismatch,
    CropTooLarge,
    DivergenceDetected,
    EmptyManifest,
    MissingLabelClass,
)
from .raingen import DatasetManifest, SamplePair

DERAINER_CURVE_COLUMNS = ("step", "loss_residual", "loss_image", "loss_feature", "loss_total", "lr")
CLASSIFIER_CURVE_COLUMNS = ("step", "stage", "loss", "lr")


def _run_config_hash(model_cfg, optim_cfg, kind: str) -> str:
    """Hash of everything that defines the optimization, excluding the epoch
    budget: resuming a checkpoint to train longer is the intended use."""
    optim_dict = dataclasses.asdict(optim_cfg)
    optim_dict.pop("epochs")
    return config_hash(dataclasses.asdict(model_cfg), optim_dict, {"kind": kind})


@dataclasses.dataclass(frozen=True)
class OptimConfig:
    """Adam-style optimizer settings plus the crop/epoch schedule."""

    lr0: float = 0.001
    lr_drop_epoch: int = 20
    lr_drop_factor: float = 10.0
    weight_decay: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    epochs: int = 80
    crop: tuple[int, int] = (64, 80)  # (train crop, expected source size)

    def __post_init__(self):
        if min(self.lr0, self.lr_drop_factor, self.batch_size, self.epochs) <= 0:
            raise ValueError("optimizer hyperparameters must be positive")
        if self.batch_size != 1:
            raise ValueError("the training protocol uses single-image batches")

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        d = dict(d)
        d["crop"] = tuple(d["crop"])
        return cls(**d)


def lr_schedule(epoch: int, cfg: OptimConfig) -> float:
    """Piecewise-constant learning rate: one drop at `lr_drop_epoch`."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < cfg.lr_drop_epoch:
        return cfg.lr0
    return cfg.lr0 / cfg.lr_drop_factor


class DecoupledAdam:
    """Adaptive-moment optimizer with decoupled weight decay.

    Every registered parameter shrinks by lr * weight_decay * p each step,
    whether or not the loss touched it; the moment update follows the
    standard bias-corrected first/second-moment recipe.
    """

    def __init__(self, named_params: dict[str, nn.Parameter], cfg: OptimConfig):
        self.named_params = dict(named_params)
        self.cfg = cfg
        self.step_count = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.named_params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.named_params.items()}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2, eps, wd = self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay
        for name, p in self.named_params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p.add_(-lr * (m_hat / (v_hat.sqrt() + eps) + wd * p))

    def zero_grad(self) -> None:
        for p in self.named_params.values():
            p.grad = None

    def state_arrays(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        m = {n: t.detach().cpu().numpy().astype(np.float64) for n, t in self.m.items()}
        v = {n: t.detach().cpu().numpy().astype(np.float64) for n, t in self.v.items()}
        return m, v

    def load_state_arrays(self, m: dict, v: dict, step_count: int) -> None:
        for n, p in self.named_params.items():
            self.m[n] = torch.from_numpy(np.asarray(m[n])).to(p.dtype)
            self.v[n] = torch.from_numpy(np.asarray(v[n])).to(p.dtype)
        self.step_count = int(step_count)


def init_parameters(module: nn.Module, gen: torch.Generator) -> None:
    """Seeded init for every conv/linear layer.

    Weights use the ReLU-gain fan-in bound sqrt(6/fan_in), which keeps
    activation scale roughly constant through deep conv stacks (weaker
    1/sqrt(fan_in) bounds shrink activations several-fold per layer and stall
    the classifier head); biases use the conventional 1/sqrt(fan_in) bound.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1]
            if m.weight.dim() == 4:
                fan_in *= m.weight.shape[2] * m.weight.shape[3]
            with torch.no_grad():
                w_bound = math.sqrt(6.0 / fan_in)
                u = torch.rand(m.weight.shape, generator=gen)
                m.weight.copy_((2.0 * u - 1.0) * w_bound)
                if m.bias is not None:
                    b_bound = 1.0 / math.sqrt(fan_in)
                    u = torch.rand(m.bias.shape, generator=gen)
                    m.bias.copy_((2.0 * u - 1.0) * b_bound)


def random_crop(
    pair: SamplePair, crop: tuple[int, int], rng: np.random.Generator
) -> SamplePair:
    """Crop the same window (and apply the same horizontal-flip decision)
    to the clean/rainy/rain triple."""
    ch, cw = int(crop[0]), int(crop[1])
    h, w = pair.clean.shape[:2]
    if ch > h or cw > w:
        raise CropTooLarge(f"crop {(ch, cw)} exceeds source {(h, w)}")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    flip = bool(rng.random() < 0.5)
    clean = pair.clean[top : top + ch, left : left + cw]
    rainy = pair.rainy[top : top + ch, left : left + cw]
    rain = pair.rain[top : top + ch, left : left + cw]
    if flip:
        clean, rainy, rain = clean[:, ::-1], rainy[:, ::-1], rain[:, ::-1]
    return SamplePair(
        clean=np.ascontiguousarray(clean),
        rain=np.ascontiguousarray(rain),
        rainy=np.ascontiguousarray(rainy),
        label=pair.label,
        params=pair.params,
    )


def pair_to_tensors(
    pair: SamplePair, dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(rainy, clean, rain) as (1, 3, H, W) tensors; rain replicated to RGB."""
    def img(a):
        return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))[None]).to(dtype)

    rain3 = np.repeat(pair.rain[:, :, None], 3, axis=2)
    return img(pair.rainy), img(pair.clean), img(rain3)


@dataclasses.dataclass
class TrainResult:
    model: nn.Module
    checkpoint: Checkpoint
    curve: list[tuple]
    extras: dict = dataclasses.field(default_factory=dict)


def _load_pairs(manifest: DatasetManifest) -> list[SamplePair]:
    if not manifest.records:
        raise EmptyManifest("manifest contains no records")
    return [manifest.load_pair(rec) for rec in manifest.records]


def train_derainer(
    manifest: DatasetManifest,
    model_cfg: DerainerConfig | None = None,
    optim_cfg: OptimConfig | None = None,
    seed: int = 0,
    *,
    max_steps: int | None = None,
    out_dir=None,
    checkpoint_every: int | None = None,
    resume_from: Checkpoint | None = None,
    progress=None,
) -> TrainResult:
    """Optimize the de-raining objective with ground-truth labels as the
    fusion input. Returns the final checkpoint and the per-step loss curve.
    """
    model_cfg = model_cfg or DerainerConfig()
    optim_cfg = optim_cfg or OptimConfig()
    pairs = _load_pairs(manifest)

    cfg_hash = _run_config_hash(model_cfg, optim_cfg, "derainer")
    np_rng = np.random.default_rng(seed)
    torch_gen = torch.Generator().manual_seed(seed)

    model = MultiStreamDerainNet(model_cfg)
    extractor = RandomConvFeatureExtractor(model_cfg.feature_channels, model_cfg.feature_seed)
    optimizer = DecoupledAdam(dict(model.named_parameters()), optim_cfg)

    epoch = 0
    step = 0
    if resume_from is not None:
        if resume_from.config_hash != cfg_hash:
            raise ConfigMismatch("checkpoint was produced under a different config")
        resume_from.apply(model, optimizer, np_rng, torch_gen)
        epoch = resume_from.epoch
        step = resume_from.global_step
    else:
        init_parameters(model, torch_gen)

    meta = {
        "kind": "derainer",
        "model_config": dataclasses.asdict(model_cfg),
        "optim_config": dataclasses.asdict(optim_cfg),
        "seed": int(seed),
        "trained": True,
    }

    def capture() -> Checkpoint:
        return Checkpoint.capture(
            model, optimizer, epoch, step, np_rng, torch_gen, cfg_hash, meta=meta
        )

    curve: list[tuple] = []
    last_good = capture()
    crop = optim_cfg.crop[0], optim_cfg.crop[0]
    while epoch < optim_cfg.epochs and (max_steps is None or step < max_steps):
        lr = lr_schedule(epoch, optim_cfg)
        order = np_rng.permutation(len(pairs))
        for idx in order:
            pair = random_crop(pairs[idx], crop, np_rng)
            y, clean, rain = pair_to_tensors(pair)
            label = pair.label if model_cfg.uses_label else None
            out = model(y, label)
            terms = derainer_loss(out, clean, rain, extractor, model_cfg.lambda_F)
            total = float(terms.total.item())
            if not math.isfinite(total):
                raise DivergenceDetected(
                    f"non-finite loss at step {step}", last_checkpoint=last_good
                )
            optimizer.zero_grad()
            terms.total.backward()
            optimizer.step(lr)
            curve.append(
                (
                    step,
                    float(terms.residual_mse.item()),
                    float(terms.image_mse.item()),
                    float(terms.feature.item()),
                    total,
                    lr,
                )
            )
            step += 1
            if progress is not None:
                progress(step, total)
            if max_steps is not None and step >= max_steps:
                break
        epoch += 1
        last_good = capture()
        if out_dir is not None and checkpoint_every and epoch % checkpoint_every == 0:
            last_good.save(out_dir / f"derainer_epoch{epoch:04d}.ckpt")

    final = capture()
    return TrainResult(model=model, checkpoint=final, curve=curve)


def train_classifier(
    manifest: DatasetManifest,
    clf_cfg: ClassifierConfig | None = None,
    optim_cfg: OptimConfig | None = None,
    seed: int = 0,
    *,
    stage_epochs: tuple[int, int, int] = (3, 3, 2),
    progress=None,
) -> TrainResult:
    """Three-stage classifier protocol: residual extractor on the heavy
    subset, classification head with the extractor frozen, then joint
    optimization of the combined objective."""
    clf_cfg = clf_cfg or ClassifierConfig()
    optim_cfg = optim_cfg or OptimConfig()
    pairs = _load_pairs(manifest)
    by_label = {label: [p for p in pairs if p.label == label] for label in ALL_LABELS}
    missing = [label.name.lower() for label in ALL_LABELS if not by_label[label]]
    if missing:
        raise MissingLabelClass(f"manifest lacks labels: {', '.join(missing)}")

    cfg_hash = _run_config_hash(clf_cfg, optim_cfg, "classifier")
    np_rng = np.random.default_rng(seed)
    torch_gen = torch.Generator().manual_seed(seed)
    model = DensityClassifier(clf_cfg)
    init_parameters(model, torch_gen)

    crop = optim_cfg.crop[0], optim_cfg.crop[0]
    curve: list[tuple] = []
    step = 0
    epoch = 0
    stage_boundaries: dict[str, int] = {}

    def run_stage(stage: int, data: list[SamplePair], params: dict, epochs: int, loss_fn):
        nonlocal step, epoch
        optimizer = DecoupledAdam(params, optim_cfg)
        for _ in range(epochs):
            lr = lr_schedule(epoch, optim_cfg)
            order = np_rng.permutation(len(data))
            for idx in order:
                pair = random_crop(data[idx], crop, np_rng)
                y, _, rain = pair_to_tensors(pair)
                loss = loss_fn(y, rain, pair.label)
                value = float(loss.item())
                if not math.isfinite(value):
                    raise DivergenceDetected(f"non-finite loss at step {step}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step(lr)
                curve.append((step, stage, value, lr))
                step += 1
                if progress is not None:
                    progress(step, value)
            epoch += 1
        stage_boundaries[f"stage{stage}_end"] = step
        return optimizer

    trunk_params = {f"trunk.{n}": p for n, p in model.trunk.named_parameters()}
    head_params = {f"head.{n}": p for n, p in model.head.named_parameters()}

    def stage1_loss(y, rain, label):
        return residual_loss(model.estimate_residual(y), rain)

    def stage2_loss(y, rain, label):
        with torch.no_grad():
            r_hat = model.estimate_residual(y)
        return classification_loss(model.head(r_hat), label)

    def stage3_loss(y, rain, label):
        r_hat = model.estimate_residual(y)
        return classifier_loss(r_hat, rain, model.head(r_hat), label)

    run_stage(1, by_label[DensityLabel.HEAVY], trunk_params, stage_epochs[0], stage1_loss)
    run_stage(2, pairs, head_params, stage_epochs[1], stage2_loss)
    optimizer = run_stage(3, pairs, {**trunk_params, **head_params}, stage_epochs[2], stage3_loss)

    model.is_trained = True
    meta = {
        "kind": "classifier",
        "model_config": dataclasses.asdict(clf_cfg),
        "optim_config": dataclasses.asdict(optim_cfg),
        "seed": int(seed),
        "stage_epochs": list(stage_epochs),
        "trained": True,
    }
    final = Checkpoint.capture(
        model, optimizer, epoch, step, np_rng, torch_gen, cfg_hash,
        stage_boundaries=stage_boundaries, meta=meta,
    )
    return TrainResult(model=model, checkpoint=final, curve=curve)


@torch.no_grad()
def classifier_accuracy(model: DensityClassifier, pairs: list[SamplePair]) -> float:
    """Fraction of pairs whose rainy image is assigned the true label."""
    correct = 0
    for pair in pairs:
        y, _, _ = pair_to_tensors(pair)
        if model.forward(y).predicted == pair.label:
            correct += 1
    return correct / len(pairs)


def model_from_checkpoint(ckpt: Checkpoint) -> nn.Module:
    """Rebuild the model a checkpoint was trained with and load its weights."""
    kind = ckpt.meta.get("kind")
    if kind == "derainer":
        cfg = DerainerConfig.from_dict(ckpt.meta["model_config"])
        model: nn.Module = MultiStreamDerainNet(cfg)
        ckpt.apply(model)
        return model
    if kind == "classifier":
        cfg = ClassifierConfig.from_dict(ckpt.meta["model_config"])
        clf = DensityClassifier(cfg)
        ckpt.apply(clf)
        clf.is_trained = bool(ckpt.meta.get("trained", False))
        return clf
    raise ValueError(f"checkpoint has unknown model kind {kind!r}")
