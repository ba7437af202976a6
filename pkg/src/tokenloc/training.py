"""Joint cross-entropy training on a synthetic localization task.

Phase 1 trains the backbone and scoring branch; phase 2 freezes them and
trains only the CAM convolution. The loss is the sum of both branches'
cross entropies in both phases; the phase merely masks which parameters
receive updates. Everything is a pure function of the two configs, so
repeated runs are byte-identical.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .backbone import ModelConfig, init_params
from .errors import ContractError, DimensionError
from .localization import BoundingBox
from .pipeline import two_branch_forward

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ToyTaskConfig:
    """One solid coloured square per image on a cluttered background; the
    label is the square's colour class and the box its extent.

    The background is low-frequency colour clutter (a coarse random grid
    upscaled to image resolution) times noise_level. Low-frequency
    clutter keeps individual background patches distinct, which is what
    lets the class-token attention single out the object instead of
    locking onto one shared background direction.
    """

    image_size: int = 32
    num_classes: int = 2
    min_object: int = 14
    max_object: int = 24
    noise_level: float = 0.6
    samples_per_epoch: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractError("toy task needs at least 2 classes")
        if not 1 <= self.min_object <= self.max_object <= self.image_size:
            raise ContractError("object size range must fit inside the image")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ContractError("noise level must be in [0, 1]")
        if self.samples_per_epoch < 1:
            raise ContractError("samples_per_epoch must be positive")
        if self.image_size % 4 != 0:
            raise ContractError("image_size must be divisible by 4")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    weight_decay: float = 5e-4
    steps_phase1: int = 200
    steps_phase2: int = 100
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ContractError("rates must be nonnegative")
        if self.steps_phase1 < 0 or self.steps_phase2 < 0 or self.batch_size < 1:
            raise ContractError("step and batch counts must be positive")


def class_color(k: int, num_classes: int) -> np.ndarray:
    """Evenly spaced hues, fully saturated."""
    return np.asarray(colorsys.hsv_to_rgb(k / num_classes, 1.0, 1.0), dtype=np.float32)


def make_dataset(toy: ToyTaskConfig) -> list:
    """Deterministic list of (image 3xHxW, label, BoundingBox) samples."""
    rng = np.random.Generator(np.random.PCG64(toy.seed))
    side = toy.image_size
    tile = side // 4
    samples = []
    for _ in range(toy.samples_per_epoch):
        label = int(rng.integers(toy.num_classes))
        size = int(rng.integers(toy.min_object, toy.max_object + 1))
        x0 = int(rng.integers(side - size + 1))
        y0 = int(rng.integers(side - size + 1))
        clutter = rng.random((3, 4, 4))
        image = np.stack([np.kron(clutter[c], np.ones((tile, tile))) for c in range(3)])
        image = (toy.noise_level * image).astype(np.float32)
        image[:, y0:y0 + size, x0:x0 + size] = class_color(label, toy.num_classes)[:, None, None]
        samples.append((image, label, BoundingBox(x0, y0, x0 + size, y0 + size)))
    return samples


def cross_entropy_joint(p_cam, p_refine, label: int):
    """-(log p_cam[y] + log p_refine[y]), probabilities floored at 1e-12."""
    k = nm.value_of(p_cam).shape[0]
    if not 0 <= label < k:
        raise ContractError(f"class id {label} out of range for {k} classes")
    if nm.value_of(p_refine).shape[0] != k:
        raise DimensionError("branch probability vectors disagree in length")

    def pick_log(p):
        entry = nm.reshape(nm.crop(p, (label,), (1,)), ())
        return nm.log(nm.clip_min(entry, PROB_FLOOR))

    return nm.neg(nm.add(pick_log(p_cam), pick_log(p_refine)))


def backward(loss, tape: nm.GradTape, leaves: dict) -> dict:
    """Replay the tape and collect one float32 gradient per leaf;
    parameters the loss never touched get exact zeros."""
    tape.backward(loss)
    grads = {}
    for name, leaf in leaves.items():
        if leaf.grad is None:
            grads[name] = np.zeros(leaf.value.shape, dtype=np.float32)
        else:
            grads[name] = leaf.grad.astype(np.float32)
    return grads


def sgd_step(params: dict, grads: dict, lr: float, weight_decay: float) -> dict:
    """p <- p - lr * (g + weight_decay * p), returning fresh arrays."""
    updated = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape} ({name})")
        p64 = p.astype(np.float64)
        updated[name] = (p64 - lr * (g.astype(np.float64) + weight_decay * p64)).astype(np.float32)
    return updated


def _batch_loss(params_nodes, cfg, batch, tape):
    total = None
    for image, label, _ in batch:
        result = two_branch_forward(params_nodes, cfg, image)
        loss = cross_entropy_joint(result.p_cam, result.p_refine, label)
        total = loss if total is None else nm.add(total, loss)
    return nm.scale(total, 1.0 / len(batch))


def _is_cam_param(name: str) -> bool:
    return name.startswith("cam.")


def train_toy(toy: ToyTaskConfig, train: TrainConfig, model: ModelConfig | None = None):
    """Two-phase training loop on the synthetic task.

    Returns (model config, trained parameters, loss curve) with curve
    rows (step, phase, loss). Batches cycle through the fixed dataset in
    order, so the whole run is reproducible from the two configs.
    """
    if model is None:
        model = default_model_config(toy)
    if model.image_size != toy.image_size or model.num_classes != toy.num_classes:
        raise ContractError("model config does not match the toy task")
    dataset = make_dataset(toy)
    params = init_params(model, train.seed)
    curve = []
    cursor = 0

    def next_batch():
        nonlocal cursor
        batch = [dataset[(cursor + i) % len(dataset)] for i in range(train.batch_size)]
        cursor = (cursor + train.batch_size) % len(dataset)
        return batch

    step = 0
    for phase, steps in ((1, train.steps_phase1), (2, train.steps_phase2)):
        for _ in range(steps):
            step += 1
            tape = nm.GradTape()
            leaves = {name: tape.leaf(value) for name, value in params.items()}
            loss = _batch_loss(leaves, model, next_batch(), tape)
            grads = backward(loss, tape, leaves)
            trainable = {name: p for name, p in params.items()
                         if _is_cam_param(name) == (phase == 2)}
            stepped = sgd_step(trainable, {n: grads[n] for n in trainable},
                               train.learning_rate, train.weight_decay)
            params = {name: stepped.get(name, value) for name, value in params.items()}
            curve.append((step, phase, float(nm.value_of(loss))))
    return model, params, curve


def default_model_config(toy: ToyTaskConfig) -> ModelConfig:
    """Desk-scale defaults sized to the toy task."""
    patch = 4 if toy.image_size % 4 == 0 else 1
    return ModelConfig(
        image_size=toy.image_size,
        patch_size=patch,
        embed_dim=32,
        num_blocks=2,
        num_heads=4,
        num_classes=toy.num_classes,
        mlp_ratio=2,
        selection_mass=0.65,
    )
