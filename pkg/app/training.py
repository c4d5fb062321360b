"""
Training and evaluation
Squared Lab error between enhanced and target colors, stochastic training
with pixel subsampling, the closed-form least-squares global transform and
per-image L2 evaluation.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from app.checkpoint_manager import Checkpoint, CheckpointManager
from app.color import ColorTransform, LabImage, mean_l2, quadratic_basis
from app.errors import DatasetError, RankDeficiencyError, ShapeError
from app.network import BackboneConfig, StylizeNet, forward, forward_graph
from app.ops import pixel_mse
from app.tensor import Tensor, zero_grads

logger = logging.getLogger(__name__)

BASIS_SIZE = 10
REFINEMENT_STEPS = 2


@dataclass
class StylePair:
    """An exemplar before/after pair in Lab"""
    input: LabImage
    target: LabImage
    name: str = ""

    def __post_init__(self):
        if self.input.pixels.shape != self.target.pixels.shape:
            raise ShapeError(
                "pair size", self.input.pixels.shape, self.target.pixels.shape, op=self.name or "StylePair"
            )


class TrainConfig(BaseModel):
    """Optimizer and schedule settings for one training run"""

    model_config = ConfigDict(frozen=True)

    epochs: int = 30
    learning_rate: float = 1e-3
    pixels_per_step: int = 1024
    optimizer: Literal["adam", "sgd"] = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    train_names: tuple[str, ...] = ()
    test_names: tuple[str, ...] = ()

    @field_validator("train_names", "test_names", mode="before")
    @classmethod
    def _split_commas(cls, v):
        if isinstance(v, str):
            return tuple(part.strip() for part in v.split(",") if part.strip())
        return v

    @field_validator("epochs", "seed")
    @classmethod
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("must be non-negative")
        return v

    @field_validator("learning_rate")
    @classmethod
    def _valid_learning_rate(cls, v):
        # zero is accepted: a frozen run is how parameter invariance is checked
        if not np.isfinite(v) or v < 0:
            raise ValueError("learning_rate must be a finite value >= 0")
        return v

    @field_validator("pixels_per_step")
    @classmethod
    def _positive_pixels(cls, v):
        if v < 1:
            raise ValueError("pixels_per_step must be >= 1")
        return v

    @field_validator("beta1", "beta2")
    @classmethod
    def _unit_interval(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError("Adam betas must lie in [0, 1)")
        return v


@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer_state(net: StylizeNet, cfg: TrainConfig) -> OptimizerState:
    state = OptimizerState(cfg.optimizer)
    if cfg.optimizer == "adam":
        for name, p in net.parameters().items():
            state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
    return state


def loss(enhanced: Tensor | LabImage, target: LabImage, pixels: Optional[np.ndarray] = None) -> Tensor:
    """
    Mean over the selected pixels of the squared Lab distance to the target.

    Args:
        enhanced: (3, H, W) network output tensor, or a finished LabImage
        target: Ground-truth image
        pixels: Flat pixel indices or a boolean (H, W) mask; None selects all
    """
    if isinstance(enhanced, LabImage):
        enhanced = Tensor(enhanced.channels_first())
    return pixel_mse(enhanced, target.channels_first(), pixels)


def sample_pixels(h: int, w: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Flat indices of ``count`` distinct pixels, or all pixels if count >= h * w"""
    if count >= h * w:
        return np.arange(h * w)
    return np.sort(rng.choice(h * w, size=count, replace=False))


def _apply_update(net: StylizeNet, cfg: TrainConfig, opt: OptimizerState) -> None:
    t = opt.step + 1
    for name, p in net.parameters().items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if opt.kind == "sgd":
            p.data -= cfg.learning_rate * g
            continue
        m = opt.first_moment[name]
        v = opt.second_moment[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        p.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def train_step(net: StylizeNet, pair: StylePair, cfg: TrainConfig, opt: OptimizerState) -> float:
    """
    One optimizer step on a random pixel subset of one pair.

    Returns:
        The loss before the update
    """
    rng = np.random.default_rng([cfg.seed, opt.step])
    params = net.parameters()
    zero_grads(params.values())

    _, enhanced = forward_graph(net, pair.input)
    pixels = sample_pixels(pair.input.height, pair.input.width, cfg.pixels_per_step, rng)
    value = loss(enhanced, pair.target, pixels)
    value.backward()
    _apply_update(net, cfg, opt)
    opt.step += 1

    result = value.item()
    logger.debug("step %d (%s): loss %.6f", opt.step, pair.name, result)
    return result


@dataclass
class TrainResult:
    net: StylizeNet
    epoch_losses: list[float]
    checkpoint: Optional[Checkpoint] = None


def train(
    pairs: Sequence[StylePair],
    cfg: TrainConfig,
    backbone: Optional[BackboneConfig] = None,
    checkpoint_path: Optional[str | Path] = None,
    log_path: Optional[str | Path] = None,
    manager: Optional[CheckpointManager] = None,
) -> TrainResult:
    """
    Train a freshly initialized network for ``cfg.epochs`` passes over ``pairs``.

    Each epoch visits every pair once in a seeded shuffled order. When
    ``log_path`` is given one ``epoch<TAB>mean_loss`` line is written per epoch;
    when ``checkpoint_path`` is given the final parameters are saved there.

    Raises:
        DatasetError: Empty training set or unwritable log file
        CheckpointError: Unwritable checkpoint
    """
    if not pairs:
        raise DatasetError("training set is empty")
    net = StylizeNet(backbone or BackboneConfig())
    opt = init_optimizer_state(net, cfg)
    rng = np.random.default_rng(cfg.seed)

    log_file = None
    if log_path is not None:
        try:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            log_file = open(log_path, "w", encoding="utf-8")
        except OSError as e:
            raise DatasetError(f"cannot open training log ({e})", str(log_path)) from e

    epoch_losses: list[float] = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(pairs))
            losses = [train_step(net, pairs[i], cfg, opt) for i in order]
            mean_loss = float(np.mean(losses))
            epoch_losses.append(mean_loss)
            logger.info("epoch %d/%d: mean loss %.6f", epoch, cfg.epochs, mean_loss)
            if log_file is not None:
                log_file.write(f"{epoch}\t{mean_loss!r}\n")
                log_file.flush()
    except OSError as e:
        raise DatasetError(f"cannot write training log ({e})", str(log_path)) from e
    finally:
        if log_file is not None:
            log_file.close()

    checkpoint = None
    if checkpoint_path is not None:
        manager = manager or CheckpointManager()
        checkpoint = manager.save_checkpoint(net, checkpoint_path, epoch=cfg.epochs)
    return TrainResult(net, epoch_losses, checkpoint)


def _solve_least_squares(basis: np.ndarray, targets: np.ndarray) -> ColorTransform:
    """
    Least-squares 3x10 transform from (N, 10) basis rows to (N, 3) targets.

    Basis columns are scaled to unit RMS before forming the normal equations;
    the solution is unscaled back to raw Lab units.
    """
    if basis.shape[0] < BASIS_SIZE:
        raise RankDeficiencyError(
            basis.shape[0], f"only {basis.shape[0]} pixels; at least {BASIS_SIZE} are required"
        )
    scale = np.sqrt(np.mean(basis * basis, axis=0))
    scale[scale == 0.0] = 1.0
    scaled = basis / scale
    gram = scaled.T @ scaled
    rank = int(np.linalg.matrix_rank(gram))
    if rank < BASIS_SIZE:
        raise RankDeficiencyError(rank)
    solution = np.linalg.solve(gram, scaled.T @ targets)
    # iterative refinement against the residual of the unsquared system
    for _ in range(REFINEMENT_STEPS):
        solution = solution + np.linalg.solve(gram, scaled.T @ (targets - scaled @ solution))
    return ColorTransform((solution / scale[:, None]).T)


def fit_global_transform(pairs: Sequence[StylePair]) -> ColorTransform:
    """
    The single 3x10 transform minimizing the squared Lab error over every
    pixel of every pair.

    Raises:
        RankDeficiencyError: If the input colors do not span the quadratic basis
    """
    basis = np.concatenate([quadratic_basis(p.input.pixels).reshape(-1, BASIS_SIZE) for p in pairs])
    targets = np.concatenate([p.target.pixels.reshape(-1, 3) for p in pairs])
    return _solve_least_squares(basis, targets)


def fit_region_transforms(
    pairs: Sequence[StylePair], masks: Sequence[np.ndarray]
) -> dict[int, ColorTransform]:
    """One least-squares transform per region label, pooled across pairs"""
    if len(pairs) != len(masks):
        raise ShapeError("mask count", len(pairs), len(masks), op="fit_region_transforms")
    basis, targets, labels = [], [], []
    for pair, mask in zip(pairs, masks):
        mask = np.asarray(mask)
        if mask.shape != pair.input.pixels.shape[:2]:
            raise ShapeError("mask shape", pair.input.pixels.shape[:2], mask.shape, op=pair.name)
        basis.append(quadratic_basis(pair.input.pixels).reshape(-1, BASIS_SIZE))
        targets.append(pair.target.pixels.reshape(-1, 3))
        labels.append(mask.astype(np.int64).ravel())
    basis_all = np.concatenate(basis)
    targets_all = np.concatenate(targets)
    labels_all = np.concatenate(labels)
    return {
        int(label): _solve_least_squares(basis_all[labels_all == label], targets_all[labels_all == label])
        for label in np.unique(labels_all)
    }


@dataclass
class EvalReport:
    names: list[str]
    per_image_l2: list[float]
    per_image_baseline: list[float]
    mean_l2: float
    baseline_mean_l2: float

    def rows(self) -> list[tuple[str, float, float]]:
        return list(zip(self.names, self.per_image_baseline, self.per_image_l2))


def evaluate(net: StylizeNet, pairs: Sequence[StylePair], workers: int = 1) -> EvalReport:
    """
    Mean per-pixel L2 of the stylized output against the target (method) and
    of the unmodified input against the target (baseline), per image and overall.
    """
    if not pairs:
        raise DatasetError("evaluation set is empty")

    def _score(pair: StylePair) -> tuple[float, float]:
        enhanced = forward(net, pair.input).enhanced
        return mean_l2(enhanced, pair.target), mean_l2(pair.input, pair.target)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(_score, pairs))
    else:
        scores = [_score(p) for p in pairs]

    method = [s[0] for s in scores]
    baseline = [s[1] for s in scores]
    report = EvalReport(
        names=[p.name or str(i) for i, p in enumerate(pairs)],
        per_image_l2=method,
        per_image_baseline=baseline,
        mean_l2=float(np.mean(method)),
        baseline_mean_l2=float(np.mean(baseline)),
    )
    logger.info(
        "evaluated %d images: mean L2 %.4f (baseline %.4f)",
        len(pairs), report.mean_l2, report.baseline_mean_l2,
    )
    return report
