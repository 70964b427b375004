"""3D U-Net model, initialization, and the training protocols.

Two trainable strategies share this machinery: training from random
He-initialized weights, and fine-tuning from weights pre-trained on a
tumour segmentation task. Model selection trains an ensemble of
independently seeded runs and keeps the member with the best validation
Dice.
"""

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import preprocess, volgrid
from .errors import ShapeError, ValidationError
from .seeding import derive_seed, derived_rng

__all__ = [
    "UNetConfig",
    "TrainConfig",
    "TrainResult",
    "UNet3D",
    "build_unet",
    "forward",
    "train",
    "train_ensemble",
    "pretrain_tumour",
    "finetune",
    "predict_mask",
    "predict_probabilities",
    "binary_dice",
    "write_history_csv",
    "DESK_PRESET",
    "CLINICAL_PRESET",
]


@dataclass(frozen=True)
class UNetConfig:
    """Architecture hyperparameters. Channels double at each level."""

    in_channels: int = 2
    out_channels: int = 1
    levels: int = 3
    base_channels: int = 8

    def __post_init__(self):
        if self.levels < 2:
            raise ValidationError("levels must be >= 2")
        if self.base_channels < 1:
            raise ValidationError("base_channels must be >= 1")

    @property
    def pool_factor(self) -> int:
        """Spatial dims of the input must be divisible by this."""
        return 2 ** (self.levels - 1)

    def channels_at(self, level: int) -> int:
        return self.base_channels * (2 ** level)


# Desk preset trains on a laptop CPU in minutes; the clinical preset
# mirrors the full-size network (its parameter count is what matters here,
# it is never trained at desk scale).
DESK_PRESET = UNetConfig(levels=3, base_channels=8)
CLINICAL_PRESET = UNetConfig(levels=4, base_channels=32)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.1
    plateau_patience: int = 10
    plateau_factor: float = 0.05
    plateau_semantics: str = "scale"  # "scale": lr*f; "reduce_by_fraction": lr*(1-f)
    early_stop_patience: int = 60
    batch_size: int = 2
    flip_prob: float = 0.1
    ensemble_size: int = 5
    binarize_threshold: float = 0.5
    seed: int = 0
    max_epochs: int = 1000

    def __post_init__(self):
        if not (0.0 < self.plateau_factor < 1.0):
            raise ValidationError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValidationError("patience values must be >= 1")
        if self.plateau_semantics not in ("scale", "reduce_by_fraction"):
            raise ValidationError(f"unknown plateau_semantics {self.plateau_semantics!r}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValidationError("batch_size and max_epochs must be >= 1")


@dataclass
class TrainResult:
    best_weights: list  # ordered (name, array) pairs from the best epoch
    best_val_dice: float
    best_epoch: int
    history: list = field(default_factory=list)  # rows: (epoch, train_loss, val_dice, lr)


class UNet3D:
    """Encoder-decoder with skip connections.

    Per level: two (conv3x3x3, instance norm, relu) units; max-pool 2 between
    encoder levels; transposed conv 2x2x2 stride 2 up the decoder, concat
    with the skip, then two more conv units; 1x1x1 conv head with sigmoid.
    """

    def __init__(self, cfg: UNetConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self._params = []  # ordered (name, Tensor)
        self._index = {}

        ch = [cfg.channels_at(i) for i in range(cfg.levels)]
        for i in range(cfg.levels - 1):
            cin = cfg.in_channels if i == 0 else ch[i - 1]
            self._declare_block(f"enc{i}", cin, ch[i])
        self._declare_block("bottleneck", ch[cfg.levels - 2], ch[cfg.levels - 1])
        for i in reversed(range(cfg.levels - 1)):
            self._declare_param(f"up{i}.w", (ch[i + 1], ch[i], 2, 2, 2))
            self._declare_param(f"up{i}.b", (ch[i],))
            self._declare_block(f"dec{i}", 2 * ch[i], ch[i])
        self._declare_param("head.w", (cfg.out_channels, ch[0], 1, 1, 1))
        self._declare_param("head.b", (cfg.out_channels,))

    def _declare_block(self, prefix, cin, cout):
        for j, c_in in ((1, cin), (2, cout)):
            self._declare_param(f"{prefix}.conv{j}.w", (cout, c_in, 3, 3, 3))
            self._declare_param(f"{prefix}.conv{j}.b", (cout,))
            self._declare_param(f"{prefix}.norm{j}.gamma", (cout,))
            self._declare_param(f"{prefix}.norm{j}.beta", (cout,))

    def _declare_param(self, name, shape):
        t = ad.Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)
        self._params.append((name, t))
        self._index[name] = t

    def parameters(self):
        """Ordered (name, Tensor) pairs; the checkpoint declaration order."""
        return list(self._params)

    def param(self, name) -> ad.Tensor:
        return self._index[name]

    @property
    def n_parameters(self) -> int:
        return sum(t.data.size for _, t in self._params)

    def init_he(self, seed: int) -> None:
        """He initialization: conv and up-conv weights ~ N(0, 2/n) with
        n = Cin*kd*kh*kw; biases zero; norm gamma 1, beta 0."""
        rng = np.random.default_rng(seed)
        for name, t in self._params:
            if name.endswith(".w"):
                shape = t.data.shape
                if name.startswith("up"):
                    fan_in = shape[0] * shape[2] * shape[3] * shape[4]  # [Cin,Cout,k,k,k]
                else:
                    fan_in = shape[1] * shape[2] * shape[3] * shape[4]  # [Cout,Cin,k,k,k]
                std = np.sqrt(2.0 / fan_in)
                t.data = rng.normal(0.0, std, size=shape).astype(self.dtype)
            elif name.endswith(".gamma"):
                t.data = np.ones(t.data.shape, dtype=self.dtype)
            else:  # biases and beta
                t.data = np.zeros(t.data.shape, dtype=self.dtype)

    def _block(self, prefix, x):
        for j in (1, 2):
            x = ad.conv3d(x, self.param(f"{prefix}.conv{j}.w"), self.param(f"{prefix}.conv{j}.b"),
                          stride=1, pad=1)
            x = ad.instance_norm3d(x, self.param(f"{prefix}.norm{j}.gamma"),
                                   self.param(f"{prefix}.norm{j}.beta"))
            x = ad.relu(x)
        return x

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        cfg = self.cfg
        if x.data.ndim != 5 or x.data.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected [B,{cfg.in_channels},D,H,W], got {x.data.shape}")
        for extent in x.data.shape[2:]:
            if extent % cfg.pool_factor != 0:
                raise ShapeError(
                    f"spatial extents {x.data.shape[2:]} must be divisible by {cfg.pool_factor}")
        if x.data.dtype != self.dtype:
            x = ad.Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)

        skips = []
        for i in range(cfg.levels - 1):
            x = self._block(f"enc{i}", x)
            skips.append(x)
            x = ad.maxpool3d(x)
        x = self._block("bottleneck", x)
        for i in reversed(range(cfg.levels - 1)):
            x = ad.transposed_conv3d(x, self.param(f"up{i}.w"), self.param(f"up{i}.b"))
            x = ad.concat_channels(skips[i], x)
            x = self._block(f"dec{i}", x)
        x = ad.conv3d(x, self.param("head.w"), self.param("head.b"), stride=1, pad=0)
        return ad.sigmoid(x)

    def get_weights(self):
        """Deep copy of the current weights as ordered (name, array) pairs."""
        return [(name, t.data.copy()) for name, t in self._params]

    def set_weights(self, named_arrays) -> None:
        pairs = list(named_arrays)
        if [n for n, _ in pairs] != [n for n, _ in self._params]:
            raise ValidationError("checkpoint parameter names do not match this architecture")
        for (_, arr), (_, t) in zip(pairs, self._params):
            if tuple(arr.shape) != t.data.shape:
                raise ValidationError("checkpoint parameter shapes do not match this architecture")
            t.data = np.asarray(arr, dtype=self.dtype).copy()

    def save(self, base_path: str) -> None:
        ad.save_checkpoint(base_path, self.get_weights())

    def load(self, base_path: str) -> None:
        self.set_weights(ad.load_checkpoint(base_path))


def build_unet(cfg: UNetConfig, seed: int, dtype=np.float32) -> UNet3D:
    """He-initialized network, deterministic under seed."""
    model = UNet3D(cfg, dtype=dtype)
    model.init_he(seed)
    return model


def forward(model: UNet3D, x) -> np.ndarray:
    """Inference forward pass on a raw array; returns the probability map."""
    with ad.no_grad():
        return model.forward(ad.Tensor(np.asarray(x, dtype=model.dtype))).data


def binary_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice between two boolean arrays; both empty counts as 1."""
    p = int(np.count_nonzero(pred))
    g = int(np.count_nonzero(gt))
    if p == 0 and g == 0:
        return 1.0
    inter = int(np.count_nonzero(np.logical_and(pred, gt)))
    return 2.0 * inter / (p + g)


def _validation_dice(model, val_samples, threshold):
    scores = []
    for s in val_samples:
        prob = forward(model, s.input[None])
        scores.append(binary_dice(prob[0, 0] >= threshold, s.label[0] > 0.5))
    return float(np.mean(scores))


def train(model: UNet3D, train_samples, val_samples, cfg: TrainConfig) -> TrainResult:
    """Full training protocol: seeded shuffling, random x-flips, Adam on the
    Dice loss, plateau learning-rate decay, early stopping, best-epoch
    weight restoration."""
    if not train_samples or not val_samples:
        raise ValidationError("train and validation sets must be non-empty")
    params = [t for _, t in model.parameters()]
    state = ad.init_adam_state([p.data for p in params])
    lr = cfg.lr0
    adam_t = 0
    history = []
    best_weights, best_dice, best_epoch = model.get_weights(), -np.inf, 0
    stop_wait = 0
    plateau_wait = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = derived_rng(cfg.seed, "shuffle", epoch).permutation(len(train_samples))
        flips = derived_rng(cfg.seed, "augment", epoch).random(len(train_samples)) < cfg.flip_prob
        losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            xs, ys = [], []
            for pos, i in enumerate(idx):
                s = train_samples[i]
                x, y = s.input, s.label
                if flips[b0 + pos]:
                    x, y = x[..., ::-1], y[..., ::-1]
                xs.append(x)
                ys.append(y)
            xb = ad.Tensor(np.ascontiguousarray(np.stack(xs), dtype=model.dtype))
            yb = ad.Tensor(np.ascontiguousarray(np.stack(ys), dtype=model.dtype))
            for p in params:
                p.zero_grad()
            loss = ad.batch_dice_loss(model.forward(xb), yb)
            loss.backward()
            adam_t += 1
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            new = ad.adam_step([p.data for p in params], grads, state, lr, t=adam_t)
            for p, arr in zip(params, new):
                p.data = arr
            losses.append(float(loss.data))

        val_dice = _validation_dice(model, val_samples, cfg.binarize_threshold)
        rowlr = lr
        if val_dice > best_dice:
            best_weights, best_dice, best_epoch = model.get_weights(), val_dice, epoch
            stop_wait = 0
            plateau_wait = 0
        else:
            stop_wait += 1
            plateau_wait += 1
            if plateau_wait >= cfg.plateau_patience:
                lr = lr * cfg.plateau_factor if cfg.plateau_semantics == "scale" \
                    else lr * (1.0 - cfg.plateau_factor)
                plateau_wait = 0
        history.append((epoch, float(np.mean(losses)), val_dice, rowlr))
        if stop_wait >= cfg.early_stop_patience:
            break

    model.set_weights(best_weights)
    return TrainResult(best_weights, best_dice, best_epoch, history)


def train_ensemble(unet_cfg: UNetConfig, train_samples, val_samples, cfg: TrainConfig,
                   dtype=np.float32, init_weights=None):
    """Train ``cfg.ensemble_size`` independently seeded runs; return
    (best result, all results). Ties go to the lowest run index.

    When ``init_weights`` is given every member starts from those weights
    (the fine-tuning path); otherwise each member gets its own He init.
    """
    results = []
    for run in range(cfg.ensemble_size):
        member_cfg = replace(cfg, seed=derive_seed(cfg.seed, "member", run))
        model = UNet3D(unet_cfg, dtype=dtype)
        if init_weights is None:
            model.init_he(derive_seed(cfg.seed, "init", run))
        else:
            model.set_weights(copy.deepcopy(init_weights))
        results.append(train(model, train_samples, val_samples, member_cfg))
    best_idx = int(np.argmax([r.best_val_dice for r in results]))  # argmax: first max wins
    return results[best_idx], results


def pretrain_tumour(unet_cfg: UNetConfig, train_samples, val_samples, cfg: TrainConfig,
                    dtype=np.float32) -> TrainResult:
    """Pre-train one model on the tumour segmentation task (GTV labels)."""
    model = build_unet(unet_cfg, derive_seed(cfg.seed, "pretrain-init"), dtype=dtype)
    return train(model, train_samples, val_samples, replace(cfg, seed=derive_seed(cfg.seed, "pretrain")))


def finetune(pretrained_weights, unet_cfg: UNetConfig, train_samples, val_samples,
             cfg: TrainConfig, dtype=np.float32):
    """Ensemble of runs initialised from pre-trained weights, same protocol."""
    return train_ensemble(unet_cfg, train_samples, val_samples, cfg, dtype=dtype,
                          init_weights=pretrained_weights)


def predict_probabilities(model: UNet3D, case, spec: preprocess.CropSpec) -> np.ndarray:
    """Probability map over the crop box of a (normalized) case."""
    x, _ = preprocess.assemble_input(case, spec, require_label=False)
    return forward(model, x[None])[0, 0]


def predict_mask(model: UNet3D, case, spec: preprocess.CropSpec,
                 threshold: float = 0.5) -> volgrid.Mask3D:
    """Binarized prediction placed back on the full case grid.

    Probability >= threshold becomes foreground; voxels outside the crop
    box are background.
    """
    prob = predict_probabilities(model, case, spec)
    pred_crop = prob >= threshold
    center = preprocess.gtv_centroid_voxel(case.gtv)
    start = volgrid.crop_start(center, spec.dims)
    nx, ny, nz = case.ct.grid.dims
    full = np.zeros((nz, ny, nx), dtype=np.uint8)
    cz, cy, cx = pred_crop.shape
    src_lo = [max(0, s) for s in (start[2], start[1], start[0])]
    src_hi = [min(n, s + c) for n, s, c in zip((nz, ny, nx), (start[2], start[1], start[0]), (cz, cy, cx))]
    if all(lo < hi for lo, hi in zip(src_lo, src_hi)):
        off = (start[2], start[1], start[0])
        full[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]] = pred_crop[
            src_lo[0] - off[0]:src_hi[0] - off[0],
            src_lo[1] - off[1]:src_hi[1] - off[1],
            src_lo[2] - off[2]:src_hi[2] - off[2]].astype(np.uint8)
    return volgrid.Mask3D(case.ct.grid, full)


def write_history_csv(path: str, history) -> None:
    """Rows of (epoch, train_loss, val_dice, lr) with round-trip float text."""
    with open(path, "w") as f:
        f.write("epoch,train_loss,val_dice,lr\n")
        for epoch, loss, dice, lr in history:
            f.write(f"{epoch},{loss!r},{dice!r},{lr!r}\n")
