"""The full segmentation network and its training loop.

Topology: a 7-convolution / 2-pool encoder (3x3 kernels, padding 1, relu),
one four-direction recurrent sweep block over 2x2 patches of the encoded
map, and a decoder of three stride-2 fractionally strided convolutions
(each realized as a sparse-matrix product and cropped by 1 per side to hit
an exact x2), finished by a 1x1 convolution and a sigmoid. Output is a
per-pixel foreground probability at the input resolution.

Everything is deterministic: parameters come from one seeded stream in
declaration order, shuffling is Fisher-Yates on the same stream, samples
inside a batch are processed in fixed order, and all arithmetic is float32
with float64 loss accumulation. Two runs with the same seed, config, and
data produce bit-identical checkpoints and traces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .layers import (
    ConvSpec,
    activation_forward,
    backward,
    bce_loss,
    conv2d_forward,
    crop2d_forward,
    maxpool2x2_forward,
    tconv_forward,
    tconv_sparse_matrix,
)
from .errors import CheckpointError
from .metrics import ConfusionCounts, confusion_counts, metrics_from_counts
from .renet import RenetParams, SweepParams, renet_block
from .tensor import Rng, glorot_init, load_checkpoint, save_checkpoint

ENCODER_CHANNELS = (16, 16, 32, 32, 64, 64, 64)
POOL_AFTER = frozenset((2, 4))  # pool follows these conv indices (1-based)
DECODER_CHANNELS = (32, 16, 8)
TCONV_KERNEL = 4
TCONV_STRIDE = 2


@dataclass
class ModelConfig:
    image_size: int = 64
    patch: int = 2
    rnn_units: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 300
    seed: int = 42
    threshold: float = 0.5

    def validate(self) -> "ModelConfig":
        if self.patch < 1 or self.rnn_units < 1:
            raise ConfigError("patch and rnn_units must be positive")
        if self.image_size % (4 * self.patch):
            raise ConfigError(
                f"image_size {self.image_size} must be divisible by {4 * self.patch} "
                "(two 2x2 pools, then the patch grid)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0,1]")
        return self


@dataclass
class ModelParams:
    """Named parameter tensors plus same-shaped gradient and momentum buffers."""

    values: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.grads:
            self.grads = {k: np.zeros_like(v) for k, v in self.values.items()}
        if not self.momentum:
            self.momentum = {k: np.zeros_like(v) for k, v in self.values.items()}
        for k, v in self.values.items():
            if self.grads[k].shape != v.shape or self.momentum[k].shape != v.shape:
                raise ShapeError(f"buffer shape mismatch for parameter {k!r}")


@dataclass
class TrainTrace:
    """Per-epoch (epoch index, mean loss, training Dice), 1-based epochs."""

    entries: list[tuple[int, float, float]] = field(default_factory=list)

    def serialize(self) -> str:
        return "".join(f"{e},{loss:.6f},{dice:.6f}\n" for e, loss, dice in self.entries)


# relu halves activation variance; without this gain the 7-deep encoder
# attenuates signal ~10x and cannot overfit within the fixed epoch budget
RELU_GAIN = np.float32(np.sqrt(2.0))


def _conv_glorot(shape, rng, gain=RELU_GAIN):
    kh, kw, ci, co = shape
    w = glorot_init(shape, kh * kw * ci, kh * kw * co, rng)
    w *= gain
    return w


def _tconv_glorot(shape, rng):
    # a stride-s transposed conv touches each output cell through (k/s)^2
    # taps, not k^2; counting the full kernel as fan shrinks the decoder
    # signal 3x per stage and stalls training inside the epoch budget
    k, _, ci, co = shape
    fan = (k // TCONV_STRIDE) ** 2
    w = glorot_init(shape, fan * ci, fan * co, rng)
    w *= RELU_GAIN
    return w


def build_model(config: ModelConfig, rng: Rng) -> ModelParams:
    """Allocate and Glorot-initialize every parameter, in declaration order."""
    config.validate()
    values: dict[str, np.ndarray] = {}

    c_in = 3
    for i, c_out in enumerate(ENCODER_CHANNELS, start=1):
        values[f"enc{i}.weights"] = _conv_glorot((3, 3, c_in, c_out), rng)
        values[f"enc{i}.bias"] = np.zeros(c_out, dtype=np.float32)
        c_in = c_out

    u = config.rnn_units
    length = config.patch * config.patch * ENCODER_CHANNELS[-1]
    for direction in ("down", "up"):
        values[f"renet.{direction}.wx"] = glorot_init((length, u), length, u, rng)
        values[f"renet.{direction}.wz"] = glorot_init((u, u), u, u, rng)
        values[f"renet.{direction}.bias"] = np.zeros(u, dtype=np.float32)
    for direction in ("right", "left"):
        values[f"renet.{direction}.wx"] = glorot_init((2 * u, u), 2 * u, u, rng)
        values[f"renet.{direction}.wz"] = glorot_init((u, u), u, u, rng)
        values[f"renet.{direction}.bias"] = np.zeros(u, dtype=np.float32)

    c_in = 2 * u
    for k, c_out in enumerate(DECODER_CHANNELS, start=1):
        shape = (TCONV_KERNEL, TCONV_KERNEL, c_in, c_out)
        values[f"dec{k}.weights"] = _tconv_glorot(shape, rng)
        values[f"dec{k}.bias"] = np.zeros(c_out, dtype=np.float32)
        c_in = c_out
    # the logit head feeds a sigmoid, not a relu, so it keeps plain Glorot
    values["out.weights"] = _conv_glorot(
        (1, 1, DECODER_CHANNELS[-1], 1), rng, gain=np.float32(1.0)
    )
    values["out.bias"] = np.zeros(1, dtype=np.float32)
    return ModelParams(values=values)


def _infer_patch(params: ModelParams) -> int:
    c_enc = params.values["enc7.weights"].shape[3]
    length = params.values["renet.down.wx"].shape[0]
    patch = int(round((length / c_enc) ** 0.5))
    if patch * patch * c_enc != length:
        raise ShapeError("recurrent input weights do not match a square patch")
    return patch


def _renet_params(params: ModelParams) -> RenetParams:
    v = params.values
    sweep = lambda d: SweepParams(wx=v[f"renet.{d}.wx"], wz=v[f"renet.{d}.wz"],
                                  bias=v[f"renet.{d}.bias"])
    return RenetParams(down=sweep("down"), up=sweep("up"),
                       right=sweep("right"), left=sweep("left"))


def _encode_tape(image: np.ndarray, params: ModelParams):
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an (h, w, 3) image, got {image.shape}")
    if image.shape[0] % 4 or image.shape[1] % 4:
        raise ShapeError(f"image dims {image.shape[:2]} must be divisible by 4")
    tape = []
    x = image
    for i in range(1, len(ENCODER_CHANNELS) + 1):
        w = params.values[f"enc{i}.weights"]
        spec = ConvSpec(w.shape[2], w.shape[3], (3, 3), stride=1, padding=1)
        x, rec = conv2d_forward(x, w, params.values[f"enc{i}.bias"], spec)
        tape.append((f"enc{i}", rec))
        x, rec = activation_forward(x, "relu")
        tape.append((None, rec))
        if i in POOL_AFTER:
            x, rec = maxpool2x2_forward(x)
            tape.append((None, rec))
    return x, tape


def encode(image: np.ndarray, params: ModelParams) -> np.ndarray:
    """Run the convolutional encoder; spatial dims shrink by 4."""
    return _encode_tape(image, params)[0]


def decoder_matrices(params: ModelParams, grid: int) -> list:
    """Sparse matrices of the three upsampling stages for a given grid size.

    Rebuild whenever the weights change; the sparsity structure is cached
    internally, only the values are regathered.
    """
    mats = []
    dim = grid
    for k in range(1, len(DECODER_CHANNELS) + 1):
        mats.append(tconv_sparse_matrix(params.values[f"dec{k}.weights"],
                                        (dim, dim), TCONV_STRIDE))
        dim *= 2
    return mats


def _decode_tape(x: np.ndarray, params: ModelParams, matrices=None):
    if matrices is None:
        matrices = decoder_matrices(params, x.shape[0])
    tape = []
    for k, matrix in enumerate(matrices, start=1):
        x, rec = tconv_forward(x, matrix, params.values[f"dec{k}.bias"], matrix.out_dims)
        tape.append((f"dec{k}", rec))
        x, rec = crop2d_forward(x, 1)  # (2g+2) -> 2g per side
        tape.append((None, rec))
        x, rec = activation_forward(x, "relu")
        tape.append((None, rec))
    w = params.values["out.weights"]
    x, rec = conv2d_forward(x, w, params.values["out.bias"],
                            ConvSpec(w.shape[2], 1, (1, 1)))
    tape.append(("out", rec))
    x, rec = activation_forward(x, "sigmoid")
    tape.append((None, rec))
    return x, tape


def decode(renet_out: np.ndarray, params: ModelParams) -> np.ndarray:
    """Upsample a (g, g, 2U) map to (8g, 8g, 1) probabilities in (0,1)."""
    expect = params.values["dec1.weights"].shape[2]
    if renet_out.ndim != 3 or renet_out.shape[2] != expect:
        raise ShapeError(f"decoder expects {expect} channels, got {renet_out.shape}")
    return _decode_tape(renet_out, params)[0]


def _forward_tape(image: np.ndarray, params: ModelParams, matrices=None):
    x, tape = _encode_tape(image, params)
    patch = _infer_patch(params)
    if x.shape[0] % patch or x.shape[1] % patch:
        raise ShapeError(f"encoded map {x.shape[:2]} not divisible by patch {patch}")
    x, rec = renet_block(x, _renet_params(params), patch, patch)
    tape.append(("renet", rec))
    x, decode_tape = _decode_tape(x, params, matrices)
    return x, tape + decode_tape


def forward(image: np.ndarray, params: ModelParams) -> np.ndarray:
    """Full network: probability mask with the input's spatial shape."""
    return _forward_tape(image, params)[0]


def _batch_step(batch, params: ModelParams, matrices):
    """Mean loss, mean gradients, and per-sample probabilities for one batch."""
    loss_total = 0.0
    grads = {k: np.zeros_like(v) for k, v in params.values.items()}
    probs = []
    for image, mask in batch:
        prob, tape = _forward_tape(image, params, matrices)
        sample_loss, bce_rec = bce_loss(prob, mask)
        loss_total += sample_loss
        probs.append(prob)
        g, _ = backward(bce_rec, 1.0)
        for prefix, rec in reversed(tape):
            g, param_grads = backward(rec, g)
            if prefix is not None:
                for key, val in param_grads.items():
                    grads[f"{prefix}.{key}"] += val
    scale = np.float32(1.0 / len(batch))
    for key in grads:
        grads[key] *= scale
    return loss_total / len(batch), grads, probs


def loss_and_gradients(batch, params: ModelParams):
    """Mean BCE over (image, mask) pairs and gradients for every parameter."""
    batch = list(batch)
    if not batch:
        raise DataError("empty batch")
    for image, mask in batch:
        if image.shape[:2] != mask.shape[:2]:
            raise ShapeError(f"image {image.shape} and mask {mask.shape} disagree")
    grid = batch[0][0].shape[0] // 4 // _infer_patch(params)
    matrices = decoder_matrices(params, grid)
    loss, grads, _ = _batch_step(batch, params, matrices)
    return loss, grads


def sgd_update(params: ModelParams, grads: dict[str, np.ndarray], lr: float,
               momentum: float) -> ModelParams:
    """v <- momentum*v - lr*g; theta <- theta + v, in fixed name order. In place."""
    for name, theta in params.values.items():
        g = grads.get(name)
        if g is None or g.shape != theta.shape:
            raise ShapeError(f"gradient missing or mis-shaped for parameter {name!r}")
        v = params.momentum[name]
        v[...] = momentum * v - lr * g
        theta += v
    return params


def predict_mask(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary mask: pixel is foreground iff probability >= threshold."""
    return (prob >= threshold).astype(np.float32)


def _fisher_yates(n: int, rng: Rng) -> list[int]:
    """Classic descending Fisher-Yates, one rng draw per index position."""
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(rng.next() * (i + 1))
        order[i], order[j] = order[j], order[i]
    return order


def train(config: ModelConfig, dataset, rng: Rng) -> tuple[ModelParams, TrainTrace]:
    """Minibatch SGD from scratch; returns final parameters and the trace.

    The training Dice of an epoch pools confusion counts of every batch's
    predictions taken just before that batch's update.
    """
    pairs = []
    for rec in dataset:
        image, mask = (rec.image, rec.mask) if hasattr(rec, "image") else rec
        if mask is None:
            raise DataError("training requires a mask for every image")
        s = config.image_size
        if image.shape != (s, s, 3) or mask.shape != (s, s, 1):
            raise ShapeError(f"dataset shapes {image.shape}/{mask.shape} do not match "
                             f"image_size {s}")
        pairs.append((image, mask))
    if not pairs:
        raise DataError("cannot train on an empty dataset")

    params = build_model(config, rng)
    grid = config.image_size // 4 // config.patch
    trace = TrainTrace()
    for epoch in range(1, config.epochs + 1):
        order = _fisher_yates(len(pairs), rng)
        matrices = decoder_matrices(params, grid)
        loss_sum = 0.0
        counts = ConfusionCounts(0, 0, 0, 0)
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            batch = [pairs[i] for i in chunk]
            loss, grads, probs = _batch_step(batch, params, matrices)
            loss_sum += loss * len(batch)
            for prob, (_, mask) in zip(probs, batch):
                counts = counts + confusion_counts(predict_mask(prob, config.threshold), mask)
            sgd_update(params, grads, config.lr, config.momentum)
            matrices = decoder_matrices(params, grid)
        dice = metrics_from_counts(counts).di
        trace.entries.append((epoch, loss_sum / len(pairs), dice))
    return params, trace


META_KEYS = ("image_size", "patch", "rnn_units", "threshold")


def save_model(params: ModelParams, config: ModelConfig, sink) -> int:
    """Write parameters plus the meta.* entries needed to rebuild at load time.

    sink is a binary file-like object or a path.
    """
    entries = dict(params.values)
    for key in META_KEYS:
        entries[f"meta.{key}"] = np.array([getattr(config, key)], dtype=np.float32)
    if hasattr(sink, "write"):
        return save_checkpoint(entries, sink)
    with open(sink, "wb") as fh:
        return save_checkpoint(entries, fh)


def load_model(source) -> tuple[ModelParams, ModelConfig]:
    """Inverse of save_model; the returned config carries only inference fields."""
    if hasattr(source, "read"):
        entries = load_checkpoint(source)
    else:
        with open(source, "rb") as fh:
            entries = load_checkpoint(fh)
    meta: dict[str, float] = {}
    values: dict[str, np.ndarray] = {}
    for name, tensor in entries.items():
        if name.startswith("meta."):
            meta[name[len("meta."):]] = float(tensor.reshape(-1)[0])
        else:
            values[name] = tensor
    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        raise CheckpointError(f"checkpoint lacks meta entries: {', '.join(missing)}")
    if not values:
        raise CheckpointError("checkpoint holds no parameter tensors")
    config = ModelConfig(image_size=int(meta["image_size"]), patch=int(meta["patch"]),
                         rnn_units=int(meta["rnn_units"]), threshold=meta["threshold"])
    return ModelParams(values=values), config
