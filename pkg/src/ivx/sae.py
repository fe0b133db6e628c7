"""Undercomplete stacked auto-encoder with exact backpropagation.

Weights are stored as ``out x in`` matrices so a layer computes
``act(W @ x + b)``; batches are processed as rows.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.special import expit

from .binio import Reader, Writer, check_version
from .errors import ConfigError, DataError, FormatError, NumericError

log = logging.getLogger(__name__)

SAE_MAGIC = b"IVXA"
SAE_VERSION = 1

SIGMOID = "sigmoid"
IDENTITY = "identity"
_ACT_TAGS = {SIGMOID: 0, IDENTITY: 1}
_TAG_ACTS = {v: k for k, v in _ACT_TAGS.items()}


def activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == SIGMOID:
        return expit(a)
    if name == IDENTITY:
        return a
    raise ConfigError(f"unknown activation {name!r}")


def activation_grad(name: str, out: np.ndarray) -> np.ndarray:
    """Derivative expressed through the activation's output."""
    if name == SIGMOID:
        return out * (1.0 - out)
    return np.ones_like(out)


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = SIGMOID

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"layer dims must be >= 1, got {self.in_dim}->{self.out_dim}")
        if self.activation not in _ACT_TAGS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True, eq=False)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = SIGMOID

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec(self.weight.shape[1], self.weight.shape[0], self.activation)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    pretrain_epochs: int = 100

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("learning rate and epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")


@dataclass(frozen=True, eq=False)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, data) -> "Standardizer":
        x = np.atleast_2d(np.asarray(data, dtype=np.float64))
        scale = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(scale > 1e-12, scale, 1.0))

    def apply(self, data) -> np.ndarray:
        return (np.asarray(data, dtype=np.float64) - self.mean) / self.scale


@dataclass(frozen=True, eq=False)
class SaeModel:
    """Encoder layers plus a mirrored decoder.

    With ``tied`` set, decoder layer ``k`` uses the transpose of encoder
    layer ``n-1-k`` and its stored weight is ignored.
    """

    encoder: List[Layer]
    decoder: List[Layer]
    tied: bool = False
    standardizer: Optional[Standardizer] = field(default=None, compare=False)

    def __post_init__(self):
        enc = [l.spec for l in self.encoder]
        dec = [l.spec for l in self.decoder]
        if not enc or len(enc) != len(dec):
            raise ConfigError("encoder and decoder must be non-empty and of equal depth")
        for a, b in zip(enc, enc[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigError(f"encoder layers do not chain: {a.out_dim} -> {b.in_dim}")
        for a, b in zip(enc, reversed(dec)):
            if (a.in_dim, a.out_dim) != (b.out_dim, b.in_dim):
                raise ConfigError("decoder does not mirror the encoder")
        if enc[-1].out_dim >= enc[0].in_dim:
            raise ConfigError(
                f"code dim {enc[-1].out_dim} must be smaller than input dim {enc[0].in_dim} (undercomplete)"
            )
        for layer in self.encoder + self.decoder:
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise NumericError("auto-encoder weights must be finite")

    @property
    def input_dim(self) -> int:
        return self.encoder[0].weight.shape[1]

    @property
    def code_dim(self) -> int:
        return self.encoder[-1].weight.shape[0]

    @property
    def architecture(self) -> List[int]:
        return [self.input_dim] + [l.weight.shape[0] for l in self.encoder + self.decoder]

    def decoder_weight(self, k: int) -> np.ndarray:
        if self.tied:
            return self.encoder[len(self.encoder) - 1 - k].weight.T
        return self.decoder[k].weight

    def layers(self):
        """(weight, bias, activation) for all layers in evaluation order."""
        out = [(l.weight, l.bias, l.activation) for l in self.encoder]
        out += [(self.decoder_weight(k), l.bias, l.activation) for k, l in enumerate(self.decoder)]
        return out

    # flat parameter view: encoder (W, b) pairs, then decoder biases and untied weights
    def get_params(self) -> np.ndarray:
        parts = []
        for layer in self.encoder:
            parts += [layer.weight.ravel(), layer.bias]
        for layer in self.decoder:
            if not self.tied:
                parts.append(layer.weight.ravel())
            parts.append(layer.bias)
        return np.concatenate(parts)

    def with_params(self, params) -> "SaeModel":
        params = np.asarray(params, dtype=np.float64)
        expected = self.get_params().size
        if params.size != expected:
            raise DataError(f"parameter vector has {params.size} entries, model needs {expected}")
        pos = 0

        def take(shape):
            nonlocal pos
            n = int(np.prod(shape))
            chunk = params[pos:pos + n].reshape(shape)
            pos += n
            return chunk.copy()

        enc = []
        for layer in self.encoder:
            w = take(layer.weight.shape)
            enc.append(Layer(w, take(layer.bias.shape), layer.activation))
        dec = []
        for layer in self.decoder:
            w = layer.weight if self.tied else take(layer.weight.shape)
            dec.append(Layer(w, take(layer.bias.shape), layer.activation))
        return replace(self, encoder=enc, decoder=dec)


def _init_layer(spec: LayerSpec, rng) -> Layer:
    limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
    return Layer(rng.uniform(-limit, limit, size=(spec.out_dim, spec.in_dim)), np.zeros(spec.out_dim),
                 spec.activation)


def check_undercomplete(specs) -> None:
    if not specs:
        raise ConfigError("need at least one encoder layer")
    for a, b in zip(specs, specs[1:]):
        if a.out_dim != b.in_dim:
            raise ConfigError(f"encoder layers do not chain: {a.out_dim} -> {b.in_dim}")
    for s in specs:
        if s.out_dim >= s.in_dim:
            raise ConfigError(f"layer {s.in_dim}->{s.out_dim} is not compressive; dims must strictly decrease")


def build_model(specs, seed: int = 0, output_activation: str = IDENTITY, tied: bool = False) -> SaeModel:
    """Freshly initialized symmetric model for the given encoder specs.

    Decoder layer ``k`` reuses the activation of encoder layer ``n-2-k``
    (the layer whose output it reconstructs); the final layer uses
    ``output_activation``.
    """
    specs = list(specs)
    check_undercomplete(specs)
    rng = np.random.default_rng(seed)
    encoder = [_init_layer(s, rng) for s in specs]
    decoder = []
    for k, s in enumerate(reversed(specs)):
        act = output_activation if k == len(specs) - 1 else specs[len(specs) - 2 - k].activation
        decoder.append(_init_layer(LayerSpec(s.out_dim, s.in_dim, act), rng))
    return SaeModel(encoder, decoder, tied)


def parse_layer_sizes(input_dim: int, sizes, activation: str = SIGMOID) -> List[LayerSpec]:
    dims = [int(input_dim)] + [int(s) for s in sizes]
    return [LayerSpec(a, b, activation) for a, b in zip(dims, dims[1:])]


# -- forward / loss / gradient ---------------------------------------------

def _as_batch(model: SaeModel, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.input_dim:
        raise DataError(f"input length {x.shape[1]} does not match auto-encoder input dim {model.input_dim}")
    return x, single


def _activations(model: SaeModel, x: np.ndarray):
    outs = [x]
    for w, b, act in model.layers():
        outs.append(activate(act, outs[-1] @ w.T + b))
    return outs


def forward(model: SaeModel, x):
    """Return ``(code, reconstruction)`` for one vector or a batch of rows."""
    x, single = _as_batch(model, x)
    outs = _activations(model, x)
    z, recon = outs[len(model.encoder)], outs[-1]
    return (z[0], recon[0]) if single else (z, recon)


def encode(model: SaeModel, v) -> np.ndarray:
    return forward(model, v)[0]


def reconstruction_loss(model: SaeModel, batch) -> float:
    """Mean over samples of the squared Euclidean reconstruction error."""
    x, _ = _as_batch(model, batch)
    recon = _activations(model, x)[-1]
    return float(np.mean(np.sum((x - recon) ** 2, axis=1)))


def gradient(model: SaeModel, batch):
    """Exact gradient of :func:`reconstruction_loss`.

    Returns a list aligned with :meth:`SaeModel.layers` of ``(dW, db)``;
    for tied models the decoder ``dW`` entries are ``None`` and their
    contribution is folded into the matching encoder weight.
    """
    x, _ = _as_batch(model, batch)
    outs = _activations(model, x)
    layers = model.layers()
    n_enc = len(model.encoder)
    delta = 2.0 * (outs[-1] - x) / x.shape[0]
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _, act = layers[i]
        delta = delta * activation_grad(act, outs[i + 1])
        grads[i] = [delta.T @ outs[i], delta.sum(axis=0)]
        delta = delta @ w
    if model.tied:
        for k in range(len(model.decoder)):
            grads[n_enc - 1 - k][0] += grads[n_enc + k][0].T
            grads[n_enc + k][0] = None
    return [tuple(g) for g in grads]


def flatten_gradient(model: SaeModel, grads) -> np.ndarray:
    """Gradient in the layout of :meth:`SaeModel.get_params`."""
    parts = []
    for dw, db in grads:
        if dw is not None:
            parts.append(dw.ravel())
        parts.append(db)
    return np.concatenate(parts)


# -- training --------------------------------------------------------------

def _apply_step(model: SaeModel, grads, lr: float) -> SaeModel:
    n_enc = len(model.encoder)
    enc = [Layer(l.weight - lr * grads[i][0], l.bias - lr * grads[i][1], l.activation)
           for i, l in enumerate(model.encoder)]
    dec = []
    for k, l in enumerate(model.decoder):
        dw, db = grads[n_enc + k]
        dec.append(Layer(l.weight if dw is None else l.weight - lr * dw, l.bias - lr * db, l.activation))
    return replace(model, encoder=enc, decoder=dec)


def finetune(model: SaeModel, data, cfg: TrainConfig = TrainConfig(), epochs: int = None):
    """Mini-batch gradient descent on the full reconstruction loss.

    Returns ``(model, trace)``; ``trace[0]`` is the loss before training
    and ``trace[e]`` the full-data loss after epoch ``e``.
    """
    x, _ = _as_batch(model, data)
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed)
    initial = reconstruction_loss(model, x)
    trace = [initial]
    limit = 1e6 * max(initial, 1e-12)
    for epoch in range(epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], cfg.batch_size):
            batch = x[order[start:start + cfg.batch_size]]
            model = _apply_step(model, gradient(model, batch), cfg.learning_rate)
        loss = reconstruction_loss(model, x)
        if not np.isfinite(loss) or loss > limit:
            raise NumericError(
                f"auto-encoder training diverged at epoch {epoch + 1}: loss {loss:.3e} "
                f"(initial {initial:.3e}, learning rate {cfg.learning_rate})"
            )
        trace.append(loss)
    log.debug("finetune: loss %.6f -> %.6f over %d epochs", trace[0], trace[-1], epochs)
    return model, np.asarray(trace)


def pretrain_layerwise(specs, data, cfg: TrainConfig = TrainConfig(), output_activation: str = IDENTITY,
                       tied: bool = False) -> SaeModel:
    """Greedy layer-wise pretraining, then stacking into a symmetric model.

    Layer ``k`` is trained as a one-hidden-layer auto-encoder on the codes
    produced by layers ``< k``.
    """
    specs = list(specs)
    check_undercomplete(specs)
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if x.shape[1] != specs[0].in_dim:
        raise DataError(f"data dim {x.shape[1]} does not match first layer input {specs[0].in_dim}")
    encoder, decoder = [], []
    h = x
    recon_act = output_activation
    for k, spec in enumerate(specs):
        sub = build_model([spec], seed=cfg.seed + k, output_activation=recon_act, tied=tied)
        sub, trace = finetune(sub, h, replace(cfg, seed=cfg.seed + k), epochs=cfg.pretrain_epochs)
        log.info("pretrained layer %d (%d->%d): loss %.5f", k + 1, spec.in_dim, spec.out_dim, trace[-1])
        encoder.append(sub.encoder[0])
        dec = sub.decoder[0]
        if tied:
            dec = Layer(sub.encoder[0].weight.T.copy(), dec.bias, dec.activation)
        decoder.insert(0, dec)
        h = encode(sub, h)
        recon_act = spec.activation
    return SaeModel(encoder, decoder, tied)


def train_sae(data, layer_sizes, cfg: TrainConfig = TrainConfig(), activation: str = SIGMOID,
              standardize: bool = True, tied: bool = False):
    """Standardize, pretrain layer-wise, fine-tune. Returns ``(model, trace)``."""
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    std = Standardizer.fit(x) if standardize else None
    xs = std.apply(x) if std else x
    specs = parse_layer_sizes(x.shape[1], layer_sizes, activation)
    model = pretrain_layerwise(specs, xs, cfg, tied=tied)
    model, trace = finetune(model, xs, cfg)
    return replace(model, standardizer=std), trace


def encode_raw(model: SaeModel, v) -> np.ndarray:
    """Encode un-standardized vectors using the model's stored standardizer."""
    v = np.asarray(v, dtype=np.float64)
    return encode(model, model.standardizer.apply(v) if model.standardizer else v)


# -- persistence -----------------------------------------------------------

def sae_to_bytes(model: SaeModel) -> bytes:
    w = Writer(SAE_MAGIC)
    w.u32(SAE_VERSION)
    layers = model.encoder + model.decoder
    w.u32(len(layers))
    w.u32(int(model.tied))
    n_enc = len(model.encoder)
    for i, layer in enumerate(layers):
        w.u32(layer.weight.shape[1])
        w.u32(layer.weight.shape[0])
        w.u32(_ACT_TAGS[layer.activation])
        if not (model.tied and i >= n_enc):
            w.f64(layer.weight)
        w.f64(layer.bias)
    if model.standardizer is None:
        w.u32(0)
    else:
        w.u32(1)
        w.f64(model.standardizer.mean)
        w.f64(model.standardizer.scale)
    return w.getvalue()


def sae_from_bytes(data: bytes) -> SaeModel:
    r = Reader(data, SAE_MAGIC, "auto-encoder file")
    check_version(r.u32(), SAE_VERSION, "auto-encoder file")
    n_layers, tied = r.u32(), bool(r.u32())
    if n_layers < 2 or n_layers % 2:
        raise FormatError(f"auto-encoder file: layer count {n_layers} is not a positive even number")
    n_enc = n_layers // 2
    layers = []
    for i in range(n_layers):
        in_dim, out_dim, tag = r.u32(), r.u32(), r.u32()
        if tag not in _TAG_ACTS:
            raise FormatError(f"auto-encoder file: unknown activation tag {tag}")
        if tied and i >= n_enc:
            weight = layers[n_layers - 1 - i].weight.T.copy()
        else:
            weight = r.f64(out_dim, in_dim)
        layers.append(Layer(weight, r.f64(out_dim), _TAG_ACTS[tag]))
    std = None
    if r.u32():
        dim = layers[0].weight.shape[1]
        std = Standardizer(r.f64(dim), r.f64(dim))
    r.expect_end()
    return SaeModel(layers[:n_enc], layers[n_enc:], tied, std)


def save_sae(path, model: SaeModel) -> None:
    with open(path, "wb") as fh:
        fh.write(sae_to_bytes(model))


def load_sae(path) -> SaeModel:
    with open(path, "rb") as fh:
        return sae_from_bytes(fh.read())
