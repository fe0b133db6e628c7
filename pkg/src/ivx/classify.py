"""Back-end classifiers over auto-encoder codes: linear max-margin and MLP."""

import logging
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .binio import Reader, Writer, check_version
from .errors import ConfigError, DataError, FormatError, NumericError

log = logging.getLogger(__name__)

LINEAR_MAGIC = b"IVXC"
MLP_MAGIC = b"IVXM"
CLF_VERSION = 1


class LabelCodec:
    """Lexicographically ordered label set with one-hot encoding."""

    def __init__(self, labels):
        classes = sorted(set(str(l) for l in labels))
        if not classes:
            raise DataError("label codec needs at least one class")
        self.classes: List[str] = classes
        self._index = {c: i for i, c in enumerate(classes)}

    def __len__(self):
        return len(self.classes)

    def __eq__(self, other):
        return isinstance(other, LabelCodec) and self.classes == other.classes

    def index(self, label) -> int:
        try:
            return self._index[str(label)]
        except KeyError:
            raise DataError(f"unknown label {label!r}; known: {self.classes}") from None

    def indices(self, labels) -> np.ndarray:
        return np.array([self.index(l) for l in labels], dtype=np.int64)


def one_hot(codec: LabelCodec, label) -> np.ndarray:
    v = np.zeros(len(codec))
    v[codec.index(label)] = 1.0
    return v


def inverse(codec: LabelCodec, vector) -> str:
    """Label of the argmax entry (ties resolve to the lowest index)."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (len(codec),):
        raise DataError(f"vector of length {v.size} does not match {len(codec)} classes")
    return codec.classes[int(np.argmax(v))]


@dataclass(frozen=True)
class MlpConfig:
    hidden_dim: int = 64
    learning_rate: float = 0.1
    epochs: int = 500
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim < 1 or self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ConfigError("invalid MLP configuration")


class LinearMarginModel:
    """One-vs-rest linear SVM. Binary problems keep a single row scoring ``classes[1]``."""

    kind = "svm"

    def __init__(self, codec: LabelCodec, weights, bias, reg_c: float):
        self.codec = codec
        self.weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
        self.bias = np.asarray(bias, dtype=np.float64).ravel()
        self.reg_c = float(reg_c)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def score(self, codes) -> np.ndarray:
        x, single = _as_codes(codes, self.dim)
        margins = x @ self.weights.T + self.bias
        if len(self.codec) == 2:
            margins = np.hstack([-margins, margins])
        return margins[0] if single else margins

    def to_bytes(self) -> bytes:
        w = Writer(LINEAR_MAGIC)
        w.u32(CLF_VERSION)
        _write_codec(w, self.codec)
        w.u32(self.weights.shape[0])
        w.u32(self.dim)
        w.f64(self.weights)
        w.f64(self.bias)
        w.f64([self.reg_c])
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "LinearMarginModel":
        r = Reader(data, LINEAR_MAGIC, "linear classifier file")
        check_version(r.u32(), CLF_VERSION, "linear classifier file")
        codec = _read_codec(r)
        rows, dim = r.u32(), r.u32()
        expected = 1 if len(codec) == 2 else len(codec)
        if rows != expected:
            raise FormatError(f"linear classifier file: {rows} weight rows for {len(codec)} classes")
        weights, bias, reg = r.f64(rows, dim), r.f64(rows), r.f64(1)
        r.expect_end()
        return cls(codec, weights, bias, reg[0])


class MlpModel:
    """One sigmoid hidden layer followed by a softmax output layer."""

    kind = "mlp"

    def __init__(self, codec: LabelCodec, w1, b1, w2, b2):
        self.codec = codec
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    def params(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def with_params(self, p) -> "MlpModel":
        shapes = [self.w1.shape, self.b1.shape, self.w2.shape, self.b2.shape]
        parts, pos = [], 0
        for s in shapes:
            n = int(np.prod(s))
            parts.append(np.asarray(p[pos:pos + n]).reshape(s).copy())
            pos += n
        return MlpModel(self.codec, *parts)

    def logits(self, x: np.ndarray):
        h = expit(x @ self.w1.T + self.b1)
        return h, h @ self.w2.T + self.b2

    def score(self, codes) -> np.ndarray:
        x, single = _as_codes(codes, self.dim)
        probs = softmax(self.logits(x)[1], axis=1)
        return probs[0] if single else probs

    def to_bytes(self) -> bytes:
        w = Writer(MLP_MAGIC)
        w.u32(CLF_VERSION)
        _write_codec(w, self.codec)
        w.u32(self.dim)
        w.u32(self.hidden_dim)
        for arr in (self.w1, self.b1, self.w2, self.b2):
            w.f64(arr)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, hidden_dim: int = None) -> "MlpModel":
        r = Reader(data, MLP_MAGIC, "MLP file")
        check_version(r.u32(), CLF_VERSION, "MLP file")
        codec = _read_codec(r)
        dim, hidden = r.u32(), r.u32()
        if hidden_dim is not None and hidden != hidden_dim:
            raise FormatError(f"MLP file has hidden dim {hidden}, expected {hidden_dim}")
        k = len(codec)
        model = cls(codec, r.f64(hidden, dim), r.f64(hidden), r.f64(k, hidden), r.f64(k))
        r.expect_end()
        return model


def _write_codec(w: Writer, codec: LabelCodec) -> None:
    w.u32(len(codec))
    for c in codec.classes:
        w.text(c)


def _read_codec(r: Reader) -> LabelCodec:
    classes = [r.text() for _ in range(r.u32())]
    codec = LabelCodec(classes)
    if codec.classes != classes:
        raise FormatError("class list in file is not sorted/unique")
    return codec


def _as_codes(codes, dim: int):
    x = np.asarray(codes, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != dim:
        raise DataError(f"code length {x.shape[1]} does not match classifier input dim {dim}")
    return x, single


def _prepare(codes, labels):
    x = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    labels = [str(l) for l in labels]
    if x.shape[0] != len(labels):
        raise DataError(f"{x.shape[0]} codes but {len(labels)} labels")
    codec = LabelCodec(labels)
    if len(codec) < 2:
        raise DataError("classifier training needs at least two classes")
    return x, codec, codec.indices(labels)


def score(model, code) -> np.ndarray:
    return model.score(code)


def predict(model, code):
    """Argmax label; a single vector yields one label, rows yield a list."""
    s = model.score(code)
    if s.ndim == 1:
        return model.codec.classes[int(np.argmax(s))]
    return [model.codec.classes[i] for i in np.argmax(s, axis=1)]


# -- linear max-margin -----------------------------------------------------

def hinge_objective(w, b, x, y, lam) -> float:
    """``lam/2 (|w|^2 + b^2) + mean(max(0, 1 - y (w.x + b)))`` with y in {-1, +1}."""
    return _aug_objective(np.append(w, b), np.hstack([x, np.ones((x.shape[0], 1))]), y, lam)


def _train_binary_hinge(x, y, lam, epochs):
    """Full-batch subgradient descent with step 1/(lam t); keeps the best iterate.

    The bias rides along as a constant input feature, so it is regularized
    and covered by the projection onto the ball of radius 1/sqrt(lam).
    Subgradient steps are not descent steps, so the returned trace is the
    best objective seen so far.
    """
    xa = np.hstack([x, np.ones((x.shape[0], 1))])
    n, d = xa.shape
    w = np.zeros(d)
    best = (_aug_objective(w, xa, y, lam), w.copy())
    trace = [best[0]]
    radius = 1.0 / np.sqrt(lam)
    for t in range(1, epochs + 1):
        active = y * (xa @ w) < 1.0
        grad = lam * w - (y[active, None] * xa[active]).sum(axis=0) / n
        w = w - grad / (lam * t)
        norm = np.linalg.norm(w)
        if norm > radius:
            w *= radius / norm
        obj = _aug_objective(w, xa, y, lam)
        if obj < best[0]:
            best = (obj, w.copy())
        trace.append(best[0])
    return best[1][:-1], float(best[1][-1]), trace


def _aug_objective(w, xa, y, lam) -> float:
    return 0.5 * lam * float(w @ w) + float(np.mean(np.maximum(0.0, 1.0 - y * (xa @ w))))


def train_linear_margin(codes, labels, reg_c: float = 1.0, epochs: int = 200, seed: int = 0):
    """One-vs-rest L2-regularized hinge loss, regularization ``1/(reg_c * n)``.

    ``seed`` is accepted for interface symmetry; full-batch training is
    deterministic. Returns ``(model, traces)`` with one objective trace
    per trained row.
    """
    if reg_c <= 0:
        raise ConfigError(f"reg_c must be positive, got {reg_c}")
    x, codec, idx = _prepare(codes, labels)
    lam = 1.0 / (reg_c * x.shape[0])
    targets = [1] if len(codec) == 2 else list(range(len(codec)))
    rows, biases, traces = [], [], []
    for k in targets:
        y = np.where(idx == k, 1.0, -1.0)
        w, b, trace = _train_binary_hinge(x, y, lam, epochs)
        rows.append(w)
        biases.append(b)
        traces.append(trace)
    return LinearMarginModel(codec, np.vstack(rows), np.array(biases), reg_c), traces


# -- MLP -------------------------------------------------------------------

def cross_entropy(model: MlpModel, x, idx, weight_decay: float = 0.0) -> float:
    _, z = model.logits(x)
    nll = -float(np.mean(log_softmax(z, axis=1)[np.arange(x.shape[0]), idx]))
    return nll + 0.5 * weight_decay * float(np.sum(model.w1**2) + np.sum(model.w2**2))


def mlp_gradient(model: MlpModel, x, idx, weight_decay: float = 0.0):
    """Exact gradient of :func:`cross_entropy` as ``(dw1, db1, dw2, db2)``."""
    n = x.shape[0]
    h, z = model.logits(x)
    delta2 = softmax(z, axis=1)
    delta2[np.arange(n), idx] -= 1.0
    delta2 /= n
    dw2 = delta2.T @ h + weight_decay * model.w2
    db2 = delta2.sum(axis=0)
    delta1 = (delta2 @ model.w2) * h * (1.0 - h)
    dw1 = delta1.T @ x + weight_decay * model.w1
    db1 = delta1.sum(axis=0)
    return dw1, db1, dw2, db2


def init_mlp(codec: LabelCodec, dim: int, hidden_dim: int, seed: int = 0) -> MlpModel:
    rng = np.random.default_rng(seed)
    l1 = np.sqrt(6.0 / (dim + hidden_dim))
    l2 = np.sqrt(6.0 / (hidden_dim + len(codec)))
    return MlpModel(codec, rng.uniform(-l1, l1, (hidden_dim, dim)), np.zeros(hidden_dim),
                    rng.uniform(-l2, l2, (len(codec), hidden_dim)), np.zeros(len(codec)))


def train_mlp(codes, labels, cfg: MlpConfig = MlpConfig()):
    """Mini-batch gradient descent on softmax cross-entropy. Returns ``(model, trace)``."""
    x, codec, idx = _prepare(codes, labels)
    model = init_mlp(codec, x.shape[1], cfg.hidden_dim, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    initial = cross_entropy(model, x, idx, cfg.weight_decay)
    trace = [initial]
    for epoch in range(cfg.epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            grads = mlp_gradient(model, x[sel], idx[sel], cfg.weight_decay)
            model = MlpModel(codec, *(p - cfg.learning_rate * g for p, g in
                                      zip((model.w1, model.b1, model.w2, model.b2), grads)))
        loss = cross_entropy(model, x, idx, cfg.weight_decay)
        if not np.isfinite(loss) or loss > 1e6 * max(initial, 1e-12):
            raise NumericError(f"MLP training diverged at epoch {epoch + 1}: loss {loss:.3e}")
        trace.append(loss)
    return model, np.asarray(trace)


# -- persistence -----------------------------------------------------------

def save_classifier(path, model) -> None:
    with open(path, "wb") as fh:
        fh.write(model.to_bytes())


def load_classifier(path, hidden_dim: int = None):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == LINEAR_MAGIC:
        return LinearMarginModel.from_bytes(data)
    if data[:4] == MLP_MAGIC:
        return MlpModel.from_bytes(data, hidden_dim)
    raise FormatError(f"{path}: not a classifier file (magic {data[:4]!r})")
