"""Stacked-LSTM journey model over CNN phrase embeddings.

One shared character-level encoder embeds both the search-keyword phrase
(step 0) and every page name; the LSTM stack threads state left to right
and a fully connected + softmax head emits, at each step, a distribution
over all page classes (including the terminal NULL page) for the next step.

Inference exposes an incremental (start / step) interface so simulations can
feed sampled pages back in without re-running the whole prefix.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ShapeError
from .journeydata import PageVocabulary, Session, replicate_dwell
from .numerics import Matrix
from .textenc import DEFAULT_ALPHABET, Alphabet, CnnEncoder

CHECKPOINT_FORMAT = "journeynet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    alphabet: str = DEFAULT_ALPHABET
    max_len: int = 64
    conv_stages: tuple[tuple[int, int, int], ...] = ((3, 64, 4), (3, 64, 4))
    lstm_hidden: tuple[int, ...] = (128, 128)
    fc_width: int = 256
    dropout_rate: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "conv_stages", tuple(tuple(s) for s in self.conv_stages))
        object.__setattr__(self, "lstm_hidden", tuple(self.lstm_hidden))
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not self.conv_stages or not self.lstm_hidden:
            raise ValueError("need at least one conv stage and one LSTM layer")

    def to_dict(self) -> dict:
        return {
            "alphabet": self.alphabet,
            "max_len": self.max_len,
            "conv_stages": [list(s) for s in self.conv_stages],
            "lstm_hidden": list(self.lstm_hidden),
            "fc_width": self.fc_width,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            alphabet=d["alphabet"],
            max_len=int(d["max_len"]),
            conv_stages=tuple(tuple(int(v) for v in s) for s in d["conv_stages"]),
            lstm_hidden=tuple(int(v) for v in d["lstm_hidden"]),
            fc_width=int(d["fc_width"]),
            dropout_rate=float(d["dropout_rate"]),
        )


class LstmLayer:
    """One LSTM layer; gates are packed (input, forget, candidate, output)."""

    def __init__(self, wx: Matrix, wh: Matrix, bias: Matrix):
        if wx.cols != wh.cols or wh.cols != bias.cols or wh.cols % 4:
            raise ShapeError("LSTM weight shapes are inconsistent")
        if wh.rows * 4 != wh.cols:
            raise ShapeError(
                f"recurrent weights must be H x 4H, got {wh.shape}"
            )
        self.wx = wx
        self.wh = wh
        self.bias = bias
        self.hidden_size = wh.rows
        self.input_dim = wx.rows

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator) -> "LstmLayer":
        def glorot(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        wx = nm.parameter(glorot(input_dim, 4 * hidden))
        wh = nm.parameter(glorot(hidden, 4 * hidden))
        b = np.zeros((1, 4 * hidden))
        b[0, hidden:2 * hidden] = 1.0  # forget gate starts open
        return cls(wx, wh, nm.parameter(b))

    def step(self, x: Matrix, h: Matrix, c: Matrix) -> tuple[Matrix, Matrix]:
        """One cell update: returns (new hidden, new cell)."""
        if x.cols != self.input_dim:
            raise ShapeError(f"input width {x.cols} != layer input dim {self.input_dim}")
        hs = self.hidden_size
        gates = nm.add(nm.add(nm.matmul(x, self.wx), nm.matmul(h, self.wh)), self.bias)
        i = nm.sigmoid(nm.slice_cols(gates, 0, hs))
        f = nm.sigmoid(nm.slice_cols(gates, hs, 2 * hs))
        g = nm.tanh(nm.slice_cols(gates, 2 * hs, 3 * hs))
        o = nm.sigmoid(nm.slice_cols(gates, 3 * hs, 4 * hs))
        c2 = nm.add(nm.mul(f, c), nm.mul(i, g))
        h2 = nm.mul(o, nm.tanh(c2))
        return h2, c2


def lstm_step(layer: LstmLayer, x: Matrix, state: tuple[Matrix, Matrix]) -> tuple[Matrix, tuple[Matrix, Matrix]]:
    """Functional wrapper over LstmLayer.step returning (output, new state)."""
    h2, c2 = layer.step(x, state[0], state[1])
    return h2, (h2, c2)


@dataclass
class LstmState:
    """Per-layer (hidden, cell) pairs; a fresh state is all zeros."""

    layers: list[tuple[Matrix, Matrix]]

    @classmethod
    def zeros(cls, hidden_sizes, batch: int) -> "LstmState":
        return cls(
            [
                (nm.constant(np.zeros((batch, h))), nm.constant(np.zeros((batch, h))))
                for h in hidden_sizes
            ]
        )


@dataclass(frozen=True)
class StepPrediction:
    """Distribution over the next page, emitted after consuming input step t."""

    step: int
    probs: np.ndarray


class SequenceModel:
    """CNN phrase encoder + stacked LSTM + fully connected softmax head."""

    def __init__(
        self,
        encoder: CnnEncoder,
        layers: list[LstmLayer],
        w_fc: Matrix,
        b_fc: Matrix,
        w_out: Matrix,
        b_out: Matrix,
        vocab: PageVocabulary,
        config: ModelConfig,
    ):
        self.encoder = encoder
        self.layers = layers
        self.w_fc = w_fc
        self.b_fc = b_fc
        self.w_out = w_out
        self.b_out = b_out
        self.vocab = vocab
        self.config = config
        if w_out.cols != len(vocab):
            raise ShapeError(
                f"softmax width {w_out.cols} != vocabulary size {len(vocab)}"
            )
        self.weights_version = 0
        self._embed_cache: dict[str, Matrix] = {}
        self._embed_cache_version = -1

    @classmethod
    def build(cls, config: ModelConfig, vocab: PageVocabulary, seed: int) -> "SequenceModel":
        from . import rng as rngmod

        gen = rngmod.stream(seed, "model-init")
        encoder = CnnEncoder.build(
            Alphabet(config.alphabet), config.max_len, list(config.conv_stages), gen
        )

        def glorot(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return nm.parameter(gen.uniform(-limit, limit, size=(fan_in, fan_out)))

        layers = []
        in_dim = encoder.embedding_dim
        for hidden in config.lstm_hidden:
            layers.append(LstmLayer.init(in_dim, hidden, gen))
            in_dim = hidden
        w_fc = glorot(in_dim, config.fc_width)
        b_fc = nm.parameter(np.zeros((1, config.fc_width)))
        w_out = glorot(config.fc_width, len(vocab))
        b_out = nm.parameter(np.zeros((1, len(vocab))))
        return cls(encoder, layers, w_fc, b_fc, w_out, b_out, vocab, config)

    @property
    def n_classes(self) -> int:
        return len(self.vocab)

    def parameters(self) -> list[tuple[str, Matrix]]:
        named = list(self.encoder.parameters())
        for i, layer in enumerate(self.layers):
            named.append((f"lstm{i}.wx", layer.wx))
            named.append((f"lstm{i}.wh", layer.wh))
            named.append((f"lstm{i}.bias", layer.bias))
        named += [
            ("fc.weight", self.w_fc),
            ("fc.bias", self.b_fc),
            ("out.weight", self.w_out),
            ("out.bias", self.b_out),
        ]
        return named

    # -- forward pieces ----------------------------------------------------

    def zero_state(self, batch: int) -> LstmState:
        return LstmState.zeros([l.hidden_size for l in self.layers], batch)

    def cell_steps(self, x: Matrix, state: LstmState) -> tuple[Matrix, LstmState]:
        """Push one input through the LSTM stack; returns (top hidden, new state)."""
        new_layers = []
        h = x
        for layer, (h_prev, c_prev) in zip(self.layers, state.layers):
            h, c = layer.step(h, h_prev, c_prev)
            new_layers.append((h, c))
        return h, LstmState(new_layers)

    def head(self, h: Matrix, dropout_rng: np.random.Generator | None = None) -> Matrix:
        """Fully connected ReLU layer, optional dropout, softmax over classes."""
        fc = nm.relu(nm.add(nm.matmul(h, self.w_fc), self.b_fc))
        if dropout_rng is not None and self.config.dropout_rate > 0:
            fc = nm.dropout(fc, self.config.dropout_rate, dropout_rng)
        logits = nm.add(nm.matmul(fc, self.w_out), self.b_out)
        return nm.softmax(logits)

    def embed_phrases(self, phrases: list[str]) -> Matrix:
        """Stack per-phrase embeddings into a len(phrases) x E matrix."""
        return nm.vstack([self.encoder.embed(p) for p in phrases])

    def batch_step_probs(
        self,
        phrases: list[str],
        rowidx: np.ndarray,
        dropout_rng: np.random.Generator | None = None,
    ) -> list[Matrix]:
        """Per-step batch x classes distributions for a padded batch.

        `rowidx[b, t]` selects the row of `phrases` fed to sequence b at step
        t; predictions at padding steps are garbage and must be masked by the
        caller.
        """
        emb = self.embed_phrases(phrases)
        state = self.zero_state(rowidx.shape[0])
        out = []
        for t in range(rowidx.shape[1]):
            x = nm.take_rows(emb, rowidx[:, t])
            h, state = self.cell_steps(x, state)
            out.append(self.head(h, dropout_rng))
        return out

    def _embed_cached(self, phrase: str) -> Matrix:
        if self._embed_cache_version != self.weights_version:
            self._embed_cache = {}
            self._embed_cache_version = self.weights_version
        hit = self._embed_cache.get(phrase)
        if hit is None:
            hit = self.encoder.embed(phrase)
            self._embed_cache[phrase] = hit
        return hit

    # -- whole-session paths -------------------------------------------------

    def session_probs(
        self,
        phrases: list[str],
        dropout_rng: np.random.Generator | None = None,
    ) -> list[Matrix]:
        """Per-step next-page distributions (1 x N rows) for one input sequence."""
        if not phrases:
            raise ValueError("input sequence must be non-empty")
        state = self.zero_state(1)
        out = []
        for phrase in phrases:
            x = self.encoder.embed(phrase)
            h, state = self.cell_steps(x, state)
            out.append(self.head(h, dropout_rng))
        return out

    def forward_session(self, phrases: list[str]) -> list[StepPrediction]:
        """Inference pass: one StepPrediction per input step (dropout off)."""
        return [
            StepPrediction(t, m.data[0].copy())
            for t, m in enumerate(self.session_probs(phrases))
        ]

    def session_nll(
        self,
        inputs: list[str],
        targets: list[int],
        dropout_rng: np.random.Generator | None = None,
    ) -> Matrix:
        """Summed cross-entropy of `targets` under the per-step predictions."""
        if len(inputs) != len(targets):
            raise ValueError(
                f"{len(inputs)} inputs vs {len(targets)} targets"
            )
        probs = self.session_probs(inputs, dropout_rng)
        total = nm.cross_entropy(probs[0], targets[0])
        for p, t in zip(probs[1:], targets[1:]):
            total = nm.add(total, nm.cross_entropy(p, t))
        return total

    # -- incremental inference (simulation protocol) -------------------------

    def start(self, prefix) -> tuple[LstmState, np.ndarray]:
        """Consume keywords + visited pages; return (state, next-page distribution).

        `prefix` needs `.keywords` (text, possibly empty) and `.pages`
        (iterable of page names).
        """
        phrases = [prefix.keywords] + list(prefix.pages)
        state = self.zero_state(1)
        dist = None
        for phrase in phrases:
            h, state = self.cell_steps(self._embed_cached(phrase), state)
            dist = self.head(h)
        return state, dist.data[0].copy()

    def step(self, state: LstmState, page_index: int) -> tuple[LstmState, np.ndarray]:
        """Feed one sampled page in; return (new state, next distribution)."""
        phrase = self.vocab.decode(page_index)
        h, state = self.cell_steps(self._embed_cached(phrase), state)
        return state, self.head(h).data[0].copy()


def predict_next(model, prefix) -> np.ndarray:
    """Distribution over the page following `prefix` (includes NULL page)."""
    return model.start(prefix)[1]


def session_loss(
    predictions: list[StepPrediction],
    session: Session,
    vocab: PageVocabulary,
    unit_seconds: float = 30.0,
    cap: int = 5,
) -> float:
    """Summed next-page cross-entropy (nats) of a session under `predictions`.

    The target sequence is the dwell-expanded page list followed by the NULL
    page; `predictions` must contain exactly one entry per target.
    """
    pages = replicate_dwell(session, unit_seconds, cap)
    targets = [vocab.encode(p) for p in pages]
    if len(predictions) != len(targets):
        raise ValueError(
            f"{len(predictions)} predictions for {len(targets)} transition targets"
        )
    total = 0.0
    for pred, target in zip(predictions, targets):
        probs = pred.probs if isinstance(pred, StepPrediction) else np.asarray(pred)
        total += -np.log(max(float(probs[target]), nm.PROB_FLOOR))
    return total


# ---------------------------------------------------------------------------
# checkpointing


def _encode_array(data: np.ndarray) -> dict:
    return {
        "shape": list(data.shape),
        "data": base64.b64encode(np.ascontiguousarray(data, dtype="<f8").tobytes()).decode(),
    }


def _decode_array(d: dict) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").copy()
    return arr.reshape(d["shape"])


def model_to_dict(model: SequenceModel) -> dict:
    return {
        "config": model.config.to_dict(),
        "vocab": model.vocab.to_dict(),
        "weights": {name: _encode_array(p.data) for name, p in model.parameters()},
    }


def model_from_dict(d: dict) -> SequenceModel:
    config = ModelConfig.from_dict(d["config"])
    vocab = PageVocabulary.from_dict(d["vocab"])
    model = SequenceModel.build(config, vocab, seed=0)
    weights = d["weights"]
    for name, p in model.parameters():
        if name not in weights:
            raise ValueError(f"checkpoint is missing weights for {name!r}")
        arr = _decode_array(weights[name])
        if tuple(arr.shape) != p.shape:
            raise ShapeError(
                f"checkpoint weight {name!r} has shape {tuple(arr.shape)}, expected {p.shape}"
            )
        p.data[...] = arr
    model.weights_version += 1
    return model


def save_model(model: SequenceModel, path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model_to_dict(model),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> SequenceModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return model_from_dict(payload["model"])
