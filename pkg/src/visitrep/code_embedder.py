"""Visit-sequence code embedder.

A patient's visits become a sequence of multi-hot code vectors. Each vector
is projected onto d_code dimensions (a multi-hot input makes the projection
a sum of per-code embedding rows), sinusoidal position terms are added, and
a stack of causally masked multi-head self-attention blocks mixes history
into each position. Training maximizes a visit-level skip-gram objective:
the output head at visit t predicts, per code, the codes of the visits
within a +-window around t, scored with binary cross-entropy.

Position t's output never depends on visits after t: the attention mask is
the only mixer across positions and it zeroes future (and padding) keys
exactly, so perturbing later visits leaves earlier outputs bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nm
from .checkpoint import expect_kind, expect_vocab_hash, read_checkpoint, write_checkpoint
from .cohort import Cohort, CodeVocabulary, encode_visit_codes
from .errors import ValidationError
from .numerics import Parameter, Tensor, TrainHistory


@dataclass(frozen=True)
class CodeEmbedderConfig:
    d_code: int = 128
    n_layers: int = 2
    n_heads: int = 8
    d_head: int = 64
    window: int = 2
    epochs: int = 30
    batch_size: int = 32
    lr0: float = 0.00025
    lr_period: int = 50
    lr_min: float = 0.0
    val_fraction: float = 0.1
    prob_clip: float = 1e-7
    output_activation: str = "sigmoid"
    seed: int = 0

    @property
    def d_ff(self) -> int:
        return 4 * self.d_code

    def validate(self) -> None:
        for name in ("d_code", "n_layers", "n_heads", "d_head", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValidationError(f"code embedder: {name} must be positive")
        if self.window < 1:
            raise ValidationError(f"code embedder: window must be at least 1, got {self.window}")
        if self.output_activation not in ("sigmoid", "softmax"):
            raise ValidationError(
                f"code embedder: output_activation must be sigmoid or softmax, "
                f"got {self.output_activation!r}"
            )
        if not 0.0 < self.prob_clip < 0.5:
            raise ValidationError(f"code embedder: prob_clip outside (0, 0.5)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError("code embedder: val_fraction outside [0, 1)")

    def to_json(self) -> dict:
        return {
            "d_code": self.d_code,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_head": self.d_head,
            "window": self.window,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr0": self.lr0,
            "lr_period": self.lr_period,
            "lr_min": self.lr_min,
            "val_fraction": self.val_fraction,
            "prob_clip": self.prob_clip,
            "output_activation": self.output_activation,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "CodeEmbedderConfig":
        return CodeEmbedderConfig(**obj)


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal position terms: even columns sin, odd columns cos."""
    if length < 1 or dim < 1:
        raise ValidationError(f"positional_encoding: bad shape ({length}, {dim})")
    pe = np.zeros((length, dim), dtype=np.float64)
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / dim)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : pe[:, 1::2].shape[1]])
    return pe


@dataclass
class VisitSequenceBatch:
    """Padded batch: codes (B, T, |C|), real (B, T) marks non-padding visits."""

    codes: np.ndarray
    real: np.ndarray
    patient_ids: tuple

    def __post_init__(self):
        if self.codes.ndim != 3 or self.real.shape != self.codes.shape[:2]:
            raise ValidationError(
                f"batch: codes {self.codes.shape} and real {self.real.shape} disagree"
            )
        if not self.real.any(axis=1).all():
            raise ValidationError("batch: a row has no real visits")


def build_batch(matrices: list, patient_ids: list) -> VisitSequenceBatch:
    """Pad per-patient (T_i, |C|) matrices to the longest T in the batch."""
    if not matrices:
        raise ValidationError("build_batch: empty batch")
    t_max = max(m.shape[0] for m in matrices)
    width = matrices[0].shape[1]
    codes = np.zeros((len(matrices), t_max, width), dtype=np.float64)
    real = np.zeros((len(matrices), t_max), dtype=bool)
    for i, m in enumerate(matrices):
        if m.shape[1] != width:
            raise ValidationError(
                f"build_batch: vocab width mismatch {m.shape[1]} != {width}"
            )
        codes[i, : m.shape[0]] = m
        real[i, : m.shape[0]] = True
    return VisitSequenceBatch(codes=codes, real=real, patient_ids=tuple(patient_ids))


def attention_blocked_mask(real: np.ndarray) -> np.ndarray:
    """(B, T, T) where True means 'query may not attend to this key':
    strictly future positions plus padded keys."""
    b, t = real.shape
    causal = np.triu(np.ones((t, t), dtype=bool), k=1)
    pad_keys = ~real[:, None, :]
    return causal[None, :, :] | pad_keys


class CodeEmbedderModel:
    """Parameters and forward pass; see train_code_embedder for fitting."""

    def __init__(self, vocab_size: int, config: CodeEmbedderConfig, rng: np.random.Generator):
        config.validate()
        if vocab_size < 1:
            raise ValidationError(f"code embedder: empty vocabulary")
        self.config = config
        self.vocab_size = vocab_size
        self.vocab_hash: Optional[str] = None
        d, dh, nh = config.d_code, config.d_head, config.n_heads

        def p(name, shape, fan_in):
            return Parameter(nm.uniform_init(rng, shape, fan_in), name)

        self.embed = p("embed.w", (vocab_size, d), fan_in=vocab_size)
        self.layers = []
        for l in range(config.n_layers):
            layer = {
                "heads": [
                    (
                        p(f"layer{l}.head{h}.wq", (d, dh), d),
                        p(f"layer{l}.head{h}.wk", (d, dh), d),
                        p(f"layer{l}.head{h}.wv", (d, dh), d),
                    )
                    for h in range(nh)
                ],
                "wo": p(f"layer{l}.wo", (nh * dh, d), nh * dh),
                "bo": Parameter(np.zeros((1, d)), f"layer{l}.bo"),
                "ln1_g": Parameter(np.ones((1, d)), f"layer{l}.ln1_g"),
                "ln1_b": Parameter(np.zeros((1, d)), f"layer{l}.ln1_b"),
                "w1": p(f"layer{l}.ff.w1", (d, config.d_ff), d),
                "b1": Parameter(np.zeros((1, config.d_ff)), f"layer{l}.ff.b1"),
                "w2": p(f"layer{l}.ff.w2", (config.d_ff, d), config.d_ff),
                "b2": Parameter(np.zeros((1, d)), f"layer{l}.ff.b2"),
                "ln2_g": Parameter(np.ones((1, d)), f"layer{l}.ln2_g"),
                "ln2_b": Parameter(np.zeros((1, d)), f"layer{l}.ln2_b"),
            }
            self.layers.append(layer)
        self.out_w = p("out.w", (d, vocab_size), d)
        self.out_b = Parameter(np.zeros((1, vocab_size)), "out.b")
        self._pos_cache: dict = {}

    def parameters(self) -> list:
        out = [self.embed]
        for layer in self.layers:
            for wq, wk, wv in layer["heads"]:
                out.extend([wq, wk, wv])
            out.extend(
                layer[k]
                for k in ("wo", "bo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")
            )
        out.extend([self.out_w, self.out_b])
        return out

    def named_parameters(self) -> list:
        return [(p.name, p) for p in self.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _positions(self, t: int) -> np.ndarray:
        if t not in self._pos_cache:
            self._pos_cache[t] = positional_encoding(t, self.config.d_code)
        return self._pos_cache[t]

    def _block(self, x: Tensor, blocked: np.ndarray, layer: dict) -> Tensor:
        inv = 1.0 / np.sqrt(float(self.config.d_head))
        heads = []
        for wq, wk, wv in layer["heads"]:
            q = nm.matmul(x, wq)
            k = nm.matmul(x, wk)
            v = nm.matmul(x, wv)
            scores = nm.matmul(q, nm.transpose(k)) * inv
            weights = nm.softmax(nm.masked_fill(scores, blocked))
            heads.append(nm.matmul(weights, v))
        att = nm.matmul(nm.concat(heads, axis=-1), layer["wo"]) + layer["bo"]
        x = nm.layer_norm(x + att) * layer["ln1_g"] + layer["ln1_b"]
        inner = nm.relu(nm.matmul(x, layer["w1"]) + layer["b1"])
        ff = nm.matmul(inner, layer["w2"]) + layer["b2"]
        return nm.layer_norm(x + ff) * layer["ln2_g"] + layer["ln2_b"]

    def forward(self, batch: VisitSequenceBatch) -> tuple:
        """Returns (outputs (B, T, d_code), code probabilities (B, T, |C|))."""
        b, t, c = batch.codes.shape
        if c != self.vocab_size:
            raise ValidationError(
                f"forward: batch encodes {c} codes, model expects {self.vocab_size}"
            )
        x = nm.matmul(Tensor(batch.codes), self.embed)
        x = x + Tensor(self._positions(t))
        assert x.shape == (b, t, self.config.d_code)
        blocked = attention_blocked_mask(batch.real)
        for layer in self.layers:
            x = self._block(x, blocked, layer)
            assert x.shape == (b, t, self.config.d_code)
        logits = nm.matmul(x, self.out_w) + self.out_b
        assert logits.shape == (b, t, self.vocab_size)
        if self.config.output_activation == "softmax":
            chat = nm.softmax(logits)
        else:
            chat = nm.sigmoid(logits)
        return x, chat

    def state_arrays(self) -> list:
        return [(name, p.data.copy()) for name, p in self.named_parameters()]

    def load_state_arrays(self, arrays: dict) -> None:
        for name, p in self.named_parameters():
            if name not in arrays:
                raise ValidationError(f"state: missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise ValidationError(
                    f"state: parameter {name!r} has shape {arrays[name].shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = arrays[name].astype(np.float64)


def embed_codes(model: CodeEmbedderModel, multi_hot: np.ndarray) -> np.ndarray:
    """Input-side embedding: a multi-hot row maps to the sum of its code rows."""
    x = np.asarray(multi_hot, dtype=np.float64)
    if x.shape[-1] != model.vocab_size:
        raise ValidationError(
            f"embed_codes: input width {x.shape[-1]} != vocabulary size {model.vocab_size}"
        )
    return x @ model.embed.data


def skip_gram_loss(
    chat: Tensor,
    targets: np.ndarray,
    real: np.ndarray,
    window: int,
    prob_clip: float = 1e-7,
) -> tuple:
    """Mean over valid (t, j) pairs of the summed per-code cross-entropy
    between the prediction at t and the target visit at t + j, 0 < |j| <= w.

    Pairs where either endpoint is padding are skipped. Returns the scalar
    loss Tensor and the number of pairs it averaged. A batch with no valid
    pair at all (every patient has a single visit) is an error.
    """
    b, t, c = chat.shape
    if targets.shape != (b, t, c) or real.shape != (b, t):
        raise ValidationError(
            f"skip_gram_loss: shapes disagree, chat {chat.shape}, "
            f"targets {targets.shape}, real {real.shape}"
        )
    eps = prob_clip
    log_p = nm.log(nm.clip(chat, eps, 1.0 - eps))
    log_q = nm.log(nm.clip(1.0 - chat, eps, 1.0 - eps))

    total = None
    n_pairs = 0
    for j in list(range(-window, 0)) + list(range(1, window + 1)):
        if j > 0:
            width = t - j
            if width <= 0:
                continue
            lp = nm.slice_axis(log_p, 1, 0, width)
            lq = nm.slice_axis(log_q, 1, 0, width)
            tg = targets[:, j:, :]
            valid = real[:, :width] & real[:, j:]
        else:
            a = -j
            width = t - a
            if width <= 0:
                continue
            lp = nm.slice_axis(log_p, 1, a, t)
            lq = nm.slice_axis(log_q, 1, a, t)
            tg = targets[:, :width, :]
            valid = real[:, a:] & real[:, :width]
        if not valid.any():
            continue
        w = valid.astype(np.float64)[:, :, None]
        term = ((lp * Tensor(tg)) + (lq * Tensor(1.0 - tg))) * Tensor(w)
        total = term.sum() if total is None else total + term.sum()
        n_pairs += int(valid.sum())

    if n_pairs == 0:
        raise ValidationError("skip_gram_loss: no valid (t, j) pairs in the batch")
    loss = total * (-1.0 / n_pairs)
    return loss, n_pairs


def patient_matrices(cohort: Cohort, vocab: CodeVocabulary) -> dict:
    return {
        p.patient_id: np.stack([encode_visit_codes(v, vocab) for v in p.visits])
        for p in cohort.patients
    }


def train_code_embedder(
    cohort: Cohort,
    vocab: CodeVocabulary,
    config: CodeEmbedderConfig,
) -> tuple:
    """Fit on every patient with at least two visits; returns the model that
    scored best on an internal patient-held-out validation split, plus the
    loss history."""
    config.validate()
    eligible = [p for p in cohort.patients if len(p.visits) >= 2]
    if len(eligible) < 2:
        raise ValidationError(
            f"train_code_embedder: need at least two patients with 2+ visits, "
            f"got {len(eligible)}"
        )
    rng = np.random.default_rng(config.seed)
    model = CodeEmbedderModel(len(vocab), config, rng)
    model.vocab_hash = vocab.content_hash()

    mats = patient_matrices(Cohort(eligible), vocab)
    ids = sorted(mats)
    order = rng.permutation(len(ids))
    n_val = max(1, int(round(config.val_fraction * len(ids)))) if len(ids) > 2 else 1
    val_ids = [ids[i] for i in order[:n_val]]
    train_ids = [ids[i] for i in order[n_val:]]
    if not train_ids:
        raise ValidationError("train_code_embedder: validation split consumed every patient")

    params = model.parameters()
    state = nm.init_adam(params)
    sched = nm.CosineAnnealing(lr0=config.lr0, period=config.lr_period, lr_min=config.lr_min)
    history = TrainHistory()
    best = None

    def epoch_loss(pids, train: bool, lr: float) -> float:
        total, pairs = 0.0, 0
        for start in range(0, len(pids), config.batch_size):
            chunk = pids[start : start + config.batch_size]
            batch = build_batch([mats[pid] for pid in chunk], chunk)
            _, chat = model.forward(batch)
            loss, n = skip_gram_loss(
                chat, batch.codes, batch.real, config.window, config.prob_clip
            )
            value = float(loss.data.reshape(()))
            if not np.isfinite(value):
                raise RuntimeError(
                    f"train_code_embedder: loss diverged to {value} "
                    f"(lr {lr}, batch starting at {start})"
                )
            if train:
                model.zero_grad()
                loss.backward()
                nm.adam_step(params, state, lr)
            total += value * n
            pairs += n
        if pairs == 0:
            raise ValidationError("train_code_embedder: no usable pairs in split")
        return total / pairs

    for epoch in range(config.epochs):
        lr = nm.lr_at(sched, epoch)
        shuffled = [train_ids[i] for i in rng.permutation(len(train_ids))]
        tr = epoch_loss(shuffled, train=True, lr=lr)
        va = epoch_loss(val_ids, train=False, lr=lr)
        history.train_loss.append(tr)
        history.val_loss.append(va)
        history.lrs.append(lr)
        if best is None or va < best[0]:
            best = (va, epoch, dict(model.state_arrays()))
    if best is not None:
        history.best_epoch = best[1]
        model.load_state_arrays(best[2])
    return model, history


def encode_history(model: CodeEmbedderModel, matrix: np.ndarray) -> np.ndarray:
    """Layer-stack outputs (T, d_code) for one unpadded visit-matrix prefix."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValidationError(f"encode_history: expected (T, |C|), got {m.shape}")
    batch = VisitSequenceBatch(
        codes=m[None, :, :], real=np.ones((1, m.shape[0]), dtype=bool), patient_ids=("_",)
    )
    outputs, _ = model.forward(batch)
    return outputs.data[0]


def predict_next_codes(
    model: CodeEmbedderModel,
    matrix: np.ndarray,
    system_indices: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Vocabulary indices ranked by next-visit probability at the last
    position of the history. Ties break toward the smaller index so rankings
    are stable. Optionally restricted to one coding system's indices."""
    m = np.asarray(matrix, dtype=np.float64)
    batch = VisitSequenceBatch(
        codes=m[None, :, :], real=np.ones((1, m.shape[0]), dtype=bool), patient_ids=("_",)
    )
    _, chat = model.forward(batch)
    scores = chat.data[0, -1]
    if system_indices is not None:
        cand = np.asarray(system_indices, dtype=np.intp)
    else:
        cand = np.arange(len(scores), dtype=np.intp)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order]


def save_code_model(path, model: CodeEmbedderModel) -> None:
    """Persist architecture, vocabulary hash, and parameters in one file."""
    write_checkpoint(
        path,
        "code",
        {"code_embedder": model.config.to_json()},
        getattr(model, "vocab_hash", ""),
        model.state_arrays(),
    )


def load_code_model(path, vocab: CodeVocabulary) -> CodeEmbedderModel:
    """Rebuild a saved model; refuses other kinds and other vocabularies."""
    kind, config, vocab_hash, arrays = read_checkpoint(path)
    expect_kind(path, kind, "code")
    expect_vocab_hash(path, vocab_hash, vocab.content_hash())
    cfg = CodeEmbedderConfig.from_json(config["code_embedder"])
    model = CodeEmbedderModel(len(vocab), cfg, np.random.default_rng(0))
    model.load_state_arrays(arrays)
    model.vocab_hash = vocab_hash
    return model
