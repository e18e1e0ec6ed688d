"""Note text pipeline: tokenization, sentence encoders, and the recurrent
autoencoder that turns a visit's sentences into a single summary vector.

Text flows visit by visit. Raw note text is lowercased, stripped of
non-alphanumeric characters, and split on whitespace; tokens are mapped
through a frequency-capped vocabulary and chunked greedily into fixed-size
windows that play the role of sentences. A sentence encoder turns each
window into a d_text vector (the default is a trainable mean-pooled token
embedding; precomputed per-visit vectors can be imported instead). A
two-layer bidirectional gated recurrent encoder reads the sentence matrix,
an attention head pools the states into the visit's text representation,
and a gated recurrent decoder is trained to reconstruct the sentence matrix
with scheduled teacher forcing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .checkpoint import expect_kind, expect_vocab_hash, read_checkpoint, write_checkpoint
from .cohort import Cohort
from .errors import ValidationError
from .numerics import Parameter, Tensor, TrainHistory

UNK_TOKEN = "<unk>"
UNK_ID = 0


def tokenize(text: str) -> list:
    """Lowercase, replace non-alphanumeric characters with spaces, split."""
    lowered = text.lower()
    cleaned = "".join(ch if ch.isalnum() else " " for ch in lowered)
    return cleaned.split()


def chunk_tokens(tokens, size: int) -> list:
    """Greedy fixed-size windows standing in for sentences."""
    if size < 1:
        raise ValidationError(f"chunk size must be >= 1, got {size}")
    return [tokens[i : i + size] for i in range(0, len(tokens), size)]


class TokenVocabulary:
    """Dense token index with id 0 reserved for unknown tokens."""

    def __init__(self, tokens):
        tokens = tuple(tokens)
        if not tokens or tokens[0] != UNK_TOKEN:
            raise ValidationError("token vocabulary must start with the UNK entry")
        if len(set(tokens)) != len(tokens):
            raise ValidationError("token vocabulary contains duplicates")
        self.tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, tokens) -> np.ndarray:
        return np.array([self._ids.get(t, UNK_ID) for t in tokens], dtype=np.int64)

    def content_hash(self) -> str:
        payload = json.dumps(list(self.tokens)).encode()
        return hashlib.sha256(payload).hexdigest()

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens)}

    @classmethod
    def from_json(cls, obj: dict) -> "TokenVocabulary":
        return cls(obj["tokens"])


def build_token_vocabulary(cohort: Cohort, min_freq: int = 2, max_tokens: int = 20000):
    """Count tokens over every note in the cohort, keep frequent ones.

    Ordered by descending frequency with alphabetical tie-break, capped at
    max_tokens entries plus the UNK slot.
    """
    counts: dict = {}
    for patient in cohort.patients:
        for visit in patient.visits:
            for note in visit.notes:
                for tok in tokenize(note.text):
                    counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )[:max_tokens]
    return TokenVocabulary((UNK_TOKEN, *kept))


class BagEncoder:
    """Trainable sentence encoder: mean of token embedding rows."""

    def __init__(self, vocab: TokenVocabulary, d_text: int, rng):
        if d_text < 1:
            raise ValidationError(f"d_text must be >= 1, got {d_text}")
        self.vocab = vocab
        self.d_text = d_text
        # Embedding rows are averaged, not dotted against fan_in inputs, so
        # scale by the row width to keep sentence vectors at usable size.
        self.table = Parameter(
            nm.uniform_init(rng, (len(vocab), d_text), fan_in=d_text), name="tok.w"
        )

    def encode(self, ids: np.ndarray) -> np.ndarray:
        """One sentence of token ids to its d_text vector (inference path)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValidationError("encode expects a non-empty 1-d array of token ids")
        return self.table.data[ids].mean(axis=0)

    def encode_batch(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Padded (B, m, n) ids with a 0/1 mask to a (B, m, d_text) Tensor."""
        b, m, n = ids.shape
        counts = mask.sum(axis=2)
        if (counts < 1).any():
            raise ValidationError("every sentence needs at least one real token")
        rows = nm.gather_rows(self.table, ids.reshape(-1))
        rows = nm.reshape(rows, (b, m, n, self.d_text))
        summed = nm.tsum(nm.mul(rows, Tensor(mask[..., None])), axis=2)
        return nm.mul(summed, Tensor((1.0 / counts)[..., None]))

    def parameters(self):
        return [self.table]


class PrecomputedVectorEncoder:
    """Per-visit sentence matrices imported from an external model."""

    def __init__(self, table: dict):
        if not table:
            raise ValidationError("precomputed vector table is empty")
        dims = {mat.shape[1] for mat in table.values()}
        if len(dims) != 1:
            raise ValidationError(f"inconsistent vector widths in import: {sorted(dims)}")
        self.table = table
        self.d_text = dims.pop()

    def matrix_for(self, key: str):
        return self.table.get(key)


def visit_key(patient_id: str, visit_index: int) -> str:
    return f"{patient_id}:{visit_index}"


def load_precomputed_vectors(path) -> PrecomputedVectorEncoder:
    """JSONL rows of {"visit_key": str, "vectors": [[...], ...]}."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                key, vectors = obj["visit_key"], obj["vectors"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad vector row ({exc})") from exc
            mat = np.asarray(vectors, dtype=np.float64)
            if mat.ndim != 2 or mat.shape[0] == 0:
                raise ValidationError(f"{path}:{lineno}: vectors must be a non-empty matrix")
            if key in table:
                raise ValidationError(f"{path}:{lineno}: duplicate visit_key {key!r}")
            table[key] = mat
    return PrecomputedVectorEncoder(table)


def sentence_matrix(text: str, encoder: BagEncoder, chunk_size: int):
    """Text to a (m, d_text) matrix, or None when no tokens survive."""
    ids = encoder.vocab.encode(tokenize(text))
    if ids.size == 0:
        return None
    chunks = chunk_tokens(ids, chunk_size)
    return np.stack([encoder.encode(chunk) for chunk in chunks])


@dataclass(frozen=True)
class SummarizerConfig:
    d_text: int = 64
    d_enc: int = 128
    chunk_size: int = 32
    epochs: int = 30
    batch_size: int = 16
    lr0: float = 1e-3
    lr_factor: float = 0.1
    lr_every: int = 50
    teacher_forcing: float = 0.5
    train_encoder: bool = True
    val_fraction: float = 0.1
    min_token_freq: int = 2
    max_tokens: int = 20000
    seed: int = 0

    def validate(self):
        for name in ("d_text", "d_enc", "chunk_size", "epochs", "batch_size", "lr_every", "max_tokens"):
            if getattr(self, name) < 1:
                raise ValidationError(f"summarizer: {name} must be >= 1, got {getattr(self, name)}")
        if self.lr0 <= 0:
            raise ValidationError(f"summarizer: lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.teacher_forcing <= 1.0:
            raise ValidationError(
                f"summarizer: teacher_forcing must be in [0, 1], got {self.teacher_forcing}"
            )
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError(
                f"summarizer: val_fraction must be in [0, 1), got {self.val_fraction}"
            )
        if self.min_token_freq < 1:
            raise ValidationError(
                f"summarizer: min_token_freq must be >= 1, got {self.min_token_freq}"
            )

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "SummarizerConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"summarizer config: unknown keys {sorted(unknown)}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg


class _GRUCell:
    """Standard gated recurrent cell with reset, update, and candidate gates."""

    def __init__(self, d_in: int, d_h: int, prefix: str, rng):
        def w(shape, fan_in, name):
            return Parameter(nm.uniform_init(rng, shape, fan_in=fan_in), name=f"{prefix}.{name}")

        self.wr = w((d_in, d_h), d_in, "wr")
        self.ur = w((d_h, d_h), d_h, "ur")
        self.br = Parameter(np.zeros(d_h), name=f"{prefix}.br")
        self.wz = w((d_in, d_h), d_in, "wz")
        self.uz = w((d_h, d_h), d_h, "uz")
        self.bz = Parameter(np.zeros(d_h), name=f"{prefix}.bz")
        self.wn = w((d_in, d_h), d_in, "wn")
        self.un = w((d_h, d_h), d_h, "un")
        self.bn = Parameter(np.zeros(d_h), name=f"{prefix}.bn")

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        r = nm.sigmoid(x @ self.wr + h @ self.ur + self.br)
        z = nm.sigmoid(x @ self.wz + h @ self.uz + self.bz)
        n = nm.tanh(x @ self.wn + nm.mul(r, h @ self.un) + self.bn)
        # h' = (1 - z) * n + z * h
        return n + nm.mul(z, h - n)

    def parameters(self):
        return [self.wr, self.ur, self.br, self.wz, self.uz, self.bz, self.wn, self.un, self.bn]


class SummarizerModel:
    """Bidirectional recurrent encoder, attention pooling, recurrent decoder.

    The two encoder layers each run a forward and a backward pass whose
    states are summed, keeping every hidden dimension at d_enc. The decoder
    starts from the final encoder state, consumes the previous sentence
    vector (true row or own prediction, per the teacher-forcing coin), and
    projects each state back to d_text.
    """

    def __init__(self, config: SummarizerConfig, rng):
        config.validate()
        self.config = config
        d_t, d_e = config.d_text, config.d_enc
        self.enc1f = _GRUCell(d_t, d_e, "enc1f", rng)
        self.enc1b = _GRUCell(d_t, d_e, "enc1b", rng)
        self.enc2f = _GRUCell(d_e, d_e, "enc2f", rng)
        self.enc2b = _GRUCell(d_e, d_e, "enc2b", rng)
        self.dec = _GRUCell(d_t, d_e, "dec", rng)
        self.out_w = Parameter(nm.uniform_init(rng, (d_e, d_t), fan_in=d_e), name="out.w")
        self.out_b = Parameter(np.zeros(d_t), name="out.b")

    def parameters(self):
        params = []
        for cell in (self.enc1f, self.enc1b, self.enc2f, self.enc2b, self.dec):
            params.extend(cell.parameters())
        params.extend([self.out_w, self.out_b])
        return params

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def _sweep(self, fwd: _GRUCell, bwd: _GRUCell, u: Tensor) -> Tensor:
        """One bidirectional layer over (B, m, d_in); directions summed."""
        b, m, d_in = u.shape
        d_e = self.config.d_enc
        steps = [nm.reshape(nm.slice_axis(u, 1, t, t + 1), (b, d_in)) for t in range(m)]
        h = Tensor(np.zeros((b, d_e)))
        forward = []
        for t in range(m):
            h = fwd.step(steps[t], h)
            forward.append(h)
        h = Tensor(np.zeros((b, d_e)))
        backward = [None] * m
        for t in reversed(range(m)):
            h = bwd.step(steps[t], h)
            backward[t] = h
        rows = [nm.reshape(forward[t] + backward[t], (b, 1, d_e)) for t in range(m)]
        return rows[0] if m == 1 else nm.concat(rows, axis=1)

    def encode(self, u: Tensor) -> Tensor:
        """Sentence matrices (B, m, d_text) to encoder states (B, m, d_enc)."""
        if u.ndim != 3:
            raise ValidationError(f"encode expects (B, m, d_text), got {u.shape}")
        if u.shape[2] != self.config.d_text:
            raise ValidationError(
                f"model expects d_text={self.config.d_text}, got {u.shape[2]}"
            )
        h1 = self._sweep(self.enc1f, self.enc1b, u)
        return self._sweep(self.enc2f, self.enc2b, h1)

    def pool(self, states: Tensor) -> Tensor:
        """Attention over encoder states, then mean over rows: (B, d_enc)."""
        attended = attention_pool(states, self.config.d_enc)
        return nm.mean(attended, axis=1)

    def decode(self, states: Tensor, u: Tensor, teacher_forcing: float, rng) -> Tensor:
        """Reconstruct (B, m, d_text) from the final encoder state.

        One teacher-forcing coin per step, shared across the batch. With no
        generator the ratio must be exactly 0 or 1 (deterministic paths).
        """
        if not 0.0 <= teacher_forcing <= 1.0:
            raise ValidationError(f"teacher_forcing must be in [0, 1], got {teacher_forcing}")
        if rng is None and 0.0 < teacher_forcing < 1.0:
            raise ValidationError("fractional teacher forcing requires a random generator")
        b, m, d_t = u.shape
        h = nm.reshape(nm.slice_axis(states, 1, m - 1, m), (b, self.config.d_enc))
        x = Tensor(np.zeros((b, d_t)))
        outputs = []
        for t in range(m):
            h = self.dec.step(x, h)
            y = h @ self.out_w + self.out_b
            outputs.append(y)
            if t + 1 < m:
                if rng is not None:
                    use_true = rng.random() < teacher_forcing
                else:
                    use_true = teacher_forcing == 1.0
                if use_true:
                    x = nm.reshape(nm.slice_axis(u, 1, t, t + 1), (b, d_t))
                else:
                    x = y
        rows = [nm.reshape(y, (b, 1, d_t)) for y in outputs]
        return rows[0] if m == 1 else nm.concat(rows, axis=1)

    def state_arrays(self):
        return [(p.name, p.data.copy()) for p in self.parameters()]

    def load_state_arrays(self, arrays: dict):
        for p in self.parameters():
            if p.name not in arrays:
                raise ValidationError(f"summarizer state missing parameter {p.name!r}")
            if arrays[p.name].shape != p.data.shape:
                raise ValidationError(
                    f"summarizer parameter {p.name!r}: shape {arrays[p.name].shape} "
                    f"does not match {p.data.shape}"
                )
            p.data = arrays[p.name].astype(np.float64).copy()


def attention_weights(states: Tensor, d_enc: int) -> Tensor:
    """softmax(H Hᵀ / √d_enc), batched over the first axis; rows sum to 1."""
    scores = nm.scale(nm.matmul(states, nm.transpose(states)), 1.0 / np.sqrt(d_enc))
    return nm.softmax(scores)


def attention_pool(states: Tensor, d_enc: int) -> Tensor:
    """A = softmax(H Hᵀ / √d_enc) H, batched over the first axis."""
    return nm.matmul(attention_weights(states, d_enc), states)


def summarize(model: SummarizerModel, u: np.ndarray) -> np.ndarray:
    """One visit's (m, d_text) sentence matrix to its d_enc summary vector."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] == 0:
        raise ValidationError(f"summarize expects a non-empty (m, d_text) matrix, got {u.shape}")
    states = model.encode(Tensor(u[None, :, :]))
    return model.pool(states).data[0].copy()


def reconstruction_loss(u_hat: Tensor, u: Tensor) -> Tensor:
    """Mean over the batch of the per-visit sum of squared row errors."""
    diff = u_hat + nm.scale(u, -1.0)
    total = nm.tsum(nm.mul(diff, diff))
    return nm.scale(total, 1.0 / u.shape[0])


def reconstruct(model: SummarizerModel, u: np.ndarray, teacher_forcing: float, rng=None):
    """Single-visit reconstruction; returns (u_hat, summed squared error)."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] == 0:
        raise ValidationError(f"reconstruct expects a non-empty (m, d_text) matrix, got {u.shape}")
    u_t = Tensor(u[None, :, :])
    states = model.encode(u_t)
    u_hat = model.decode(states, u_t, teacher_forcing, rng)
    loss = reconstruction_loss(u_hat, u_t)
    return u_hat.data[0].copy(), float(loss.data.reshape(()))


def noted_visit_examples(cohort: Cohort, vocab: TokenVocabulary, chunk_size: int):
    """All visits with usable text as (patient_id, visit_index, chunks) rows.

    Chunks are id arrays; every note of the visit contributes (task text
    windows apply at representation time, not here).
    """
    examples = []
    for patient in cohort.patients:
        for vi, visit in enumerate(patient.visits):
            tokens = []
            for note in visit.notes:
                tokens.extend(tokenize(note.text))
            if not tokens:
                continue
            ids = vocab.encode(tokens)
            examples.append((patient.patient_id, vi, chunk_tokens(ids, chunk_size)))
    return examples


def _pad_chunk_batch(chunk_lists):
    """Same-m examples to padded (B, m, n) ids plus a 0/1 mask."""
    b = len(chunk_lists)
    m = len(chunk_lists[0])
    n = max(len(c) for chunks in chunk_lists for c in chunks)
    ids = np.zeros((b, m, n), dtype=np.int64)
    mask = np.zeros((b, m, n))
    for i, chunks in enumerate(chunk_lists):
        for j, chunk in enumerate(chunks):
            ids[i, j, : len(chunk)] = chunk
            mask[i, j, : len(chunk)] = 1.0
    return ids, mask


def _bucket_batches(examples, batch_size):
    """Group example indices by sentence count, then split into batches."""
    buckets: dict = {}
    for idx, (_, _, chunks) in examples:
        buckets.setdefault(len(chunks), []).append(idx)
    batches = []
    for m in sorted(buckets):
        rows = buckets[m]
        for start in range(0, len(rows), batch_size):
            batches.append(rows[start : start + batch_size])
    return batches


def train_summarizer(cohort: Cohort, config: SummarizerConfig):
    """Jointly fit the bag encoder and the autoencoder on reconstruction.

    Adam with a step learning-rate schedule; the best-validation parameters
    (teacher forcing off for validation) are restored before returning.
    Returns (encoder, model, history).

    With train_encoder=False the token table stays at its random draw and
    only the recurrent parameters move. Joint training admits a degenerate
    optimum (drive the trainable reconstruction targets toward zero), which
    erodes whatever the bag vectors encoded; freezing pins the targets so
    the autoencoder has to model real structure.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    vocab = build_token_vocabulary(
        cohort, min_freq=config.min_token_freq, max_tokens=config.max_tokens
    )
    encoder = BagEncoder(vocab, config.d_text, rng)
    model = SummarizerModel(config, rng)
    examples = noted_visit_examples(cohort, vocab, config.chunk_size)
    if len(examples) < 2:
        raise ValidationError("train_summarizer needs at least 2 visits with note text")

    order = rng.permutation(len(examples))
    n_val = max(1, round(config.val_fraction * len(examples)))
    val_idx = [int(i) for i in order[:n_val]]
    train_idx = [int(i) for i in order[n_val:]]
    if not train_idx:
        raise ValidationError("validation split consumed every noted visit")

    params = model.parameters()
    if config.train_encoder:
        params = encoder.parameters() + params
    adam = nm.init_adam(params)
    schedule = nm.StepDecay(lr0=config.lr0, factor=config.lr_factor, every=config.lr_every)
    history = TrainHistory()
    best_val = np.inf
    best_state = None

    def run_epoch(indices, teacher_forcing, coin_rng, lr=None):
        total, count = 0.0, 0
        batches = _bucket_batches([(i, examples[i]) for i in indices], config.batch_size)
        for batch_rows in batches:
            chunk_lists = [examples[i][2] for i in batch_rows]
            ids, mask = _pad_chunk_batch(chunk_lists)
            u = encoder.encode_batch(ids, mask)
            states = model.encode(u)
            u_hat = model.decode(states, u, teacher_forcing, coin_rng)
            loss = reconstruction_loss(u_hat, u)
            if lr is not None:
                for p in encoder.parameters() + model.parameters():
                    p.zero_grad()
                loss.backward()
                nm.adam_step(params, adam, lr)
            total += float(loss.data.reshape(())) * len(batch_rows)
            count += len(batch_rows)
        return total / count

    for epoch in range(config.epochs):
        lr = nm.lr_at(schedule, epoch)
        perm = rng.permutation(len(train_idx))
        shuffled = [train_idx[int(i)] for i in perm]
        train_loss = run_epoch(shuffled, config.teacher_forcing, rng, lr=lr)
        val_loss = run_epoch(val_idx, 0.0, None)
        if not np.isfinite(train_loss) or not np.isfinite(val_loss):
            raise RuntimeError(f"summarizer training diverged at epoch {epoch}")
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.lrs.append(lr)
        if val_loss < best_val:
            best_val = val_loss
            best_state = [(p.name, p.data.copy()) for p in params]
            history.best_epoch = epoch

    by_name = dict(best_state)
    for p in params:
        p.data = by_name[p.name].copy()
    return encoder, model, history


def summarizer_state(encoder: BagEncoder, model: SummarizerModel):
    """Named arrays for the checkpoint container, encoder first."""
    return [("tok.w", encoder.table.data.copy())] + model.state_arrays()


def load_summarizer_state(encoder: BagEncoder, model: SummarizerModel, arrays: dict):
    if "tok.w" not in arrays:
        raise ValidationError("summarizer state missing parameter 'tok.w'")
    if arrays["tok.w"].shape != encoder.table.data.shape:
        raise ValidationError(
            f"token table shape {arrays['tok.w'].shape} does not match "
            f"{encoder.table.data.shape}"
        )
    encoder.table.data = arrays["tok.w"].astype(np.float64).copy()
    model.load_state_arrays(arrays)


def save_summarizer(path, encoder: BagEncoder, model: SummarizerModel) -> None:
    """Persist the token table and every recurrent parameter in one file."""
    write_checkpoint(
        path,
        "text",
        {"summarizer": model.config.to_json()},
        encoder.vocab.content_hash(),
        summarizer_state(encoder, model),
    )


def load_summarizer(path, vocab: TokenVocabulary):
    """Rebuild (encoder, model); refuses other kinds and other vocabularies."""
    kind, config, vocab_hash, arrays = read_checkpoint(path)
    expect_kind(path, kind, "text")
    expect_vocab_hash(path, vocab_hash, vocab.content_hash())
    cfg = SummarizerConfig.from_json(config["summarizer"])
    rng = np.random.default_rng(0)
    encoder = BagEncoder(vocab, cfg.d_text, rng)
    model = SummarizerModel(cfg, rng)
    load_summarizer_state(encoder, model, arrays)
    return encoder, model
