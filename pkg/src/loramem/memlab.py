"""Desk-scale key-value memory lab.

A frozen random base map (d_out x d_in) plus a trainable factorized delta is
trained by plain mini-batch gradient descent to recall name -> phone-number
associations. Names are encoded as deterministic hash-seeded unit vectors;
the value head is 10 independent digit positions of 10 classes each
(d_out = 100), so recall is scored by strict exact match on the full number
string and the trainable parameter count is independent of the load.

The tokenizer is whitespace split: the slicing protocol only needs a
monotone token count, so subword tokenization is deliberately out of scope.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, replace

import numpy as np

from . import matcore
from .adapterio import LowRankPair
from .matcore import Matrix, Rng

D_IN_DEFAULT = 256
D_OUT = 100  # 10 digit positions x 10 classes
N_POSITIONS = 10
BASE_STDDEV = 0.01

NUMBER_RE = re.compile(r"^\d{3}-\d{3}-\d{4}$")
_LINE_RE = re.compile(
    r"^Question: What is the phone number of (.+)\? "
    r"Answer: (\d{3}-\d{3}-\d{4})$"
)

FIRST_NAMES = [
    "Alice", "Amara", "Andre", "Anita", "Anton", "Astrid", "Bella", "Benny",
    "Bianca", "Boris", "Bruno", "Carla", "Casey", "Cedric", "Chloe", "Clara",
    "Cyrus", "Daria", "Dexter", "Diana", "Dmitri", "Edith", "Elena", "Elias",
    "Emile", "Erika", "Felix", "Fiona", "Franz", "Greta", "Gustav", "Hannah",
    "Harvey", "Hector", "Helga", "Hugo", "Ilona", "Ingrid", "Ivan", "Jasper",
    "Jolene", "Jonas", "Kasia", "Keith", "Klara", "Lars", "Leona", "Lidia",
    "Lorenz", "Lucia", "Magnus", "Maren", "Marta", "Mateo", "Milena", "Nadia",
    "Nestor", "Nikolai", "Nora", "Olga", "Oskar", "Paula", "Petra", "Quincy",
    "Rafael", "Regina", "Rosa", "Ruben", "Sandra", "Selma", "Stefan", "Tamara",
    "Teodor", "Tilda", "Ulrich", "Vera", "Viktor", "Wanda", "Yusuf", "Zelda",
]
LAST_NAMES = [
    "Abbott", "Acker", "Adler", "Ahlberg", "Albrecht", "Almeida", "Alvarez",
    "Andersen", "Antonov", "Arnold", "Baker", "Baldwin", "Barros", "Becker",
    "Bergman", "Blanco", "Bogdanov", "Brandt", "Bruhn", "Calder", "Camara",
    "Carver", "Castillo", "Chandler", "Clarke", "Colombo", "Conrad", "Cramer",
    "Dalton", "Danner", "Deckard", "Dietrich", "Dragan", "Duarte", "Eberhart",
    "Eklund", "Engel", "Espinoza", "Falk", "Farrell", "Fischer", "Fontaine",
    "Forsythe", "Fuentes", "Gallo", "Garner", "Gibson", "Gruber", "Hale",
    "Halvorsen", "Hammond", "Hartmann", "Hawkins", "Heller", "Hoffman",
    "Holst", "Horvat", "Ibanez", "Ingram", "Ivanov", "Jansen", "Jarvis",
    "Kaminski", "Keller", "Kovacs", "Kramer", "Kruger", "Lambert", "Landry",
    "Larsen", "Lehmann", "Lindgren", "Lorenzo", "Lukas", "Madsen", "Marchetti",
    "Marek", "Mercer", "Meyer", "Moreau", "Navarro", "Nielsen", "Novak",
    "Oberon", "Olsen", "Orlov", "Pavlov", "Pearce", "Petrov", "Pineda",
    "Quinn", "Rasmussen", "Reyes", "Richter", "Rojas", "Romano", "Rossi",
    "Sandoval", "Schafer", "Schmidt", "Seidel", "Sokolov", "Sorensen",
    "Stein", "Strand", "Tanner", "Thorne", "Toledo", "Ulrich", "Vargas",
    "Vasquez", "Vogel", "Voss", "Wagner", "Weber", "Wendel", "Winter",
    "Wolfe", "Yates", "Zeller", "Zimmer",
]


class KeyCollisionError(RuntimeError):
    """Two distinct names hashed to the same key stream."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; .step is the offending step index."""

    def __init__(self, step: int, message: str | None = None):
        super().__init__(message or f"non-finite loss at step {step}")
        self.step = step


@dataclass(frozen=True)
class PhonebookRecord:
    name: str
    number: str

    def __post_init__(self):
        if not NUMBER_RE.match(self.number):
            raise ValueError(f"number {self.number!r} not in XXX-XXX-XXXX form")


def gen_phonebook(n_pairs: int, seed: int) -> list[PhonebookRecord]:
    """Deterministic fictional name/number pairs with unique names.

    Names are a seeded shuffle of the first x last name grid, so a given
    seed yields prefix-consistent lists across sizes.
    """
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    capacity = len(FIRST_NAMES) * len(LAST_NAMES)
    if n_pairs > capacity:
        raise ValueError(f"n_pairs {n_pairs} exceeds the {capacity} unique names")
    rng = Rng(seed).derive("phonebook")
    order = rng.permutation(capacity)[:n_pairs]
    digits = rng.integers(10 * n_pairs, 10).reshape(n_pairs, 10)
    records = []
    for combo, digit_row in zip(order, digits):
        first = FIRST_NAMES[int(combo) // len(LAST_NAMES)]
        last = LAST_NAMES[int(combo) % len(LAST_NAMES)]
        d = "".join(str(int(x)) for x in digit_row)
        records.append(PhonebookRecord(
            name=f"{first} {last}",
            number=f"{d[0:3]}-{d[3:6]}-{d[6:10]}",
        ))
    return records


def format_record(record: PhonebookRecord) -> str:
    return (f"Question: What is the phone number of {record.name}? "
            f"Answer: {record.number}")


def count_tokens(text: str) -> int:
    """Whitespace token count."""
    return len(text.split())


def name_digest(name: str) -> int:
    """Stable 64-bit digest of a name (key stream seed)."""
    raw = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(raw, "little")


def encode_key(name: str, d_in: int = D_IN_DEFAULT) -> np.ndarray:
    """Deterministic unit-norm encoding of a name, from its hash alone."""
    rng = Rng(name_digest(name)).derive("key-encoding")
    vec = rng.gaussian(d_in)
    return vec / np.linalg.norm(vec)


@dataclass
class KvDataset:
    """Records plus their encodings and digit labels.

    keys: n x d_in unit-norm rows; labels: n x 10 digit classes;
    token_count: whitespace tokens over all formatted records.
    """

    records: list[PhonebookRecord]
    keys: Matrix
    labels: np.ndarray
    token_count: int

    def __len__(self) -> int:
        return len(self.records)

    @property
    def d_in(self) -> int:
        return self.keys.cols

    def subset(self, indices) -> "KvDataset":
        indices = list(indices)
        records = [self.records[i] for i in indices]
        keys = Matrix(self.keys.data[indices])
        labels = self.labels[indices]
        tokens = sum(count_tokens(format_record(r)) for r in records)
        return KvDataset(records, keys, labels, tokens)


def _labels_of(record: PhonebookRecord) -> list[int]:
    return [int(c) for c in record.number.replace("-", "")]


def make_dataset(records: list[PhonebookRecord],
                 d_in: int = D_IN_DEFAULT) -> KvDataset:
    """Encode records; checks for hash collisions between distinct names."""
    seen: dict[int, str] = {}
    for r in records:
        digest = name_digest(r.name)
        if seen.get(digest, r.name) != r.name:
            raise KeyCollisionError(
                f"names {seen[digest]!r} and {r.name!r} share a key digest"
            )
        seen[digest] = r.name
    keys = np.stack([encode_key(r.name, d_in) for r in records]) if records \
        else np.zeros((0, d_in))
    labels = np.array([_labels_of(r) for r in records], dtype=np.int64) \
        if records else np.zeros((0, N_POSITIONS), dtype=np.int64)
    tokens = sum(count_tokens(format_record(r)) for r in records)
    return KvDataset(list(records), Matrix(keys), labels, tokens)


def slice_by_budget(records: list[PhonebookRecord], budget: int,
                    d_in: int = D_IN_DEFAULT) -> KvDataset:
    """Take records in order until the running token total first exceeds
    the budget; the record that crosses the budget is included.

    Slices taken from one source at growing budgets are prefix-nested.
    """
    if not records:
        raise ValueError("no records to slice")
    first_tokens = count_tokens(format_record(records[0]))
    if budget < first_tokens:
        raise ValueError(
            f"budget {budget} is smaller than the first record "
            f"({first_tokens} tokens)"
        )
    taken, total = [], 0
    for record in records:
        taken.append(record)
        total += count_tokens(format_record(record))
        if total > budget:
            break
    return make_dataset(taken, d_in)


@dataclass(frozen=True)
class TrainConfig:
    rank: int = 8
    alpha: float = 8.0
    learning_rate: float = 0.5
    steps: int = 1500
    batch_size: int = 8
    seed: int = 0
    init_stddev: float = 0.02

    def __post_init__(self):
        if self.rank < 1 or self.steps < 1 or self.batch_size < 1:
            raise ValueError("rank, steps and batch_size must be positive")
        if self.alpha <= 0 or self.learning_rate < 0 or self.init_stddev < 0:
            raise ValueError("alpha must be positive; rates must be >= 0")

    def with_rank(self, rank: int) -> "TrainConfig":
        """Rank variant keeping alpha == rank, the sweep convention."""
        return replace(self, rank=rank, alpha=float(rank))


@dataclass
class MemoryModel:
    """Frozen base map plus the trainable pair; w0 never changes."""

    w0: Matrix
    pair: LowRankPair
    d_in: int = D_IN_DEFAULT

    def __post_init__(self):
        if self.w0.rows != D_OUT or self.w0.cols != self.d_in:
            raise matcore.ShapeMismatchError(
                f"w0 is {self.w0.rows}x{self.w0.cols}, "
                f"expected {D_OUT}x{self.d_in}"
            )

    @property
    def d_out(self) -> int:
        return D_OUT

    def weight(self) -> Matrix:
        from . import adapterio
        return matcore.elementwise(self.w0, adapterio.delta(self.pair), "add")


def frozen_base(seed: int, d_in: int = D_IN_DEFAULT) -> Matrix:
    """The frozen random base map for a seed: small-magnitude Gaussian, so
    untrained logits are non-degenerate but carry no prior associations."""
    return matcore.fill_gaussian(Rng(seed).derive("w0"), D_OUT, d_in,
                                 BASE_STDDEV)


def _forward_grads(base_logits: np.ndarray, keys: np.ndarray,
                   labels: np.ndarray, a: np.ndarray, b: np.ndarray,
                   s: float):
    """Loss (sum over records) and exact grads wrt a and b.

    Loss per record is the sum over the 10 digit positions of the softmax
    cross-entropy on that position's 10-way block.
    """
    m = keys.shape[0]
    # overflow here means the run is diverging; the caller detects that via
    # the finite check on the loss, so silence numpy's warnings
    with np.errstate(over="ignore", invalid="ignore"):
        p = keys @ a.T                       # m x r
        z = base_logits + s * (p @ b.T)      # m x 100
        blocks = z.reshape(m, N_POSITIONS, 10)
        shifted = blocks - blocks.max(axis=2, keepdims=True)
        exp = np.exp(shifted)
        logsumexp = np.log(exp.sum(axis=2)) + blocks.max(axis=2)
        picked = np.take_along_axis(blocks, labels[:, :, None], axis=2)[:, :, 0]
        loss = float((logsumexp - picked).sum())
        soft = exp / exp.sum(axis=2, keepdims=True)
        np.put_along_axis(
            soft, labels[:, :, None],
            np.take_along_axis(soft, labels[:, :, None], axis=2) - 1.0, axis=2)
        g = soft.reshape(m, D_OUT)
        grad_b = s * (g.T @ p)               # 100 x r
        grad_a = s * ((g @ b).T @ keys)      # r x d_in
    return loss, grad_a, grad_b


def loss_and_grads(w0: Matrix, pair: LowRankPair, dataset: KvDataset):
    """Full-dataset loss (sum over records) and gradients, as arrays."""
    keys = dataset.keys.data
    base_logits = keys @ w0.data.T
    return _forward_grads(base_logits, keys, dataset.labels,
                          pair.a.data, pair.b.data, pair.alpha / pair.rank)


@dataclass
class TrainResult:
    pair: LowRankPair
    losses: list[float]
    model: MemoryModel


def train(dataset: KvDataset, config: TrainConfig) -> TrainResult:
    """Mini-batch gradient descent on the factors only; w0 stays frozen.

    Factor init is the standard low-rank recipe: a is Gaussian at
    init_stddev, b starts at zero, so the delta is zero before training.
    Per-step losses are the batch mean per-record loss, measured before the
    update. Fully deterministic per (seed, config, dataset).
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    d_in = dataset.d_in
    w0 = frozen_base(config.seed, d_in)
    a = (Rng(config.seed).derive("init").gaussian(config.rank * d_in)
         .reshape(config.rank, d_in) * config.init_stddev)
    b = np.zeros((D_OUT, config.rank))
    s = config.alpha / config.rank
    keys = dataset.keys.data
    labels = dataset.labels
    base_logits = keys @ w0.data.T
    batch_rng = Rng(config.seed).derive("batches")
    full_batch = config.batch_size >= n
    losses: list[float] = []
    for step in range(config.steps):
        if full_batch:
            idx = slice(None)
            m = n
        else:
            idx = batch_rng.permutation(n)[:config.batch_size]
            m = config.batch_size
        loss, grad_a, grad_b = _forward_grads(
            base_logits[idx], keys[idx], labels[idx], a, b, s)
        if not np.isfinite(loss):
            raise TrainingDiverged(step)
        losses.append(loss / m)
        a -= (config.learning_rate / m) * grad_a
        b -= (config.learning_rate / m) * grad_b
    pair = LowRankPair(a=Matrix(a), b=Matrix(b), alpha=config.alpha,
                       rank=config.rank)
    return TrainResult(pair=pair, losses=losses,
                       model=MemoryModel(w0=w0, pair=pair, d_in=d_in))


def _digit_predictions(weight: np.ndarray, keys: np.ndarray):
    """Per-record digit argmaxes plus a per-record unambiguous flag."""
    logits = keys @ weight.T
    blocks = logits.reshape(len(keys), N_POSITIONS, 10)
    top = blocks.max(axis=2)
    unambiguous = ((blocks == top[:, :, None]).sum(axis=2) == 1).all(axis=1)
    return blocks.argmax(axis=2), unambiguous


def evaluate(model: MemoryModel, dataset: KvDataset) -> float:
    """Strict exact-match rate: every digit position must argmax to the
    right class, with no ties (a tie counts as incorrect)."""
    if len(dataset) == 0:
        return 0.0
    digits, unambiguous = _digit_predictions(model.weight().data,
                                             dataset.keys.data)
    correct = (digits == dataset.labels).all(axis=1) & unambiguous
    return float(correct.mean())


def predict_number(model: MemoryModel, key: np.ndarray) -> str | None:
    """Decode one key to a number string; None on any argmax tie."""
    digits, unambiguous = _digit_predictions(model.weight().data,
                                             key.reshape(1, -1))
    if not unambiguous[0]:
        return None
    d = "".join(str(int(x)) for x in digits[0])
    return f"{d[0:3]}-{d[3:6]}-{d[6:10]}"


def save_dataset(dataset: KvDataset, path, seed: int | None = None) -> None:
    """UTF-8 question/answer lines plus a JSON sidecar at <path>.json."""
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for record in dataset.records:
            fh.write(format_record(record) + "\n")
    sidecar = {
        "seed": seed,
        "token_count": dataset.token_count,
        "n_records": len(dataset),
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def load_records(path) -> list[PhonebookRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            m = _LINE_RE.match(line)
            if not m:
                raise ValueError(f"{path}:{lineno}: unparseable record line")
            records.append(PhonebookRecord(name=m.group(1), number=m.group(2)))
    return records


def load_dataset(path, d_in: int = D_IN_DEFAULT) -> KvDataset:
    return make_dataset(load_records(path), d_in)
