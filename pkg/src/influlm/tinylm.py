"""A small decoder-only language model with byte-level tokens.

Everything runs in float64 on CPU. Only the MLP weights (bias folded in as an
extra input column) are exposed for attribution; embeddings, attention and
norms are trained but stay fixed during influence computations.
"""
from __future__ import annotations

import logging
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import storage

logger = logging.getLogger(__name__)

BOS = 256
EOS = 257
VOCAB_SIZE = 258
DEFAULT_MAX_SEQ_LEN = 4096
DEFAULT_QUERY_SIZE = 100

DOMAINS = ("math", "code", "other")
BEHAVIORS = ("exploration", "verification", "backtracking", "subgoal", "backward_chaining")


class InvalidInput(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class EmptyQuerySet(RuntimeError):
    pass


# --------------------------------------------------------------------------
# tokens


def tokenize(text: str, max_seq_len: int = DEFAULT_MAX_SEQ_LEN) -> list[int]:
    """UTF-8 bytes as token ids, truncated from the end to ``max_seq_len``."""
    return list(text.encode("utf-8"))[:max_seq_len]


def detokenize(tokens: Iterable[int]) -> str:
    return bytes(t for t in tokens if t < 256).decode("utf-8", errors="replace")


def normalize_answer(text: str) -> str:
    return " ".join(text.split())


# --------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise InvalidInput(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise InvalidInput("d_model must be divisible by n_heads")
        if self.max_seq_len < 2:
            raise InvalidInput("max_seq_len must be >= 2")
        if self.vocab_size < VOCAB_SIZE:
            raise InvalidInput(f"vocab_size must cover the {VOCAB_SIZE} byte-level tokens")


class Span(NamedTuple):
    label: str
    start: int
    end: int


@dataclass(frozen=True)
class Example:
    """One training record. Span offsets index into ``response``."""

    id: str
    prompt: tuple[int, ...]
    response: tuple[int, ...]
    domain: str = "other"
    category: str | None = None
    difficulty: int | None = None
    behavior_spans: tuple[Span, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "response", tuple(int(t) for t in self.response))
        object.__setattr__(self, "behavior_spans", tuple(Span(*s) for s in self.behavior_spans))
        if not self.id:
            raise InvalidInput("example id must be a nonempty string")
        if self.domain not in DOMAINS:
            raise InvalidInput(f"{self.id}: unknown domain {self.domain!r}")
        if self.difficulty is not None and not (1 <= self.difficulty <= 5):
            raise InvalidInput(f"{self.id}: difficulty {self.difficulty} outside [1, 5]")
        for s in self.behavior_spans:
            if s.label not in BEHAVIORS:
                raise InvalidInput(f"{self.id}: unknown behavior label {s.label!r}")
            if not (0 <= s.start < s.end <= len(self.response)):
                raise InvalidInput(
                    f"{self.id}: span {s.label}[{s.start}:{s.end}] outside response of length {len(self.response)}")

    def without_span(self, start: int, end: int) -> "Example":
        """Copy with ``response[start:end]`` deleted; annotations are dropped."""
        return Example(
            id=self.id, prompt=self.prompt,
            response=self.response[:start] + self.response[end:],
            domain=self.domain, category=self.category, difficulty=self.difficulty)

    def truncated(self, max_seq_len: int) -> "Example":
        """Copy that fits BOS + prompt + response into ``max_seq_len``, cutting from the end; spans are clipped."""
        budget = max_seq_len - 1
        if len(self.prompt) + len(self.response) <= budget:
            return self
        prompt = self.prompt[:max(budget - 1, 0)]
        response = self.response[:budget - len(prompt)]
        spans = tuple(Span(s.label, s.start, min(s.end, len(response)))
                      for s in self.behavior_spans if s.start < len(response))
        return Example(self.id, prompt, response, self.domain, self.category, self.difficulty, spans)


@dataclass(frozen=True)
class QuerySet:
    items: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]

    def __post_init__(self):
        items = tuple((tuple(int(t) for t in p), tuple(int(t) for t in a)) for p, a in self.items)
        object.__setattr__(self, "items", items)
        if not items:
            raise EmptyQuerySet("query set needs at least one item")
        if any(not a for _, a in items):
            raise InvalidInput("query answers must be nonempty")

    @property
    def n(self) -> int:
        return len(self.items)

    @property
    def id(self) -> str:
        return storage.sha256_bytes(storage.canonical_json([[list(p), list(a)] for p, a in self.items]))[:16]

    def subset(self, n: int) -> "QuerySet":
        return QuerySet(self.items[:n])


class LayerSpec(NamedTuple):
    layer_id: str
    offset: int
    d_in: int
    d_out: int

    @property
    def size(self) -> int:
        return self.d_out * (self.d_in + 1)


@dataclass
class ParamView:
    """Flat MLP parameter vector. Each block is a row-major ``d_out x (d_in+1)`` matrix [W | b]."""

    values: np.ndarray
    layer_map: list[LayerSpec]

    def __post_init__(self):
        pos = 0
        for spec in self.layer_map:
            if spec.offset != pos:
                raise InvalidInput(f"layer {spec.layer_id} offset {spec.offset}, expected {pos}")
            pos += spec.size
        if pos != len(self.values):
            raise InvalidInput(f"layer map covers {pos} entries, vector has {len(self.values)}")

    def __len__(self):
        return len(self.values)

    def block(self, spec: LayerSpec, vec: np.ndarray | None = None) -> np.ndarray:
        vec = self.values if vec is None else vec
        return vec[spec.offset:spec.offset + spec.size].reshape(spec.d_out, spec.d_in + 1)


def encode_pair(prompt: str, response: str, max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
                add_eos: bool = True) -> tuple[list[int], list[int]]:
    """Tokenize a (prompt, response) pair so that BOS + prompt + response fits ``max_seq_len``."""
    p = tokenize(prompt, max_seq_len)
    r = tokenize(response, max_seq_len) + ([EOS] if add_eos else [])
    budget = max_seq_len - 1
    p = p[:max(budget - 1, 0)]
    r = r[:budget - len(p)]
    return p, r


# --------------------------------------------------------------------------
# model


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.fc_in = nn.Linear(cfg.d_model, cfg.d_ff)
        self.fc_out = nn.Linear(cfg.d_ff, cfg.d_model)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).split(D, dim=-1)
        q = q.view(B, T, h, D // h).transpose(1, 2)
        k = k.view(B, T, h, D // h).transpose(1, 2)
        v = v.view(B, T, h, D // h).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        mask = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(y)

    def forward(self, x: torch.Tensor, trace: list | None = None, prefix: str = "") -> torch.Tensor:
        x = x + self.attention(self.ln1(x))
        a1 = self.ln2(x)
        s1 = self.fc_in(a1)
        a2 = F.gelu(s1)
        s2 = self.fc_out(a2)
        if trace is not None:
            trace.append((prefix + "fc_in", a1, s1))
            trace.append((prefix + "fc_out", a2, s2))
        return x + s2


class TinyLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.double()

    def reset_parameters(self, seed: int, std: float = 0.05) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif ".ln" in name or name.startswith("ln_"):
                    p.fill_(1.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * std)

    def forward(self, tokens: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        """Log-probabilities of shape (B, T, V) for a (B, T) batch of token ids."""
        T = tokens.shape[-1]
        if T > self.cfg.max_seq_len:
            raise InvalidInput(f"sequence of length {T} exceeds max_seq_len={self.cfg.max_seq_len}")
        pos = torch.arange(T, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(pos)
        for i, blk in enumerate(self.blocks):
            x = blk(x, trace, prefix=f"block{i}.")
        return F.log_softmax(self.head(self.ln_f(x)), dim=-1)

    def mlp_layers(self) -> list[tuple[str, nn.Linear]]:
        out = []
        for i, blk in enumerate(self.blocks):
            out.append((f"block{i}.fc_in", blk.fc_in))
            out.append((f"block{i}.fc_out", blk.fc_out))
        return out

    def layer_map(self) -> list[LayerSpec]:
        specs, offset = [], 0
        for name, lin in self.mlp_layers():
            spec = LayerSpec(name, offset, lin.in_features, lin.out_features)
            specs.append(spec)
            offset += spec.size
        return specs

    def mlp_parameters(self) -> list[torch.Tensor]:
        """Weight and bias tensors in ParamView order."""
        return [t for _, lin in self.mlp_layers() for t in (lin.weight, lin.bias)]


def build_model(cfg: ModelConfig, seed: int = 0) -> TinyLM:
    model = TinyLM(cfg)
    model.reset_parameters(seed)
    return model


def param_view(model: TinyLM) -> ParamView:
    blocks = [torch.cat([lin.weight.detach(), lin.bias.detach()[:, None]], dim=1).reshape(-1)
              for _, lin in model.mlp_layers()]
    return ParamView(torch.cat(blocks).numpy().copy(), model.layer_map())


def load_param_view(model: TinyLM, values: np.ndarray) -> None:
    """Overwrite the MLP weights in place from a flat ParamView vector."""
    values = np.asarray(values, dtype=np.float64)
    with torch.no_grad():
        for spec, (_, lin) in zip(model.layer_map(), model.mlp_layers()):
            m = torch.from_numpy(values[spec.offset:spec.offset + spec.size].reshape(spec.d_out, spec.d_in + 1))
            lin.weight.copy_(m[:, :-1])
            lin.bias.copy_(m[:, -1])


def flatten_mlp_grads(model: TinyLM, grads: Sequence[torch.Tensor]) -> np.ndarray:
    """Assemble (dW, db) pairs from :meth:`TinyLM.mlp_parameters` order into a flat vector."""
    parts = []
    for i in range(0, len(grads), 2):
        parts.append(torch.cat([grads[i], grads[i + 1][:, None]], dim=1).reshape(-1))
    return torch.cat(parts).detach().numpy().copy()


def checkpoint_hash(model: TinyLM) -> str:
    return storage.hash_arrays(*(p.detach().numpy() for _, p in sorted(model.state_dict().items())))[:16]


# --------------------------------------------------------------------------
# forward / loss


def _sequence(prompt: Sequence[int], response: Sequence[int]) -> list[int]:
    return [BOS, *prompt, *response]


def forward(model: TinyLM, tokens: Sequence[int]) -> torch.Tensor:
    """Per-position next-token log-probabilities, shape (T, V)."""
    if len(tokens) < 1:
        raise InvalidInput("forward needs at least one token")
    if len(tokens) > model.cfg.max_seq_len:
        raise InvalidInput(f"sequence of length {len(tokens)} exceeds max_seq_len={model.cfg.max_seq_len}")
    return model(torch.tensor([list(tokens)], dtype=torch.long))[0]


def response_logprobs(model: TinyLM, prompt: Sequence[int], response: Sequence[int],
                      trace: list | None = None) -> torch.Tensor:
    """log p(response_t | BOS, prompt, response_<t) for every response token, shape (T,)."""
    if not response:
        raise InvalidInput("response must be nonempty")
    seq = _sequence(prompt, response)
    if len(seq) > model.cfg.max_seq_len:
        raise InvalidInput(f"sequence of length {len(seq)} exceeds max_seq_len={model.cfg.max_seq_len}")
    logp = model(torch.tensor([seq], dtype=torch.long), trace=trace)[0]
    start = 1 + len(prompt)
    targets = torch.tensor(response, dtype=torch.long)
    return logp[start - 1:len(seq) - 1].gather(1, targets[:, None])[:, 0]


def nll_loss(model: TinyLM, example: Example) -> torch.Tensor:
    """Mean negative log-likelihood over response tokens; prompt tokens only condition."""
    if not example.response:
        raise InvalidInput(f"{example.id}: empty response")
    return -response_logprobs(model, example.prompt, example.response).mean()


def _pad_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]):
    seqs = [_sequence(p, r) for p, r in pairs]
    L = max(len(s) for s in seqs)
    tokens = torch.zeros(len(seqs), L, dtype=torch.long)
    targets = torch.zeros(len(seqs), L, dtype=torch.long)
    weights = torch.zeros(len(seqs), L, dtype=torch.float64)
    for i, ((p, r), s) in enumerate(zip(pairs, seqs)):
        tokens[i, :len(s)] = torch.tensor(s)
        targets[i, :len(s) - 1] = torch.tensor(s[1:])
        weights[i, len(p):len(s) - 1] = 1.0 / len(r)
    return tokens, targets, weights


def batch_mean_nll(model: TinyLM, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> torch.Tensor:
    """Mean over pairs of each pair's per-token mean response NLL."""
    if any(not r for _, r in pairs):
        raise InvalidInput("every response must be nonempty")
    tokens, targets, weights = _pad_batch(pairs)
    logp = model(tokens).gather(2, targets[..., None])[..., 0]
    return -(logp * weights).sum() / len(pairs)


def dataset_loss(model: TinyLM, examples: Sequence[Example], batch_size: int = 64) -> float:
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            total += batch_mean_nll(model, [(e.prompt, e.response) for e in chunk]).item() * len(chunk)
    return total / len(examples)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise InvalidInput("steps must be >= 0 and batch_size >= 1")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise InvalidInput(f"learning rate must be positive and finite, got {self.lr}")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise InvalidInput("weight_decay and grad_clip must be >= 0")


@dataclass
class Checkpoint:
    model: TinyLM
    train_config: TrainConfig
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    history: list[float] = field(default_factory=list)

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg

    @property
    def hash(self) -> str:
        return checkpoint_hash(self.model)

    def save(self, path) -> str:
        meta = {
            "model_config": asdict(self.config),
            "train_config": asdict(self.train_config),
            "seed": self.train_config.seed,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "layer_map": [list(s) for s in self.model.layer_map()],
            "checkpoint_hash": self.hash,
        }
        arrays = {k: v.detach().numpy() for k, v in self.model.state_dict().items()}
        return storage.save_arrays(path, "checkpoint", meta, arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        meta, arrays = storage.load_arrays(path, "checkpoint")
        model = TinyLM(ModelConfig(**meta["model_config"]))
        model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        model.eval()
        return cls(model, TrainConfig(**meta["train_config"]), meta["initial_loss"], meta["final_loss"])


def train(cfg: ModelConfig, dataset: Sequence[Example], hp: TrainConfig = TrainConfig()) -> Checkpoint:
    """Minibatch Adam on per-example mean response NLL, deterministic given ``hp.seed``."""
    if not dataset:
        raise InvalidInput("cannot train on an empty dataset")
    torch.manual_seed(hp.seed)
    model = build_model(cfg, hp.seed)
    initial = dataset_loss(model, dataset)
    ckpt = Checkpoint(model, hp, initial_loss=initial)
    if hp.steps == 0:
        ckpt.final_loss = initial
        return ckpt
    opt = torch.optim.Adam(model.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)
    rng = random.Random(hp.seed)
    order: list[int] = []
    model.train()
    for step in range(hp.steps):
        if len(order) < hp.batch_size:
            perm = list(range(len(dataset)))
            rng.shuffle(perm)
            order.extend(perm)
        idx, order = order[:hp.batch_size], order[hp.batch_size:]
        lr = hp.lr * 0.5 * (1 + math.cos(math.pi * step / hp.steps))
        for g in opt.param_groups:
            g["lr"] = lr
        loss = batch_mean_nll(model, [(dataset[i].prompt, dataset[i].response) for i in idx])
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss.item()} at step {step} (lr={lr:.3g})")
        opt.zero_grad()
        loss.backward()
        if hp.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), hp.grad_clip)
        opt.step()
        ckpt.history.append(loss.item())
    model.eval()
    ckpt.final_loss = dataset_loss(model, dataset)
    logger.info("trained %d steps: loss %.4f -> %.4f", hp.steps, initial, ckpt.final_loss)
    return ckpt


# --------------------------------------------------------------------------
# correctness-filtered evaluation


@torch.no_grad()
def greedy_decode(model: TinyLM, prompt: Sequence[int], max_new_tokens: int) -> list[int]:
    seq = [BOS, *prompt]
    out: list[int] = []
    for _ in range(max_new_tokens):
        if len(seq) >= model.cfg.max_seq_len:
            break
        nxt = int(forward(model, seq)[-1].argmax())
        if nxt == EOS:
            break
        out.append(nxt)
        seq.append(nxt)
    return out


def evaluate_correct(model: TinyLM, evalset: Sequence[tuple[str, str]], n: int = DEFAULT_QUERY_SIZE,
                     seed: int = 0, max_new_tokens: int | None = None) -> QuerySet:
    """Greedy-decode every prompt, keep string-exact answers, sample ``n`` of them.

    The sample is a prefix of one seeded permutation, so smaller ``n`` with the
    same seed gives a nested subset.
    """
    if not evalset:
        raise InvalidInput("evaluation set is empty")
    correct = []
    for prompt, gold in evalset:
        p, a = encode_pair(prompt, gold, model.cfg.max_seq_len)
        budget = max_new_tokens or len(a) + 8
        decoded = detokenize(greedy_decode(model, p, budget))
        if normalize_answer(decoded) == normalize_answer(gold):
            correct.append((p, a))
    if not correct:
        raise EmptyQuerySet(f"no correct answers among {len(evalset)} evaluation items")
    perm = list(range(len(correct)))
    random.Random(seed).shuffle(perm)
    if len(correct) < n:
        logger.warning("only %d of %d requested correct items available", len(correct), n)
    return QuerySet(tuple(correct[i] for i in perm[:n]))
