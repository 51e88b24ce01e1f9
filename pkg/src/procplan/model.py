"""Toy decoder-only LM with a shared working memory and a vector-quantized procedure book.

Per decoder block:

    E_self = H + SelfAttn(LN(H))                      causal
    X, A   = softmax(E_self Wq (M Wk)^T / sqrt(D)) (M Wv)
    E_work = E_self + X
    M      = M + g_up * (a(E_work) - M),   g_up = sigmoid(a(E_work) W_up)
    R      = quantize(M)                              nearest book units per d-chunk
    H      = FFN(E_work + g_out * (A R)),   g_out = sigmoid(E_work W_out)

a(E_work) pools context rows into slots with the column-normalized attention
weights. Plan tokens never feed the memory, so M (and R) depend on the context
alone and teacher forcing cannot leak targets through the slots.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODES = ("train", "plain", "positive", "negative")


@dataclass
class ModelConfig:
    vocab_size: int = 64
    n_layers: int = 2
    d_model: int = 32
    n_slots: int = 4
    n_heads: int = 2
    ffn_mult: int = 2
    book_size: int = 256
    unit_dim: int = 32
    beta: float = 0.25
    lam: float = 1.0
    ema_decay: float = 0.99
    max_len: int = 512
    seed: int = 0
    use_book: bool = True
    dead_after: int = 100
    emb_std: float = 1.0
    mem_std: float = 0.1

    def __post_init__(self):
        if self.d_model % self.unit_dim:
            raise ValueError(f"unit_dim {self.unit_dim} must divide d_model {self.d_model}")
        if self.d_model % self.n_heads:
            raise ValueError("n_heads must divide d_model")
        if self.book_size < 1 or self.n_slots < 1 or self.n_layers < 1:
            raise ValueError("book_size, n_slots and n_layers must be >= 1")

    @property
    def chunks_per_slot(self) -> int:
        return self.d_model // self.unit_dim

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- #
# procedure book

@dataclass
class ProcedureBook:
    units: np.ndarray  # K x d
    ema_counts: np.ndarray  # K
    ema_sums: np.ndarray  # K x d
    usage_age: np.ndarray  # K, steps since last use
    eps: float = 1e-5
    seeded: bool = False

    @classmethod
    def create(cls, K: int, d: int, rng: np.random.Generator, std: float = 0.1) -> "ProcedureBook":
        return cls(rng.normal(0.0, std, (K, d)), np.zeros(K), np.zeros((K, d)), np.zeros(K, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.units.shape[0]

    def copy(self) -> "ProcedureBook":
        return ProcedureBook(self.units.copy(), self.ema_counts.copy(), self.ema_sums.copy(),
                             self.usage_age.copy(), self.eps, self.seeded)

    def seed_from_chunks(self, chunks: np.ndarray, rng: np.random.Generator) -> None:
        """Initialize units from randomly drawn chunks (jittered when drawing with replacement)."""
        n = len(chunks)
        K = self.size
        if n >= K:
            pick = rng.choice(n, size=K, replace=False)
            self.units = chunks[pick].copy()
        else:
            pick = np.concatenate([rng.permutation(n), rng.choice(n, size=K - n, replace=True)])
            jitter = rng.normal(0.0, 1e-2 * (chunks.std() + 1e-8), (K, chunks.shape[1]))
            jitter[:n] = 0.0
            self.units = chunks[pick] + jitter
        self.seeded = True


def chunk_slots(M: np.ndarray, d: int) -> np.ndarray:
    """S x D -> S x q x d contiguous chunks."""
    S, D = M.shape
    if D % d:
        raise ValueError(f"chunk size {d} does not divide slot width {D}")
    return M.reshape(S, D // d, d)


def nearest_units(chunks: np.ndarray, units: np.ndarray) -> np.ndarray:
    """Index of the nearest unit (L2) for each row of `chunks`; ties go to the smaller index."""
    dist = ((chunks[:, None, :] - units[None, :, :]) ** 2).sum(axis=-1)
    return dist.argmin(axis=1)


@dataclass
class RuntimeProcedure:
    composites: np.ndarray  # S x D
    chunk_indices: np.ndarray  # S x q


def quantize(M: np.ndarray, book: ProcedureBook) -> RuntimeProcedure:
    S, D = M.shape
    d = book.units.shape[1]
    chunks = chunk_slots(M, d).reshape(-1, d)
    idx = nearest_units(chunks, book.units)
    R = book.units[idx].reshape(S, D)
    return RuntimeProcedure(R, idx.reshape(S, D // d))


def ema_update(book: ProcedureBook, chunks: np.ndarray, indices: np.ndarray, decay: float = 0.99,
               rng: np.random.Generator | None = None, dead_after: int = 100) -> ProcedureBook:
    """Exponential-moving-average codebook step (in place; also returned).

    counts <- decay*counts + (1-decay)*n_k, sums <- decay*sums + (1-decay)*sum of chunks
    assigned to k, unit_k <- sums_k / (counts_k + eps) for units used this step.
    Units left unused for `dead_after` consecutive steps are reseeded from a random chunk.
    """
    K, d = book.units.shape
    chunks = np.asarray(chunks, dtype=np.float64).reshape(-1, d)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    n = np.bincount(indices, minlength=K).astype(np.float64)
    sums = np.zeros((K, d))
    np.add.at(sums, indices, chunks)
    book.ema_counts = decay * book.ema_counts + (1.0 - decay) * n
    book.ema_sums = decay * book.ema_sums + (1.0 - decay) * sums
    used = n > 0
    book.units[used] = book.ema_sums[used] / (book.ema_counts[used, None] + book.eps)
    book.usage_age[used] = 0
    book.usage_age[~used] += 1
    if rng is not None and len(chunks):
        dead = np.flatnonzero(book.usage_age >= dead_after)
        for k in dead:
            book.units[k] = chunks[rng.integers(len(chunks))]
            book.ema_counts[k] = 0.0
            book.ema_sums[k] = 0.0
            book.usage_age[k] = 0
    return book


# --------------------------------------------------------------------------- #
# block-level operations

def memory_cross_attention(E_self, M, W_Q, W_K, W_V):
    """Tokens attend over memory slots. Returns (A V, A) with A row-stochastic, T x S."""
    D = ad.as_tensor(E_self).shape[1]
    Q = ad.matmul(E_self, W_Q)
    K = ad.matmul(M, W_K)
    V = ad.matmul(M, W_V)
    A = ad.softmax_rows(ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(D)))
    return ad.matmul(A, V), A


def slot_readout(E_work, A, rows=None):
    """Pool token rows into slots: column-normalized A^T E_work (S x D)."""
    if rows is not None:
        A = ad.slice_(A, rows)
        E_work = ad.slice_(E_work, rows)
    return ad.matmul(ad.transpose(ad.normalize_cols(A)), E_work)


def working_memory_update(M, E_work, A, W_up, rows=None):
    alpha = slot_readout(E_work, A, rows)
    gate = ad.sigmoid(ad.matmul(alpha, W_up))
    return ad.add(M, ad.hadamard(gate, ad.sub(alpha, M)))


def integrate(E_work, R, A, W_out, ffn):
    gate = ad.sigmoid(ad.matmul(E_work, W_out))
    return ffn(ad.add(E_work, ad.hadamard(gate, ad.matmul(A, R))))


def vq_layer_loss(M, R_ref, beta: float, M_ref=None) -> Tensor:
    """||sg(M) - R||^2 + beta ||M - sg(R)||^2; only the second term carries gradient (to M)."""
    M = ad.as_tensor(M)
    R_ref = np.asarray(R_ref, dtype=np.float64)
    if M.shape != R_ref.shape:
        raise ad.ShapeError(f"vq_layer_loss: incompatible shapes {M.shape} and {R_ref.shape}")
    M_ref = M.data if M_ref is None else M_ref
    codebook_term = float(((M_ref - R_ref) ** 2).sum())
    return ad.add(ad.scale(ad.sum_squares(ad.sub(M, R_ref)), beta), codebook_term)


def total_loss(logits, targets, vq_losses, lam: float) -> Tensor:
    nll = ad.cross_entropy(logits, targets)
    if not vq_losses or lam == 0.0:
        return nll
    return ad.add(nll, ad.scale(ad.total(*vq_losses), lam))


def cosine_matrix(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    nx = np.linalg.norm(X, axis=1, keepdims=True)
    ny = np.linalg.norm(Y, axis=1, keepdims=True)
    denom = nx * ny.T
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = (X @ Y.T) / denom
    return np.where(denom > 0, sim, 0.0)


def reconstruct(R: np.ndarray, entries: np.ndarray | None, threshold: float = 0.95) -> np.ndarray:
    """Swap each composite for its most similar bank entry when cosine >= threshold."""
    if entries is None or len(entries) == 0:
        return R
    sim = cosine_matrix(R, entries)
    best = sim.argmax(axis=1)  # first maximum, i.e. earliest inserted
    hit = sim[np.arange(len(R)), best] >= threshold
    out = R.copy()
    out[hit] = entries[best[hit]]
    return out


# --------------------------------------------------------------------------- #
# the network

def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / (10000 ** (2 * i / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


@dataclass
class LayerTrace:
    memory: np.ndarray  # S x D after the gated update
    composites: np.ndarray  # S x D actually integrated (after any reconstruction)
    raw_composites: np.ndarray  # S x D straight from the book
    chunk_indices: np.ndarray | None
    attention: np.ndarray  # T x S
    e_work: np.ndarray  # T x D


@dataclass
class ForwardResult:
    logits: Tensor
    memory: np.ndarray
    traces: list = field(default_factory=list)
    vq_losses: list = field(default_factory=list)


class ProcedureLM:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        D, V, L, F = cfg.d_model, cfg.vocab_size, cfg.n_layers, cfg.d_model * cfg.ffn_mult
        p = {}

        def w(name, shape, std):
            p[name] = Tensor(rng.normal(0.0, std, shape), requires_grad=True, name=name)

        def const(name, value):
            p[name] = Tensor(np.full(value[0], value[1], dtype=np.float64), requires_grad=True, name=name)

        w("tok_emb", (V, D), cfg.emb_std)
        w("mem_init", (cfg.n_slots, D), cfg.mem_std)
        res_std = 1.0 / math.sqrt(D) / math.sqrt(2 * L)
        for l in range(L):
            const(f"l{l}.ln1_g", ((D,), 1.0))
            const(f"l{l}.ln1_b", ((D,), 0.0))
            for n in ("sa_q", "sa_k", "sa_v"):
                w(f"l{l}.{n}", (D, D), 1.0 / math.sqrt(D))
            w(f"l{l}.sa_o", (D, D), res_std)
            for n in ("W_Q", "W_K", "W_V", "W_up", "W_out"):
                w(f"l{l}.{n}", (D, D), 1.0 / math.sqrt(D))
            const(f"l{l}.ln2_g", ((D,), 1.0))
            const(f"l{l}.ln2_b", ((D,), 0.0))
            w(f"l{l}.ffn_w1", (D, F), 1.0 / math.sqrt(D))
            const(f"l{l}.ffn_b1", ((F,), 0.0))
            w(f"l{l}.ffn_w2", (F, D), res_std * math.sqrt(D / F))
            const(f"l{l}.ffn_b2", ((D,), 0.0))
        const("lnf_g", ((D,), 1.0))
        const("lnf_b", ((D,), 0.0))
        w("head", (D, V), 1.0 / math.sqrt(D))
        self.params: dict[str, Tensor] = p
        self.book = ProcedureBook.create(cfg.book_size, cfg.unit_dim, rng)
        self._pos = sinusoidal_positions(cfg.max_len, D)
        self._masks: dict[int, np.ndarray] = {}

    # -- helpers
    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def initial_memory(self) -> np.ndarray:
        return self.params["mem_init"].data.copy()

    def _causal(self, T: int) -> np.ndarray:
        m = self._masks.get(T)
        if m is None:
            m = self._masks[T] = np.tril(np.ones((T, T), dtype=bool))
        return m

    def _self_attention(self, X, l: int):
        P = self.params
        cfg = self.cfg
        T = X.shape[0]
        h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        Xn = ad.layer_norm(X, P[f"l{l}.ln1_g"], P[f"l{l}.ln1_b"])
        q = ad.matmul(Xn, P[f"l{l}.sa_q"])
        k = ad.matmul(Xn, P[f"l{l}.sa_k"])
        v = ad.matmul(Xn, P[f"l{l}.sa_v"])
        mask = self._causal(T)
        heads = []
        for i in range(h):
            cols = (slice(None), slice(i * dh, (i + 1) * dh))
            qi, ki, vi = ad.slice_(q, cols), ad.slice_(k, cols), ad.slice_(v, cols)
            att = ad.softmax_rows(ad.scale(ad.matmul(qi, ad.transpose(ki)), 1.0 / math.sqrt(dh)), mask)
            heads.append(ad.matmul(att, vi))
        out = heads[0] if h == 1 else ad.concat(heads, axis=1)
        return ad.add(X, ad.matmul(out, P[f"l{l}.sa_o"]))

    def _ffn(self, l: int):
        P = self.params

        def ffn(x):
            xn = ad.layer_norm(x, P[f"l{l}.ln2_g"], P[f"l{l}.ln2_b"])
            hdn = ad.gelu(ad.add(ad.matmul(xn, P[f"l{l}.ffn_w1"]), P[f"l{l}.ffn_b1"]))
            return ad.add(x, ad.add(ad.matmul(hdn, P[f"l{l}.ffn_w2"]), P[f"l{l}.ffn_b2"]))

        return ffn

    # -- forward
    def forward(self, ids, ctx_len: int, mode: str = "train", memory: np.ndarray | None = None,
                bank=None, threshold: float = 0.95, freeze=None) -> ForwardResult:
        """Run the network over `ids`; the first `ctx_len` tokens are the context.

        mode "positive"/"negative" reconstructs each layer's composites against
        `bank` (a mapping layer -> entries array) before integration. `freeze`, a
        list of (memory, composites) pairs from an earlier trace, pins every
        stop-gradient quantity, which makes the loss a smooth function of the
        parameters for finite-difference checks.
        """
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        cfg, P = self.cfg, self.params
        ids = np.asarray(ids, dtype=np.int64)
        T = len(ids)
        if T > cfg.max_len:
            raise OverflowError(f"sequence length {T} exceeds max_len {cfg.max_len}")
        if not 0 < ctx_len <= T:
            raise ValueError("ctx_len must be in [1, len(ids)]")
        rows = (slice(0, ctx_len), slice(None))
        H = ad.add(ad.embedding_lookup(P["tok_emb"], ids), self._pos[:T])
        M = P["mem_init"] if memory is None else Tensor(memory)
        out = ForwardResult(None, None)
        for l in range(cfg.n_layers):
            E_self = self._self_attention(H, l)
            X, A = memory_cross_attention(E_self, M, P[f"l{l}.W_Q"], P[f"l{l}.W_K"], P[f"l{l}.W_V"])
            E_work = ad.add(E_self, X)
            M = working_memory_update(M, E_work, A, P[f"l{l}.W_up"], rows)
            idx = None
            if freeze is not None:
                M_ref, R_ref = freeze[l]
                R_raw = R_used = R_ref
            else:
                M_ref = M.data
                if cfg.use_book:
                    rp = quantize(M.data, self.book)
                    R_raw, idx = rp.composites, rp.chunk_indices
                else:
                    R_raw = M.data.copy()
                R_used = R_raw
                if mode in ("positive", "negative") and bank is not None:
                    R_used = reconstruct(R_raw, bank.get(l), threshold)
            # straight-through: value R_used, gradient of identity into M
            R = ad.add(M, R_used - M_ref)
            if mode == "train" and cfg.use_book:
                out.vq_losses.append(vq_layer_loss(M, R_used, cfg.beta, M_ref=M_ref))
            H = integrate(E_work, R, A, P[f"l{l}.W_out"], self._ffn(l))
            out.traces.append(LayerTrace(M.data.copy(), R_used.copy(), R_raw.copy(), idx, A.data, E_work.data))
        Hn = ad.layer_norm(H, P["lnf_g"], P["lnf_b"])
        out.logits = ad.matmul(Hn, P["head"])
        out.memory = M.data.copy()
        return out

    def loss(self, ids, ctx_len: int, freeze=None):
        """Teacher-forced loss: predict ids[ctx_len:] from everything before."""
        ids = np.asarray(ids, dtype=np.int64)
        res = self.forward(ids[:-1], ctx_len, "train", freeze=freeze)
        logits = ad.slice_(res.logits, (slice(ctx_len - 1, None), slice(None)))
        targets = ids[ctx_len:]
        return total_loss(logits, targets, res.vq_losses, self.cfg.lam), res


class IncrementalDecoder:
    """Key/value-cached inference for one context.

    Slot memory and runtime procedures depend on the context rows only, so they
    are computed once in the prefill; each further token costs one row per layer.
    Logits match ProcedureLM.forward on the same sequence up to rounding.
    """

    def __init__(self, model: ProcedureLM, ctx_ids, mode: str = "plain", memory=None, bank=None,
                 threshold: float = 0.95):
        if mode == "train":
            raise ValueError("incremental decoding is inference-only")
        self.model = model
        cfg, P = model.cfg, model.params
        ids = np.asarray(ctx_ids, dtype=np.int64)
        T = len(ids)
        if not 0 < T <= cfg.max_len:
            raise OverflowError(f"context length {T} outside [1, {cfg.max_len}]")
        self.T = T
        self.keys: list = []
        self.values: list = []
        self.mem_in: list = []
        self.traces: list = []
        with ad.no_grad():
            H = ad.add(ad.embedding_lookup(P["tok_emb"], ids), model._pos[:T])
            M = P["mem_init"] if memory is None else Tensor(memory)
            for l in range(cfg.n_layers):
                E_self = self._attend(H, l, 0)
                X, A = memory_cross_attention(E_self, M, P[f"l{l}.W_Q"], P[f"l{l}.W_K"], P[f"l{l}.W_V"])
                self.mem_in.append(M)
                E_work = ad.add(E_self, X)
                M = working_memory_update(M, E_work, A, P[f"l{l}.W_up"])
                idx = None
                if cfg.use_book:
                    rp = quantize(M.data, model.book)
                    R_raw, idx = rp.composites, rp.chunk_indices
                else:
                    R_raw = M.data.copy()
                R_used = R_raw
                if mode in ("positive", "negative") and bank is not None:
                    R_used = reconstruct(R_raw, bank.get(l), threshold)
                self.traces.append(LayerTrace(M.data.copy(), R_used.copy(), R_raw.copy(), idx, A.data,
                                              E_work.data))
                H = integrate(E_work, Tensor(R_used), A, P[f"l{l}.W_out"], model._ffn(l))
            self.memory = M.data.copy()
            self.last_logits = self._head(H)[-1]

    def _attend(self, X, l: int, offset: int):
        """Self-attention sublayer over new rows X, appending their keys/values to the cache."""
        P, cfg = self.model.params, self.model.cfg
        n = X.shape[0]
        h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        Xn = ad.layer_norm(X, P[f"l{l}.ln1_g"], P[f"l{l}.ln1_b"])
        q = ad.matmul(Xn, P[f"l{l}.sa_q"]).data
        k = ad.matmul(Xn, P[f"l{l}.sa_k"]).data
        v = ad.matmul(Xn, P[f"l{l}.sa_v"]).data
        if len(self.keys) <= l:
            self.keys.append(k)
            self.values.append(v)
        else:
            self.keys[l] = np.concatenate([self.keys[l], k])
            self.values[l] = np.concatenate([self.values[l], v])
        K, V = self.keys[l], self.values[l]
        mask = np.arange(K.shape[0])[None, :] <= (offset + np.arange(n))[:, None]
        heads = []
        for i in range(h):
            c = slice(i * dh, (i + 1) * dh)
            att = ad.softmax_rows(Tensor(q[:, c] @ K[:, c].T * (1.0 / math.sqrt(dh))), mask)
            heads.append(att.data @ V[:, c])
        out = np.concatenate(heads, axis=1)
        return ad.add(X, ad.matmul(Tensor(out), P[f"l{l}.sa_o"]))

    def _head(self, H):
        P = self.model.params
        return ad.matmul(ad.layer_norm(H, P["lnf_g"], P["lnf_b"]), P["head"]).data

    def extend(self, token: int) -> np.ndarray:
        """Append one token; returns the next-token logits."""
        model, P = self.model, self.model.params
        if self.T >= model.cfg.max_len:
            raise OverflowError(f"sequence length {self.T + 1} exceeds max_len {model.cfg.max_len}")
        with ad.no_grad():
            H = ad.add(ad.embedding_lookup(P["tok_emb"], np.array([token])), model._pos[self.T:self.T + 1])
            for l in range(model.cfg.n_layers):
                E_self = self._attend(H, l, self.T)
                X, A = memory_cross_attention(E_self, self.mem_in[l], P[f"l{l}.W_Q"], P[f"l{l}.W_K"],
                                              P[f"l{l}.W_V"])
                E_work = ad.add(E_self, X)
                H = integrate(E_work, Tensor(self.traces[l].composites), A, P[f"l{l}.W_out"], model._ffn(l))
            self.T += 1
            self.last_logits = self._head(H)[-1]
        return self.last_logits
