"""Desk-scale language-conditioned flow-matching policy with a
domain-adversarial discriminator.

Architecture: a trained-from-scratch 40x40 patch embedding over 240x320
images (48 tokens), a hash-token text embedding (4096 rows), a 2-layer
state MLP, two pre-norm transformer blocks over the concatenated
[v; n; x] tokens, a flow head predicting the vector (a - u) from
(z, a_t, t-embedding), an attention-pooled feature m over [v; x], and a
2-layer discriminator on m behind a gradient reversal layer.

Training minimizes  L = L_flow + lam * L_disc  where
L_flow = E || f(z, a_t, t) - (a - u) ||^2  with u ~ N(0, I),
t ~ U(0, 1), a_t = (1 - t) u + t a, and L_disc is the per-domain-mean
binary cross entropy of the discriminator (human = 1, robot = 0).
Everything is deterministic given the config seed.
"""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteLoss, Tape, Var
from .episodes import (IMAGE_HEIGHT, IMAGE_WIDTH, Episode, NormStats,
                       compute_norm_stats)
from .mixer import BatchAssembler, SamplerState, SourceEntry, build_mix
from .retarget import STATE_DIM

PATCH = 40
N_PATCHES = (IMAGE_HEIGHT // PATCH) * (IMAGE_WIDTH // PATCH)  # 48
PATCH_DIM = PATCH * PATCH * 3
VOCAB = 4096
T_EMBED_DIM = 8

PARAMS_MAGIC = b"PHP0"
PARAMS_VERSION = 1

# norm stats ride along in the parameter file but are not trained
FROZEN_PARAMS = ("norm_mean", "norm_std")
DISC_PARAMS = ("disc_w1", "disc_b1", "disc_w2", "disc_b2")


class DivergenceDetected(RuntimeError):
    pass


class EmptyDomainBatch(ValueError):
    """disc_loss needs at least one sample from each domain."""


@dataclass
class ModelConfig:
    c: int = 64
    t_tokens: int = 16
    horizon: int = 16
    lam: float = 0.1
    flow_steps: int = 10
    lr: float = 1e-3
    steps: int = 3000
    batch: int = 16
    seed: int = 0
    grl_enabled: bool = True
    phase: str = "post"
    flow_hidden: int = 256
    disc_hidden: int = 32
    mlp_ratio: int = 4
    disc_inner_steps: int = 5
    pool_settle_steps: int = 0
    avg_tail: float = 0.0
    image_height: int = IMAGE_HEIGHT
    image_width: int = IMAGE_WIDTH

    def __post_init__(self):
        for name in ("c", "t_tokens", "horizon", "flow_steps", "steps", "batch",
                     "flow_hidden", "disc_hidden", "mlp_ratio"):
            if getattr(self, name) < (0 if name == "steps" else 1):
                raise ValueError(f"{name} must be positive")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.avg_tail <= 1.0:
            raise ValueError("avg_tail must be in [0, 1]")
        if self.disc_inner_steps < 0:
            raise ValueError("disc_inner_steps must be >= 0")
        if self.pool_settle_steps < 0:
            raise ValueError("pool_settle_steps must be >= 0")
        if self.phase not in ("pre", "post"):
            raise ValueError("phase must be 'pre' or 'post'")
        if (self.image_height, self.image_width) != (IMAGE_HEIGHT, IMAGE_WIDTH):
            raise ValueError(
                f"image shape must be {IMAGE_HEIGHT}x{IMAGE_WIDTH}, "
                f"got {self.image_height}x{self.image_width}"
            )

    @property
    def action_dim(self) -> int:
        return STATE_DIM * self.horizon


# ---------------------------------------------------------------------------
# tokenization / featurization helpers

def hash_token_ids(text: str, max_tokens: int) -> np.ndarray:
    """Whitespace split + 64-bit hash into [1, VOCAB); 0 is the pad id."""
    ids = np.zeros(max_tokens, dtype=np.int32)
    for i, word in enumerate(text.split()[:max_tokens]):
        h = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        ids[i] = int.from_bytes(h, "little") % (VOCAB - 1) + 1
    return ids


def patchify(image: np.ndarray) -> np.ndarray:
    """u8 image -> (48, 4800) float32 rows of non-overlapping 40x40 patches."""
    img = np.asarray(image)
    if img.shape != (IMAGE_HEIGHT, IMAGE_WIDTH, 3):
        raise ValueError(f"expected {IMAGE_HEIGHT}x{IMAGE_WIDTH}x3 image, got {img.shape}")
    x = img.astype(np.float32) / np.float32(255.0)
    x = x.reshape(IMAGE_HEIGHT // PATCH, PATCH, IMAGE_WIDTH // PATCH, PATCH, 3)
    return x.transpose(0, 2, 1, 3, 4).reshape(N_PATCHES, PATCH_DIM)


def t_embedding(t: np.ndarray) -> np.ndarray:
    """8-dim sinusoidal features of flow time t in [0, 1]; rows per sample."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.pi * (2.0 ** np.arange(T_EMBED_DIM // 2))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def _onehot(ids: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((ids.size, width), dtype=np.float32)
    out[np.arange(ids.size), ids.reshape(-1)] = 1.0
    return out


def interp_action(a: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
    """Noisy interpolant a_t = (1 - t) u + t a."""
    a = np.asarray(a, dtype=np.float32)
    u = np.asarray(u, dtype=np.float32)
    if a.shape != u.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {u.shape}")
    t = np.float32(t)
    return (np.float32(1.0) - t) * u + t * a


# ---------------------------------------------------------------------------
# parameters

def init_params(config: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([config.seed if seed is None else seed, 100])
    C, H = config.c, config.mlp_ratio * config.c
    A = config.action_dim

    def w(rows, cols):
        return (rng.standard_normal((rows, cols)) / math.sqrt(rows)).astype(np.float32)

    def z(rows, cols):
        return np.zeros((rows, cols), dtype=np.float32)

    p = {
        "patch_w": w(PATCH_DIM, C),
        "patch_pos": (0.02 * rng.standard_normal((N_PATCHES, C))).astype(np.float32),
        "tok_emb": (0.02 * rng.standard_normal((VOCAB, C))).astype(np.float32),
        "state_w1": w(STATE_DIM, C), "state_b1": z(1, C),
        "state_w2": w(C, C), "state_b2": z(1, C),
    }
    for i in range(2):
        p[f"blk{i}_norm1_g"] = np.ones((1, C), dtype=np.float32)
        p[f"blk{i}_wq"] = w(C, C)
        p[f"blk{i}_wk"] = w(C, C)
        p[f"blk{i}_wv"] = w(C, C)
        p[f"blk{i}_wo"] = w(C, C)
        p[f"blk{i}_norm2_g"] = np.ones((1, C), dtype=np.float32)
        p[f"blk{i}_mlp_w1"] = w(C, H)
        p[f"blk{i}_mlp_b1"] = z(1, H)
        p[f"blk{i}_mlp_w2"] = w(H, C)
        p[f"blk{i}_mlp_b2"] = z(1, C)
    p.update(
        flow_wz=w(C, config.flow_hidden),
        flow_wa=w(A, config.flow_hidden),
        flow_wt=w(T_EMBED_DIM, config.flow_hidden),
        flow_b1=z(1, config.flow_hidden),
        flow_w2=w(config.flow_hidden, A),
        flow_b2=z(1, A),
        # zero query = exact average pooling at init; the query only moves
        # once the discriminator path trains it
        pool_q=z(1, C),
        pool_wk=w(C, C),
        pool_wv=w(C, C),
        disc_w1=w(C, config.disc_hidden),
        disc_b1=z(1, config.disc_hidden),
        disc_w2=w(config.disc_hidden, 1),
        disc_b2=z(1, 1),
        norm_mean=z(1, STATE_DIM),
        norm_std=np.ones((1, STATE_DIM), dtype=np.float32),
    )
    return p


def save_params(path, params: dict[str, np.ndarray]) -> Path:
    """Named tensor table: magic PHP0, version, count, then per tensor
    u16 name length + name + u32 rows + u32 cols + f32 little-endian data."""
    path = Path(path)
    chunks = [PARAMS_MAGIC, struct.pack("<II", PARAMS_VERSION, len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"{name}: parameters must be rank-2")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        chunks.append(arr.astype("<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def load_params(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != PARAMS_MAGIC:
        raise ValueError("bad parameter file magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != PARAMS_VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    off = 12
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        params[name] = np.frombuffer(blob, dtype="<f4", count=rows * cols,
                                     offset=off).reshape(rows, cols).copy()
        off += rows * cols * 4
    return params


# ---------------------------------------------------------------------------
# graph builders (tape-level, used by training and the public wrappers)

def _encode_vision_batch(tape: Tape, pv: dict, patches: np.ndarray, n: int) -> list[Var]:
    v_all = tape.matmul(tape.input(patches), pv["patch_w"])
    pos = tape.concat_rows([pv["patch_pos"]] * n)
    return tape.split_rows(tape.add(v_all, pos), [N_PATCHES] * n)


def _encode_text_batch(tape: Tape, pv: dict, tokens: np.ndarray) -> list[Var]:
    n, T = tokens.shape
    onehot = _onehot(tokens, VOCAB)
    n_all = tape.matmul(tape.input(onehot), pv["tok_emb"])
    return tape.split_rows(n_all, [T] * n)


def _encode_state_batch(tape: Tape, pv: dict, states: np.ndarray) -> list[Var]:
    h = tape.relu(tape.add(tape.matmul(tape.input(states), pv["state_w1"]), pv["state_b1"]))
    x_all = tape.add(tape.matmul(h, pv["state_w2"]), pv["state_b2"])
    return tape.split_rows(x_all, [1] * states.shape[0])


def _backbone_single(tape: Tape, pv: dict, v: Var, n: Var, x: Var) -> Var:
    tokens = tape.concat_rows([v, n, x])
    for i in range(2):
        hn = tape.rms_norm(tokens, pv[f"blk{i}_norm1_g"])
        att = tape.attention(
            tape.matmul(hn, pv[f"blk{i}_wq"]),
            tape.matmul(hn, pv[f"blk{i}_wk"]),
            tape.matmul(hn, pv[f"blk{i}_wv"]),
        )
        tokens = tape.add(tokens, tape.matmul(att, pv[f"blk{i}_wo"]))
        hn2 = tape.rms_norm(tokens, pv[f"blk{i}_norm2_g"])
        m1 = tape.gelu(tape.add(tape.matmul(hn2, pv[f"blk{i}_mlp_w1"]), pv[f"blk{i}_mlp_b1"]))
        tokens = tape.add(tokens, tape.add(tape.matmul(m1, pv[f"blk{i}_mlp_w2"]), pv[f"blk{i}_mlp_b2"]))
    sel = np.zeros((1, tokens.value.shape[0]), dtype=np.float32)
    sel[0, -1] = 1.0  # read the representation at the state-token position
    return tape.matmul(tape.input(sel), tokens)


def _pool_single(tape: Tape, pv: dict, v: Var, x: Var) -> Var:
    rows = tape.concat_rows([v, x])
    return tape.attention(
        pv["pool_q"], tape.matmul(rows, pv["pool_wk"]), tape.matmul(rows, pv["pool_wv"])
    )


def _flow_head(tape: Tape, pv: dict, z_rows: Var, a_t: np.ndarray, temb: np.ndarray) -> Var:
    h = tape.add(tape.matmul(z_rows, pv["flow_wz"]), pv["flow_b1"])
    h = tape.add(h, tape.matmul(tape.input(a_t), pv["flow_wa"]))
    h = tape.add(h, tape.matmul(tape.input(temb), pv["flow_wt"]))
    h = tape.relu(h)
    return tape.add(tape.matmul(h, pv["flow_w2"]), pv["flow_b2"])


def _disc_logits(tape: Tape, pv: dict, m: Var) -> Var:
    h = tape.relu(tape.add(tape.matmul(tape.grl(m), pv["disc_w1"]), pv["disc_b1"]))
    return tape.add(tape.matmul(h, pv["disc_w2"]), pv["disc_b2"])


def disc_loss(tape: Tape, pv: dict, m_h: Var, m_r: Var) -> Var:
    """BCE with human = 1, robot = 0: per-sample mean within each domain
    term, then the two terms summed. The GRL sits between m and the MLP."""
    if m_h.value.shape[0] < 1 or m_r.value.shape[0] < 1:
        raise EmptyDomainBatch("need at least one sample from each domain")
    lh = _disc_logits(tape, pv, m_h)
    lr = _disc_logits(tape, pv, m_r)
    term_h = tape.bce_with_logits(lh, tape.input(np.ones_like(lh.value)))
    term_r = tape.bce_with_logits(lr, tape.input(np.zeros_like(lr.value)))
    return tape.add(term_h, term_r)


# ---------------------------------------------------------------------------
# public single-sample wrappers (pure functions of params)

def _pvars(tape: Tape, params: dict, trainable: bool = False) -> dict:
    mk = tape.param if trainable else tape.input
    return {k: mk(v) for k, v in params.items()}


def encode_vision(params: dict, image: np.ndarray) -> np.ndarray:
    """Patch-embedded visual tokens v, (48, C)."""
    tape = Tape()
    pv = _pvars(tape, params)
    return _encode_vision_batch(tape, pv, patchify(image), 1)[0].value


def encode_text(params: dict, instruction: str, max_tokens: int) -> np.ndarray:
    """Hash-token text embedding n, (T, C); empty text is all-pad rows."""
    tape = Tape()
    pv = _pvars(tape, params)
    ids = hash_token_ids(instruction, max_tokens).reshape(1, -1)
    return _encode_text_batch(tape, pv, ids)[0].value


def encode_state(params: dict, state: np.ndarray) -> np.ndarray:
    """Normalized 53-dim state -> 1xC latent."""
    state = np.asarray(state, dtype=np.float32).reshape(1, STATE_DIM)
    tape = Tape()
    pv = _pvars(tape, params)
    return _encode_state_batch(tape, pv, state)[0].value


def backbone(params: dict, v: np.ndarray, n: np.ndarray, x: np.ndarray) -> np.ndarray:
    """z = Transformers(v, n, x): 1xC representation at the state token."""
    tape = Tape()
    pv = _pvars(tape, params)
    return _backbone_single(tape, pv, tape.input(v), tape.input(n), tape.input(x)).value


def pool_feature(params: dict, v: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Learned-query attention pool over [v; x], the discriminator input."""
    tape = Tape()
    pv = _pvars(tape, params)
    return _pool_single(tape, pv, tape.input(v), tape.input(x)).value


def flow_vector(params: dict, z: np.ndarray, a_t: np.ndarray, t: float) -> np.ndarray:
    """Predicted flow f(z, a_t, t), pointing from noise toward the target."""
    tape = Tape()
    pv = _pvars(tape, params)
    z_rows = tape.input(np.asarray(z, dtype=np.float32).reshape(1, -1))
    a_t = np.asarray(a_t, dtype=np.float32).reshape(1, -1)
    return _flow_head(tape, pv, z_rows, a_t, t_embedding([t])).value


def flow_loss(params: dict, z: np.ndarray, a: np.ndarray, u: np.ndarray, t) -> float:
    """Eq-style scalar: mean over rows of ||f(z, a_t, t) - (a - u)||^2."""
    z = np.asarray(z, dtype=np.float32)
    a = np.asarray(a, dtype=np.float32)
    u = np.asarray(u, dtype=np.float32)
    t = np.atleast_1d(np.asarray(t, dtype=np.float32))
    a_t = (1.0 - t)[:, None] * u + t[:, None] * a
    tape = Tape()
    pv = _pvars(tape, params)
    f = _flow_head(tape, pv, tape.input(z), a_t, t_embedding(t))
    loss = tape.l2_loss(f, tape.input(a - u))
    return float(loss.value_hp)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    metrics: list[dict]
    stats: NormStats
    config: ModelConfig = None


class _Adam:
    def __init__(self, names, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = {k: np.zeros_like(params[k]) for k in names}
        self.v = {k: np.zeros_like(params[k]) for k in names}

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= (self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)).astype(np.float32)


def _disc_inner_update(params, disc_adam, m_h_val, m_r_val, k):
    """Refit the discriminator on the live batch's detached features."""
    for _ in range(k):
        tape = Tape()
        pv = {name: tape.param(params[name]) for name in DISC_PARAMS}
        loss = disc_loss(tape, pv, tape.input(m_h_val), tape.input(m_r_val))
        tape.backward(loss)
        disc_adam.step(params, {n: pv[n].grad for n in DISC_PARAMS})


def _forward_batch(tape, pv, config, images, tokens, states, need_pool):
    n = states.shape[0]
    patches = np.concatenate([patchify(img) for img in images], axis=0)
    v_list = _encode_vision_batch(tape, pv, patches, n)
    n_list = _encode_text_batch(tape, pv, tokens)
    x_list = _encode_state_batch(tape, pv, states)
    z_rows = []
    m_rows = []
    for b in range(n):
        z_rows.append(_backbone_single(tape, pv, v_list[b], n_list[b], x_list[b]))
        if need_pool:
            # the pool reads detached encoder outputs: reversed gradients
            # drive the pooling head itself rather than letting the
            # encoders re-amplify domain cues to outrun the scrub
            v_det = tape.input(v_list[b].value)
            x_det = tape.input(x_list[b].value)
            m_rows.append(_pool_single(tape, pv, v_det, x_det))
    return tape.concat_rows(z_rows), m_rows


def train(config: ModelConfig, episodes_by_source: dict[str, list[Episode]],
          factors: dict[str, float] | None = None,
          metrics_path=None, params_path=None,
          stats: NormStats | None = None) -> TrainResult:
    """Train the policy (and discriminator when grl is enabled).

    Deterministic given (config, data): parameter init, batch sampling,
    and flow-time/noise draws all derive from config.seed. Per-step
    metrics rows carry loss_fm, loss_d, loss_total. A batch that happens
    to contain a single domain contributes no discriminator term for that
    step (loss_d logged as 0). With avg_tail > 0 the returned POOLING
    parameters are their mean over that trailing fraction of steps: the
    adversarial game oscillates around the domain-scrubbed configuration,
    and the tail average lands on its center instead of an arbitrary
    endpoint (all other parameters stay at their final values).
    """
    all_eps = [ep for eps in episodes_by_source.values() for ep in eps]
    if stats is None:
        stats = compute_norm_stats(all_eps)
    entries = []
    for source, eps in sorted(episodes_by_source.items()):
        size = sum(len(ep.frames) for ep in eps)
        entries.append(SourceEntry(source, size, (factors or {}).get(source, 1.0)))
    spec = build_mix(entries, seed=config.seed)
    assembler = BatchAssembler(spec, episodes_by_source, stats, config.horizon,
                               hash_token_ids, config.t_tokens)

    params = init_params(config)
    params["norm_mean"] = stats.mean.reshape(1, -1).astype(np.float32)
    params["norm_std"] = stats.std.reshape(1, -1).astype(np.float32)
    trainables = [k for k in params if k not in FROZEN_PARAMS]
    # alternating scheme: the joint backward updates policy + pooling
    # parameters (reversed gradients via the GRL), while the discriminator
    # refits on the detached batch features disc_inner_steps times per
    # policy step so it stays close to its optimum
    main_names = [k for k in trainables if k not in DISC_PARAMS]
    adam = _Adam(main_names, params, config.lr)
    disc_adam = _Adam(list(DISC_PARAMS), params, config.lr)
    noise_rng = np.random.default_rng([config.seed, 17])
    sampler = SamplerState(config.seed)
    A = config.action_dim

    avg_from = config.steps - int(round(config.avg_tail * config.steps)) + 1
    avg_sum: dict[str, np.ndarray] = {}
    avg_n = 0

    metrics: list[dict] = []
    for step in range(1, config.steps + 1):
        batch, sampler = assembler.assemble(config.batch, sampler)
        u = noise_rng.standard_normal((config.batch, A)).astype(np.float32)
        t = noise_rng.random(config.batch).astype(np.float32)
        a_t = (1.0 - t)[:, None] * u + t[:, None] * batch.actions
        target = batch.actions - u

        tape = Tape()
        pv = {k: (tape.param(v) if k in set(trainables) else tape.input(v))
              for k, v in params.items()}
        need_pool = config.grl_enabled and config.lam > 0
        z_rows, m_rows = _forward_batch(tape, pv, config, batch.images, batch.tokens,
                                        batch.state, need_pool)
        try:
            f = _flow_head(tape, pv, z_rows, a_t, t_embedding(t))
            loss_fm = tape.l2_loss(f, tape.input(target))
            total = loss_fm
            ld_val = 0.0
            m_h_val = m_r_val = None
            if need_pool:
                h_idx = [i for i in range(config.batch) if batch.domains[i] == 0]
                r_idx = [i for i in range(config.batch) if batch.domains[i] == 1]
                if h_idx and r_idx:
                    m_h = tape.concat_rows([m_rows[i] for i in h_idx])
                    m_r = tape.concat_rows([m_rows[i] for i in r_idx])
                    ld = disc_loss(tape, pv, m_h, m_r)
                    ld_val = float(ld.value_hp)
                    total = tape.add(loss_fm, tape.scale(ld, config.lam))
                    m_h_val, m_r_val = m_h.value.copy(), m_r.value.copy()
            tape.backward(total)
        except NonFiniteLoss as exc:
            raise DivergenceDetected(f"{exc} at step {step}") from exc

        fm_val = float(loss_fm.value_hp)
        tot_val = float(total.value_hp)
        if not math.isfinite(tot_val):
            raise DivergenceDetected(f"loss is {tot_val} at step {step}")
        grads = {k: pv[k].grad for k in main_names if pv[k].grad is not None}
        adam.step(params, grads)
        if m_h_val is not None:
            _disc_inner_update(params, disc_adam, m_h_val, m_r_val,
                               config.disc_inner_steps)
        if config.avg_tail > 0 and step >= avg_from:
            avg_n += 1
            for k in ("pool_q", "pool_wk", "pool_wv"):
                if k in avg_sum:
                    avg_sum[k] += params[k].astype(np.float64)
                else:
                    avg_sum[k] = params[k].astype(np.float64)
        metrics.append({"step": step, "loss_fm": fm_val, "loss_d": ld_val,
                        "loss_total": tot_val})

    if avg_n > 0:
        for k, total in avg_sum.items():
            params[k] = (total / avg_n).astype(np.float32)

    if config.grl_enabled and config.lam > 0 and config.pool_settle_steps > 0:
        sampler = _settle_pool(config, params, assembler, sampler)

    if metrics_path is not None:
        write_metrics(metrics_path, metrics)
    if params_path is not None:
        save_params(params_path, params)
    return TrainResult(params=params, metrics=metrics, stats=stats, config=config)


SETTLE_SAMPLES = 512


def _settle_pool(config: ModelConfig, params: dict, assembler: BatchAssembler,
                 sampler: SamplerState) -> SamplerState:
    """Adversarial settling: continue the pool-vs-discriminator game on
    frozen encoder features, then take the tail average of the pooling head.

    Encoder outputs for a fixed sample set are precomputed once, and the
    game runs full-batch: the discriminator fits the same population-level
    structure any after-the-fact probe would see, so its reversed gradient
    drives the pooling head toward a feature that carries no recoverable
    domain information. The oscillating trajectory is averaged over the
    final 75% of the phase.
    """
    pool_names = ("pool_q", "pool_wk", "pool_wv")

    # deterministic settle set, drawn through the standard sampler
    v_rows, x_rows, labels = [], [], []
    while len(labels) < SETTLE_SAMPLES:
        batch, sampler = assembler.assemble(config.batch, sampler)
        tape = Tape()
        pv = {k: tape.input(v) for k, v in params.items()}
        n = config.batch
        patches = np.concatenate([patchify(img) for img in batch.images], axis=0)
        v_list = _encode_vision_batch(tape, pv, patches, n)
        x_list = _encode_state_batch(tape, pv, batch.state)
        for b in range(n):
            v_rows.append(v_list[b].value.copy())
            x_rows.append(x_list[b].value.copy())
            labels.append(int(batch.domains[b]))
    labels = np.array(labels[:SETTLE_SAMPLES])
    v_rows = v_rows[:SETTLE_SAMPLES]
    x_rows = x_rows[:SETTLE_SAMPLES]
    h_idx = [i for i in range(len(labels)) if labels[i] == 0]
    r_idx = [i for i in range(len(labels)) if labels[i] == 1]
    if not h_idx or not r_idx:
        return sampler

    pool_adam = _Adam(list(pool_names), params, config.lr)
    disc_adam = _Adam(list(DISC_PARAMS), params, config.lr)
    steps = config.pool_settle_steps
    avg_from = steps - int(round(0.75 * steps)) + 1
    avg_sum = {k: np.zeros_like(params[k], dtype=np.float64) for k in pool_names}
    avg_n = 0
    for step in range(1, steps + 1):
        tape = Tape()
        pv = {k: tape.param(params[k]) for k in pool_names}
        dv = {k: tape.param(params[k]) for k in DISC_PARAMS}
        m_rows = [
            _pool_single(tape, pv, tape.input(v_rows[i]), tape.input(x_rows[i]))
            for i in range(len(labels))
        ]
        m_h = tape.concat_rows([m_rows[i] for i in h_idx])
        m_r = tape.concat_rows([m_rows[i] for i in r_idx])
        loss = disc_loss(tape, dv, m_h, m_r)
        tape.backward(loss)
        pool_adam.step(params, {k: pv[k].grad for k in pool_names if pv[k].grad is not None})
        _disc_inner_update(params, disc_adam, m_h.value.copy(), m_r.value.copy(),
                           config.disc_inner_steps)
        if step >= avg_from:
            avg_n += 1
            for k in pool_names:
                avg_sum[k] += params[k].astype(np.float64)
    if avg_n > 0:
        for k in pool_names:
            params[k] = (avg_sum[k] / avg_n).astype(np.float32)
    return sampler


def write_metrics(path, metrics: list[dict]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss_fm", "loss_d", "loss_total"])
        for row in metrics:
            w.writerow([row["step"], repr(row["loss_fm"]), repr(row["loss_d"]),
                        repr(row["loss_total"])])
    return path


# ---------------------------------------------------------------------------
# inference

def infer_actions(params: dict, config: ModelConfig, image: np.ndarray,
                  instruction: str, state: np.ndarray, n_steps: int | None = None,
                  seed: int = 0, head_fn=None, u0: np.ndarray | None = None) -> np.ndarray:
    """Euler-integrate the learned flow from Gaussian noise.

    a_0 = u ~ N(0, I); a_{k+1} = a_k + (1/N) f(z, a_k, k/N). The raw
    53-dim input state is normalized (and the output chunk denormalized)
    with the stats stored in the parameter file. `head_fn(z, a_t, t)`
    overrides the learned head and `u0` pins the starting noise, which is
    how the analytic-field tests drive the integrator. Returns an (H, 53)
    unified-space chunk.
    """
    N = config.flow_steps if n_steps is None else int(n_steps)
    if N < 1:
        raise ValueError("need at least one integration step")
    stats = NormStats(params["norm_mean"].reshape(-1).astype(np.float64),
                      params["norm_std"].reshape(-1).astype(np.float64))
    state_n = stats.normalize(np.asarray(state, dtype=np.float64).reshape(STATE_DIM))

    tape = Tape()
    pv = _pvars(tape, params)
    v = _encode_vision_batch(tape, pv, patchify(image), 1)[0]
    n = _encode_text_batch(tape, pv, hash_token_ids(instruction, config.t_tokens).reshape(1, -1))[0]
    x = _encode_state_batch(tape, pv, state_n.reshape(1, -1))[0]
    z = _backbone_single(tape, pv, v, n, x).value

    if u0 is not None:
        a = np.asarray(u0, dtype=np.float32).reshape(1, config.action_dim).copy()
    else:
        rng = np.random.default_rng([seed, 23])
        a = rng.standard_normal((1, config.action_dim)).astype(np.float32)
    for k in range(N):
        t = k / N
        if head_fn is not None:
            fvec = np.asarray(head_fn(z, a, t), dtype=np.float32).reshape(1, -1)
        else:
            fvec = flow_vector(params, z, a, t)
        a = a + fvec / np.float32(N)
    chunk = a.reshape(config.horizon, STATE_DIM)
    return np.stack([stats.denormalize(row) for row in chunk])
