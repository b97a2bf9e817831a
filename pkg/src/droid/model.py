"""Driver behaviour model: graphs -> LSTM encoder -> TRN decoder, plus checkpoints.

Pipeline for a batch of prepared scenes:

1. node features from the backbone read-outs (RoI max / MaskAlign),
2. Ego-Thing graph (two GCN layers) and Ego-Stuff graph (one layer),
3. the two updated Ego features are summed per frame and fed to an LSTM,
4. a TRN decoder seeded with the intention representation runs ``L``
   steps; the sum of its hidden states (future gate) is concatenated with
   the encoder state and passed through one accumulator LSTM cell,
5. linear heads give Go/Stop and intention logits.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from droid import graphs
from droid.diffcore import (
    Tensor,
    add,
    concat,
    cross_entropy,
    matmul,
    max_,
    mul,
    reshape,
    sigmoid,
    softmax,
    spmm,
    take,
    tanh,
)
from droid.errors import DroidError
from droid.features import GRID, N_CHANNELS, PreparedScene, init_backbone, prepare_scene
from droid.scene import Clip, Intention

CKPT_MAGIC = b"DROIDCKP"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    hidden: int = 64
    decoder_len: int = 3
    frames: int = 20
    grid: int = GRID
    mu_thing: float = graphs.MU_THING
    mu_stuff: float = graphs.MU_STUFF
    thing_layers: int = 2
    stuff_layers: int = 1
    n_intentions: int = len(Intention)
    step_loss: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.decoder_len < 1:
            raise DroidError("invalid_config", "decoder length must be at least 1")
        if self.dim < 1 or self.hidden < 1:
            raise DroidError("invalid_config", "dimensions must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def _lstm_params(rng, prefix: str, n_in: int, hidden: int) -> dict[str, Tensor]:
    scale = 1.0 / math.sqrt(n_in + hidden)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate bias
    return {
        f"{prefix}.W": Tensor(rng.normal(0.0, scale, (n_in + hidden, 4 * hidden)), True),
        f"{prefix}.b": Tensor(b, True),
    }


def _linear(rng, prefix: str, n_in: int, n_out: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.W": Tensor(rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out)), True),
        f"{prefix}.b": Tensor(np.zeros(n_out), True),
    }


def _graph_params(rng, prefix: str, layers: int, dim: int) -> dict[str, Tensor]:
    s = 1.0 / math.sqrt(dim)
    out = {
        f"{prefix}.w": Tensor(rng.normal(0.0, s, (dim, dim)), True),
        f"{prefix}.w_prime": Tensor(rng.normal(0.0, s, (dim, dim)), True),
    }
    for l in range(layers):
        out[f"{prefix}.layer{l}.W"] = Tensor(rng.normal(0.0, s, (dim, dim)), True)
        out[f"{prefix}.layer{l}.gamma"] = Tensor(np.ones(dim), True)
        out[f"{prefix}.layer{l}.beta"] = Tensor(np.zeros(dim), True)
    return out


def init_params(config: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.seed)
    D, H = config.dim, config.hidden
    p = {}
    p.update(init_backbone(rng, D, config.frames, config.grid))
    p.update(_graph_params(rng, "ego_thing", config.thing_layers, D))
    p.update(_graph_params(rng, "ego_stuff", config.stuff_layers, D))
    p.update(_lstm_params(rng, "encoder", D, H))
    p.update(_linear(rng, "trn.h0", D, H))
    p.update(_lstm_params(rng, "trn.decoder", H, H))
    p.update(_linear(rng, "trn.step_head", H, 2))
    sta = _lstm_params(rng, "trn.sta", 2 * H, H)
    # the accumulator runs one step from a zero state, so only the input rows matter
    sta["trn.sta.W"] = Tensor(sta["trn.sta.W"].value[: 2 * H], True)
    p.update(sta)
    p.update(_linear(rng, "heads.response", H, 2))
    p.update(_linear(rng, "heads.intention", D, config.n_intentions))
    return p


# ------------------------------------------------------------------ batching


@dataclass
class Batch:
    """Padded constant inputs for ``B`` prepared scenes."""

    size: int
    frames: int
    n_thing: int          # padded object count (Ego sits at index n_thing)
    n_stuff: int
    thing_cov: np.ndarray  # (B*T*(n_thing+1)*4, C)
    thing_pos: sp.csr_matrix
    thing_gate_: np.ndarray = field(repr=False, default=None)
    stuff_cov: np.ndarray = field(repr=False, default=None)
    stuff_pos: sp.csr_matrix = field(repr=False, default=None)
    stuff_gate_: np.ndarray = field(repr=False, default=None)
    motion: np.ndarray = field(repr=False, default=None)
    thing_ids: list[list[int]] = field(default_factory=list)


def make_batch(scenes: list[PreparedScene], config: ModelConfig) -> Batch:
    B, T, G2 = len(scenes), scenes[0].frames, config.grid ** 2
    nt = max(len(s.thing_ids) for s in scenes)
    ns = max(s.stuff_cov.shape[1] for s in scenes)
    npad = nt + 1
    cov = np.zeros((B, T, npad, 4, N_CHANNELS))
    present = np.zeros((B, T, npad), dtype=bool)
    xyz = np.zeros((B, T, npad, 3))
    scov = np.zeros((B, T, max(ns, 1), N_CHANNELS))
    spres = np.zeros((B, T, max(ns, 1)), dtype=bool)
    sdist = np.full((B, T, max(ns, 1)), np.inf)
    rows, cols, vals, srows, scols, svals = [], [], [], [], [], []
    for b, s in enumerate(scenes):
        n = len(s.thing_ids)
        remap = np.arange(n + 1)
        remap[n] = nt
        cov[b, :, remap] = s.thing_cov.transpose(1, 0, 2, 3)
        present[b][:, remap] = s.thing_present
        xyz[b][:, remap] = s.thing_xyz
        if len(s.thing_pos_val):
            t, node, smp, cell = s.thing_pos_idx.T
            rows.append(((b * T + t) * npad + remap[node]) * 4 + smp)
            cols.append(cell)
            vals.append(s.thing_pos_val)
        m = s.stuff_cov.shape[1]
        if m:
            scov[b, :, :m] = s.stuff_cov
            spres[b, :, :m] = s.stuff_present
            sdist[b, :, :m] = s.stuff_dist
        if len(s.stuff_pos_val):
            t, node, cell = s.stuff_pos_idx.T
            srows.append((b * T + t) * max(ns, 1) + node)
            scols.append(cell)
            svals.append(s.stuff_pos_val)
    R = B * T * npad * 4
    Rs = B * T * max(ns, 1)

    def csr(r, c, v, n_rows):
        if not r:
            return sp.csr_matrix((n_rows, G2))
        return sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(n_rows, G2))

    return Batch(
        size=B, frames=T, n_thing=nt, n_stuff=ns,
        thing_cov=cov.reshape(R, N_CHANNELS),
        thing_pos=csr(rows, cols, vals, R),
        thing_gate_=graphs.thing_gate(xyz, present, config.mu_thing),
        stuff_cov=scov.reshape(Rs, N_CHANNELS),
        stuff_pos=csr(srows, scols, svals, Rs),
        stuff_gate_=graphs.stuff_gate(sdist, spres, config.mu_stuff),
        motion=np.stack([s.motion.reshape(-1) for s in scenes]),
        thing_ids=[list(s.thing_ids) for s in scenes],
    )


# ------------------------------------------------------------------- forward


@dataclass
class Outputs:
    response_logits: Tensor      # (B, 2)
    intention_logits: Tensor     # (B, 12)
    step_logits: list[Tensor]    # L x (B, 2)
    thing_affinity: np.ndarray   # (B, T, N+1, N+1)
    stuff_affinity: np.ndarray   # (B, T, M+1, M+1)

    @property
    def response_probs(self) -> np.ndarray:
        return softmax(self.response_logits).value

    @property
    def intention_probs(self) -> np.ndarray:
        return softmax(self.intention_logits).value


def lstm_cell(x: Tensor, h: Tensor | None, c: Tensor | None, W: Tensor, b: Tensor, hidden: int):
    z = add(matmul(x if h is None else concat([x, h], axis=-1), W), b)
    i = sigmoid(take(z, (slice(None), slice(0, hidden))))
    f = sigmoid(take(z, (slice(None), slice(hidden, 2 * hidden))))
    g = tanh(take(z, (slice(None), slice(2 * hidden, 3 * hidden))))
    o = sigmoid(take(z, (slice(None), slice(3 * hidden, 4 * hidden))))
    c_new = mul(i, g) if c is None else add(mul(f, c), mul(i, g))
    return mul(o, tanh(c_new)), c_new


def _run_graph(p, prefix: str, x0: Tensor, gate: np.ndarray, layers: int) -> tuple[Tensor, Tensor]:
    g = graphs.affinity(x0, gate, p[f"{prefix}.w"], p[f"{prefix}.w_prime"])
    x = x0
    for l in range(layers):
        x = graphs.gcn_layer(g, x, p[f"{prefix}.layer{l}.W"], p[f"{prefix}.layer{l}.gamma"], p[f"{prefix}.layer{l}.beta"])
    return x, g


def encode_interactions(p, fused: Tensor, hidden: int) -> tuple[Tensor, list[Tensor]]:
    """LSTM over ``(B, T, D)`` fused Ego features from a zero state."""
    W, b = p["encoder.W"], p["encoder.b"]
    B = fused.shape[0]
    h = Tensor(np.zeros((B, hidden)))
    c = Tensor(np.zeros((B, hidden)))
    states = []
    for t in range(fused.shape[1]):
        h, c = lstm_cell(take(fused, (slice(None), t)), h, c, W, b, hidden)
        states.append(h)
    return h, states


def intention_repr(p, motion: np.ndarray) -> Tensor:
    return tanh(add(matmul(Tensor(motion), p["backbone.intent.w"]), p["backbone.intent.b"]))


def trn_decode(p, enc: Tensor, intent: Tensor, hidden: int, steps: int) -> tuple[Tensor, list[Tensor]]:
    h = add(matmul(intent, p["trn.h0.W"]), p["trn.h0.b"])
    c = Tensor(np.zeros(h.shape))
    future = None
    step_logits = []
    for _ in range(steps):
        h, c = lstm_cell(enc, h, c, p["trn.decoder.W"], p["trn.decoder.b"], hidden)
        step_logits.append(add(matmul(h, p["trn.step_head.W"]), p["trn.step_head.b"]))
        future = h if future is None else add(future, h)
    sta, _ = lstm_cell(concat([enc, future], axis=-1), None, None, p["trn.sta.W"], p["trn.sta.b"], hidden)
    logits = add(matmul(sta, p["heads.response.W"]), p["heads.response.b"])
    return logits, step_logits


def forward(p: dict[str, Tensor], batch: Batch, config: ModelConfig) -> Outputs:
    B, T, D = batch.size, batch.frames, config.dim
    npad, ms = batch.n_thing + 1, max(batch.n_stuff, 1)
    E, P = p["backbone.embed"], p["backbone.pos"]

    samples = add(matmul(Tensor(batch.thing_cov), E), spmm(batch.thing_pos, P))
    x_thing = max_(reshape(samples, (B, T, npad, 4, D)), axis=3)
    x_stuff = reshape(add(matmul(Tensor(batch.stuff_cov), E), spmm(batch.stuff_pos, P)), (B, T, ms, D))
    ego0 = take(x_thing, (slice(None), slice(None), slice(npad - 1, npad)))
    x_stuff = concat([x_stuff, ego0], axis=2)

    out_t, g_t = _run_graph(p, "ego_thing", x_thing, batch.thing_gate_, config.thing_layers)
    out_s, g_s = _run_graph(p, "ego_stuff", x_stuff, batch.stuff_gate_, config.stuff_layers)
    fused = add(take(out_t, (slice(None), slice(None), npad - 1)), take(out_s, (slice(None), slice(None), ms)))

    enc, _ = encode_interactions(p, fused, config.hidden)
    intent = intention_repr(p, batch.motion)
    logits, step_logits = trn_decode(p, enc, intent, config.hidden, config.decoder_len)
    int_logits = add(matmul(intent, p["heads.intention.W"]), p["heads.intention.b"])
    return Outputs(logits, int_logits, step_logits, g_t.value, g_s.value)


def compute_loss(out: Outputs, intentions, responses, stage: int, config: ModelConfig) -> Tensor:
    """Stage 1: intention cross-entropy; stage 2: response + intention, equally weighted."""
    loss = cross_entropy(out.intention_logits, intentions)
    if stage == 1:
        return loss
    loss = add(loss, cross_entropy(out.response_logits, responses))
    if config.step_loss:
        for s in out.step_logits:
            loss = add(loss, mul(cross_entropy(s, responses), 1.0 / len(out.step_logits)))
    return loss


# ------------------------------------------------------------------- predict


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]

    @classmethod
    def create(cls, config: ModelConfig | None = None) -> Model:
        config = config or ModelConfig()
        return cls(config, init_params(config))

    def run(self, scenes: list[PreparedScene]) -> Outputs:
        return forward(self.params, make_batch(scenes, self.config), self.config)

    def predict(self, clip: Clip, intervention: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Next-frame (p_go, p_stop) and intention distribution for one clip."""
        out = self.run([prepare_scene(clip, intervention, self.config.grid)])
        return out.response_probs[0], out.intention_probs[0]

    def save(self, path) -> None:
        save_checkpoint(path, self.params, self.config)

    @classmethod
    def load(cls, path) -> Model:
        params, config = load_checkpoint(path)
        return cls(config, params)


# ----------------------------------------------------------------- checkpoint


def checkpoint_bytes(params: dict[str, Tensor], config: ModelConfig) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    cfg = json.dumps(asdict(config), sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        value = np.ascontiguousarray(params[name].value, dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}Q", *value.shape))
        buf.write(value.tobytes())
    return buf.getvalue()


def save_checkpoint(path, params: dict[str, Tensor], config: ModelConfig) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, config))


def parse_checkpoint(data: bytes) -> tuple[dict[str, Tensor], ModelConfig]:
    if data[:8] != CKPT_MAGIC:
        raise DroidError("bad_checkpoint", "missing checkpoint magic header")
    off = 8

    def read(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, data, off)
        off += struct.calcsize(fmt)
        return vals

    try:
        (version,) = read("<I")
        if version != CKPT_VERSION:
            raise DroidError("bad_checkpoint", f"unsupported checkpoint version {version}")
        (n,) = read("<I")
        config = ModelConfig.from_dict(json.loads(data[off:off + n].decode()))
        off += n
        (count,) = read("<I")
        params = {}
        for _ in range(count):
            (n,) = read("<I")
            name = data[off:off + n].decode()
            off += n
            (ndim,) = read("<I")
            shape = read(f"<{ndim}Q") if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            value = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
            params[name] = Tensor(value, True, name=name)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DroidError("bad_checkpoint", f"corrupt checkpoint: {exc}") from None
    if off != len(data):
        raise DroidError("bad_checkpoint", "trailing bytes after checkpoint tensors")
    return params, config


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DroidError("missing_checkpoint", f"cannot read checkpoint {path}: {exc.strerror}") from None
    return parse_checkpoint(data)
