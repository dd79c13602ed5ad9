"""Reference forward kernels: prompt encoding, ROI pooling, query decoding, mask scoring, losses."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import BatchTooSmall, EmptyMask, InvalidTarget, ShapeMismatch, UnknownTerm
from .labels import Terminology

D_MODEL = 768
D_PIXEL = 64
N_LAYERS = 6
N_HEADS = 8
TAU = 0.07
EPS = 1e-7

TermLike = Union[str, Terminology]


def _text(term: TermLike) -> str:
    return term.name if isinstance(term, Terminology) else str(term)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n == 0, 1.0, n)


# ---------------------------------------------------------------------------
# prompt providers
# ---------------------------------------------------------------------------


class HashPromptProvider:
    """Deterministic toy text encoder: a Gaussian vector seeded by a hash of the text."""

    def __init__(self, d: int = D_MODEL, seed: int = 0):
        self.d = d
        self.seed = seed

    def __call__(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{text}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.standard_normal(self.d)


class FilePromptProvider:
    """Embeddings computed elsewhere: ``<stem>.bin`` (little-endian float64 rows) + ``<stem>.json``."""

    def __init__(self, stem):
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        self.d = int(meta["dim"])
        self.rows: dict[str, int] = dict(meta["terms"])
        self.table = np.fromfile(stem.with_suffix(".bin"), dtype="<f8").reshape(-1, self.d)

    def __call__(self, text: str) -> np.ndarray:
        try:
            return self.table[self.rows[text]].copy()
        except KeyError:
            raise UnknownTerm(text) from None


def write_embeddings(stem, vectors: Mapping[str, Sequence[float]]) -> None:
    stem = Path(stem)
    names = sorted(vectors)
    table = np.asarray([vectors[n] for n in names], dtype="<f8")
    if table.ndim != 2:
        raise ShapeMismatch("embedding rows must share one dimension")
    table.tofile(stem.with_suffix(".bin"))
    meta = {"schema_version": 1, "dim": table.shape[1], "terms": {n: i for i, n in enumerate(names)}}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def encode_prompt(term: TermLike, provider) -> np.ndarray:
    return _unit(np.asarray(provider(_text(term)), dtype=np.float64))


def encode_prompts(terms: Sequence[TermLike], provider) -> np.ndarray:
    return np.stack([encode_prompt(t, provider) for t in terms])


# ---------------------------------------------------------------------------
# visual features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeaturePyramid:
    """Levels ordered finest first; each is H_s x W_s x D_s x c_s with block factor ``scales[s]``."""

    levels: tuple
    scales: tuple

    def __post_init__(self):
        if not self.levels or len(self.levels) != len(self.scales):
            raise ShapeMismatch("pyramid needs >= 1 level and one scale per level")
        prev = None
        for lv in self.levels:
            if lv.ndim != 4:
                raise ShapeMismatch(f"level must be 4D, got {lv.shape}")
            sp = lv.shape[:3]
            if prev is not None and (any(a > b for a, b in zip(sp, prev)) or sp == prev):
                raise ShapeMismatch(f"level shapes must shrink: {prev} -> {sp}")
            prev = sp

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.levels[0].shape[:3]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(lv.shape[3] for lv in self.levels)


def _block_reduce(x: np.ndarray, f: Sequence[int], op) -> np.ndarray:
    """Reduce non-overlapping f-blocks over the first three axes; trailing partial blocks are kept."""
    shape = x.shape[:3]
    out_shape = tuple(-(-n // k) for n, k in zip(shape, f))
    pad = [(0, o * k - n) for o, k, n in zip(out_shape, f, shape)] + [(0, 0)] * (x.ndim - 3)
    if op == "mean":
        xp = np.pad(x.astype(np.float64), pad)
        ones = np.pad(np.ones(shape), pad[:3])
        split = (out_shape[0], f[0], out_shape[1], f[1], out_shape[2], f[2]) + x.shape[3:]
        total = xp.reshape(split).sum(axis=(1, 3, 5))
        count = ones.reshape(split[:6]).sum(axis=(1, 3, 5))
        return total / count.reshape(count.shape + (1,) * (x.ndim - 3))
    xp = np.pad(x, pad)
    split = (out_shape[0], f[0], out_shape[1], f[1], out_shape[2], f[2]) + x.shape[3:]
    return xp.reshape(split).max(axis=(1, 3, 5))


def build_pyramid(
    image: np.ndarray, dims: Sequence[int] = (32, 64, 128, 256), seed: int = 0
) -> FeaturePyramid:
    """Toy visual encoder: 2x average pooling per level and a seeded channel map.

    Levels stop early once pooling no longer shrinks the grid.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeMismatch(f"image must be 3D, got {image.shape}")
    rng = np.random.default_rng(seed)
    base = np.stack([image, image**2, np.ones_like(image)], axis=-1)
    levels, scales, prev = [], [], None
    for s, c in enumerate(dims):
        f = tuple(2**s for _ in range(3))
        pooled = _block_reduce(base, f, "mean")
        if prev is not None and pooled.shape[:3] == prev:
            break
        w = rng.standard_normal((3, c)) / np.sqrt(3)
        levels.append(np.tanh(pooled @ w))
        scales.append(f)
        prev = pooled.shape[:3]
    return FeaturePyramid(tuple(levels), tuple(scales))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

_LAYER_KEYS = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")


@dataclass
class DecoderParams:
    d: int
    d_prime: int
    n_heads: int
    level_dims: tuple
    arrays: dict = field(repr=False)
    seed: int = 0

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self.arrays if k.endswith(".wq"))

    def layer(self, i: int) -> dict:
        return {k: self.arrays[f"layer{i}.{k}"] for k in _LAYER_KEYS}

    @property
    def level_proj(self) -> list:
        return [self.arrays[f"level{s}.proj"] for s in range(len(self.level_dims))]

    @property
    def pool_proj(self) -> np.ndarray:
        return self.arrays["pool.proj"]

    @property
    def dense_proj(self) -> np.ndarray:
        return self.arrays["dense.proj"]

    @property
    def g(self) -> np.ndarray:
        return self.arrays["g"]

    @classmethod
    def init(
        cls,
        level_dims: Sequence[int],
        d: int = D_MODEL,
        d_prime: int = D_PIXEL,
        n_layers: int = N_LAYERS,
        n_heads: int = N_HEADS,
        ffn_hidden: int | None = None,
        seed: int = 0,
    ) -> "DecoderParams":
        if d % n_heads:
            raise ShapeMismatch(f"d={d} not divisible by {n_heads} heads")
        rng = np.random.default_rng(seed)
        h = ffn_hidden or d

        def w(i, o):
            return rng.standard_normal((i, o)) / np.sqrt(i)

        a: dict[str, np.ndarray] = {}
        for s, c in enumerate(level_dims):
            a[f"level{s}.proj"] = w(c, d)
        a["pool.proj"] = w(sum(level_dims), d)
        a["dense.proj"] = w(level_dims[0], d_prime)
        for i in range(n_layers):
            for k in ("wq", "wk", "wv", "wo"):
                a[f"layer{i}.{k}"] = w(d, d)
            a[f"layer{i}.w1"] = w(d, h)
            a[f"layer{i}.b1"] = np.zeros(h)
            a[f"layer{i}.w2"] = w(h, d)
            a[f"layer{i}.b2"] = np.zeros(d)
        a["g"] = w(d, d_prime)
        return cls(d, d_prime, n_heads, tuple(int(c) for c in level_dims), a, seed)

    def save(self, stem) -> None:
        stem = Path(stem)
        entries, offset = [], 0
        with open(stem.with_suffix(".bin"), "wb") as fh:
            for name in self.arrays:
                arr = np.ascontiguousarray(self.arrays[name], dtype="<f8")
                fh.write(arr.tobytes())
                entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
                offset += arr.nbytes
        manifest = {
            "schema_version": 1,
            "d": self.d,
            "d_prime": self.d_prime,
            "n_heads": self.n_heads,
            "level_dims": list(self.level_dims),
            "seed": self.seed,
            "arrays": entries,
        }
        stem.with_suffix(".json").write_text(json.dumps(manifest, indent=1) + "\n")

    @classmethod
    def load(cls, stem) -> "DecoderParams":
        stem = Path(stem)
        m = json.loads(stem.with_suffix(".json").read_text())
        blob = stem.with_suffix(".bin").read_bytes()
        arrays = {}
        for e in m["arrays"]:
            n = int(np.prod(e["shape"], dtype=np.int64))
            arrays[e["name"]] = np.frombuffer(blob, "<f8", n, e["offset"]).reshape(e["shape"]).copy()
        return cls(m["d"], m["d_prime"], m["n_heads"], tuple(m["level_dims"]), arrays, m["seed"])


def _check_levels(pyramid: FeaturePyramid, params: DecoderParams) -> None:
    if pyramid.dims != params.level_dims:
        raise ShapeMismatch(f"pyramid channels {pyramid.dims} vs params {params.level_dims}")


# ---------------------------------------------------------------------------
# ROI pooling
# ---------------------------------------------------------------------------


def roi_pool(pyramid: FeaturePyramid, mask: np.ndarray, proj: np.ndarray) -> np.ndarray:
    """Masked mean per level (mask max-pooled to each level), concatenated then projected."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pyramid.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs finest level {pyramid.shape}")
    if not mask.any():
        raise EmptyMask("ROI mask is empty")
    if proj.shape[0] != sum(pyramid.dims):
        raise ShapeMismatch(f"projection rows {proj.shape[0]} vs channels {sum(pyramid.dims)}")
    parts = []
    for level, f in zip(pyramid.levels, pyramid.scales):
        m = _block_reduce(mask, f, "max")
        if m.shape != level.shape[:3]:
            raise ShapeMismatch(f"pooled mask {m.shape} vs level {level.shape[:3]}")
        n = int(m.sum())
        parts.append(level[m].sum(axis=0) / n if n else np.zeros(level.shape[3]))
    return np.concatenate(parts) @ proj


# ---------------------------------------------------------------------------
# query decoder
# ---------------------------------------------------------------------------


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def flatten_keys(pyramid: FeaturePyramid, params: DecoderParams) -> np.ndarray:
    """All spatial positions of all levels, each projected to d: K x d."""
    _check_levels(pyramid, params)
    return np.concatenate(
        [lv.reshape(-1, lv.shape[3]) @ w for lv, w in zip(pyramid.levels, params.level_proj)]
    )


def cross_attention(x: np.ndarray, kv: np.ndarray, layer: Mapping, n_heads: int):
    """Multi-head scaled dot-product attention; returns (output m x d, weights m x heads x K)."""
    m, d = x.shape
    dh = d // n_heads
    q = (x @ layer["wq"]).reshape(m, n_heads, dh).transpose(1, 0, 2)
    k = (kv @ layer["wk"]).reshape(-1, n_heads, dh).transpose(1, 0, 2)
    v = (kv @ layer["wv"]).reshape(-1, n_heads, dh).transpose(1, 0, 2)
    attn = _softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dh))
    out = (attn @ v).transpose(1, 0, 2).reshape(m, d) @ layer["wo"]
    return out, attn.transpose(1, 0, 2)


def decode_keys(z: np.ndarray, kv: np.ndarray, params: DecoderParams, return_attention: bool = False):
    """Run the decoder stack on pre-flattened keys/values."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    x = z[None] if single else z
    if x.ndim != 2 or x.shape[1] != params.d or kv.ndim != 2 or kv.shape[1] != params.d:
        raise ShapeMismatch(f"queries {z.shape} / keys {kv.shape} vs d={params.d}")
    weights = []
    for i in range(params.n_layers):
        p = params.layer(i)
        out, attn = cross_attention(x, kv, p, params.n_heads)
        x = x + out
        x = x + np.maximum(x @ p["w1"] + p["b1"], 0.0) @ p["w2"] + p["b2"]
        weights.append(attn)
    x = x[0] if single else x
    return (x, weights) if return_attention else x


def query_decode(pyramid: FeaturePyramid, z: np.ndarray, params: DecoderParams, return_attention=False):
    """Prompt embedding(s) attend to every pyramid position through the decoder stack."""
    return decode_keys(z, flatten_keys(pyramid, params), params, return_attention)


# ---------------------------------------------------------------------------
# mask generation
# ---------------------------------------------------------------------------


def dense_features(pyramid: FeaturePyramid, params: DecoderParams) -> np.ndarray:
    """Toy per-voxel feature map u: finest level projected to d'."""
    _check_levels(pyramid, params)
    return pyramid.levels[0] @ params.dense_proj


def generate_mask(q: np.ndarray, u: np.ndarray, g: np.ndarray) -> np.ndarray:
    """score(v) = <g(q), u(v)>; q may hold a batch of m prompts."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != g.shape[0] or u.ndim != 4 or u.shape[3] != g.shape[1]:
        raise ShapeMismatch(f"q {q.shape}, g {g.shape}, u {u.shape}")
    gq = q @ g
    if gq.ndim == 1:
        return u @ gq
    return np.moveaxis(u @ gq.T, -1, 0)


def segment(image: np.ndarray, terms: Sequence[TermLike], provider, params: DecoderParams, seed: int = 0):
    """Full kernel chain for one patch: m prompts in, m score maps of the patch shape out."""
    if not terms:
        raise ShapeMismatch("need at least one prompt")
    pyramid = build_pyramid(image, params.level_dims, seed=seed)
    if len(pyramid.levels) != len(params.level_dims):
        raise ShapeMismatch(f"patch {np.shape(image)} too small for {len(params.level_dims)} levels")
    z = encode_prompts(terms, provider)
    q = query_decode(pyramid, z, params)
    return generate_mask(q, dense_features(pyramid, params), params.g)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _masked_lse(s: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log-sum-exp over ``mask`` entries and the matching softmax."""
    t = np.where(mask, s, -np.inf)
    mx = t.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(t - mx), 0.0)
    tot = e.sum(axis=1, keepdims=True)
    return (mx + np.log(tot))[:, 0], e / tot


def contrastive_loss(Z: np.ndarray, Zp: np.ndarray, tau: float = TAU, exclude_positive: bool = True):
    """Symmetric InfoNCE on raw dot products; returns (loss, dL/dZ, dL/dZp).

    With ``exclude_positive`` the denominators hold only the negatives k != i.
    """
    Z = np.asarray(Z, dtype=np.float64)
    Zp = np.asarray(Zp, dtype=np.float64)
    if Z.shape != Zp.shape or Z.ndim != 2:
        raise ShapeMismatch(f"{Z.shape} vs {Zp.shape}")
    n = Z.shape[0]
    if n < 2:
        raise BatchTooSmall(f"need N >= 2, got {n}")
    S = Z @ Zp.T / tau
    keep = ~np.eye(n, dtype=bool) if exclude_positive else np.ones((n, n), bool)
    lse_r, p_r = _masked_lse(S, keep)
    lse_c, p_c = _masked_lse(S.T, keep)
    diag = np.diag(S)
    loss = -float(np.mean((diag - lse_r) + (diag - lse_c)))
    G = (p_r + p_c.T - 2.0 * np.eye(n)) / n
    return loss, G @ Zp / tau, G.T @ Z / tau


def bce_dice_loss(p: np.ndarray, s: np.ndarray, eps: float = EPS):
    """Mean binary cross-entropy plus joint soft Dice loss; returns (loss, dL/dp).

    Probabilities are clamped to [eps, 1-eps] for the log terms only, so the
    BCE gradient is zero where clamping is active.
    """
    p = np.asarray(p, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if p.shape != s.shape:
        raise ShapeMismatch(f"{p.shape} vs {s.shape}")
    if not np.isin(s, (0.0, 1.0)).all():
        raise InvalidTarget("targets must be 0 or 1")
    pc = np.clip(p, eps, 1.0 - eps)
    n = p.size
    bce = -float(np.mean(s * np.log(pc) + (1.0 - s) * np.log1p(-pc)))
    d_bce = (-(s / pc) + (1.0 - s) / (1.0 - pc)) / n
    d_bce[(p < eps) | (p > 1.0 - eps)] = 0.0
    a = float((p * s).sum())
    b = float((p * p).sum() + (s * s).sum())
    dice = 1.0 - 2.0 * a / b if b else 0.0
    d_dice = -2.0 * (s * b - 2.0 * a * p) / (b * b) if b else np.zeros_like(p)
    return bce + dice, d_bce + d_dice


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


def recall_at_k(queries: np.ndarray, targets: np.ndarray, k: int = 1) -> float:
    """Share of queries whose own target is in the top-k by cosine; ties favour the lower index."""
    qn = _unit(np.asarray(queries, dtype=np.float64))
    tn = _unit(np.asarray(targets, dtype=np.float64))
    if qn.shape != tn.shape:
        raise ShapeMismatch(f"{qn.shape} vs {tn.shape}")
    sim = qn @ tn.T
    n = sim.shape[0]
    own = np.diag(sim)[:, None]
    lower = np.arange(n)[None, :] < np.arange(n)[:, None]
    rank = (sim > own).sum(1) + ((sim == own) & lower).sum(1)
    return float(np.mean(rank < k))
