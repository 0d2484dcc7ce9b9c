"""Gene and vision transformer encoders plus projection heads.

Parameters live in flat ``dict[str, Tensor]`` stores keyed by dotted
names (``blocks.0.wq``), which is also the checkpoint layout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .genedata import PAD_ID
from .tensor import (Tensor, concat, layer_norm, load_dtn, matmul, save_dtn, softmax,
                     take_rows)

CSP_GRID = 3


@dataclass
class GeneEncoderConfig:
    vocab_size: int  # V + 2
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    max_len: int = 64
    dropout: float = 0.0
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} is not divisible by n_heads {self.n_heads}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    @classmethod
    def full_scale(cls, n_genes: int = 20_310) -> "GeneEncoderConfig":
        return cls(vocab_size=n_genes + 2, dim=512, n_layers=12, n_heads=16,
                   ffn_dim=1024, max_len=1500)


@dataclass
class VisionEncoderConfig:
    image_side: int = 48
    mini_patch_side: int = 8
    channels: int = 3
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    grid: int = CSP_GRID
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_side % self.mini_patch_side:
            raise ValueError(f"image side {self.image_side} is not divisible by "
                             f"mini-patch side {self.mini_patch_side}")
        if self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} is not divisible by n_heads {self.n_heads}")

    @property
    def tokens_per_side(self) -> int:
        return self.image_side // self.mini_patch_side

    @property
    def n_tokens(self) -> int:
        return self.tokens_per_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.mini_patch_side ** 2


# -- parameter helpers -----------------------------------------------------
def _param(value, name: str) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _linear_init(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, fan_in ** -0.5, size=(fan_in, fan_out))


def init_block(rng, prefix: str, dim: int, ffn_dim: int) -> dict[str, Tensor]:
    p = {}
    for n in ("q", "k", "v", "o"):
        p[f"{prefix}.w{n}"] = _linear_init(rng, dim, dim)
        p[f"{prefix}.b{n}"] = np.zeros(dim)
    p[f"{prefix}.ln1_g"] = np.ones(dim)
    p[f"{prefix}.ln1_b"] = np.zeros(dim)
    p[f"{prefix}.ln2_g"] = np.ones(dim)
    p[f"{prefix}.ln2_b"] = np.zeros(dim)
    p[f"{prefix}.w1"] = _linear_init(rng, dim, ffn_dim)
    p[f"{prefix}.b1"] = np.zeros(ffn_dim)
    p[f"{prefix}.w2"] = _linear_init(rng, ffn_dim, dim) * 0.5
    p[f"{prefix}.b2"] = np.zeros(dim)
    return {k: _param(v, k) for k, v in p.items()}


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w) if x.ndim >= 2 else matmul(x.reshape(1, -1), w).reshape(-1)
    return y + b if b is not None else y


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


def attention(x: Tensor, p: dict, prefix: str, n_heads: int,
              key_mask: np.ndarray | None) -> Tensor:
    b, s, d = x.shape
    dh = d // n_heads

    def heads(t):
        return t.reshape(b, s, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"]))
    k = heads(linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"]))
    v = heads(linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"]))
    scores = matmul(q, k.swap_last()) * (1.0 / np.sqrt(dh))
    mask = None if key_mask is None else key_mask[:, None, None, :]
    att = softmax(scores, mask)
    out = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, s, d)
    return linear(out, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def transformer_block(x: Tensor, p: dict, prefix: str, n_heads: int, act: str,
                      eps: float, key_mask=None, drop: float = 0.0, rng=None) -> Tensor:
    """Pre-norm block: x + Attn(LN(x)), then x + FFN(LN(x))."""
    h = layer_norm(x, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"], eps)
    x = x + dropout(attention(h, p, prefix, n_heads, key_mask), drop, rng)
    h = layer_norm(x, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"], eps)
    h = linear(h, p[f"{prefix}.w1"], p[f"{prefix}.b1"])
    h = h.relu() if act == "relu" else h.gelu()
    h = linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])
    return x + dropout(h, drop, rng)


def masked_mean(states: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the sequence axis of ``[B, S, D]`` restricted to ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError(f"sequence {int(np.argmin(counts))} has no non-PAD position to pool")
    w = (mask / counts[:, None])[:, None, :]
    b, _, d = states.shape
    return matmul(Tensor(w), states).reshape(b, d)


# -- gene encoder ----------------------------------------------------------
class GeneEncoder:
    def __init__(self, config: GeneEncoderConfig, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        if params is None:
            rng = np.random.default_rng(seed)
            c = config
            params = {
                "tok_emb": _param(rng.normal(0.0, 0.1, (c.vocab_size, c.dim)), "tok_emb"),
                "pos_emb": _param(rng.normal(0.0, 0.02, (c.max_len, c.dim)), "pos_emb"),
                "dec_bias": _param(np.zeros(c.vocab_size), "dec_bias"),
            }
            for layer in range(c.n_layers):
                params.update(init_block(rng, f"blocks.{layer}", c.dim, c.ffn_dim))
        self.params = params

    @property
    def mask_id(self) -> int:
        return self.config.vocab_size - 1

    def embed(self, ids) -> tuple[Tensor, np.ndarray]:
        """Token plus position embedding; returns (x0 [B, N, D], non-PAD mask)."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        n = ids.shape[1]
        if n > self.config.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")
        x = take_rows(self.params["tok_emb"], ids)
        pos = self.params["pos_emb"]
        if n != pos.shape[0]:
            pos = pos[:n]
        return x + pos, ids != PAD_ID

    def encode(self, x0: Tensor, mask: np.ndarray, rng=None) -> tuple[Tensor, Tensor]:
        """Run the blocks; returns (hidden [B, N, D], pooled [B, D])."""
        c = self.config
        mask = np.asarray(mask, dtype=bool)
        if np.any(mask.sum(axis=1) == 0):
            raise ValueError("all positions are PAD")
        x = x0
        for layer in range(c.n_layers):
            x = transformer_block(x, self.params, f"blocks.{layer}", c.n_heads, "relu",
                                  c.ln_eps, key_mask=mask, drop=c.dropout, rng=rng)
        return x, masked_mean(x, mask)

    def forward(self, ids, rng=None) -> tuple[Tensor, Tensor]:
        x0, mask = self.embed(ids)
        return self.encode(x0, mask, rng)

    def decode(self, h: Tensor) -> Tensor:
        """Tied-embedding token logits for hidden vectors ``[M, D]``."""
        return matmul(h, self.params["tok_emb"].swap_last()) + self.params["dec_bias"]


def embed_gene_tokens(encoder: GeneEncoder, ids):
    return encoder.embed(ids)


def gene_encoder_forward(encoder: GeneEncoder, x0: Tensor, mask):
    return encoder.encode(x0, mask)


# -- vision encoder --------------------------------------------------------
def patchify_images(images: np.ndarray, side: int) -> np.ndarray:
    """``[B, C, H, W]`` -> ``[B, n_tokens, C*side*side]`` in row-major token order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    b, c, h, w = images.shape
    if h % side or w % side:
        raise ValueError(f"image {h}x{w} is not divisible into {side}x{side} patches")
    gh, gw = h // side, w // side
    x = images.reshape(b, c, gh, side, gw, side).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * side * side)


class VisionEncoder:
    """ViT with a CLS token and a pretext slot: ``[CLS, PRETEXT, patches]``.

    The pretext slot holds the embedded reference patch when a region is
    encoded, and a learned constant when a plain patch is encoded.
    """

    def __init__(self, config: VisionEncoderConfig, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        if params is None:
            rng = np.random.default_rng(seed)
            c = config
            params = {
                "patch_w": _param(_linear_init(rng, c.patch_dim, c.dim), "patch_w"),
                "patch_b": _param(np.zeros(c.dim), "patch_b"),
                "cls": _param(rng.normal(0.0, 0.02, c.dim), "cls"),
                "pretext": _param(rng.normal(0.0, 0.02, c.dim), "pretext"),
                "pos_emb": _param(rng.normal(0.0, 0.02, (c.n_tokens + 2, c.dim)), "pos_emb"),
            }
            for layer in range(c.n_layers):
                params.update(init_block(rng, f"blocks.{layer}", c.dim, c.ffn_dim))
        self.params = params

    def patchify(self, images) -> Tensor:
        c = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.shape[-1] != c.image_side or images.shape[-2] != c.image_side:
            raise ValueError(f"expected {c.image_side}x{c.image_side} images, got {images.shape[-2:]}")
        flat = patchify_images(images, c.mini_patch_side)
        return linear(Tensor(flat), self.params["patch_w"], self.params["patch_b"])

    def embed_pretext(self, refs) -> Tensor:
        c = self.config
        refs = np.asarray(refs, dtype=np.float64)
        if refs.ndim == 3:
            refs = refs[None]
        if refs.shape[-2:] != (c.mini_patch_side, c.mini_patch_side):
            raise ValueError(f"reference patch must be {c.mini_patch_side}x{c.mini_patch_side}, "
                             f"got {refs.shape[-2:]}")
        flat = refs.reshape(len(refs), 1, c.patch_dim)
        return linear(Tensor(flat), self.params["patch_w"], self.params["patch_b"])

    def forward(self, images, refs=None, tokens: Tensor | None = None):
        """Return (cls [B, D], patch token states [B, n, D], pretext state [B, D])."""
        c = self.config
        tokens = tokens if tokens is not None else self.patchify(images)
        b = tokens.shape[0]
        cls = self.params["cls"].expand((b, 1, c.dim))
        if refs is None:
            pre = self.params["pretext"].expand((b, 1, c.dim))
        else:
            pre = self.embed_pretext(refs)
            if pre.shape[0] != b:
                raise ValueError("one reference patch per image is required")
        x = concat([cls, pre, tokens], axis=1) + self.params["pos_emb"]
        for layer in range(c.n_layers):
            x = transformer_block(x, self.params, f"blocks.{layer}", c.n_heads, "gelu", c.ln_eps)
        return x[:, 0, :], x[:, 2:, :], x[:, 1, :]


def grid_bins(tokens_per_side: int, grid: int = CSP_GRID) -> list[int]:
    """Per-axis bin sizes, as equal as possible, larger bins first."""
    if tokens_per_side < grid:
        raise ValueError(f"tokens_per_side {tokens_per_side} is smaller than the {grid}x{grid} grid")
    base, rem = divmod(tokens_per_side, grid)
    return [base + 1 if i < rem else base for i in range(grid)]


def grid_pool_matrix(tokens_per_side: int, grid: int = CSP_GRID) -> np.ndarray:
    """``[grid*grid, tokens_per_side**2]`` averaging weights, row-major bins."""
    sizes = grid_bins(tokens_per_side, grid)
    edges = np.concatenate([[0], np.cumsum(sizes)])
    w = np.zeros((grid * grid, tokens_per_side ** 2))
    for bi in range(grid):
        for bj in range(grid):
            rows = range(edges[bi], edges[bi + 1])
            cols = range(edges[bj], edges[bj + 1])
            cells = [r * tokens_per_side + q for r in rows for q in cols]
            w[bi * grid + bj, cells] = 1.0 / len(cells)
    return w


def grid_pool(token_states: Tensor, tokens_per_side: int, grid: int = CSP_GRID) -> Tensor:
    """``[B, n, D]`` (or ``[n, D]``) token states -> ``[B, 9, D]`` bin means."""
    single = token_states.ndim == 2
    if single:
        token_states = token_states.reshape(1, *token_states.shape)
    if token_states.shape[1] != tokens_per_side ** 2:
        raise ValueError(f"{token_states.shape[1]} tokens do not form a {tokens_per_side}-sided grid")
    w = Tensor(grid_pool_matrix(tokens_per_side, grid).T)
    pooled = matmul(token_states.swap_last(), w).swap_last()
    return pooled.reshape(grid * grid, -1) if single else pooled


# -- heads -----------------------------------------------------------------
class Heads:
    """CSP MLP head, alignment projections and the shared temperature."""

    def __init__(self, vision_dim: int, gene_dim: int, shared_dim: int = 128,
                 csp_dim: int | None = None, tau: float = 10.0, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.shared_dim = shared_dim
        if params is None:
            rng = np.random.default_rng(seed)
            csp_dim = csp_dim or vision_dim
            p = {
                "csp_w1": _linear_init(rng, vision_dim, vision_dim),
                "csp_b1": np.zeros(vision_dim),
                "csp_w2": _linear_init(rng, vision_dim, csp_dim),
                "csp_b2": np.zeros(csp_dim),
                "img_proj_w": _linear_init(rng, vision_dim, shared_dim),
                "img_proj_b": np.zeros(shared_dim),
                "gene_proj_w": _linear_init(rng, gene_dim, shared_dim),
                "gene_proj_b": np.zeros(shared_dim),
                "tau": np.asarray(tau),
            }
            params = {k: _param(v, k) for k, v in p.items()}
        self.params = params

    def csp(self, x: Tensor) -> Tensor:
        p = self.params
        return linear(linear(x, p["csp_w1"], p["csp_b1"]).gelu(), p["csp_w2"], p["csp_b2"])

    def image(self, x: Tensor) -> Tensor:
        return linear(x, self.params["img_proj_w"], self.params["img_proj_b"])

    def gene(self, x: Tensor) -> Tensor:
        return linear(x, self.params["gene_proj_w"], self.params["gene_proj_b"])

    @property
    def tau(self) -> Tensor:
        return self.params["tau"]


def project(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return linear(x, w, b)


# -- checkpoints -----------------------------------------------------------
def save_params(directory, groups: dict[str, dict[str, Tensor]], config: dict) -> None:
    """Write one DTN1 file per parameter plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for group, params in groups.items():
        for name, t in params.items():
            key = f"{group}/{name}"
            fname = key.replace("/", "__") + ".dtn"
            save_dtn(directory / fname, t.data)
            files[key] = {"file": fname, "shape": list(t.shape)}
    manifest = {"params": files, "config": config}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")


def load_params(directory) -> tuple[dict[str, dict[str, Tensor]], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    groups: dict[str, dict[str, Tensor]] = {}
    for key, entry in manifest["params"].items():
        group, name = key.split("/", 1)
        arr = load_dtn(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"{key}: stored shape {arr.shape} differs from manifest {entry['shape']}")
        groups.setdefault(group, {})[name] = Tensor(arr, requires_grad=True, name=name)
    return groups, manifest["config"]


def config_dict(cfg) -> dict:
    return asdict(cfg)
