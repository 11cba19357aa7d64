"""Hierarchical residual codec with separate entropy and decoder branches.

Data flow for an N-stage model (stage 1 coarsest)::

    x --enc--> h_N ... h_1
    e_0 -> [up, blocks] -> ctx_i -> (mu_i, sigma_i)
                        ctx_i ++ h_i -> z_i -> zhat_i ;  e_i = ctx_i + proj(zhat_i)
    r_0 -> [up, fuse(r, zhat_i, e_i), blocks] -> r_i  ...  r_N -> head -> x_hat

Parameters are tagged ``enc`` / ``dec`` / ``pz``.  Everything needed to
reproduce (mu_i, sigma_i) from decoded symbols lives in ``pz``.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ..entropy import ScaleTable, default_scale_table
from ..numerics import ContractError, DimensionError, Parameter, Tensor, no_grad, ops
from ..numerics.checkpoint import deserialize_params, load_checkpoint, serialize_params
from .config import ModelConfig

SIGMA_MIN = 0.05
NORM_EPS = 1e-6
PZ_BUDGET = 0.25  # the entropy branch stays lightweight


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize_residual(z: np.ndarray, mu: np.ndarray, mode: str = "round", rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Round mode: mu + round(z - mu), ties away from zero.  Noise mode: z + U(-0.5, 0.5)."""
    z = np.asarray(z)
    mu = np.asarray(mu)
    if z.shape != mu.shape:
        raise DimensionError(f"z shape {z.shape} != mu shape {mu.shape}")
    if mode == "round":
        return (mu + round_half_away(z - mu)).astype(z.dtype, copy=False)
    if mode == "noise":
        if rng is None:
            raise ContractError("noise quantization needs a seeded generator")
        return z + rng.uniform(-0.5, 0.5, size=z.shape).astype(z.dtype)
    raise ValueError(f"unknown quantization mode {mode!r}")


@dataclass
class StageLatent:
    stage: int
    mu: Tensor
    sigma: Tensor
    zhat: Tensor
    e: Tensor
    z: Optional[Tensor] = None
    symbols: Optional[np.ndarray] = None  # integer residuals in round mode


@dataclass
class ForwardResult:
    x_hat: Tensor
    stages: list


SymbolSource = Union[Sequence[np.ndarray], Callable[[int, np.ndarray, np.ndarray], np.ndarray]]


class Model:
    """Parameters plus the encode / entropy / decode passes.

    ``table`` is the sigma discretisation shared with the entropy coder; it
    is part of the frozen entropy component and enters the fingerprint.
    """

    def __init__(self, config: ModelConfig = ModelConfig(), table: Optional[ScaleTable] = None):
        self.config = config
        self.table = table or default_scale_table()
        self.params: dict[str, Parameter] = {}
        self._rng = np.random.default_rng(config.init_seed)
        self._cond_slots: dict[str, list[tuple[str, int]]] = {"enc": [], "dec": [], "pz": []}
        self._build()
        share = self.pz_share()
        if share > PZ_BUDGET:
            raise ContractError(f"entropy branch holds {share:.1%} of the parameters, budget is {PZ_BUDGET:.0%}")

    # ------------------------------------------------------------------ build

    def _new(self, name: str, shape, group: str, std: float = 0.0, fill: float = 0.0) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        if std:
            data = self._rng.normal(0.0, std, size=shape).astype(np.float32)
        else:
            data = np.full(shape, fill, dtype=np.float32)
        p = Parameter(data, name, group)
        self.params[name] = p
        return p

    def _conv(self, name, cout, cin, k, group, gain=1.0):
        self._new(f"{name}.weight", (cout, cin, k, k), group, std=gain / math.sqrt(cin * k * k))
        self._new(f"{name}.bias", (cout,), group)

    def _block(self, name, c, group):
        cfg = self.config
        k = cfg.kernel_size
        self._new(f"{name}.dw.weight", (c, 1, k, k), group, std=1.0 / k)
        self._new(f"{name}.dw.bias", (c,), group)
        self._conv(f"{name}.pw1", cfg.expansion * c, c, 1, group)
        self._conv(f"{name}.pw2", c, cfg.expansion * c, 1, group, gain=0.1)
        self._cond_slots[group].append((name, c))

    def _build(self):
        cfg = self.config
        n, cz, ce = cfg.stages, cfg.latent_channels, cfg.context_channels
        ch = cfg.feature_channels
        f = cfg.stem_factor
        nb = cfg.blocks_per_stage

        # encoder: finest stage first (bottom-up)
        self._conv("enc.stem", ch[-1], 3, f, "enc")
        for s in reversed(range(n)):
            if s != n - 1:
                self._conv(f"enc.down{s + 1}", ch[s], ch[s + 1], 2, "enc")
            for b in range(nb):
                self._block(f"enc.stage{s + 1}.block{b}", ch[s], "enc")
        for s in range(n):
            self._conv(f"enc.latent{s + 1}.fuse", ch[s], ce + ch[s], 1, "enc")
            self._conv(f"enc.latent{s + 1}.out", cz, ch[s], 1, "enc")

        # entropy branch
        self._new("pz.e0", (1, ce, 1, 1), "pz", std=0.5)
        for s in range(n):
            for b in range(nb):
                self._block(f"pz.stage{s + 1}.block{b}", ce, "pz")
            self._conv(f"pz.stage{s + 1}.prior", 2 * cz, ce, 1, "pz", gain=0.1)
            self._conv(f"pz.stage{s + 1}.proj", ce, cz, 1, "pz")

        # decoder branch
        if cfg.variant == "parallel":
            self._new("dec.r0", (1, ce, 1, 1), "dec", std=0.5)
            prev = ce
            for s in range(n):
                self._conv(f"dec.stage{s + 1}.fuse", ch[s], prev + cz + ce, 1, "dec")
                for b in range(nb):
                    self._block(f"dec.stage{s + 1}.block{b}", ch[s], "dec")
                prev = ch[s]
            last = ch[-1]
        else:
            width = cfg.sequential_width or self._parity_width()
            self._conv("dec.fuse", width, ce, 1, "dec")
            for b in range(nb * n):
                self._block(f"dec.seq.block{b}", width, "dec")
            last = width
        self._conv("dec.head", 3 * f * f, last, 1, "dec", gain=0.5)
        self.params["dec.head.bias"].data[:] = 0.5

        # one lambda conditioner per group; heads start at zero (identity modulation)
        for group in ("enc", "pz", "dec"):
            slots = self._cond_slots[group]
            total = sum(2 * c for _, c in slots)
            self._new(f"{group}.cond.fc1.weight", (cfg.lambda_embed, 1), group, std=2.0)
            self._new(f"{group}.cond.fc1.bias", (cfg.lambda_embed,), group, std=1.0)
            self._new(f"{group}.cond.head.weight", (total, cfg.lambda_embed), group)
            self._new(f"{group}.cond.head.bias", (total,), group)

    def _parity_width(self) -> int:
        """Sequential decoder width whose parameter count best matches the parallel one."""
        target = Model(self.config.replace(variant="parallel"), self.table).count("dec")
        cfg = self.config
        k, x, emb = cfg.kernel_size, cfg.expansion, cfg.lambda_embed
        nblocks = cfg.blocks_per_stage * cfg.stages
        out_ch = 3 * cfg.stem_factor ** 2

        def dec_count(w):
            block = (w * k * k + w) + (x * w * w + x * w) + (x * w * w + w) + (2 * w * emb + 2 * w)
            return (w * cfg.context_channels + w) + nblocks * block + (out_ch * w + out_ch) + 2 * emb

        return min(range(8, 1025, 4), key=lambda w: abs(dec_count(w) - target))

    # ------------------------------------------------------------ parameters

    def parameters(self, group: Optional[str] = None) -> list[Parameter]:
        return [p for p in self.params.values() if group is None or p.group == group]

    def count(self, group: Optional[str] = None) -> int:
        return int(sum(p.data.size for p in self.parameters(group)))

    def pz_share(self) -> float:
        """Fraction of all parameters that belong to the frozen entropy branch."""
        return self.count("pz") / self.count()

    def set_trainable(self, groups: Sequence[str]) -> None:
        for p in self.params.values():
            p.set_trainable(p.group in groups)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "Model":
        """Cast every parameter in place (float64 is used by gradient checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def copy(self) -> "Model":
        clone = Model.__new__(Model)
        clone.config = self.config
        clone.table = self.table
        clone._rng = np.random.default_rng(self.config.init_seed)
        clone._cond_slots = {k: list(v) for k, v in self._cond_slots.items()}
        clone.params = {}
        for name, p in self.params.items():
            clone.params[name] = Parameter(p.data.copy(), name, p.group, p.trainable)
        return clone

    # ------------------------------------------------------------ conditioning

    def lambda_to_t(self, lambdas) -> np.ndarray:
        lam = np.atleast_1d(np.asarray(lambdas, dtype=np.float64))
        if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
            raise ValueError("lambda must be finite and positive")
        lo, hi = math.log(self.config.lambda_low), math.log(self.config.lambda_high)
        span = hi - lo if hi > lo else 1.0
        return (np.log(lam) - lo) / span

    def _modulations(self, group: str, t: np.ndarray) -> dict[str, tuple[Tensor, Tensor]]:
        P = self.params
        dtype = P[f"{group}.cond.fc1.weight"].dtype
        tt = Tensor(t.reshape(-1, 1).astype(dtype))
        h = ops.gelu(ops.linear(tt, P[f"{group}.cond.fc1.weight"], P[f"{group}.cond.fc1.bias"]))
        out = ops.linear(h, P[f"{group}.cond.head.weight"], P[f"{group}.cond.head.bias"])
        mods, off = {}, 0
        for name, c in self._cond_slots[group]:
            mods[name] = (ops.narrow(out, 1, off, c), ops.narrow(out, 1, off + c, c))
            off += 2 * c
        return mods

    # ------------------------------------------------------------ layers

    def _conv_apply(self, name, x, stride=1, groups=1, padding=0, pad_mode="zeros"):
        P = self.params
        return ops.conv2d(x, P[f"{name}.weight"], P[f"{name}.bias"], stride=stride, padding=padding, groups=groups, pad_mode=pad_mode)

    def _block_apply(self, name, x, mods):
        k = self.config.kernel_size
        c = x.shape[1]
        y = self._conv_apply(f"{name}.dw", x, groups=c, padding=k // 2, pad_mode="edge")
        y = ops.channel_norm(y, NORM_EPS)
        scale, shift = mods[name]
        y = ops.affine_modulate(y, scale, shift)
        y = ops.gelu(self._conv_apply(f"{name}.pw1", y))
        y = self._conv_apply(f"{name}.pw2", y)
        return ops.add(x, y)

    # ------------------------------------------------------------ passes

    def _as_input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = np.asarray(x)
            dtype = self.params["enc.stem.weight"].dtype
            x = Tensor(x.astype(dtype))
        if x.ndim == 3:
            x = Tensor(x.data[None])
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected (B, 3, H, W) image batch, got {x.shape}")
        f = self.config.total_factor
        if x.shape[2] % f or x.shape[3] % f:
            raise DimensionError(f"image size {x.shape[2]}x{x.shape[3]} not divisible by total downsampling factor {f}")
        return x

    def encode_features(self, x, lambdas) -> list[Tensor]:
        """Return the feature pyramid [h_1 (coarsest), ..., h_N (finest)]."""
        cfg = self.config
        x = self._as_input(x)
        t = self.lambda_to_t(lambdas)
        t = np.broadcast_to(t, (x.shape[0],)) if t.size == 1 else t
        mods = self._modulations("enc", t)
        n = cfg.stages
        h = self._conv_apply("enc.stem", ops.add(x, -0.5), stride=cfg.stem_factor)
        feats: list[Optional[Tensor]] = [None] * n
        for s in reversed(range(n)):
            if s != n - 1:
                h = self._conv_apply(f"enc.down{s + 1}", h, stride=2)
            for b in range(cfg.blocks_per_stage):
                h = self._block_apply(f"enc.stage{s + 1}.block{b}", h, mods)
            feats[s] = h
        return feats

    def entropy_pass(
        self,
        lambdas,
        mode: str,
        features: Optional[Sequence[Tensor]] = None,
        symbols: Optional[SymbolSource] = None,
        quant: str = "round",
        rng: Optional[np.random.Generator] = None,
        batch: Optional[int] = None,
        spatial: Optional[tuple[int, int]] = None,
    ) -> list[StageLatent]:
        """Top-down entropy-model pass.

        ``mode="encode"`` consumes encoder features and quantizes z_i.
        ``mode="decode"`` takes integer residual symbols per stage, either as a
        list or as a callback ``symbols(stage, mu, sigma)`` evaluated after the
        stage's (mu, sigma) are known (the entropy-decoding order).
        """
        cfg = self.config
        if mode == "encode":
            if features is None or symbols is not None:
                raise ContractError("encode mode needs encoder features and no symbols")
            batch = features[0].shape[0]
            h1 = features[0].shape[2:]
        elif mode == "decode":
            if symbols is None or features is not None:
                raise ContractError("decode mode needs symbols and no encoder features")
            if batch is None or spatial is None:
                raise ContractError("decode mode needs batch size and coarsest spatial size")
            h1 = spatial
            if quant != "round":
                raise ContractError("decoding is only defined for round quantization")
        else:
            raise ContractError(f"unknown entropy pass mode {mode!r}")

        t = self.lambda_to_t(lambdas)
        t = np.broadcast_to(t, (batch,)) if t.size == 1 else t
        pz_mods = self._modulations("pz", t)
        P = self.params
        cz = cfg.latent_channels
        out: list[StageLatent] = []
        e = None
        for s in range(cfg.stages):
            if s == 0:
                ctx = ops.expand_spatial(P["pz.e0"], batch, h1[0], h1[1])
            else:
                ctx = ops.upsample_nearest2x(e)
            for b in range(cfg.blocks_per_stage):
                ctx = self._block_apply(f"pz.stage{s + 1}.block{b}", ctx, pz_mods)
            prm = self._conv_apply(f"pz.stage{s + 1}.prior", ctx)
            mu = ops.narrow(prm, 1, 0, cz)
            sigma = ops.add(ops.softplus(ops.narrow(prm, 1, cz, cz)), SIGMA_MIN)

            z = sym = None
            if mode == "encode":
                hz = ops.concat([ctx, features[s]], axis=1)
                hz = ops.gelu(self._conv_apply(f"enc.latent{s + 1}.fuse", hz))
                z = self._conv_apply(f"enc.latent{s + 1}.out", hz)
                if quant == "noise":
                    if rng is None:
                        raise ContractError("noise quantization needs a seeded generator")
                    u = rng.uniform(-0.5, 0.5, size=z.shape).astype(z.dtype)
                    zhat = ops.add(z, Tensor(u))
                else:
                    sym = round_half_away(z.data - mu.data)
                    zhat = Tensor((mu.data + sym).astype(mu.dtype))
            else:
                sym = symbols(s, mu.data, sigma.data) if callable(symbols) else symbols[s]
                sym = np.asarray(sym)
                if sym.shape != mu.shape:
                    raise DimensionError(f"stage {s + 1}: symbols shape {sym.shape} != latent shape {mu.shape}")
                zhat = Tensor((mu.data + sym.astype(mu.dtype)).astype(mu.dtype))

            e = ops.add(ctx, self._conv_apply(f"pz.stage{s + 1}.proj", zhat))
            out.append(StageLatent(stage=s + 1, mu=mu, sigma=sigma, zhat=zhat, e=e, z=z,
                                   symbols=None if sym is None else sym.astype(np.int64)))
        return out

    def decoder_pass(self, zhats: Sequence[Tensor], es: Sequence[Tensor], lambdas) -> Tensor:
        cfg = self.config
        if len(zhats) != cfg.stages or len(es) != cfg.stages:
            raise ContractError(f"decoder expects {cfg.stages} stages, got {len(zhats)} latents / {len(es)} contexts")
        batch = zhats[0].shape[0]
        t = self.lambda_to_t(lambdas)
        t = np.broadcast_to(t, (batch,)) if t.size == 1 else t
        mods = self._modulations("dec", t)
        if cfg.variant == "parallel":
            r = None
            for s in range(cfg.stages):
                hs, ws = zhats[s].shape[2:]
                if s == 0:
                    rin = ops.expand_spatial(self.params["dec.r0"], batch, hs, ws)
                else:
                    rin = ops.upsample_nearest2x(r)
                r = self._conv_apply(f"dec.stage{s + 1}.fuse", ops.concat([rin, zhats[s], es[s]], axis=1))
                for b in range(cfg.blocks_per_stage):
                    r = self._block_apply(f"dec.stage{s + 1}.block{b}", r, mods)
        else:
            r = self._conv_apply("dec.fuse", es[-1])
            for b in range(cfg.blocks_per_stage * cfg.stages):
                r = self._block_apply(f"dec.seq.block{b}", r, mods)
        return ops.depth_to_space(self._conv_apply("dec.head", r), cfg.stem_factor)

    def forward(self, x, lambdas, quant: str = "noise", rng: Optional[np.random.Generator] = None) -> ForwardResult:
        feats = self.encode_features(x, lambdas)
        stages = self.entropy_pass(lambdas, "encode", features=feats, quant=quant, rng=rng)
        x_hat = self.decoder_pass([s.zhat for s in stages], [s.e for s in stages], lambdas)
        return ForwardResult(x_hat=x_hat, stages=stages)

    def reconstruct(self, x, lam: float) -> tuple[np.ndarray, list[StageLatent]]:
        """Round-mode encode+decode of one image without entropy coding.  Returns (H, W, 3) in [0, 1]."""
        with no_grad():
            res = self.forward(image_to_batch(x), lam, quant="round")
        return batch_to_image(res.x_hat.data), res.stages

    # ------------------------------------------------------------ persistence

    def to_bytes(self) -> bytes:
        return serialize_params(self.params.values(), self.config.to_text())

    def save(self, path) -> None:
        from pathlib import Path

        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Model":
        text, entries = deserialize_params(blob)
        return cls._from_entries(text, entries)

    @classmethod
    def load(cls, path) -> "Model":
        text, entries = load_checkpoint(path)
        return cls._from_entries(text, entries)

    @classmethod
    def _from_entries(cls, text, entries) -> "Model":
        model = cls(ModelConfig.from_text(text))
        if len(entries) != len(model.params):
            raise ValueError(f"checkpoint has {len(entries)} parameters, model expects {len(model.params)}")
        for name, group, arr in entries:
            p = model.params.get(name)
            if p is None or p.group != group or p.data.shape != arr.shape:
                raise ValueError(f"checkpoint entry {name!r} ({group}, {arr.shape}) does not match the model")
            p.data = arr.copy()
        return model


def image_to_batch(x) -> np.ndarray:
    """(H, W, 3) or (B, H, W, 3) pixel arrays -> (B, 3, H, W) float32."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def batch_to_image(x: np.ndarray, clamp: bool = True) -> np.ndarray:
    out = x.transpose(0, 2, 3, 1)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out[0] if out.shape[0] == 1 else out


def model_fingerprint(model: Model, group: str = "pz") -> bytes:
    """SHA-256 over the named group's parameters (sorted by name) and the sigma table."""
    h = hashlib.sha256()
    for p in sorted(model.parameters(group), key=lambda q: q.name):
        name = p.name.encode("utf-8")
        h.update(struct.pack("<I", len(name)) + name)
        h.update(struct.pack(f"<B{p.data.ndim}I", p.data.ndim, *p.data.shape))
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    h.update(model.table.to_bytes())
    return h.digest()
