"""Velocity-parameterized latent diffusion.

Forward noising z_t = sqrt(ab_t) z0 + sqrt(1-ab_t) eps, velocity targets
v = sqrt(ab_t) eps - sqrt(1-ab_t) z0, a conditional transformer denoiser,
deterministic reverse sampling, and the two-stage training objective
(diffusion MSE + terminal zero-latent loss + axis-masked joint loss).
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .codec import LatentShapeCode
from .dataset import ConditionSet
from .errors import InvalidArgument, TrainingDiverged
from .urdf import JOINT_TYPES

# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """alpha_bar[t] = prod_{s<=t} alpha[s-1]; index 0 is the clean end."""

    alpha: np.ndarray  # (T,) per-step alphas, alpha[t-1] = alpha_t
    alpha_bar: np.ndarray  # (T+1,) cumulative, alpha_bar[0] = 1

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "alpha_bar", ab)
        if len(ab) != len(a) + 1:
            raise InvalidArgument("alpha_bar must have length T+1")
        if abs(ab[0] - 1.0) > 1e-6:
            raise InvalidArgument("alpha_bar[0] must be 1 at the clean end")
        if np.any(np.diff(ab) >= 0):
            raise InvalidArgument("alpha_bar must be strictly decreasing")
        if ab[-1] > 0.01:
            raise InvalidArgument("alpha_bar[T] must be <= 0.01")

    @property
    def T(self) -> int:
        return len(self.alpha)

    @classmethod
    def from_alpha_bar(cls, alpha_bar) -> "NoiseSchedule":
        ab = np.asarray(alpha_bar, dtype=np.float64)
        return cls(ab[1:] / ab[:-1], ab)

    @classmethod
    def cosine(cls, T: int = 1000, s: float = 0.008) -> "NoiseSchedule":
        t = np.arange(T + 1) / T
        f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
        ab = f / f[0]
        alpha = np.clip(ab[1:] / ab[:-1], 1e-3, 1.0 - 1e-9)
        ab = np.concatenate([[1.0], np.cumprod(alpha)])
        return cls(alpha, ab)


def _check_shapes(*arrays):
    shapes = {np.asarray(a).shape for a in arrays}
    if len(shapes) > 1:
        raise InvalidArgument(f"shape mismatch: {sorted(shapes)}")


def _ab(sched: NoiseSchedule, t: int) -> float:
    if not 0 <= t <= sched.T:
        raise InvalidArgument(f"t={t} outside [0, {sched.T}]")
    return float(sched.alpha_bar[t])


def forward_noise(z0, eps, t: int, sched: NoiseSchedule) -> np.ndarray:
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_shapes(z0, eps)
    ab = _ab(sched, t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def velocity_target(z0, eps, t: int, sched: NoiseSchedule) -> np.ndarray:
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_shapes(z0, eps)
    ab = _ab(sched, t)
    return math.sqrt(ab) * eps - math.sqrt(1.0 - ab) * z0


def recover_z0(z_t, v, t: int, sched: NoiseSchedule) -> np.ndarray:
    z_t = np.asarray(z_t, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_shapes(z_t, v)
    ab = _ab(sched, t)
    return math.sqrt(ab) * z_t - math.sqrt(1.0 - ab) * v


def recover_eps(z_t, v, t: int, sched: NoiseSchedule) -> np.ndarray:
    z_t = np.asarray(z_t, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    ab = _ab(sched, t)
    return math.sqrt(1.0 - ab) * z_t + math.sqrt(ab) * v


@dataclass(frozen=True)
class DiffusionSample:
    z0: np.ndarray
    eps: np.ndarray
    t: int
    z_t: np.ndarray
    v: np.ndarray

    @classmethod
    def draw(cls, z0, eps, t: int, sched: NoiseSchedule) -> "DiffusionSample":
        return cls(np.asarray(z0, dtype=np.float64), np.asarray(eps, dtype=np.float64),
                   t, forward_noise(z0, eps, t, sched), velocity_target(z0, eps, t, sched))


def total_loss(l_diff: float, l_eot: float, l_joint: float,
               w_eot: float = 0.1, w_joint: float = 0.01) -> float:
    return l_diff + w_eot * l_eot + w_joint * l_joint


# ---------------------------------------------------------------------------
# denoiser network


@dataclass(frozen=True)
class DenoiserConfig:
    m_tokens: int = 32
    feature_width: int = 16
    width: int = 128
    n_blocks: int = 4
    n_heads: int = 4
    head_hidden: int = 128
    image_feature_width: Optional[int] = None
    n_joint_types: int = len(JOINT_TYPES)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _time_features(t_frac: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half,
                                     dtype=t_frac.dtype, device=t_frac.device))
    ang = t_frac[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class _Block(nn.Module):
    def __init__(self, width: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.self_attn = nn.MultiheadAttention(width, n_heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        self.cross_attn = nn.MultiheadAttention(width, n_heads, batch_first=True)
        self.ln3 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(),
                                 nn.Linear(4 * width, width))

    def forward(self, x, cond):
        h = self.ln1(x)
        x = x + self.self_attn(h, h, h, need_weights=False)[0]
        h = self.ln2(x)
        x = x + self.cross_attn(h, cond, cond, need_weights=False)[0]
        return x + self.mlp(self.ln3(x))


class Denoiser(nn.Module):
    """Token transformer predicting the velocity field.

    Conditioning is consumed by cross-attention over concatenated condition
    tokens (whole-shape latent, optional image features, optional context
    latent), each stream tagged with a learned stream embedding. The output
    projection is zero-initialized so an untrained model predicts v = 0.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.in_proj = nn.Linear(cfg.feature_width, w)
        self.pos_emb = nn.Parameter(0.02 * torch.randn(cfg.m_tokens, w))
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.GELU(), nn.Linear(w, w))
        self.whole_proj = nn.Linear(cfg.feature_width, w)
        self.ctx_proj = nn.Linear(cfg.feature_width, w)
        if cfg.image_feature_width:
            self.image_proj = nn.Linear(cfg.image_feature_width, w)
        self.stream_emb = nn.Parameter(0.02 * torch.randn(3, w))
        self.null_ctx = nn.Parameter(0.02 * torch.randn(1, w))
        self.blocks = nn.ModuleList([_Block(w, cfg.n_heads) for _ in range(cfg.n_blocks)])
        self.out_ln = nn.LayerNorm(w)
        self.out_proj = nn.Linear(w, cfg.feature_width)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, z_t, t_frac, whole, ctx, has_ctx, image=None):
        """z_t (B,M,Dw); t_frac (B,); whole (B,M,Dw); ctx (B,M,Dw);
        has_ctx (B,) bool; image (B,n,Di) or None."""
        x = self.in_proj(z_t) + self.pos_emb[None]
        x = x + self.time_mlp(_time_features(t_frac, self.cfg.width))[:, None, :]
        streams = [self.whole_proj(whole) + self.stream_emb[0]]
        if image is not None:
            streams.append(self.image_proj(image) + self.stream_emb[1])
        ctx_tokens = self.ctx_proj(ctx) + self.stream_emb[2]
        mask = has_ctx.to(ctx_tokens.dtype)[:, None, None]
        ctx_tokens = mask * ctx_tokens + (1.0 - mask) * self.null_ctx[None].expand_as(ctx_tokens)
        streams.append(ctx_tokens)
        cond = torch.cat(streams, dim=1)
        for block in self.blocks:
            x = block(x, cond)
        return self.out_proj(self.out_ln(x))


class _Mlp(nn.Module):
    def __init__(self, n_in: int, hidden: int, n_out: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(n_in, hidden), nn.GELU(),
                                 nn.Linear(hidden, hidden), nn.GELU(),
                                 nn.Linear(hidden, n_out))

    def forward(self, x):
        return self.net(x)


class DenoiserModel(nn.Module):
    """Denoiser plus the geometry projection and articulation heads."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.core = Denoiser(cfg)
        # geometry head: tokenwise projection, identity at init; no loss term
        # trains it, so it stays a faithful pass-through of the shared latent
        self.head_3d = nn.Linear(cfg.feature_width, cfg.feature_width, bias=True)
        with torch.no_grad():
            self.head_3d.weight.copy_(torch.eye(cfg.feature_width))
            nn.init.zeros_(self.head_3d.bias)
        flat = cfg.m_tokens * cfg.feature_width
        self.head_origin = _Mlp(flat, cfg.head_hidden, 3)
        self.head_axis = _Mlp(flat, cfg.head_hidden, 3)
        self.head_limits = _Mlp(flat, cfg.head_hidden, 2)
        self.head_type = _Mlp(flat, cfg.head_hidden, cfg.n_joint_types)

    def parameter_groups(self) -> dict:
        return {
            "denoiser": list(self.core.parameters()),
            "head_origin": list(self.head_origin.parameters()),
            "head_axis": list(self.head_axis.parameters()),
            "head_limits": list(self.head_limits.parameters()),
            "head_type": list(self.head_type.parameters()),
        }

    def articulation(self, z_shared: torch.Tensor) -> dict:
        flat = z_shared.reshape(z_shared.shape[0], -1)
        return {"origin": self.head_origin(flat), "axis": self.head_axis(flat),
                "limits": self.head_limits(flat), "type_logits": self.head_type(flat)}


def _cond_tensors(model: DenoiserModel, conds: Sequence[ConditionSet], dtype):
    cfg = model.cfg
    B = len(conds)
    whole = torch.stack([torch.as_tensor(c.whole_tokens.tokens, dtype=dtype) for c in conds])
    ctx = torch.zeros(B, cfg.m_tokens, cfg.feature_width, dtype=dtype)
    has_ctx = torch.zeros(B, dtype=torch.bool)
    for i, c in enumerate(conds):
        if c.context_tokens is not None:
            ctx[i] = torch.as_tensor(c.context_tokens.tokens, dtype=dtype)
            has_ctx[i] = True
    image = None
    if cfg.image_feature_width and any(c.image_tokens is not None for c in conds):
        n = max(len(c.image_tokens) for c in conds if c.image_tokens is not None)
        image = torch.zeros(B, n, cfg.image_feature_width, dtype=dtype)
        for i, c in enumerate(conds):
            if c.image_tokens is not None:
                image[i, : len(c.image_tokens)] = torch.as_tensor(c.image_tokens, dtype=dtype)
    return whole, ctx, has_ctx, image


def denoise(model: DenoiserModel, z_t: np.ndarray, t: int, cond: ConditionSet,
            sched: NoiseSchedule) -> np.ndarray:
    """Single deterministic denoiser evaluation on numpy data."""
    z = np.asarray(z_t, dtype=np.float64)
    if z.shape != (model.cfg.m_tokens, model.cfg.feature_width):
        raise InvalidArgument(f"latent shape {z.shape} does not match model config")
    dtype = next(model.parameters()).dtype
    whole, ctx, has_ctx, image = _cond_tensors(model, [cond], dtype)
    with torch.no_grad():
        zt = torch.as_tensor(z, dtype=dtype)[None]
        t_frac = torch.full((1,), t / sched.T, dtype=dtype)
        v = model.core(zt, t_frac, whole, ctx, has_ctx, image)
    return v[0].double().numpy()


# ---------------------------------------------------------------------------
# losses


def masked_origin_l1(pred_origin: torch.Tensor, pred_axis: torch.Tensor,
                     gt_origin: torch.Tensor) -> torch.Tensor:
    """L1 of the origin residual with its component along the predicted
    (normalized) axis removed; per-sample sum over coordinates."""
    axis = pred_axis / torch.linalg.norm(pred_axis, dim=-1, keepdim=True).clamp_min(1e-12)
    r = pred_origin - gt_origin
    r = r - (r * axis).sum(dim=-1, keepdim=True) * axis
    return r.abs().sum(dim=-1)


def joint_loss_terms(art: dict, targets: dict) -> torch.Tensor:
    """Per-sample joint loss: masked-origin L1 + axis L1 + limit L1 + type CE."""
    origin = masked_origin_l1(art["origin"], art["axis"], targets["origin"])
    axis_unit = art["axis"] / torch.linalg.norm(art["axis"], dim=-1, keepdim=True).clamp_min(1e-12)
    axis = (axis_unit - targets["axis"]).abs().sum(dim=-1)
    limits = (art["limits"] - targets["limits"]).abs().sum(dim=-1)
    ce = nn.functional.cross_entropy(art["type_logits"], targets["type"], reduction="none")
    return origin + axis + limits + ce


@dataclass
class TrainItem:
    z0: np.ndarray  # (M, Dw); zero latent for terminal items
    cond: ConditionSet
    kind: str  # "part" | "terminal"
    joint_origin: Optional[np.ndarray] = None
    joint_axis: Optional[np.ndarray] = None
    joint_type: Optional[int] = None
    joint_limits: Optional[np.ndarray] = None

    @property
    def has_joint(self) -> bool:
        return self.joint_type is not None


def build_training_items(dataset) -> list:
    """TrainItems from (record, object, cache entry) triples.

    Per object: one item per link (the first link has no context and no
    joint supervision) and one terminal item with the zero latent target.
    """
    items = []
    for record, obj, entry in dataset:
        K = len(entry.z_part)
        for i in range(K):
            cond = ConditionSet(entry.z_whole,
                                context_tokens=entry.z_parts_prefix[i - 1] if i else None)
            item = TrainItem(entry.z_part[i].tokens.copy(), cond, "part")
            joint = obj.links[i].joint
            if joint is not None:
                item.joint_origin = joint.origin.copy()
                item.joint_axis = joint.axis / np.linalg.norm(joint.axis)
                item.joint_type = JOINT_TYPES.index(joint.joint_type)
                lo = joint.lower if joint.lower is not None else 0.0
                up = joint.upper if joint.upper is not None else 0.0
                item.joint_limits = np.array([lo, up])
            items.append(item)
        cond = ConditionSet(entry.z_whole, context_tokens=entry.z_parts_prefix[K - 1])
        items.append(TrainItem(np.zeros_like(entry.z_part[0].tokens), cond, "terminal"))
    return items


def draw_noise(items: Sequence[TrainItem], sched: NoiseSchedule,
               generator: torch.Generator, dtype=torch.float32):
    """Pre-sampled (t, eps) per item, shared across loss re-evaluations."""
    B = len(items)
    t = torch.randint(1, sched.T + 1, (B,), generator=generator)
    shape = items[0].z0.shape
    eps = torch.randn((B,) + shape, generator=generator, dtype=dtype)
    return t, eps


def stage_loss(model: DenoiserModel, items: Sequence[TrainItem], sched: NoiseSchedule,
               t: torch.Tensor, eps: torch.Tensor, stage: str = "stage2",
               w_eot: float = 0.1, w_joint: float = 0.01):
    """Loss components for a batch under pre-drawn (t, eps).

    Returns (total, l_diff, l_eot, l_joint) as torch scalars. Stage 1 uses
    only the diffusion term on part items.
    """
    dtype = next(model.parameters()).dtype
    B = len(items)
    z0 = torch.stack([torch.as_tensor(it.z0, dtype=dtype) for it in items])
    eps = eps.to(dtype)
    ab = torch.as_tensor(sched.alpha_bar, dtype=dtype)[t]
    sa = torch.sqrt(ab)[:, None, None]
    sb = torch.sqrt(1.0 - ab)[:, None, None]
    z_t = sa * z0 + sb * eps
    v_target = sa * eps - sb * z0

    whole, ctx, has_ctx, image = _cond_tensors(model, [it.cond for it in items], dtype)
    t_frac = t.to(dtype) / sched.T
    v_hat = model.core(z_t, t_frac, whole, ctx, has_ctx, image)

    is_part = torch.tensor([it.kind == "part" for it in items])
    per_item_mse = ((v_hat - v_target) ** 2).mean(dim=(1, 2))
    zero = torch.zeros((), dtype=dtype)
    l_diff = per_item_mse[is_part].mean() if is_part.any() else zero

    if stage == "stage1":
        return l_diff, l_diff, zero, zero

    z0_hat = sa * z_t - sb * v_hat
    is_term = ~is_part
    l_eot = (z0_hat[is_term] ** 2).mean() if is_term.any() else zero

    joint_idx = [i for i, it in enumerate(items) if it.has_joint]
    if joint_idx:
        idx = torch.tensor(joint_idx)
        art = model.articulation(z0_hat[idx])
        targets = {
            "origin": torch.stack([torch.as_tensor(items[i].joint_origin, dtype=dtype) for i in joint_idx]),
            "axis": torch.stack([torch.as_tensor(items[i].joint_axis, dtype=dtype) for i in joint_idx]),
            "limits": torch.stack([torch.as_tensor(items[i].joint_limits, dtype=dtype) for i in joint_idx]),
            "type": torch.tensor([items[i].joint_type for i in joint_idx]),
        }
        l_joint = joint_loss_terms(art, targets).mean()
    else:
        l_joint = zero

    total = l_diff + w_eot * l_eot + w_joint * l_joint
    return total, l_diff, l_eot, l_joint


def diffusion_loss(model: DenoiserModel, batch, sched: NoiseSchedule, seed: int):
    """Mean velocity MSE over uniformly sampled t and standard-normal eps,
    with exact parameter gradients. batch: sequence of (z0, ConditionSet)."""
    if not batch:
        raise InvalidArgument("batch must be nonempty")
    items = [TrainItem(np.asarray(z0, dtype=np.float64), cond, "part") for z0, cond in batch]
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    t, eps = draw_noise(items, sched, gen, dtype)
    model.zero_grad(set_to_none=True)
    loss, *_ = stage_loss(model, items, sched, t, eps, stage="stage1")
    loss.backward()
    grads = {name: (p.grad.detach().double().numpy().copy() if p.grad is not None else None)
             for name, p in model.named_parameters()}
    return float(loss.item()), grads


# ---------------------------------------------------------------------------
# deterministic reverse sampling


def sample_steps(sched: NoiseSchedule, steps: int) -> np.ndarray:
    if steps > sched.T or steps < 1:
        raise InvalidArgument(f"steps must be in [1, {sched.T}]")
    ts = np.unique(np.round(np.linspace(0, sched.T, steps + 1)).astype(int))
    return ts[::-1]  # T ... 0


def sample_reverse(denoise_fn: Callable, cond: ConditionSet, sched: NoiseSchedule,
                   steps: int, seed: int, shape) -> np.ndarray:
    """Deterministic reverse process from seeded standard-normal z_T.

    denoise_fn(z_t, t, cond) -> velocity estimate. At each step the clean
    estimate and implied noise are recombined at the next schedule time.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape)
    ts = sample_steps(sched, steps)
    for i in range(len(ts) - 1):
        t, t_next = int(ts[i]), int(ts[i + 1])
        v = denoise_fn(z, t, cond)
        z0_hat = recover_z0(z, v, t, sched)
        ab_t = _ab(sched, t)
        ab_next = _ab(sched, t_next)
        if 1.0 - ab_t < 1e-12:
            z = z0_hat
            continue
        eps_hat = (z - math.sqrt(ab_t) * z0_hat) / math.sqrt(1.0 - ab_t)
        z = math.sqrt(ab_next) * z0_hat + math.sqrt(1.0 - ab_next) * eps_hat
    return z


def model_denoise_fn(model: DenoiserModel, sched: NoiseSchedule) -> Callable:
    def fn(z_t, t, cond):
        return denoise(model, z_t, t, cond, sched)
    return fn


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    stage: str = "stage1"
    w_eot: float = 0.1
    w_joint: float = 0.01
    learning_rate: float = 1e-4  # stage2 default per the fine-tuning setup: 1e-5
    batch_size: int = 64
    epochs: int = 500
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.stage not in ("stage1", "stage2"):
            raise InvalidArgument(f"unknown stage {self.stage!r}")
        if self.w_eot < 0 or self.w_joint < 0:
            raise InvalidArgument("loss weights must be nonnegative")


def train(model: DenoiserModel, items: Sequence[TrainItem], cfg: TrainConfig,
          sched: NoiseSchedule, checkpoint_path=None, log_every: int = 0):
    """Optimize the model in place; returns the per-epoch loss curve.

    Deterministic per seed: batching order and noise draws come from one
    seeded generator and gradients are reduced in fixed batch order.
    """
    if cfg.stage == "stage1":
        items = [it for it in items if it.kind == "part"]
    items = list(items)
    if not items:
        raise InvalidArgument("no training items")
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                            weight_decay=cfg.weight_decay)
    curve = []
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(items), generator=gen).tolist()
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, len(items), cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            t, eps = draw_noise(batch, sched, gen, next(model.parameters()).dtype)
            opt.zero_grad(set_to_none=True)
            total, l_diff, l_eot, l_joint = stage_loss(
                model, batch, sched, t, eps, cfg.stage, cfg.w_eot, cfg.w_joint)
            if not torch.isfinite(total):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}",
                                       checkpoint_path)
            total.backward()
            opt.step()
            sums += [total.item(), l_diff.item(), l_eot.item(), l_joint.item()]
            n_batches += 1
        curve.append({"epoch": epoch, "l_diff": sums[1] / n_batches,
                      "l_eot": sums[2] / n_batches, "l_joint": sums[3] / n_batches,
                      "total": sums[0] / n_batches})
        if log_every and (epoch + 1) % log_every == 0:
            c = curve[-1]
            print(f"epoch {epoch + 1}/{cfg.epochs} total {c['total']:.5f} "
                  f"diff {c['l_diff']:.5f} eot {c['l_eot']:.5f} joint {c['l_joint']:.5f}")
    if checkpoint_path is not None:
        save_checkpoint(model, sched, cfg, len(curve), checkpoint_path)
    return curve


def write_loss_csv(curve, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "l_diff", "l_eot", "l_joint", "total"])
        writer.writeheader()
        writer.writerows(curve)


# ---------------------------------------------------------------------------
# checkpoints: manifest JSON + little-endian float32 blob with named sections

_CKPT_MAGIC = b"AGCKPT1\x00"


def save_checkpoint(model: DenoiserModel, sched: NoiseSchedule, cfg: TrainConfig,
                    epoch: int, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sections = []
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        arr = p.detach().double().numpy().astype("<f4")
        sections.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "architecture": model.cfg.to_dict(),
        "schedule": {"T": sched.T, "kind": "cosine"},
        "stage": cfg.stage,
        "epoch": epoch,
        "sections": sections,
    }
    payload = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns (model, manifest). The model dtype is float32."""
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise InvalidArgument(f"not a checkpoint file: {path}")
        n = struct.unpack("<I", fh.read(4))[0]
        manifest = json.loads(fh.read(n).decode())
        blob = fh.read()
    cfg = DenoiserConfig(**manifest["architecture"])
    model = DenoiserModel(cfg)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for sec in manifest["sections"]:
            shape = tuple(sec["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count,
                                offset=sec["offset"]).reshape(shape)
            params[sec["name"]].copy_(torch.as_tensor(arr.astype(np.float32)))
    return model, manifest


# ---------------------------------------------------------------------------
# gradient audit


def finite_difference_audit(model: DenoiserModel, items: Sequence[TrainItem],
                            sched: NoiseSchedule, seed: int, n_coords: int = 64,
                            step: float = 1e-5) -> dict:
    """Central-difference check of analytic gradients of the full stage-2
    loss, per parameter group. Returns max relative error per group.
    Requires a float64 model for meaningful tolerances."""
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    t, eps = draw_noise(items, sched, gen, dtype)

    def loss_value() -> float:
        with torch.no_grad():
            total, *_ = stage_loss(model, items, sched, t, eps, "stage2")
        return float(total.item())

    model.zero_grad(set_to_none=True)
    total, *_ = stage_loss(model, items, sched, t, eps, "stage2")
    total.backward()

    rng = np.random.default_rng(seed)
    report = {}
    for group, params in model.parameter_groups().items():
        flat_grads = []
        tensors = []
        for p in params:
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            flat_grads.append(g.reshape(-1))
            tensors.append(p)
        grads = torch.cat(flat_grads).double().numpy()
        sizes = [p.numel() for p in tensors]
        cum = np.cumsum([0] + sizes)
        coords = rng.choice(cum[-1], size=min(n_coords, cum[-1]), replace=False)
        max_rel = 0.0
        for c in coords:
            pi = int(np.searchsorted(cum, c, side="right") - 1)
            local = int(c - cum[pi])
            p = tensors[pi]
            with torch.no_grad():
                flat = p.reshape(-1)
                orig = float(flat[local].item())
                flat[local] = orig + step
                up = loss_value()
                flat[local] = orig - step
                down = loss_value()
                flat[local] = orig
            fd = (up - down) / (2 * step)
            denom = max(abs(fd), abs(grads[c]), 1e-8)
            max_rel = max(max_rel, abs(fd - grads[c]) / denom)
        report[group] = max_rel
    return report
