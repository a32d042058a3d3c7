"""Three-phase training orchestration: tokenizer pretraining, dynamics
pretraining, agent finetuning, and imagination RL, with alternating batch
lengths (seven short batches, then one long) and RMS loss normalization.

A per-shard latent cache (built once after tokenizer training) keeps the
frozen encoder out of the dynamics training loop.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    load_checkpoint, load_into_module, save_checkpoint, state_dict_tensors,
)
from .configio import RunConfig
from .data import Dataset
from .dynamics import (
    DynamicsConfig, DynamicsModel, ShortcutConfig, shortcut_forcing_loss,
)
from .env import NO_TASK, THEMES
from .heads import MTPConfig, bc_reward_loss
from .imagination import (
    RLConfig, imagine, pmpo_loss, pmpo_partition, value_loss,
)
from .metrics import MetricsWriter
from .normalizer import LossNormalizer
from .tokenizer import Tokenizer, TokenizerConfig, frames_to_float, tokenizer_loss
from .transformer import AttentionConfig


# ------------------------------------------------------------ model builders

def build_tokenizer(cfg: RunConfig) -> Tokenizer:
    tok_cfg = TokenizerConfig(
        latents=cfg.latents, bottleneck=cfg.channels,
        enc=AttentionConfig(layers=cfg.tok_layers, dim=cfg.tok_dim,
                            q_heads=cfg.tok_heads, kv_heads=cfg.tok_kv_heads,
                            temporal_period=cfg.temporal_period,
                            window=cfg.tok_window),
        dec=AttentionConfig(layers=cfg.tok_layers, dim=cfg.tok_dim,
                            q_heads=cfg.tok_heads, kv_heads=cfg.tok_kv_heads,
                            temporal_period=cfg.temporal_period,
                            window=cfg.tok_window))
    return Tokenizer(tok_cfg)


def build_dynamics(cfg: RunConfig) -> DynamicsModel:
    dyn_cfg = DynamicsConfig(
        spatial=cfg.spatial, channels=cfg.channels, registers=cfg.registers,
        core=AttentionConfig(layers=cfg.layers, dim=cfg.dim,
                             q_heads=cfg.q_heads, kv_heads=cfg.kv_heads,
                             temporal_period=cfg.temporal_period,
                             window=cfg.window),
        shortcut=ShortcutConfig(k_max=cfg.k_max, k_inf=cfg.k_inf,
                                context_signal=cfg.context_signal),
        mtp=MTPConfig(horizon=cfg.mtp_horizon))
    return DynamicsModel(dyn_cfg)


def rl_config(cfg: RunConfig) -> RLConfig:
    return RLConfig(gamma=cfg.gamma, lam=cfg.lam, alpha=cfg.alpha,
                    beta=cfg.beta, horizon=cfg.imag_horizon)


# ------------------------------------------------------------ latent cache

def tokenizer_tag(ckpt_path) -> str:
    digest = hashlib.sha256(Path(ckpt_path).read_bytes()).hexdigest()
    return digest[:12]


@torch.no_grad()
def build_latent_cache(tokenizer: Tokenizer, dataset: Dataset, tag: str,
                       chunk: int = 64, batch: int = 8,
                       progress: bool = False) -> None:
    """Encode every episode once and store latents per shard.

    Episodes are processed in overlapping chunks sized so that every kept
    frame has its full temporal window inside the chunk, making the result
    identical to streaming encoding.
    """
    overlap = tokenizer.cfg.enc.window - 1
    stride = chunk - overlap
    for shard in dataset.shards:
        out_path = shard.path / f"latents-{tag}.npy"
        if out_path.exists():
            continue
        lengths = shard.manifest["lengths"]
        total = sum(lengths)
        n_l, d_b = tokenizer.cfg.latents, tokenizer.cfg.bottleneck
        store = np.empty((total, n_l, d_b), dtype=np.float16)
        row = 0
        jobs = []  # (episode_idx, start, keep_from, store_offset)
        offsets = np.concatenate([[0], np.cumsum(lengths)])
        for ei, length in enumerate(lengths):
            s = 0
            while s < length:
                start = max(0, s - overlap) if s > 0 else 0
                jobs.append((ei, start, s, offsets[ei] + s,
                             min(s + stride if s > 0 else chunk, length)))
                s = jobs[-1][4]
        # jobs: (ep, chunk_start, keep_from, store_at, keep_to)
        for j0 in range(0, len(jobs), batch):
            group = jobs[j0:j0 + batch]
            width = max(end - cs for _, cs, _, _, end in group)
            frames = torch.zeros(len(group), width, 64, 64, 3)
            for gi, (ei, cs, _, _, end) in enumerate(group):
                ep = shard.episode(ei)
                frames[gi, :end - cs] = frames_to_float(ep.frames[cs:end])
            z = tokenizer.encode(frames)
            for gi, (ei, cs, keep_from, store_at, end) in enumerate(group):
                keep = z[gi, keep_from - cs:end - cs]
                store[store_at:store_at + len(keep)] = keep.numpy().astype(np.float16)
        tmp = out_path.with_suffix(".tmp.npy")
        np.save(tmp, store)
        tmp.replace(out_path)
        if progress:
            print(f"latent cache written: {out_path}", flush=True)


class LatentView:
    """Memmapped access to cached latents, indexed like the dataset."""

    def __init__(self, dataset: Dataset, tag: str):
        self.dataset = dataset
        self._maps = []
        self._offsets = []
        for shard in dataset.shards:
            path = shard.path / f"latents-{tag}.npy"
            self._maps.append(np.load(path, mmap_mode="r"))
            lengths = shard.manifest["lengths"]
            self._offsets.append(np.concatenate([[0], np.cumsum(lengths)]))

    def clip(self, episode_index: int, t0: int, T: int) -> np.ndarray:
        si, ei = self.dataset._index[episode_index]
        off = self._offsets[si][ei]
        return np.asarray(self._maps[si][off + t0:off + t0 + T], dtype=np.float32)


# ------------------------------------------------------------ batch sampling

def labeled_episodes(cfg: RunConfig, dataset: Dataset) -> np.ndarray:
    """Per-episode action-label mask for the action-fraction experiments."""
    n = len(dataset)
    mode = cfg.action_mode
    if mode == "all":
        return np.ones(n, dtype=bool)
    if mode == "none":
        return np.zeros(n, dtype=bool)
    if mode.startswith("fraction:"):
        frac = float(mode.split(":", 1)[1])
        keep = int(round(n * frac))
        mask = np.zeros(n, dtype=bool)
        mask[:keep] = True  # first episodes in dataset order
        return mask
    if mode == "overworld-only":
        return np.array([dataset.episode(i).theme == "overworld"
                         for i in range(n)])
    raise ValueError(f"unknown action mode {cfg.action_mode!r}")


class BatchSampler:
    def __init__(self, cfg: RunConfig, dataset: Dataset,
                 latents: LatentView | None, episode_indices: list[int],
                 rng: np.random.Generator):
        self.cfg = cfg
        self.dataset = dataset
        self.latents = latents
        self.indices = list(episode_indices)
        self.rng = rng
        self.label_mask = labeled_episodes(cfg, dataset)

    def sample(self, B: int, T: int, image_frac: float = 0.0,
               with_frames: bool = False) -> dict:
        z = np.zeros((B, T, self.cfg.spatial, self.cfg.channels), np.float32)
        frames = np.zeros((B, T, 64, 64, 3), np.uint8) if with_frames else None
        act_in = np.zeros((B, T, 3), np.int64)
        act_in_labeled = np.zeros((B, T), np.float32)
        act_target = np.zeros((B, T, 3), np.int64)
        rewards = np.zeros((B, T), np.float32)
        task = np.full(B, NO_TASK, np.int64)
        for b in range(B):
            idx = self.indices[self.rng.integers(len(self.indices))]
            ep = self.dataset.episode(idx)
            t0 = int(self.rng.integers(0, len(ep) - T + 1))
            if self.latents is not None:
                z[b] = self.latents.clip(idx, t0, T).reshape(
                    T, self.cfg.spatial, self.cfg.channels)
            if with_frames:
                frames[b] = ep.frames[t0:t0 + T]
            acts = ep.actions[t0:t0 + T].astype(np.int64)
            act_target[b] = acts
            if t0 > 0:
                act_in[b] = ep.actions[t0 - 1:t0 + T - 1]
                act_in_labeled[b, :] = 1.0
            else:
                act_in[b, 1:] = acts[:-1]
                act_in_labeled[b, 1:] = 1.0
            if not self.label_mask[idx]:
                act_in_labeled[b, :] = 0.0
            rewards[b] = ep.rewards[t0:t0 + T]
            task[b] = ep.task
        image_mode = self.rng.random(B) < image_frac
        out = {
            "z": torch.from_numpy(z),
            "act_in": torch.from_numpy(act_in),
            "act_in_labeled": torch.from_numpy(act_in_labeled),
            "act_target": torch.from_numpy(act_target),
            "rewards": torch.from_numpy(rewards),
            "task": torch.from_numpy(task),
            "tagged": torch.from_numpy(task != NO_TASK),
            "image_mode": torch.from_numpy(image_mode),
        }
        if with_frames:
            out["frames"] = frames_to_float(frames)
        return out


# ------------------------------------------------------------ shared loop bits

def make_optimizer(params, cfg: RunConfig):
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: min(1.0, (step + 1) / max(1, cfg.warmup)))
    return opt, sched


def batch_plan(cfg: RunConfig, step: int) -> tuple[int, int]:
    """Deterministic short/long alternation; the long batch shrinks its
    批 size so per-step token count stays roughly constant."""
    if (step + 1) % cfg.long_every == 0:
        B = max(1, cfg.batch_size * cfg.batch_len_short // cfg.batch_len_long)
        return B, cfg.batch_len_long
    return cfg.batch_size, cfg.batch_len_short


def optimizer_state_tensors(opt) -> dict:
    out = {}
    for gi, group in enumerate(opt.param_groups):
        for pi, p in enumerate(group["params"]):
            st = opt.state.get(p)
            if not st:
                continue
            out[f"opt/{gi}.{pi}/step"] = np.array(
                [float(st["step"])], dtype=np.float64)
            out[f"opt/{gi}.{pi}/exp_avg"] = st["exp_avg"].numpy()
            out[f"opt/{gi}.{pi}/exp_avg_sq"] = st["exp_avg_sq"].numpy()
    return out


def restore_optimizer_state(opt, tensors: dict) -> None:
    for gi, group in enumerate(opt.param_groups):
        for pi, p in enumerate(group["params"]):
            key = f"opt/{gi}.{pi}/step"
            if key not in tensors:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(tensors[key][0])),
                "exp_avg": torch.from_numpy(
                    tensors[f"opt/{gi}.{pi}/exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(
                    tensors[f"opt/{gi}.{pi}/exp_avg_sq"].copy()),
            }


class TrainState:
    def __init__(self, cfg: RunConfig, modules: dict, opt, sched):
        self.cfg = cfg
        self.modules = modules
        self.opt = opt
        self.sched = sched
        self.norm = LossNormalizer()
        self.step = 0

    def save(self, path) -> None:
        tensors = {}
        for prefix, module in self.modules.items():
            tensors.update(state_dict_tensors(module, prefix + "/"))
        tensors.update(optimizer_state_tensors(self.opt))
        meta = {"config": self.cfg.asdict(), "step": self.step,
                "normalizer": self.norm.state_dict(),
                "phase": self.cfg.phase}
        save_checkpoint(path, tensors, meta)

    def load(self, path) -> None:
        tensors, meta = load_checkpoint(path)
        for prefix, module in self.modules.items():
            sub = {k: v for k, v in tensors.items()
                   if k.startswith(prefix + "/")}
            load_into_module(module, sub, prefix + "/")
        restore_optimizer_state(self.opt, tensors)
        self.norm.load_state_dict(meta["normalizer"])
        self.step = int(meta["step"])
        for _ in range(self.step):
            self.sched.step()


def clip_gradients(params, max_norm: float) -> float:
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


# ------------------------------------------------------------ phase 1a: tokenizer

def train_tokenizer(cfg: RunConfig, progress: bool = True) -> Path:
    torch.manual_seed(cfg.seed)
    dataset = Dataset(cfg.data_dir)
    train_idx, _ = dataset.split(cfg.holdout_fraction)
    tok = build_tokenizer(cfg)
    opt, sched = make_optimizer(tok.parameters(), cfg)
    state = TrainState(cfg, {"tokenizer": tok}, opt, sched)
    if cfg.resume:
        state.load(cfg.resume)
    rng = np.random.default_rng(cfg.seed)
    sampler = BatchSampler(cfg, dataset, None, train_idx, rng)
    out = Path(cfg.out)
    metrics = MetricsWriter(out.with_suffix(".metrics.jsonl"))
    g = torch.Generator().manual_seed(cfg.seed)
    while state.step < cfg.steps:
        B, T = batch_plan(cfg, state.step)
        B = max(2, B // 2)  # tokenizer frames are heavier than latents
        batch = sampler.sample(B, T, with_frames=True)
        recon, _ = tok(batch["frames"], generator=g)
        loss, parts = tokenizer_loss(recon, batch["frames"], state.norm,
                                     tok.cfg.perceptual_weight)
        opt.zero_grad()
        loss.backward()
        gn = clip_gradients(tok.parameters(), cfg.grad_clip)
        opt.step()
        sched.step()
        state.step += 1
        if state.step % cfg.log_every == 0 or state.step == cfg.steps:
            with torch.no_grad():
                mse = parts["tok_mse"]
                psnr = 10 * math.log10(1.0 / max(mse, 1e-12))
            metrics.write(state.step, loss=float(loss.detach()),
                          tok_mse=parts["tok_mse"], tok_perc=parts["tok_perc"],
                          train_psnr=psnr, grad_norm=gn)
            if progress:
                print(f"[tokenizer] step {state.step} loss={float(loss.detach()):.4f} "
                      f"psnr={psnr:.1f}dB", flush=True)
        if state.step % cfg.ckpt_every == 0 or state.step == cfg.steps:
            state.save(out)
    metrics.close()
    return out


# ------------------------------------------------------------ phase 1b / 2

def load_tokenizer(path) -> Tokenizer:
    tensors, meta = load_checkpoint(path)
    cfg = RunConfig(**meta["config"])
    tok = build_tokenizer(cfg)
    sub = {k: v for k, v in tensors.items() if k.startswith("tokenizer/")}
    load_into_module(tok, sub, "tokenizer/")
    tok.eval()
    for p in tok.parameters():
        p.requires_grad_(False)
    return tok


def load_dynamics(path) -> tuple[DynamicsModel, dict]:
    tensors, meta = load_checkpoint(path)
    cfg = RunConfig(**meta["config"])
    model = build_dynamics(cfg)
    sub = {k: v for k, v in tensors.items() if k.startswith("dynamics/")}
    load_into_module(model, sub, "dynamics/")
    return model, meta


def prepare_latents(cfg: RunConfig, dataset: Dataset,
                    progress: bool = True) -> LatentView:
    tok = load_tokenizer(cfg.tokenizer_ckpt)
    tag = tokenizer_tag(cfg.tokenizer_ckpt)
    build_latent_cache(tok, dataset, tag, progress=progress)
    return LatentView(dataset, tag)


def _dynamics_step(model, batch, cfg, state, phase2: bool):
    """One optimization step of the dynamics (+ agent heads in phase 2)."""
    g = None  # model-internal randomness comes from torch's global generator
    tagged = batch["tagged"]
    seq_mask = (~tagged).float() if phase2 else torch.ones_like(tagged).float()
    task = batch["task"].clone()
    task[task == NO_TASK] = model.task_embed.num_embeddings - 1
    loss, parts, agent_h = shortcut_forcing_loss(
        model, batch["z"], batch["act_in"], labeled=batch["act_in_labeled"],
        task=task if phase2 else None, image_mode=batch["image_mode"],
        sequence_mask=seq_mask)
    total = state.norm.scale("dyn", loss) if phase2 else loss
    out_parts = {"flow": parts["flow"], "bootstrap": parts["bootstrap"],
                 "dyn": float(loss.detach())}
    if phase2:
        bc_total, bc_parts = bc_reward_loss(
            model.heads, agent_h, batch["act_target"], batch["rewards"],
            tagged, state.norm)
        total = total + bc_total
        out_parts.update(bc_parts)
    return total, out_parts


def train_dynamics(cfg: RunConfig, progress: bool = True) -> Path:
    """Phase 1b (action-conditioned video prediction) when phase != 'agent';
    phase 2 (agent finetuning with BC + reward heads) when phase == 'agent'."""
    torch.manual_seed(cfg.seed)
    phase2 = cfg.phase == "agent"
    dataset = Dataset(cfg.data_dir)
    train_idx, _ = dataset.split(cfg.holdout_fraction)
    latents = prepare_latents(cfg, dataset, progress=progress)
    model = build_dynamics(cfg)
    if cfg.init_ckpt:
        base, _ = load_dynamics(cfg.init_ckpt)
        model.load_state_dict(base.state_dict())
    opt, sched = make_optimizer(model.parameters(), cfg)
    state = TrainState(cfg, {"dynamics": model}, opt, sched)
    if cfg.resume:
        state.load(cfg.resume)
    rng = np.random.default_rng(cfg.seed + 1)
    sampler = BatchSampler(cfg, dataset, latents, train_idx, rng)
    out = Path(cfg.out)
    metrics = MetricsWriter(out.with_suffix(".metrics.jsonl"))
    while state.step < cfg.steps:
        B, T = batch_plan(cfg, state.step)
        batch = sampler.sample(B, T, image_frac=cfg.image_frac)
        total, parts = _dynamics_step(model, batch, cfg, state, phase2)
        opt.zero_grad()
        total.backward()
        gn = clip_gradients(model.parameters(), cfg.grad_clip)
        opt.step()
        sched.step()
        state.step += 1
        if state.step % cfg.log_every == 0 or state.step == cfg.steps:
            metrics.write(state.step, loss=float(total.detach()), grad_norm=gn,
                          **{k: v for k, v in parts.items()})
            if progress:
                print(f"[{'agent' if phase2 else 'dynamics'}] step {state.step} "
                      f"loss={float(total.detach()):.4f} flow={parts['flow']:.4f}",
                      flush=True)
        if state.step % cfg.ckpt_every == 0 or state.step == cfg.steps:
            state.save(out)
    metrics.close()
    return out


def finetune_agent(cfg: RunConfig, progress: bool = True) -> Path:
    cfg.phase = "agent"
    if cfg.from_scratch:
        cfg.init_ckpt = ""
    return train_dynamics(cfg, progress=progress)


# ------------------------------------------------------------ phase 3

def transformer_checksum(model: DynamicsModel) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if not name.startswith("heads."):
            h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def train_phase3(cfg: RunConfig, progress: bool = True) -> Path:
    torch.manual_seed(cfg.seed)
    dataset = Dataset(cfg.data_dir)
    train_idx, _ = dataset.split(cfg.holdout_fraction)
    latents = prepare_latents(cfg, dataset, progress=progress)
    model, meta = load_dynamics(cfg.init_ckpt)
    rl = rl_config(cfg)
    prior = copy.deepcopy(model.heads.policy)
    for p in prior.parameters():
        p.requires_grad_(False)
    for name, p in model.named_parameters():
        p.requires_grad_(name.startswith("heads.policy") or
                         name.startswith("heads.value"))
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt, sched = make_optimizer(trainable, cfg)
    state = TrainState(cfg, {"dynamics": model}, opt, sched)
    if cfg.resume:
        state.load(cfg.resume)
    before = transformer_checksum(model)
    rng = np.random.default_rng(cfg.seed + 2)
    sampler = BatchSampler(cfg, dataset, latents, train_idx, rng)
    out = Path(cfg.out)
    metrics = MetricsWriter(out.with_suffix(".metrics.jsonl"))
    g = torch.Generator().manual_seed(cfg.seed + 3)
    n_tasks = model.task_embed.num_embeddings - 1
    while state.step < cfg.steps:
        batch = sampler.sample(cfg.batch_size, cfg.imag_context)
        task = batch["task"].clone()
        untagged = task == NO_TASK
        task[untagged] = torch.randint(0, n_tasks, (int(untagged.sum()),),
                                       generator=g)
        traj = imagine(model, batch["z"], batch["act_in"], task, rl, generator=g,
                       context_labeled=batch["act_in_labeled"])
        H = traj.horizon
        v_loss = value_loss(model.heads, traj.states[:, :H],
                            traj.returns[:, :H], state.norm)
        positive = pmpo_partition(traj.advantages[:, :H])
        with torch.no_grad():
            prior_logits = prior.head(traj.states[:, :H], distance=0)
        p_loss, p_parts = pmpo_loss(model.heads, traj.states[:, :H],
                                    traj.actions, positive, prior_logits,
                                    rl.alpha, rl.beta)
        total = v_loss + state.norm.scale("pmpo", p_loss)
        opt.zero_grad()
        total.backward()
        gn = clip_gradients(trainable, cfg.grad_clip)
        opt.step()
        sched.step()
        state.step += 1
        if state.step % cfg.log_every == 0 or state.step == cfg.steps:
            with torch.no_grad():
                flow_mon, _, agent_h = shortcut_forcing_loss(
                    model, batch["z"], batch["act_in"],
                    labeled=batch["act_in_labeled"], task=task, generator=g)
                bc_mon, bc_parts = bc_reward_loss(
                    model.heads, agent_h, batch["act_target"], batch["rewards"],
                    batch["tagged"])
            metrics.write(
                state.step,
                flow_loss=float(flow_mon.detach()),
                bc_loss=bc_parts["bc"], reward_loss=bc_parts["reward"],
                value_loss=float(v_loss.detach()),
                pmpo_pos_frac=p_parts["pos_frac"], kl=p_parts["kl"],
                imag_return_mean=float(traj.returns[:, :H].mean()),
                grad_norm=gn)
            if progress:
                print(f"[imagine] step {state.step} value={float(v_loss.detach()):.3f} "
                      f"ret={float(traj.returns.mean()):.3f} kl={p_parts['kl']:.3f}",
                      flush=True)
        if state.step % cfg.ckpt_every == 0 or state.step == cfg.steps:
            state.save(out)
    if transformer_checksum(model) != before:
        raise AssertionError("imagination training touched frozen parameters")
    metrics.close()
    return out
