"""Alternating training loop: warmup with random masking, MAE updates with
episode recording, and periodic PPO updates of the token sampler from a
memory buffer that is reset after every sampler pass."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .config import TrainConfig
from .mae import decode, encode, init_mae_params, random_spacetime_mask, reconstruction_loss
from .sampler import (
    PolicyOutput,
    SamplerParams,
    init_sampler_params,
    masked_logprob,
    policy_entropy,
    policy_probs,
    sample_visible,
    value_estimate,
)
from .synthetic import motion_hit_rate
from .tensor import DiffTensor, ParamStore, adamw_step, backward
from .tokenizer import (
    ClipTensor,
    TokenGrid,
    grid_coords,
    init_tokenizer_params,
    patch_normalize_targets,
    positional_encoding,
    tokenize,
)

CKPT_MAGIC = b"TATSCKPT"
CKPT_VERSION = 1

METRICS_HEADER = (
    "step,epoch,phase,L_R,L_S,J_clip,value_loss,entropy,ratio_mean,ratio_max,hit_rate"
)


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss appears; the message names the last
    good checkpoint."""


@dataclass(frozen=True)
class PPOConfig:
    """Knobs of the alternating recipe and the sampling objective."""

    clip_eps: float = 0.2
    c_policy: float = 1e-4
    c_value: float = 1e-4
    c_entropy: float = 1e-4
    mae_only_epochs: int = 10
    update_interval: int = 1
    policy_lr: float = 1.5e-6
    base_lr: float = 1.5e-4
    epochs: int = 200
    batch_size: int = 8
    seed: int = 42

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip threshold must lie in (0, 1), got {self.clip_eps}")
        if self.update_interval < 1:
            raise ValueError("update interval must be >= 1")
        if self.mae_only_epochs < 0:
            raise ValueError("warmup epoch count must be >= 0")


@dataclass(frozen=True)
class Episode:
    """One recorded sampler interaction; nothing here carries a gradient.

    `tokens` is the detached token snapshot (positions included) the frozen
    sampler saw, so later sampler updates re-evaluate exactly the recorded
    state even after the autoencoder has moved on.
    """

    tokens: np.ndarray  # (N, d) values only
    grid: tuple[int, int, int]
    masked: np.ndarray  # stored masked index set
    old_logprob: float  # log prob of the masked set under the recording policy
    reward: float  # detached reconstruction loss
    old_value: float  # detached value estimate
    clip_index: int = -1  # dataset index, for diagnostics only


class MemoryBuffer:
    """Recorded episodes, grouped by the step that produced them."""

    def __init__(self):
        self._groups: list[list[Episode]] = []

    def record(self, episodes: list[Episode]) -> None:
        self._groups.append(list(episodes))

    def groups(self) -> list[list[Episode]]:
        return list(self._groups)

    def __len__(self) -> int:
        return sum(len(g) for g in self._groups)

    def reset(self) -> None:
        self._groups.clear()


def compute_advantage(episode: Episode) -> float:
    """Detached reward minus the recorded value estimate."""
    return episode.reward - episode.old_value


def clipped_surrogate(ratio: DiffTensor, advantage: float, clip_eps: float) -> DiffTensor:
    """min(r*A, clip(r, 1-eps, 1+eps)*A); gradient follows the active branch."""
    return tt.minimum(
        tt.scale(ratio, advantage),
        tt.scale(tt.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), advantage),
    )


@dataclass
class PPOComponents:
    """Batch-mean diagnostics of one sampling-objective evaluation."""

    j_clip: float
    value_loss: float
    entropy: float
    ratio_mean: float
    ratio_max: float
    ratios: np.ndarray
    advantages: np.ndarray
    surrogates: np.ndarray  # per-episode clipped policy terms
    new_probs: list[np.ndarray] = field(default_factory=list)


def episode_grid(episode: Episode) -> TokenGrid:
    return TokenGrid(
        tokens=tt.constant(episode.tokens),
        coords=grid_coords(episode.grid),
        grid=episode.grid,
    )


def ppo_objective(
    episodes: list[Episode], params: SamplerParams, cfg: PPOConfig
) -> tuple[DiffTensor, PPOComponents]:
    """Batch-mean sampling objective J; the sampling loss is -J.

    Per episode the current sampler is re-run on the stored tokens; the
    importance ratio compares new and recorded log-probabilities of the
    stored masked set. Gradients reach only sampler parameters because the
    stored tokens are constants.
    """
    if not episodes:
        raise ValueError("ppo_objective: no episodes")
    terms = []
    ratios = np.empty(len(episodes))
    advantages = np.empty(len(episodes))
    j_clips = np.empty(len(episodes))
    value_losses = np.empty(len(episodes))
    entropies = np.empty(len(episodes))
    new_probs = []
    for i, ep in enumerate(episodes):
        grid = episode_grid(ep)
        policy = policy_probs(grid, params)
        value = value_estimate(grid, params).value
        ratio = tt.exp(tt.sub(masked_logprob(policy, ep.masked), ep.old_logprob))
        if not np.isfinite(ratio.values):
            raise FloatingPointError(f"ppo_objective: non-finite ratio in episode {i}")
        advantage = compute_advantage(ep)
        surrogate = clipped_surrogate(ratio, advantage, cfg.clip_eps)
        value_err = tt.square(tt.sub(value, ep.reward))
        entropy = policy_entropy(policy)
        term = tt.add(
            tt.sub(tt.scale(surrogate, cfg.c_policy), tt.scale(value_err, cfg.c_value)),
            tt.scale(entropy, cfg.c_entropy),
        )
        terms.append(term)
        ratios[i] = ratio.values
        advantages[i] = advantage
        j_clips[i] = surrogate.values
        value_losses[i] = value_err.values
        entropies[i] = entropy.values
        new_probs.append(policy.probs.values.copy())
    total = terms[0]
    for term in terms[1:]:
        total = tt.add(total, term)
    objective = tt.scale(total, 1.0 / len(terms))
    components = PPOComponents(
        j_clip=float(j_clips.mean()),
        value_loss=float(value_losses.mean()),
        entropy=float(entropies.mean()),
        ratio_mean=float(ratios.mean()),
        ratio_max=float(ratios.max()),
        ratios=ratios,
        advantages=advantages,
        surrogates=j_clips,
        new_probs=new_probs,
    )
    return objective, components


# ---------------------------------------------------------------------------
# Training state, checkpointing, metrics
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    mae: ParamStore
    sampler: ParamStore
    config_text: str
    rngs: dict[str, np.random.Generator]
    epoch: int = 0
    global_step: int = 0


def _pack_str(text: str) -> bytes:
    data = text.encode()
    return struct.pack("<I", len(data)) + data


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    dims = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return dims + arr.astype("<f8").tobytes()


def _pack_store(name: str, store: ParamStore) -> bytes:
    out = [_pack_str(name), struct.pack("<I", len(store))]
    for pname, p in store.items():
        m, v, step = store.state(pname)
        out.append(_pack_str(pname))
        out.append(_pack_array(p.values))
        out.append(struct.pack("<Q", step))
        out.append(_pack_array(m))
        out.append(_pack_array(v))
    return b"".join(out)


def _pack_rng(name: str, gen: np.random.Generator) -> bytes:
    state = gen.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 generators are checkpointable")
    inner = state["state"]
    return (
        _pack_str(name)
        + inner["state"].to_bytes(16, "little")
        + inner["inc"].to_bytes(16, "little")
        + struct.pack("<II", int(state["has_uint32"]), int(state["uinteger"]))
    )


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode()

    def array(self) -> np.ndarray:
        ndim = self.u32()
        shape = struct.unpack(f"<{ndim}Q", self.take(8 * ndim)) if ndim else ()
        count = 1
        for s in shape:
            count *= s
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).copy()


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    """Serialize parameters, optimizer state, config echo, and rng states."""
    blob = [
        CKPT_MAGIC,
        struct.pack("<I", CKPT_VERSION),
        struct.pack("<QQ", state.epoch, state.global_step),
        _pack_str(state.config_text),
        struct.pack("<I", 2),
        _pack_store("mae", state.mae),
        _pack_store("tats", state.sampler),
        struct.pack("<I", len(state.rngs)),
    ]
    for name in state.rngs:
        blob.append(_pack_rng(name, state.rngs[name]))
    Path(path).write_bytes(b"".join(blob))


def load_checkpoint(path: str | Path) -> TrainState:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(8) != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version = reader.u32()
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    epoch, global_step = reader.u64(), reader.u64()
    config_text = reader.text()
    stores: dict[str, ParamStore] = {}
    for _ in range(reader.u32()):
        sname = reader.text()
        store = ParamStore()
        for _ in range(reader.u32()):
            pname = reader.text()
            values = reader.array()
            step = reader.u64()
            m, v = reader.array(), reader.array()
            store.add(pname, values)
            store.set_state(pname, m, v, step)
        stores[sname] = store
    rngs: dict[str, np.random.Generator] = {}
    for _ in range(reader.u32()):
        name = reader.text()
        raw_state = int.from_bytes(reader.take(16), "little")
        raw_inc = int.from_bytes(reader.take(16), "little")
        has_uint32, uinteger = struct.unpack("<II", reader.take(8))
        bg = np.random.PCG64()
        bg.state = {
            "bit_generator": "PCG64",
            "state": {"state": raw_state, "inc": raw_inc},
            "has_uint32": has_uint32,
            "uinteger": uinteger,
        }
        rngs[name] = np.random.Generator(bg)
    return TrainState(
        mae=stores["mae"],
        sampler=stores["tats"],
        config_text=config_text,
        rngs=rngs,
        epoch=epoch,
        global_step=global_step,
    )


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


class MetricsLog:
    """Append-only CSV with a fixed header; floats use round-trip repr."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.write_text(METRICS_HEADER + "\n")

    def row(
        self,
        step: int,
        epoch: int,
        phase: str,
        l_r=None,
        l_s=None,
        j_clip=None,
        value_loss=None,
        entropy=None,
        ratio_mean=None,
        ratio_max=None,
        hit_rate=None,
    ) -> None:
        cells = [str(step), str(epoch), phase] + [
            _fmt(v)
            for v in (l_r, l_s, j_clip, value_loss, entropy, ratio_mean, ratio_max, hit_rate)
        ]
        with self.path.open("a") as fh:
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------

def build_stores(cfg: TrainConfig, rng: np.random.Generator) -> tuple[ParamStore, ParamStore, SamplerParams]:
    """Initialize autoencoder and sampler parameter stores."""
    mae_store = ParamStore()
    init_tokenizer_params(mae_store, cfg.tokenizer_config(), rng, std=cfg.init_std)
    init_mae_params(mae_store, cfg.mae_config(), rng, std=cfg.init_std)
    sampler_store = ParamStore()
    sampler_params = init_sampler_params(
        sampler_store,
        dim=cfg.embed_dim,
        n_tokens=cfg.n_tokens,
        n_heads=cfg.ta_heads,
        rng=rng,
        std=cfg.init_std,
    )
    return mae_store, sampler_store, sampler_params


def mae_lr_at(cfg: TrainConfig, epoch_frac: float) -> float:
    """Linear warmup then cosine decay, per fractional epoch."""
    warm = cfg.warmup_epochs
    if epoch_frac < warm:
        return cfg.base_lr * epoch_frac / warm
    if cfg.epochs <= warm:
        return cfg.base_lr
    progress = (epoch_frac - warm) / (cfg.epochs - warm)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    state: TrainState
    checkpoint_path: Path
    metrics_path: Path
    epoch_recon: list[float]  # per-epoch mean reconstruction loss


def train(
    cfg: TrainConfig,
    clips: list[ClipTensor],
    motion: list[np.ndarray] | None = None,
    out_dir: str | Path = "out",
) -> TrainResult:
    """Run the full alternating recipe over an in-memory clip dataset.

    Serial and fully seeded: a fixed config yields a bit-identical metrics
    file. A checkpoint is written after every epoch; a non-finite loss
    aborts with the last good checkpoint intact.
    """
    from .config import format_config  # echoed into checkpoints

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "model.ckpt"
    metrics = MetricsLog(out_dir / "metrics.csv")

    seed_root = np.random.SeedSequence(cfg.seed)
    streams = seed_root.spawn(4)
    rngs = {
        "init": np.random.Generator(np.random.PCG64(streams[0])),
        "data": np.random.Generator(np.random.PCG64(streams[1])),
        "mask": np.random.Generator(np.random.PCG64(streams[2])),
        "diag": np.random.Generator(np.random.PCG64(streams[3])),
    }
    mae_store, sampler_store, sampler_params = build_stores(cfg, rngs["init"])
    ppo = PPOConfig(
        clip_eps=cfg.clip_eps,
        c_policy=cfg.c_policy,
        c_value=cfg.c_value,
        c_entropy=cfg.c_entropy,
        mae_only_epochs=cfg.mae_only_epochs,
        update_interval=cfg.update_interval,
        policy_lr=cfg.policy_lr,
        base_lr=cfg.base_lr,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
    )
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    tok_cfg = cfg.tokenizer_config()
    mae_cfg = cfg.mae_config()
    n = cfg.n_tokens
    coords = grid_coords(tok_cfg.grid_shape(cfg.frames, cfg.height, cfg.width))
    grid_dims = tok_cfg.grid_shape(cfg.frames, cfg.height, cfg.width)
    enc_pos = positional_encoding(n, cfg.embed_dim, coords)
    dec_pos = positional_encoding(n, cfg.decoder_dim, coords)
    targets = [patch_normalize_targets(clip, tok_cfg) for clip in clips]

    state = TrainState(
        mae=mae_store,
        sampler=sampler_store,
        config_text=format_config(cfg),
        rngs=rngs,
    )
    buffer = MemoryBuffer()
    steps_per_epoch = max(1, math.ceil(len(clips) / cfg.batch_size))
    epoch_recon: list[float] = []

    def abort(reason: str):
        raise TrainingAborted(
            f"{reason}; last good checkpoint: {ckpt_path if state.epoch else 'none written'}"
        )

    for epoch in range(1, cfg.epochs + 1):
        order = rngs["data"].permutation(len(clips))
        epoch_losses = []
        for step, start in enumerate(range(0, len(clips), cfg.batch_size), start=1):
            batch = order[start : start + cfg.batch_size]
            state.global_step += 1
            warmup = epoch <= ppo.mae_only_epochs
            sampler_sum_before = sampler_store.checksum() if cfg.audit else None

            losses = []
            batch_hits = []
            episodes = []
            for clip_idx in batch:
                grid = tokenize(clips[clip_idx], tok_cfg, mae_store)
                tokens_pos = tt.add(grid.tokens, tt.constant(enc_pos))
                if warmup:
                    mask = random_spacetime_mask(n, cfg.mask_ratio, rngs["mask"])
                else:
                    snapshot = tokens_pos.values.copy()
                    frozen_grid = TokenGrid(
                        tokens=tt.constant(snapshot), coords=coords, grid=grid_dims
                    )
                    with tt.no_grad():  # frozen sampler: record state only
                        old_policy = policy_probs(frozen_grid, sampler_params)
                        old_value = value_estimate(frozen_grid, sampler_params).value.item()
                        mask = sample_visible(old_policy, cfg.mask_ratio, rngs["mask"])
                        old_logprob = masked_logprob(old_policy, mask.masked).item()
                visible = tt.gather_rows(tokens_pos, mask.visible)
                encoded = encode(visible, mae_store, mae_cfg)
                predicted = decode(encoded, mask, mae_store, mae_cfg, dec_pos)
                loss = reconstruction_loss(predicted, targets[clip_idx], mask)
                losses.append(loss)
                if motion is not None:
                    batch_hits.append(motion_hit_rate(mask, motion[clip_idx]))
                if not warmup:
                    episodes.append(
                        Episode(
                            tokens=snapshot,
                            grid=grid_dims,
                            masked=mask.masked,
                            old_logprob=old_logprob,
                            reward=loss.item(),
                            old_value=old_value,
                            clip_index=int(clip_idx),
                        )
                    )

            total = losses[0]
            for loss in losses[1:]:
                total = tt.add(total, loss)
            batch_loss = tt.scale(total, 1.0 / len(losses))
            if not np.isfinite(batch_loss.values):
                abort(f"non-finite reconstruction loss at step {state.global_step}")
            mae_store.zero_grad()
            backward(batch_loss)
            adamw_step(
                mae_store,
                lr=mae_lr_at(cfg, epoch - 1 + (step - 1) / steps_per_epoch),
                betas=betas,
                weight_decay=cfg.weight_decay,
            )
            epoch_losses.append(batch_loss.item())
            metrics.row(
                step=state.global_step,
                epoch=epoch,
                phase="warmup" if warmup else "mae",
                l_r=batch_loss.item(),
                hit_rate=float(np.mean(batch_hits)) if batch_hits else None,
            )
            if cfg.audit and sampler_store.checksum() != sampler_sum_before:
                abort("sampler parameters changed during an autoencoder step")

            if warmup:
                continue
            buffer.record(episodes)
            if step % ppo.update_interval != 0:
                continue

            # Sampler update pass over the buffer, autoencoder frozen.
            mae_sum_before = mae_store.checksum() if cfg.audit else None
            if len(buffer) == 0:
                metrics.row(step=state.global_step, epoch=epoch, phase="tats-skipped")
            for group in buffer.groups():
                objective, comps = ppo_objective(group, sampler_params, ppo)
                sampling_loss = tt.scale(objective, -1.0)
                if not np.isfinite(sampling_loss.values):
                    abort(f"non-finite sampling loss at step {state.global_step}")
                sampler_store.zero_grad()
                backward(sampling_loss)
                adamw_step(sampler_store, lr=cfg.policy_lr, betas=betas, weight_decay=0.0)

                # Fresh draws from the updated policy, diagnostics only.
                fresh_hits = []
                if motion is not None:
                    for ep, probs in zip(group, comps.new_probs):
                        fresh_policy = PolicyOutput(
                            probs=tt.constant(probs), log_probs=tt.constant(np.log(probs))
                        )
                        fresh = sample_visible(fresh_policy, cfg.mask_ratio, rngs["diag"])
                        fresh_hits.append(motion_hit_rate(fresh, motion[ep.clip_index]))
                metrics.row(
                    step=state.global_step,
                    epoch=epoch,
                    phase="tats",
                    l_s=sampling_loss.item(),
                    j_clip=comps.j_clip,
                    value_loss=comps.value_loss,
                    entropy=comps.entropy,
                    ratio_mean=comps.ratio_mean,
                    ratio_max=comps.ratio_max,
                    hit_rate=float(np.mean(fresh_hits)) if fresh_hits else None,
                )
            if cfg.audit and mae_store.checksum() != mae_sum_before:
                abort("autoencoder parameters changed during a sampler update")
            buffer.reset()
            assert len(buffer) == 0

        state.epoch = epoch
        epoch_recon.append(float(np.mean(epoch_losses)))
        save_checkpoint(ckpt_path, state)

    return TrainResult(
        state=state,
        checkpoint_path=ckpt_path,
        metrics_path=metrics.path,
        epoch_recon=epoch_recon,
    )
