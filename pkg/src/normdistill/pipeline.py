"""Model assembly, forward pass, total loss and the training loop.

The trainable state is the prompt set, the fusion projection, the router and
experts, and a three-block residual-attention decoder with a learnable global
token. The frozen vision/text backends are rebuilt from the configuration and
never serialized. Forward order: encode -> promote clean features (targets)
-> noise -> fusion -> MoE -> decode -> promote decoded features.
"""

import csv
import io
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .blocks import ResidualAttentionBlock
from .config import RunConfig, config_from_parser, config_to_ini, write_effective_config
from .constraint import alignment_loss, constraint_loss, decoded_alignment_loss
from .encoders import (ClipVisionBackend, PatchFeatureMap, PromptSet, TextFeaturePair,
                       ToyTextEncoder, ToyVisionEncoder, encode_prompts)
from .errors import (CheckpointCompatibilityError, CheckpointError, ConfigurationError,
                     InputError, PipelineStageError, TrainingDivergenceError)
from .fnp import control_map, distill_loss, promote
from .moe import FusionProjection, Router, importance_loss, make_experts, moe_forward

CHECKPOINT_VERSION = 1


class Decoder(nn.Module):
    """Three residual attention blocks with a learnable global token.

    The global token is prepended to the fused patch grid so every decoded
    layer carries a global feature alongside its H x W patch grid.
    """

    def __init__(self, embed_dim: int, num_heads: int, use_layernorm: bool = True):
        super().__init__()
        self.embed_dim = embed_dim
        self.global_token = nn.Parameter(torch.randn(embed_dim) * 0.02)
        self.blocks = nn.ModuleList(
            [ResidualAttentionBlock(embed_dim, num_heads, use_layernorm=use_layernorm)
             for _ in range(3)])

    def forward(self, fused: torch.Tensor) -> list[PatchFeatureMap]:
        b, h, w, c = fused.shape
        tokens = torch.cat([self.global_token.expand(b, 1, c), fused.reshape(b, h * w, c)], dim=1)
        out = []
        for i, block in enumerate(self.blocks, start=1):
            tokens = block(tokens)
            if not torch.isfinite(tokens).all():
                raise TrainingDivergenceError(f"non-finite decoder output at block {i}")
            out.append(PatchFeatureMap(
                patches=tokens[:, 1:, :].reshape(b, h, w, c),
                global_feature=tokens[:, 0, :],
                layer_index=i))
        return out


def decode(fused: torch.Tensor, decoder: Decoder) -> list[PatchFeatureMap]:
    """Run the decoder; block i's output is paired with encoder layer i."""
    return decoder(fused)


class TrainableModules(nn.Module):
    """Everything the optimizer touches; frozen backends live outside."""

    def __init__(self, prompts: PromptSet, fusion: FusionProjection,
                 router: Optional[Router], experts: Optional[nn.ModuleList],
                 decoder: Decoder):
        super().__init__()
        self.prompts = prompts
        self.fusion = fusion
        self.router = router
        self.experts = experts
        self.decoder = decoder


@dataclass
class ModelState:
    """Bundles the trainable modules with their frozen backends and bookkeeping."""

    trainable: TrainableModules
    vision_backend: nn.Module
    text_backend: nn.Module
    config: RunConfig
    optimizer: torch.optim.Adam
    noise_generator: torch.Generator
    epoch: int = 0
    seed: int = 0


def build_state(config: RunConfig) -> ModelState:
    """Construct backends and freshly initialized trainable modules.

    Reseeds the global torch RNG with the training seed, so identical
    configurations produce bit-identical initial states.
    """
    enc = config.encoder
    res = config.train.resolution
    taps = enc.tap_layers if enc.tap_layers else None
    if enc.kind == "toy_frozen_random":
        vision = ToyVisionEncoder(
            resolution=res, patch_size=enc.patch_size, embed_dim=enc.embed_dim,
            depth=enc.depth, num_heads=enc.num_heads, tap_layers=taps,
            use_layernorm=enc.use_layernorm, seed=enc.backend_seed)
        embed_dim = enc.embed_dim
    else:
        vision = ClipVisionBackend(enc.clip_model, enc.weights_path, res, taps)
        embed_dim = vision.embed_dim
    text = ToyTextEncoder(enc.text_dim, embed_dim, vocab_size=enc.vocab_size,
                          seed=enc.backend_seed + 1)

    torch.manual_seed(config.train.seed)
    prompts = PromptSet(enc.prompt_length, enc.text_dim, seed=config.train.seed)
    fusion = FusionProjection(embed_dim, dropout=config.moe.dropout)
    if config.moe.enabled:
        router = Router(embed_dim, config.moe.num_experts)
        experts = make_experts(embed_dim, config.moe)
    else:
        router, experts = None, None
    decoder = Decoder(embed_dim, enc.num_heads, use_layernorm=enc.use_layernorm)
    trainable = TrainableModules(prompts, fusion, router, experts, decoder)
    optimizer = torch.optim.Adam(trainable.parameters(), lr=config.train.learning_rate,
                                 betas=(0.9, 0.999))
    noise_gen = torch.Generator().manual_seed(config.train.seed + 0x9E3779B9)
    return ModelState(trainable=trainable, vision_backend=vision, text_backend=text,
                      config=config, optimizer=optimizer, noise_generator=noise_gen,
                      epoch=0, seed=config.train.seed)


def perturb(feature: PatchFeatureMap, sigma_noise: float, training: bool,
            generator: torch.Generator) -> PatchFeatureMap:
    """Add gaussian noise with std sigma_noise * std(patches) in training mode.

    The std is taken per sample over all H*W*C entries; eval mode or
    sigma_noise == 0 returns the feature unchanged.
    """
    if sigma_noise < 0:
        raise ConfigurationError(f"sigma_noise must be >= 0, got {sigma_noise}")
    if not training or sigma_noise == 0.0:
        return feature
    patches = feature.patches
    if patches.dim() == 3:
        scale = sigma_noise * patches.std()
    else:
        scale = (sigma_noise * patches.flatten(1).std(dim=1)).view(-1, 1, 1, 1)
    noise = torch.randn(patches.shape, generator=generator, dtype=patches.dtype) * scale
    return PatchFeatureMap(patches=patches + noise, global_feature=feature.global_feature,
                           layer_index=feature.layer_index)


@dataclass
class ForwardOutputs:
    """Everything the losses and the scorer need from one pass.

    When prompt guidance is off, the *_promoted lists hold the raw patch
    tensors and the text/psi fields are None.
    """

    encoded: list
    encoded_promoted: list
    enc_globals: list
    decoded: list
    decoded_promoted: list
    dec_globals: list
    text_pairs: Optional[list] = None
    gate_scores: Optional[torch.Tensor] = None
    psi_encoded: Optional[list] = None
    psi_decoded: Optional[list] = None
    fused: Optional[torch.Tensor] = None
    moe_output: Optional[torch.Tensor] = None


def _run_stage(name: str, fn):
    # Divergence passes through unwrapped so the trainer can react to it.
    try:
        return fn()
    except (PipelineStageError, TrainingDivergenceError):
        raise
    except Exception as exc:
        raise PipelineStageError(name, exc) from exc


def forward(images: torch.Tensor, state: ModelState, training: bool) -> ForwardOutputs:
    """Full pipeline pass over a (B, H0, W0, 3) image batch."""
    cfg = state.config
    tr = state.trainable
    tr.train(training)
    guidance = cfg.train.prompt_guidance

    encoded = _run_stage("encode", lambda: state.vision_backend(images))
    enc_globals = [f.global_feature for f in encoded]

    text_pairs = None
    psi_enc = None
    if guidance:
        text_pairs = _run_stage("encode_prompts",
                                lambda: encode_prompts(tr.prompts, state.text_backend))
        pairs = text_pairs
        if cfg.train.detach_text_in_promotion:
            pairs = [TextFeaturePair(p.g_normal.detach(), p.g_abnormal.detach(), p.layer_index)
                     for p in text_pairs]

        def _promote_encoded():
            psis = [control_map(f, p) for f, p in zip(encoded, pairs)]
            return psis, [promote(f, psi) for f, psi in zip(encoded, psis)]

        psi_enc, encoded_promoted = _run_stage("promote_encoded", _promote_encoded)
    else:
        encoded_promoted = [f.patches for f in encoded]

    def _fusion_input():
        if training and cfg.train.noise_into == "fusion_input" and cfg.train.noise_std > 0:
            return [perturb(f, cfg.train.noise_std, training, state.noise_generator)
                    for f in encoded]
        return encoded

    noisy = _run_stage("perturb", _fusion_input)
    fused = _run_stage("fuse", lambda: tr.fusion(noisy))

    gate_scores = None
    moe_out = fused
    if cfg.moe.enabled:
        b, h, w, c = fused.shape

        def _moe():
            flat, scores = moe_forward(fused.reshape(-1, c), tr.router, tr.experts,
                                       cfg.moe.top_k)
            return flat.reshape(b, h, w, c), scores

        moe_out, gate_scores = _run_stage("moe", _moe)

    decoded = _run_stage("decode", lambda: tr.decoder(moe_out))
    if cfg.train.decoder_pairing == "reversed":
        # deepest decoder block reconstructs the shallowest encoder layer
        decoded = [PatchFeatureMap(f.patches, f.global_feature, i + 1)
                   for i, f in enumerate(reversed(decoded))]
    dec_globals = [f.global_feature for f in decoded]

    psi_dec = None
    if guidance:
        def _promote_decoded():
            psis = [control_map(f, p) for f, p in zip(decoded, pairs)]
            return psis, [promote(f, psi) for f, psi in zip(decoded, psis)]

        psi_dec, decoded_promoted = _run_stage("promote_decoded", _promote_decoded)
    else:
        decoded_promoted = [f.patches for f in decoded]

    return ForwardOutputs(
        encoded=encoded, encoded_promoted=encoded_promoted, enc_globals=enc_globals,
        decoded=decoded, decoded_promoted=decoded_promoted, dec_globals=dec_globals,
        text_pairs=text_pairs, gate_scores=gate_scores, psi_encoded=psi_enc,
        psi_decoded=psi_dec, fused=fused, moe_output=moe_out)


def total_loss(outputs: ForwardOutputs, epoch: int, config: RunConfig
               ) -> tuple[torch.Tensor, dict]:
    """Distillation + gated constraint + importance loss, with a per-term breakdown.

    The breakdown reports `distill`, `constraint`, `moe` and `total` (the
    exact sum), plus the encoded/decoded alignment contributions for logs.
    """
    tcfg, ccfg = config.train, config.constraint
    zero = torch.zeros(())

    l_distill = distill_loss(outputs.encoded_promoted, outputs.decoded_promoted) \
        if tcfg.use_distill_loss else zero

    l1 = zero
    l2_contrib = 0.0
    if tcfg.prompt_guidance and tcfg.use_constraint_loss:
        l1 = alignment_loss(outputs.enc_globals, outputs.text_pairs, ccfg.tau)
        l2 = decoded_alignment_loss(outputs.dec_globals, outputs.text_pairs, ccfg.tau) \
            if epoch >= ccfg.theta else zero
        l_constraint = constraint_loss(epoch, ccfg, l1, l2)
        if epoch >= ccfg.theta:
            l2_contrib = float((ccfg.gamma * l2).detach())
    else:
        l_constraint = zero

    l_moe = importance_loss(outputs.gate_scores, config.moe.epsilon) \
        if (config.moe.enabled and tcfg.use_moe_loss and outputs.gate_scores is not None) \
        else zero

    # accumulate in float64 so the reported breakdown sums to the total exactly
    total = l_distill.double() + l_constraint.double() + l_moe.double()
    if not torch.isfinite(total):
        raise TrainingDivergenceError(
            f"non-finite loss: distill={float(l_distill.detach())}, "
            f"constraint={float(l_constraint.detach())}, moe={float(l_moe.detach())}")
    breakdown = {
        "distill": float(l_distill.detach().double()),
        "constraint": float(l_constraint.detach().double()),
        "moe": float(l_moe.detach().double()),
        "total": float(total.detach()),
        "constraint_encoded": float(l1.detach()),
        "constraint_decoded": l2_contrib,
    }
    return total, breakdown


LOG_COLUMNS = ("epoch", "distill", "constraint", "moe", "total",
               "constraint_encoded", "constraint_decoded")


def _write_loss_log(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row["epoch"]] + [repr(row[c]) for c in LOG_COLUMNS[1:]])


def _write_timing_log(times: list[tuple[int, float]], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch", "wall_time_s"))
        for epoch, wall in times:
            writer.writerow((epoch, f"{wall:.3f}"))


def fit(samples: Sequence, config: RunConfig, out_dir=None) -> tuple[ModelState, list[dict]]:
    """Train on normal-only samples pooled across categories.

    Writes `train_log.csv` (per-epoch loss breakdown, byte-deterministic for
    a fixed seed), `train_timing.csv` (wall time, excluded from determinism
    guarantees), the effective configuration, and a checkpoint at the
    configured cadence into `out_dir` when given. On divergence the last
    good checkpoint stays on disk.

    Returns:
        (trained state, list of per-epoch loss rows).
    """
    if any(s.is_anomalous for s in samples):
        raise InputError("training split contains anomalous samples")
    if not samples:
        raise InputError("empty training set")
    tcfg = config.train

    torch.manual_seed(tcfg.seed)
    state = build_state(config)
    images = torch.stack([s.pixels for s in samples])
    order_rng = np.random.default_rng(tcfg.seed)
    n = images.shape[0]

    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        write_effective_config(config, out_path)

    log_rows: list[dict] = []
    timings: list[tuple[int, float]] = []
    try:
        for epoch in range(tcfg.epochs):
            started = time.perf_counter()
            perm = order_rng.permutation(n)
            sums = {c: 0.0 for c in LOG_COLUMNS[1:]}
            batches = 0
            for lo in range(0, n, tcfg.batch_size):
                batch = images[perm[lo:lo + tcfg.batch_size]]
                outputs = forward(batch, state, training=True)
                loss, breakdown = total_loss(outputs, epoch, config)
                state.optimizer.zero_grad()
                loss.backward()
                state.optimizer.step()
                for c in sums:
                    sums[c] += breakdown[c]
                batches += 1
            row = {"epoch": epoch, **{c: sums[c] / batches for c in sums}}
            log_rows.append(row)
            state.epoch = epoch + 1
            timings.append((epoch, time.perf_counter() - started))
            if out_path is not None and tcfg.checkpoint_every > 0 \
                    and (epoch + 1) % tcfg.checkpoint_every == 0:
                save_checkpoint(state, out_path / "checkpoint.npz")
    finally:
        if out_path is not None:
            _write_loss_log(log_rows, out_path / "train_log.csv")
            _write_timing_log(timings, out_path / "train_timing.csv")

    if out_path is not None:
        save_checkpoint(state, out_path / "checkpoint.npz")
    return state, log_rows


def save_checkpoint(state: ModelState, path) -> None:
    """Serialize trainable parameters, optimizer state and metadata atomically.

    Single-file versioned container (uncompressed npz); saving the same state
    twice produces byte-identical files.
    """
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in state.trainable.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()

    opt_state = state.optimizer.state_dict()
    step_counts = {}
    for idx, entry in opt_state["state"].items():
        for key, val in entry.items():
            if key == "step":
                step_counts[str(idx)] = float(val)
            else:
                arrays[f"opt/{idx}/{key}"] = val.detach().cpu().numpy()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config_ini": config_to_ini(state.config),
        "fingerprint": state.config.structural_fingerprint(),
        "epoch": state.epoch,
        "seed": state.seed,
        "opt_steps": step_counts,
        "opt_param_groups": [
            {k: v for k, v in group.items() if k != "params"}
            for group in opt_state["param_groups"]],
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))

    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **dict(sorted(arrays.items())))
        os.replace(tmp, path)
    except OSError as exc:
        if tmp.exists():
            tmp.unlink()
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, expected_config: Optional[RunConfig] = None) -> ModelState:
    """Rebuild a ModelState from a checkpoint file.

    Raises CheckpointError for unreadable files and
    CheckpointCompatibilityError when `expected_config` (or the caller's
    model structure) does not match the stored fingerprint.
    """
    import zipfile

    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta" not in arrays:
        raise CheckpointError(f"checkpoint {path} has no metadata entry")
    try:
        meta = json.loads(str(arrays["meta"]))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint metadata in {path}") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {meta.get('format_version')}")

    import configparser
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_file(io.StringIO(meta["config_ini"]))
    config = config_from_parser(parser)
    if expected_config is not None:
        want = expected_config.structural_fingerprint()
        have = config.structural_fingerprint()
        if want != have:
            diff = {k: (have.get(k), want.get(k))
                    for k in set(want) | set(have) if want.get(k) != have.get(k)}
            raise CheckpointCompatibilityError(
                f"checkpoint model configuration mismatch: {diff}")

    state = build_state(config)
    state.epoch = int(meta["epoch"])
    state.seed = int(meta["seed"])
    params = {k[len("param/"):]: torch.from_numpy(v)
              for k, v in arrays.items() if k.startswith("param/")}
    try:
        state.trainable.load_state_dict(params, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint parameters do not fit the model: {exc}") from exc

    opt_entries: dict[int, dict] = {}
    for key, val in arrays.items():
        if not key.startswith("opt/"):
            continue
        _, idx, name = key.split("/", 2)
        opt_entries.setdefault(int(idx), {})[name] = torch.from_numpy(val)
    for idx_str, step in meta.get("opt_steps", {}).items():
        opt_entries.setdefault(int(idx_str), {})["step"] = torch.tensor(float(step))
    if opt_entries:
        opt_sd = state.optimizer.state_dict()
        groups = meta.get("opt_param_groups")
        if groups:
            for stored, current in zip(groups, opt_sd["param_groups"]):
                current.update(stored)
        opt_sd["state"] = opt_entries
        state.optimizer.load_state_dict(opt_sd)
    return state


__all__ = [
    "Decoder",
    "decode",
    "TrainableModules",
    "ModelState",
    "build_state",
    "perturb",
    "ForwardOutputs",
    "forward",
    "total_loss",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
]
