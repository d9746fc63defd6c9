"""Model assembly, the composite objective, training loop, validation and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim.swa_utils import AveragedModel, get_ema_multi_avg_fn

from . import diffusion as dm
from .cmsa import LREncoder, MorphRegionEncoder, RegionFeatures, alignment_loss
from .config import TrainingConfig, config_from_dict
from .data import STDataset, to_unit
from .eval import MetricsReport, per_gene_report
from .gdal import (
    ChannelAwareDiscriminator,
    CoexpressionGraph,
    GeneContextFiLM,
    GeneGraphEncoder,
    adversarial_losses,
    build_coexpression_graph,
    fuse_gene_context,
)
from .hsd import MorphologyEncoder, SemanticFiLM, embed_prompt
from .structures import ConditionBundle
from .unet import ConditionFuser, ConditionalUNet, fuse_condition

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class Context:
    """Timestep-independent conditioning computed once per batch."""

    psi_m: torch.Tensor
    phi_s: Optional[torch.Tensor]
    gene_embeds: Optional[torch.Tensor]
    image: torch.Tensor

    def select(self, idx) -> "Context":
        return Context(
            self.psi_m[idx],
            None if self.phi_s is None else self.phi_s[idx],
            self.gene_embeds,
            self.image[idx],
        )


class ConditionedDenoiser(nn.Module):
    """Generator side: HSD, CMSA encoders, condition fusion, gene graph and U-Net.

    Calling the module with ``(s_t, t, context)`` predicts the noise, which is
    the interface the reverse chain in :mod:`hadmst.diffusion` expects.
    """

    def __init__(self, cfg: TrainingConfig, graph: CoexpressionGraph, image_size: int):
        super().__init__()
        m = cfg.model
        genes = graph.num_genes
        self.gene_panel = list(graph.gene_panel)
        self.use_hsd = cfg.ablation.hsd
        self.use_gdal = cfg.ablation.gdal
        self.cond_grid = (image_size // 4, image_size // 4)
        self.hsd = MorphologyEncoder(image_size, m.hsd_patch, m.hsd_width, m.hsd_depth, m.hsd_heads)
        self.text_film = SemanticFiLM(m.text_dim, m.hsd_width)
        self.lr_encoder = LREncoder(genes, m.region_dim)
        self.morph_regions = MorphRegionEncoder(m.region_dim)
        self.fuser = ConditionFuser(m.hsd_width, m.region_dim, m.cond_channels, m.t_dim)
        self.genes = GeneGraphEncoder(graph, cfg.gdal.d_g, cfg.gdal.layers)
        self.gene_film = GeneContextFiLM(cfg.gdal.d_g, m.cond_channels)
        self.unet = ConditionalUNet(genes, 4 + genes, m.base_width, m.cond_channels, m.t_dim)
        prompt = embed_prompt(m.prompt, dim=m.text_dim)
        self.register_buffer("prompt", torch.tensor(prompt.vector, dtype=torch.float32))
        d = cfg.diffusion
        abar = dm.build_linear_schedule(d.T, d.beta_start, d.beta_end).alpha_bar
        self.register_buffer("alpha_bar", torch.tensor(abar, dtype=torch.float32))

    def context(self, he: torch.Tensor, seg: torch.Tensor, lr: Optional[torch.Tensor]) -> Context:
        seg = seg.to(he.dtype)
        f_m = self.hsd(he, seg)
        psi = self.text_film(f_m, self.prompt) if self.use_hsd else f_m
        phi = self.lr_encoder(lr) if lr is not None else None
        gene = self.genes() if self.use_gdal else None
        # the upsampled LR map also enters at full resolution; zeros when absent
        if lr is not None:
            lr_up = F.interpolate(lr.to(he.dtype), size=he.shape[-2:], mode="bilinear", align_corners=False)
        else:
            lr_up = he.new_zeros(he.shape[0], self.unet.channels, *he.shape[-2:])
        return Context(psi, phi, gene, torch.cat([he, seg, lr_up], dim=1))

    def condition(self, ctx: Context, t: torch.Tensor) -> ConditionBundle:
        cond = fuse_condition(self.fuser, ctx.psi_m, ctx.phi_s, t, self.cond_grid)
        if ctx.gene_embeds is not None:
            cond = fuse_gene_context(self.gene_film, ctx.gene_embeds, cond)
        return cond

    def forward(self, s_t: torch.Tensor, t: torch.Tensor, ctx: Context) -> torch.Tensor:
        # The U-Net regresses v = sqrt(abar) eps - sqrt(1 - abar) s0; rewriting it
        # as a noise estimate makes eps_hat -> s_t exact as abar -> 0, so the
        # high-noise end of the reverse chain does not rely on learning identity.
        v = self.unet(s_t, self.condition(ctx, t), ctx.image)
        abar = self.alpha_bar[t.long() - 1].reshape(-1, 1, 1, 1).to(v.dtype)
        return abar.sqrt() * v + (1.0 - abar).sqrt() * s_t


def build_models(cfg: TrainingConfig, graph: CoexpressionGraph, image_size: int, seed: int):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ConditionedDenoiser(cfg, graph, image_size)
        disc = ChannelAwareDiscriminator(cfg.gdal.d_g, cfg.gdal.patch, cfg.gdal.disc_width)
    return model, disc


def diffusion_loss(
    model: dm.NoisePredictor,
    s0: torch.Tensor,
    context,
    schedule: dm.DiffusionSchedule,
    generator: Optional[torch.Generator] = None,
    t: Optional[torch.Tensor] = None,
    eps: Optional[torch.Tensor] = None,
    return_parts: bool = False,
):
    """Noise-prediction MSE at a uniformly drawn timestep per sample."""
    if t is None:
        t = torch.randint(1, schedule.T + 1, (s0.shape[0],), generator=generator)
    if eps is None:
        eps = torch.randn(s0.shape, generator=generator, dtype=s0.dtype)
    s_t = dm.q_sample(s0, t, eps, schedule)
    eps_hat = model(s_t, t, context)
    loss = F.mse_loss(eps_hat, eps)
    if return_parts:
        return loss, {"t": t, "s_t": s_t, "eps_hat": eps_hat}
    return loss


@dataclass
class TrainState:
    cfg: TrainingConfig
    model: ConditionedDenoiser
    disc: ChannelAwareDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    schedule: dm.DiffusionSchedule
    generator: torch.Generator
    rng: np.random.Generator
    ema: Optional[AveragedModel] = None
    step: int = 0
    epoch: int = 0
    history: List[dict] = field(default_factory=list)

    @property
    def sampler(self) -> "ConditionedDenoiser":
        """The weights used for sampling: the EMA copy when enabled."""
        return self.ema.module if self.ema is not None else self.model


def init_state(cfg: TrainingConfig, graph: CoexpressionGraph, image_size: int) -> TrainState:
    model, disc = build_models(cfg, graph, image_size, cfg.seed)
    opt_g = torch.optim.AdamW(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    opt_d = torch.optim.AdamW(disc.parameters(), lr=cfg.optim.disc_lr, weight_decay=cfg.optim.weight_decay)
    schedule = dm.build_linear_schedule(cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    gen = torch.Generator().manual_seed(cfg.seed)
    ema = None
    if cfg.optim.ema_decay > 0:
        ema = AveragedModel(model, multi_avg_fn=get_ema_multi_avg_fn(cfg.optim.ema_decay), use_buffers=True)
    return TrainState(cfg, model, disc, opt_g, opt_d, schedule, gen, np.random.default_rng(cfg.seed), ema)


def _check_finite(name: str, value: torch.Tensor, step: int) -> None:
    if not torch.isfinite(value).all():
        raise TrainingError(f"non-finite {name} loss at step {step}")


def train_step(state: TrainState, batch: Dict[str, torch.Tensor]) -> Dict[str, float]:
    """One generator update on the composite loss, then one discriminator update."""
    cfg, model, disc = state.cfg, state.model, state.disc
    he, seg, hr, lr = batch["he"], batch["seg"], batch["hr"], batch["lr"]
    model.train()
    disc.train()

    ctx = model.context(he, seg, lr)
    l_diff, parts = diffusion_loss(
        model, hr, ctx, state.schedule, state.generator, return_parts=True
    )
    _check_finite("diffusion", l_diff, state.step)
    scalars = {"diffusion": l_diff.item()}
    total = l_diff

    fm = model.morph_regions(he, seg, lr.shape[-2:])
    l_con = alignment_loss(
        fm, RegionFeatures.from_map(ctx.phi_s), cfg.cmsa.lambda1, cfg.cmsa.lambda2,
        cfg.cmsa.tau, cfg.cmsa.margin, cfg.cmsa.fraction,
    )
    _check_finite("contrastive", l_con, state.step)
    scalars["contrast"] = l_con.item()
    if cfg.ablation.cmsa and cfg.loss.lambda_contrast > 0:
        total = total + cfg.loss.lambda_contrast * l_con

    x0_hat = None
    if cfg.ablation.gdal:
        x0_hat = dm.predict_x0(parts["s_t"], parts["eps_hat"], parts["t"], state.schedule).clamp(-1, 1)
        gene = ctx.gene_embeds.detach()
        for p in disc.parameters():
            p.requires_grad_(False)
        fake_scores = disc(x0_hat, gene)
        for p in disc.parameters():
            p.requires_grad_(True)
        l_g = F.softplus(-fake_scores).mean()
        _check_finite("generator-adversarial", l_g, state.step)
        scalars["adv_g"] = l_g.item()
        if cfg.loss.lambda_adv > 0:
            total = total + cfg.loss.lambda_adv * l_g

    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    _check_finite("total", total.detach(), state.step)
    state.opt_g.step()
    if state.ema is not None:
        state.ema.update_parameters(model)
    scalars["total"] = total.item()

    if cfg.ablation.gdal:
        gene = ctx.gene_embeds.detach()
        real_scores = disc(hr, gene)
        fake_scores = disc(x0_hat.detach(), gene)
        l_d, _ = adversarial_losses(real_scores, fake_scores)
        _check_finite("discriminator", l_d, state.step)
        state.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        state.opt_d.step()
        scalars["adv_d"] = l_d.item()

    state.step += 1
    return scalars


def dataset_tensors(ds: STDataset, idx: np.ndarray, with_lr: bool = True) -> Dict[str, torch.Tensor]:
    out = {
        "he": torch.from_numpy(ds.he[idx].astype(np.float32)),
        "seg": torch.from_numpy(ds.seg[idx].astype(np.float32)),
        "hr": torch.from_numpy(ds.hr_model(idx)),
    }
    out["lr"] = torch.from_numpy(ds.lr_model(idx)) if with_lr else None
    return out


def coexpression_graph(ds: STDataset, cfg: TrainingConfig) -> CoexpressionGraph:
    return build_coexpression_graph(
        ds.coexpression_samples("train", seed=cfg.seed), cfg.gdal.threshold, ds.gene_panel
    )


def _file_sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def fit(
    cfg: TrainingConfig,
    ds: STDataset,
    out_dir=None,
    log_every: int = 1,
    max_steps: Optional[int] = None,
) -> TrainState:
    """Train for ``cfg.optim.epochs`` epochs over the train split.

    With ``out_dir`` set, writes ``train_log.jsonl``, ``config.json`` (with the
    co-expression graph checksum) and checkpoints every
    ``cfg.checkpoint_every`` epochs plus a final ``checkpoint.pt``.
    """
    graph = coexpression_graph(ds, cfg)
    state = init_state(cfg, graph, ds.manifest.hr_size[0])
    train_idx = ds.indices("train")
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        graph.save(out / "coexpression")
        snapshot = cfg.to_dict()
        snapshot["graph_sha256"] = _file_sha(out / "coexpression.npy")
        snapshot["gene_panel"] = ds.gene_panel
        (out / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True))
        log_fh = open(out / "train_log.jsonl", "w")
    bs = cfg.optim.batch_size
    start = time.time()
    try:
        for epoch in range(cfg.optim.epochs):
            state.epoch = epoch
            order = state.rng.permutation(train_idx)
            for i in range(0, len(order), bs):
                scalars = train_step(state, dataset_tensors(ds, np.sort(order[i:i + bs])))
                record = {"step": state.step, "epoch": epoch, **scalars}
                state.history.append(record)
                if log_fh is not None and state.step % log_every == 0:
                    log_fh.write(json.dumps({**record, "wall_time": time.time() - start}) + "\n")
                if max_steps is not None and state.step >= max_steps:
                    return state
            if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_epoch{epoch + 1:04d}.pt", state)
    finally:
        if log_fh is not None:
            log_fh.close()
        if out is not None:
            save_checkpoint(out / "checkpoint.pt", state)
    return state


@torch.no_grad()
def generate(
    model: ConditionedDenoiser,
    schedule: dm.DiffusionSchedule,
    tensors: Dict[str, torch.Tensor],
    seed: int,
    batch: int = 16,
) -> np.ndarray:
    """Sample HR maps (model space) for every tile in ``tensors``; LR may be None."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    he, seg, lr = tensors["he"], tensors["seg"], tensors.get("lr")
    c = model.unet.channels
    outs = []
    for i in range(0, len(he), batch):
        sl = slice(i, i + batch)
        ctx = model.context(he[sl], seg[sl], None if lr is None else lr[sl])
        shape = (he[sl].shape[0], c, *he.shape[-2:])
        outs.append(dm.sample(model, ctx, shape, schedule, gen))
    return torch.cat(outs).numpy()


def upsample_baselines(lr_model: np.ndarray, size: Sequence[int]) -> Dict[str, np.ndarray]:
    """Nearest and bilinear LR upsampling, returned in [0, 1] metric space."""
    x = torch.from_numpy(np.asarray(lr_model, dtype=np.float32))
    out = {}
    for name, mode in (("nearest", "nearest"), ("bilinear", "bilinear")):
        kw = {"align_corners": False} if mode == "bilinear" else {}
        up = F.interpolate(x, size=tuple(size), mode=mode, **kw).clamp(-1, 1)
        out[name] = to_unit(up.numpy().astype(np.float64))
    return out


def validate(
    model: ConditionedDenoiser,
    schedule: dm.DiffusionSchedule,
    ds: STDataset,
    cfg: TrainingConfig,
    split: str = "test",
    use_lr: bool = True,
    return_predictions: bool = False,
):
    """Sample every tile of ``split`` and score it against truth and LR-upsampling baselines."""
    idx = ds.indices(split)
    if cfg.eval.max_tiles:
        idx = idx[: cfg.eval.max_tiles]
    tensors = dataset_tensors(ds, idx, with_lr=use_lr)
    pred = generate(model, schedule, tensors, cfg.eval.seed, cfg.eval.batch)
    truth = to_unit(tensors["hr"].numpy().astype(np.float64))
    baselines = upsample_baselines(ds.lr_model(idx), ds.manifest.hr_size)
    report = per_gene_report(
        to_unit(pred.astype(np.float64)), truth, ds.gene_panel, baselines,
        config={"split": split, "use_lr": use_lr, "tiles": len(idx), "seed": cfg.eval.seed},
    )
    return (report, pred) if return_predictions else report


def save_checkpoint(path, state: TrainState) -> None:
    genes = state.model.genes
    torch.save(
        {
            "model": state.model.state_dict(),
            "ema": None if state.ema is None else state.ema.module.state_dict(),
            "disc": state.disc.state_dict(),
            "schedule": state.schedule.to_dict(),
            "config": state.cfg.to_dict(),
            "gene_panel": state.model.gene_panel,
            "graph": {"weights": genes.weights.double().numpy(),
                      "adjacency": genes.adjacency.numpy()},
            "image_size": state.model.cond_grid[0] * 4,
            "step": state.step,
        },
        path,
    )


def load_checkpoint(path, manifest=None, weights: str = "sampling"):
    """Restore ``(model, disc, schedule, cfg)``; optionally check the gene panel.

    Args:
        weights: ``"sampling"`` loads the EMA weights when the checkpoint has
            them, ``"raw"`` the last optimizer iterate.
    """
    if weights not in ("sampling", "raw"):
        raise ValueError(f"weights must be 'sampling' or 'raw', got {weights!r}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest is not None and list(manifest.gene_panel) != list(blob["gene_panel"]):
        raise CheckpointError(
            f"checkpoint gene panel {blob['gene_panel']} != dataset panel {manifest.gene_panel}"
        )
    cfg = config_from_dict(blob["config"])
    graph = CoexpressionGraph(blob["graph"]["weights"], blob["graph"]["adjacency"], blob["gene_panel"])
    model, disc = build_models(cfg, graph, blob["image_size"], cfg.seed)
    ema = blob.get("ema")
    model.load_state_dict(ema if weights == "sampling" and ema is not None else blob["model"])
    disc.load_state_dict(blob["disc"])
    schedule = dm.schedule_from_betas(blob["schedule"]["beta"])
    return model, disc, schedule, cfg
