"""Source pretraining and the unsupervised adaptation loop.

One adaptation iteration samples a labeled source batch and an unlabeled
target batch, runs both model groups on the target batch, and combines

    total = lambda1 * js + sg + lambda2 * (og + og_m)

where js aligns online features with the momentum twins, og standardizes
online predictions against momentum-group statistics, og_m standardizes
the momentum predictions against the statistics selected by the ablation
flags, and sg anchors predictions on the labeled source batch. The online
group takes one optimizer step; the momentum group follows by EMA.

Ablation flags name the enabled components:
    oma   outlier-guided terms with momentum-group statistics
    2oma  oma plus a second distribution from online-group statistics,
          used to standardize the momentum predictions
    js    feature-alignment term
    sg    source-anchor term
Disabled terms contribute exactly zero. Momentum members receive no
gradients anywhere, and group statistics are detached, so og_m regulates
the reported objective without pushing any parameter directly; this
statistics-mediated coupling is the documented interpretation of the
collaborative update.
"""

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbones import backbone_factory
from .checkpoint import read_manifest, save_checkpoint
from .databench import ContractViolation, DatasetHandle, evaluate
from .ensemble import (
    GroupState,
    batch_to_tensor,
    ema_update,
    group_forward,
    init_group,
)
from .losses import (
    LossWeights,
    OGLossParams,
    TrainingDiverged,
    baseline_loss,
    group_stats,
    js_feature_loss,
    outlier_guided_loss,
    source_gaze_loss,
    total_loss,
)

ABLATION_FLAGS = frozenset({"oma", "2oma", "js", "sg"})
OG_VARIANTS = ("og", "l1", "l2")
LOSS_LOG_HEADER = "iter,js,sg,og,og_m,total"


def enable_determinism() -> None:
    """Pin torch to deterministic single-threaded kernels for reproducible runs."""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


@dataclass(frozen=True)
class AdaptConfig:
    """All knobs of pretraining and adaptation.

    Defaults are the method's final configuration: group size 10, EMA
    coefficient 0.99, significance level 0.05, band weight 0.01, loss
    weights 0.01 / 0.1, Adam at 1e-4 for both phases.
    """

    group_size: int = 10
    alpha: float = 0.99
    epsilon: float = 0.05
    gamma: float = 0.01
    lambda1: float = 0.01
    lambda2: float = 0.1
    iterations: int = 500
    batch_size_source: int = 8
    batch_size_target: int = 8
    lr_pretrain: float = 1e-4
    lr_adapt: float = 1e-4
    target_budget: int = 10
    source_budget: int = 100
    sigma_floor: float = 1e-3
    ablation: frozenset = frozenset({"2oma", "js", "sg"})
    og_variant: str = "og"
    seed: int = 0
    eval_every: int = 100
    pretrain_steps: int = 300
    pretrain_batch_size: int = 16
    val_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "ablation", frozenset(self.ablation))
        unknown = self.ablation - ABLATION_FLAGS
        if unknown:
            raise ValueError(f"unknown ablation flags {sorted(unknown)}; valid: {sorted(ABLATION_FLAGS)}")
        if self.og_variant not in OG_VARIANTS:
            raise ValueError(f"og_variant must be one of {OG_VARIANTS}, got {self.og_variant!r}")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("batch_size_source", "batch_size_target", "target_budget",
                     "source_budget", "pretrain_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr_pretrain", "lr_adapt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.eval_every < 0 or self.pretrain_steps < 0:
            raise ValueError("eval_every and pretrain_steps must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        # delegate epsilon/gamma/sigma_floor validation
        OGLossParams(gamma=self.gamma, epsilon=self.epsilon, sigma_floor=self.sigma_floor)
        LossWeights(lambda1=self.lambda1, lambda2=self.lambda2)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablation"] = sorted(self.ablation)
        return d


@dataclass
class RunManifest:
    """Append-only record of one adaptation run, flushed atomically."""

    config: dict
    seed: int
    checkpoint_ids: list = field(default_factory=list)
    iterations_run: int = 0
    loss_log: list = field(default_factory=list)
    eval_snapshots: list = field(default_factory=list)
    final_eval_deg: float | None = None
    probe_parameter: str = ""
    probe_initial_momentum: float = 0.0
    probe_online: list = field(default_factory=list)
    probe_momentum: list = field(default_factory=list)
    target_indices: list = field(default_factory=list)
    source_indices: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    diverged: bool = False

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2)
            fh.write("\n")
        os.replace(tmp, path)

    def write_loss_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(LOSS_LOG_HEADER + "\n")
            for row in self.loss_log:
                fh.write(
                    f"{row['iter']},{row['js']:.9g},{row['sg']:.9g},"
                    f"{row['og']:.9g},{row['og_m']:.9g},{row['total']:.9g}\n"
                )


def _require_labeled(handle: DatasetHandle, what: str) -> None:
    if handle.label_visibility != "visible" or not handle.has_labels():
        raise ValueError(f"{what} must be fully labeled, got handle {handle.name!r}")


def pretrain(source_data: DatasetHandle, architecture: dict, n_models: int,
             config: AdaptConfig, out_dir) -> list[Path]:
    """Train n_models source models under distinct seeds; returns checkpoint dirs.

    Every model shares one train/validation split (seeded by config.seed);
    each checkpoint manifest records its source-validation mean angular
    error, which downstream selection ranks on. A ranking file is written
    next to the checkpoints.
    """
    _require_labeled(source_data, "pretraining source data")
    if n_models < config.group_size:
        raise ValueError(
            f"n_models={n_models} must be >= group_size={config.group_size}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(source_data)
    if n < 2:
        raise ValueError("source dataset too small to split")
    split_rng = np.random.default_rng(config.seed)
    perm = split_rng.permutation(n)
    n_val = max(1, int(round(n * config.val_fraction)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    factory = backbone_factory(architecture)
    records = []
    dirs = []
    for i in range(n_models):
        model_seed = config.seed * 1000 + i
        torch.manual_seed(model_seed)
        model = factory()
        model.train()
        optimizer = torch.optim.Adam(model.parameters(), lr=config.lr_pretrain)
        data_rng = np.random.default_rng(model_seed)
        for _ in range(config.pretrain_steps):
            take = min(config.pretrain_batch_size, len(train_idx))
            idx = data_rng.choice(train_idx, size=take, replace=False)
            batch = source_data.get_batch(idx)
            x = batch_to_tensor(batch)
            y = torch.from_numpy(batch.labels().astype(np.float32))
            loss = source_gaze_loss(model(x), y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        val_error, _ = evaluate(model, source_data.subset(val_idx, name="val-split"))
        ckpt_dir = out_dir / f"model_{i:02d}"
        save_checkpoint(
            ckpt_dir, model, architecture,
            extra={
                "val_error_deg": val_error,
                "seed": model_seed,
                "split_seed": config.seed,
                "val_fraction": config.val_fraction,
                "pretrain_steps": config.pretrain_steps,
            },
        )
        records.append((val_error, ckpt_dir.name))
        dirs.append(ckpt_dir)
    records.sort(key=lambda r: (r[0], r[1]))
    with open(out_dir / "ranking.csv", "w", encoding="utf-8") as fh:
        fh.write("rank,checkpoint,val_error_deg\n")
        for rank, (err, name) in enumerate(records, start=1):
            fh.write(f"{rank},{name},{err:.9g}\n")
    return dirs


def select_top_checkpoints(checkpoint_dirs, count: int) -> list[str]:
    """Keep the `count` checkpoints with the lowest recorded validation error."""
    scored = []
    for d in checkpoint_dirs:
        manifest = read_manifest(d)
        scored.append((manifest["val_error_deg"], str(d)))
    if count > len(scored):
        raise ValueError(f"requested {count} checkpoints, only {len(scored)} available")
    scored.sort(key=lambda s: (s[0], s[1]))
    return [d for _, d in scored[:count]]


def _og_term(variant: str, predictions, stats, params):
    if variant == "og":
        return outlier_guided_loss(predictions, stats, params)
    return baseline_loss(predictions, stats, variant)


def adapt(state: GroupState, source_subset: DatasetHandle, target_subset: DatasetHandle,
          config: AdaptConfig, eval_data: DatasetHandle | None = None,
          out_dir=None, checkpoint_ids: list | None = None):
    """Run the adaptation loop; returns (state, manifest).

    target_subset must hide its labels; the engine reads at most
    config.target_budget distinct target images, sampled once with the
    run seed. Aborts with TrainingDiverged (manifest flushed) if the
    total loss stops being finite.
    """
    if target_subset.label_visibility != "hidden":
        raise ContractViolation(
            f"adaptation target handle {target_subset.name!r} exposes labels"
        )
    _require_labeled(source_subset, "adaptation source subset")
    if state.size != config.group_size:
        raise ValueError(f"group has {state.size} members, config.group_size={config.group_size}")
    if len(target_subset) == 0:
        raise ValueError("target subset is empty")

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(config.seed)
    target_pool = rng.choice(len(target_subset),
                             size=min(config.target_budget, len(target_subset)),
                             replace=False)
    use_sg = "sg" in config.ablation
    use_js = "js" in config.ablation
    use_og = bool(config.ablation & {"oma", "2oma"})
    dual_stats = "2oma" in config.ablation
    source_pool = None
    if use_sg:
        source_pool = rng.choice(len(source_subset),
                                 size=min(config.source_budget, len(source_subset)),
                                 replace=False)

    params = OGLossParams(gamma=config.gamma, epsilon=config.epsilon,
                          sigma_floor=config.sigma_floor)
    weights = LossWeights(lambda1=config.lambda1, lambda2=config.lambda2)
    online_params = [p for m in state.online_members for p in m.parameters()]
    optimizer = torch.optim.Adam(online_params, lr=config.lr_adapt)

    probe_name = next(iter(state.online_members[0].state_dict()))

    def probe(model):
        return float(model.state_dict()[probe_name].flatten()[0])

    manifest = RunManifest(
        config=config.to_dict(),
        seed=config.seed,
        checkpoint_ids=[str(c) for c in (checkpoint_ids or [])],
        probe_parameter=probe_name,
        probe_initial_momentum=probe(state.momentum_members[0]),
        target_indices=[int(i) for i in target_pool],
        source_indices=[int(i) for i in source_pool] if source_pool is not None else [],
    )

    def flush():
        if out_dir is not None:
            manifest.save(out_dir / "manifest.json")
            manifest.write_loss_csv(out_dir / "loss_log.csv")

    for member in state.online_members:
        member.train()

    start = time.monotonic()
    try:
        for it in range(1, config.iterations + 1):
            t_idx = rng.choice(target_pool, size=config.batch_size_target,
                               replace=config.batch_size_target > len(target_pool))
            target_batch = target_subset.get_batch(t_idx)
            z_online, g_online = group_forward(state.online_members, target_batch)
            z_momentum, g_momentum = group_forward(state.momentum_members, target_batch)

            zero = torch.zeros(())
            l_js = zero
            if use_js:
                l_js = torch.stack([
                    js_feature_loss(z_online[k], z_momentum[k])
                    for k in range(state.size)
                ]).mean()

            l_og, l_og_m = zero, zero
            if use_og:
                momentum_stats = group_stats(g_momentum, "momentum", config.sigma_floor)
                l_og = _og_term(config.og_variant, g_online, momentum_stats, params)
                stats_for_momentum = (
                    group_stats(g_online, "online", config.sigma_floor)
                    if dual_stats else momentum_stats
                )
                l_og_m = _og_term(config.og_variant, g_momentum, stats_for_momentum, params)

            l_sg = zero
            if use_sg:
                s_idx = rng.choice(source_pool, size=config.batch_size_source,
                                   replace=config.batch_size_source > len(source_pool))
                source_batch = source_subset.get_batch(s_idx)
                x_s = batch_to_tensor(source_batch)
                y_s = torch.from_numpy(source_batch.labels().astype(np.float32))
                l_sg = torch.stack([
                    source_gaze_loss(member(x_s), y_s)
                    for member in state.online_members
                ]).mean()

            total = total_loss(l_js, l_sg, l_og, l_og_m, weights)
            if isinstance(total, torch.Tensor) and total.requires_grad:
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
            ema_update(state)

            manifest.loss_log.append({
                "iter": it,
                "js": float(l_js),
                "sg": float(l_sg),
                "og": float(l_og),
                "og_m": float(l_og_m),
                "total": float(total),
            })
            manifest.probe_online.append(probe(state.online_members[0]))
            manifest.probe_momentum.append(probe(state.momentum_members[0]))
            manifest.iterations_run = it

            if eval_data is not None and config.eval_every > 0 and it % config.eval_every == 0:
                snapshot_error, _ = evaluate(state.online_members[0], eval_data)
                state.online_members[0].train()
                manifest.eval_snapshots.append({"iter": it, "mean_error_deg": snapshot_error})
    except TrainingDiverged:
        manifest.diverged = True
        manifest.wall_clock_s = time.monotonic() - start
        flush()
        raise

    manifest.wall_clock_s = time.monotonic() - start
    if eval_data is not None:
        manifest.final_eval_deg, _ = evaluate(state.online_members[0], eval_data)
        state.online_members[0].train()
    flush()
    return state, manifest


@dataclass(frozen=True)
class AblationVariant:
    """One row of an ablation grid: a named config over a fixed checkpoint set."""

    name: str
    config: AdaptConfig
    checkpoints: tuple

    def __init__(self, name, config, checkpoints):
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "config", config)
        object.__setattr__(self, "checkpoints", tuple(str(c) for c in checkpoints))


def ablation_matrix(variants: list[AblationVariant], architecture: dict,
                    source: DatasetHandle, target: DatasetHandle,
                    eval_data: DatasetHandle, seeds: list[int]) -> list[dict]:
    """Run every variant over every seed; returns one report row per variant.

    All variants must share one checkpoint set so rows differ only by
    configuration. Standard deviations use the unbiased (n - 1) estimator
    and are None for a single seed.
    """
    if not variants:
        raise ValueError("variant list is empty")
    reference = variants[0].checkpoints
    for v in variants:
        if v.checkpoints != reference:
            raise ValueError(
                f"variant {v.name!r} uses a different checkpoint set than {variants[0].name!r}"
            )
    factory = backbone_factory(architecture)
    rows = []
    for variant in variants:
        errors = []
        for seed in seeds:
            config = dataclasses.replace(variant.config, seed=seed)
            selected = select_top_checkpoints(variant.checkpoints, config.group_size)
            state = init_group(selected, factory, config.alpha)
            state, _ = adapt(state, source, target.hidden(), config)
            error, _ = evaluate(state.online_members[0], eval_data)
            errors.append(error)
        mean = float(np.mean(errors))
        std = float(np.std(errors, ddof=1)) if len(errors) > 1 else None
        rows.append({
            "variant": variant.name,
            "seeds": len(seeds),
            "mean_deg": mean,
            "std_deg": std,
            "errors": errors,
        })
    return rows


def write_ablation_report(rows: list[dict], path) -> None:
    """Write ablation rows as delimiter-separated text with a mean±std column."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("variant,seeds,mean_deg,std_deg,formatted\n")
        for row in rows:
            if row["std_deg"] is None:
                std_text = ""
                formatted = f"{row['mean_deg']:.2f}"
            else:
                std_text = f"{row['std_deg']:.9g}"
                formatted = f"{row['mean_deg']:.2f}_{{±{row['std_deg']:.2f}}}"
            fh.write(f"{row['variant']},{row['seeds']},{row['mean_deg']:.9g},{std_text},{formatted}\n")
