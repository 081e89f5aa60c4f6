"""Alternating min-max training loop, ablation presets, checkpointing and
convergence logging.

Each step runs two phases: the discriminators update on the adversarial loss
with generator outputs detached, then the generators and aligners update on
the registration, inverse-consistency and generator-side adversarial terms
with the discriminators frozen.
"""

from __future__ import annotations

import csv
import hashlib
import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .config import ExperimentConfig
from .imaging import DatasetManifest, Image2D, foreground_mask
from .losses import LossReport, LossWeights
from .metrics import nmae
from .networks import DaGanModel, ModelSpec, count_parameters, model_size_bytes, toy_model_spec


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class AblationConfig:
    """Which loss terms are active; presets A..F, G1, G2 plus baselines."""

    ic_reg: bool = True
    ic_gen: bool = True
    ic_joint: bool = True
    adv_mode: str = "deformation_aware"  # deformation_aware | conventional
    use_aligners: bool = True  # False: plain unwarped L1, no registration


PRESETS: dict[str, AblationConfig] = {
    "A": AblationConfig(ic_reg=True, ic_gen=False, ic_joint=False),
    "B": AblationConfig(ic_reg=False, ic_gen=True, ic_joint=False),
    "C": AblationConfig(ic_reg=False, ic_gen=False, ic_joint=True),
    "D": AblationConfig(ic_reg=True, ic_gen=True, ic_joint=False),
    "E": AblationConfig(ic_reg=True, ic_gen=False, ic_joint=True),
    "F": AblationConfig(ic_reg=False, ic_gen=True, ic_joint=True),
    "G1": AblationConfig(adv_mode="conventional"),
    "G2": AblationConfig(),
    "full": AblationConfig(),
    "pix2pix": AblationConfig(ic_reg=False, ic_gen=False, ic_joint=False,
                              adv_mode="conventional", use_aligners=False),
}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    weight_decay: float = 1e-4
    batch_size: int = 1
    epochs: int = 50
    max_steps: int = 0  # 0 = epochs only
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    validation_interval: int = 200
    checkpoint_interval_epochs: int = 1
    saturating_adv: bool = False
    adv_to_regressors: bool = True
    model_scale: str = "full"
    background_level: float = -1.0
    background_tolerance: float = 1e-3

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig) -> "TrainConfig":
        preset = cfg.get("train", "preset")
        if preset not in PRESETS:
            raise ValueError(f"unknown preset '{preset}' (choose from {sorted(PRESETS)})")
        lw = LossWeights(
            lambda_reg=cfg.getfloat("loss_weights", "lambda_reg"),
            lambda_smt=cfg.getfloat("loss_weights", "lambda_smt"),
            lambda_ic_reg=cfg.getfloat("loss_weights", "lambda_ic_reg"),
            lambda_ic_gen=cfg.getfloat("loss_weights", "lambda_ic_gen"),
            lambda_ic_joint=cfg.getfloat("loss_weights", "lambda_ic_joint"),
            lambda_adv_da=cfg.getfloat("loss_weights", "lambda_adv_da"),
        )
        return cls(
            learning_rate=cfg.getfloat("train", "learning_rate"),
            adam_beta1=cfg.getfloat("train", "adam_beta1"),
            adam_beta2=cfg.getfloat("train", "adam_beta2"),
            weight_decay=cfg.getfloat("train", "weight_decay"),
            batch_size=cfg.getint("train", "batch_size"),
            epochs=cfg.getint("train", "epochs"),
            max_steps=cfg.getint("train", "max_steps"),
            seed=cfg.getint("train", "seed"),
            loss_weights=lw,
            ablation=PRESETS[preset],
            validation_interval=cfg.getint("train", "validation_interval"),
            checkpoint_interval_epochs=cfg.getint("train", "checkpoint_interval_epochs"),
            saturating_adv=cfg.getbool("train", "saturating_adv"),
            adv_to_regressors=cfg.getbool("train", "adv_to_regressors"),
            model_scale=cfg.get("model", "scale"),
            background_level=cfg.getfloat("data", "background_level"),
            background_tolerance=cfg.getfloat("data", "background_tolerance"),
        )


def model_spec_for(scale: str) -> ModelSpec:
    if scale == "full":
        return ModelSpec()
    if scale == "toy":
        return toy_model_spec()
    raise ValueError(f"unknown model scale '{scale}'")


def seed_stream(root_seed: int, name: str) -> np.random.Generator:
    """Named deterministic substream of a single root seed."""
    return np.random.default_rng(np.random.SeedSequence((root_seed, zlib.crc32(name.encode()))))


@dataclass
class TrainState:
    model: DaGanModel
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0
    epoch: int = 0


def init_state(config: TrainConfig) -> TrainState:
    torch.manual_seed(int(seed_stream(config.seed, "init").integers(2**31)))
    model = DaGanModel(model_spec_for(config.model_scale))
    adam = dict(
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
        weight_decay=config.weight_decay,
    )
    opt_g = torch.optim.Adam(model.generator_parameters(), **adam)
    opt_d = torch.optim.Adam(model.discriminator_parameters(), **adam)
    return TrainState(model=model, opt_g=opt_g, opt_d=opt_d, config=config)


def compute_fields(model: DaGanModel, x, y, g_out, f_out) -> dict:
    """The four deformation fields; regressor argument order is (moving, fixed)."""
    phi_y_fwd, phi_y_bwd = model.aligner_y.fields(g_out, y)
    phi_x_fwd, phi_x_bwd = model.aligner_x.fields(f_out, x)
    return {
        "phi_y_fwd": phi_y_fwd,
        "phi_y_bwd": phi_y_bwd,
        "phi_x_fwd": phi_x_fwd,
        "phi_x_bwd": phi_x_bwd,
    }


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _generator_terms(state: TrainState, x, y) -> tuple[torch.Tensor, dict]:
    """Phase-2 objective: L_sr + enabled IC terms + generator-side adversarial."""
    cfg = state.config
    model = state.model
    w = cfg.loss_weights
    ab = cfg.ablation
    terms: dict[str, torch.Tensor] = {}
    g_out = model.G(x)
    f_out = model.F(y)

    if ab.use_aligners:
        fields = compute_fields(model, x, y, g_out, f_out)
        if not cfg.adv_to_regressors:
            adv_fields = {k: v.detach() for k, v in fields.items()}
        else:
            adv_fields = fields
        terms["sim"] = L.sim_loss(x, y, g_out, f_out, fields)
        terms["smt"] = L.smoothness_loss(fields)
    else:
        fields = None
        terms["sim"] = L._l1(y, g_out) + L._l1(x, f_out)

    if ab.ic_gen:
        terms["ic_gen"] = L.ic_gen_loss(x, y, model.G, model.F)
    if fields is not None:
        if ab.ic_reg:
            terms["ic_reg"] = L.ic_reg_loss(x, y, fields)
        if ab.ic_joint:
            terms["ic_joint"] = L.ic_joint_loss(x, y, model.G, model.F, fields)

    if ab.adv_mode == "deformation_aware":
        if fields is None:
            raise TrainingError("deformation-aware adversarial mode requires aligners")
        adv = L.adv_da_generator_loss(
            model.D_y, g_out, adv_fields["phi_y_fwd"], domain="y", saturating=cfg.saturating_adv
        ) + L.adv_da_generator_loss(
            model.D_x, f_out, adv_fields["phi_x_fwd"], domain="x", saturating=cfg.saturating_adv
        )
    else:
        adv = L.conventional_adv_generator_loss(
            model.D_y, g_out, domain="y", saturating=cfg.saturating_adv
        ) + L.conventional_adv_generator_loss(
            model.D_x, f_out, domain="x", saturating=cfg.saturating_adv
        )
    terms["adv_g"] = adv

    weight_of = {
        "sim": w.lambda_reg,
        "smt": w.lambda_smt,
        "ic_reg": w.lambda_ic_reg,
        "ic_gen": w.lambda_ic_gen,
        "ic_joint": w.lambda_ic_joint,
        "adv_g": w.lambda_adv_da,
    }
    total = sum(weight_of[k] * v for k, v in terms.items())
    return total, terms


def _discriminator_loss(state: TrainState, x, y) -> torch.Tensor:
    cfg = state.config
    model = state.model
    with torch.no_grad():
        g_out = model.G(x)
        f_out = model.F(y)
        fields = compute_fields(model, x, y, g_out, f_out) if cfg.ablation.use_aligners else None
    if cfg.ablation.adv_mode == "deformation_aware":
        return L.adv_da_discriminator_loss(
            model.D_y, y, g_out, fields["phi_y_fwd"], fields["phi_y_bwd"], domain="y"
        ) + L.adv_da_discriminator_loss(
            model.D_x, x, f_out, fields["phi_x_fwd"], fields["phi_x_bwd"], domain="x"
        )
    return L.conventional_adv_discriminator_loss(model.D_y, y, g_out, domain="y") + \
        L.conventional_adv_discriminator_loss(model.D_x, x, f_out, domain="x")


def train_step(state: TrainState, x: torch.Tensor, y: torch.Tensor) -> LossReport:
    """One alternating update; returns the phase-2 loss report."""
    model = state.model
    w = state.config.loss_weights
    if not (torch.isfinite(x).all() and torch.isfinite(y).all()):
        raise TrainingError("non-finite values in training batch")

    # phase 1: discriminators
    state.opt_d.zero_grad(set_to_none=True)
    d_loss = _discriminator_loss(state, x, y)
    d_loss.backward()
    state.opt_d.step()

    # phase 2: generators + aligners, discriminators frozen
    _set_requires_grad(model.D_y, False)
    _set_requires_grad(model.D_x, False)
    try:
        state.opt_g.zero_grad(set_to_none=True)
        total, terms = _generator_terms(state, x, y)
        if not torch.isfinite(total):
            raise TrainingError(_diagnostic_dump(state, terms, d_loss))
        total.backward()
        state.opt_g.step()
    finally:
        _set_requires_grad(model.D_y, True)
        _set_requires_grad(model.D_x, True)

    state.step += 1
    report = L.assemble_report(
        {**terms, "adv_d": d_loss},
        weights={
            "sim": w.lambda_reg,
            "smt": w.lambda_smt,
            "ic_reg": w.lambda_ic_reg,
            "ic_gen": w.lambda_ic_gen,
            "ic_joint": w.lambda_ic_joint,
            "adv_g": w.lambda_adv_da,
            "adv_d": 0.0,  # discriminator objective, not part of the phase-2 total
        },
    )
    return report


def _diagnostic_dump(state: TrainState, terms: dict, d_loss) -> str:
    parts = {k: float(v.detach()) for k, v in terms.items()}
    parts["adv_d"] = float(d_loss.detach())
    return f"non-finite loss at step {state.step}: {json.dumps(parts)}"


# ---------------------------------------------------------------------------
# dataset pipeline


class PairCache:
    """Loads pairs as tensors on demand and keeps them in memory."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[str, tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]] = {}

    def __len__(self):
        return len(self.manifest)

    def get(self, index: int):
        rec = self.manifest.pairs[index]
        if rec.sample_id not in self._cache:
            pair = self.manifest.load_pair(rec)
            x = torch.from_numpy(pair.source.values)[None, None]
            y = torch.from_numpy(pair.target.values)[None, None]
            aligned = None
            if pair.aligned_target is not None:
                aligned = torch.from_numpy(pair.aligned_target.values)[None, None]
            self._cache[rec.sample_id] = (x, y, aligned)
        return self._cache[rec.sample_id]


def validation_nmae(state: TrainState, cache: PairCache, max_samples: int = 16) -> float:
    """Mean foreground NMAE of G(x) against the aligned target (falling back
    to the misaligned target when no ground truth exists)."""
    cfg = state.config
    vals = []
    state.model.eval()
    with torch.no_grad():
        for i in range(min(len(cache), max_samples)):
            x, y, aligned = cache.get(i)
            ref = aligned if aligned is not None else y
            pred = state.model.G(x)[0, 0].numpy()
            ref_img = Image2D(ref[0, 0].numpy())
            mask = foreground_mask(ref_img, cfg.background_level, cfg.background_tolerance)
            if not mask.any():
                continue
            vals.append(nmae(pred, ref_img.values, mask))
    state.model.train()
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"step": state.step, "epoch": state.epoch,
             "model_scale": state.config.model_scale, "networks": {}}
    for name, net in state.model.networks().items():
        fname = f"{name}.pt"
        torch.save(net.state_dict(), directory / fname)
        index["networks"][name] = {
            "file": fname,
            "parameters": count_parameters(net),
        }
    index["config_hash"] = hashlib.sha256(
        json.dumps(index["networks"], sort_keys=True).encode()
    ).hexdigest()[:16]
    torch.save({"opt_g": state.opt_g.state_dict(), "opt_d": state.opt_d.state_dict()},
               directory / "optimizers.pt")
    (directory / "index.json").write_text(json.dumps(index, indent=2))
    return directory


def load_checkpoint(directory: str | Path, config: TrainConfig | None = None) -> TrainState:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise TrainingError(f"not a checkpoint directory: {directory}")
    index = json.loads(index_path.read_text())
    if config is None:
        config = TrainConfig(model_scale=index["model_scale"])
    elif config.model_scale != index["model_scale"]:
        raise TrainingError(
            f"checkpoint model scale '{index['model_scale']}' does not match config "
            f"'{config.model_scale}'"
        )
    state = init_state(config)
    for name, net in state.model.networks().items():
        net.load_state_dict(torch.load(directory / index["networks"][name]["file"],
                                       weights_only=True))
    opt_path = directory / "optimizers.pt"
    if opt_path.exists():
        opt = torch.load(opt_path, weights_only=True)
        state.opt_g.load_state_dict(opt["opt_g"])
        state.opt_d.load_state_dict(opt["opt_d"])
    state.step = index["step"]
    state.epoch = index["epoch"]
    return state


def parameter_summary(model: DaGanModel) -> dict:
    nets = {name: count_parameters(net) for name, net in model.networks().items()}
    return {
        "networks": nets,
        "total_parameters": count_parameters(model),
        "size_bytes": model_size_bytes(model),
    }


# ---------------------------------------------------------------------------
# full runs


def train(
    config: TrainConfig,
    train_manifest: DatasetManifest,
    out_dir: str | Path,
    val_manifest: DatasetManifest | None = None,
    resume_from: str | Path | None = None,
    experiment: ExperimentConfig | None = None,
) -> Path:
    """Run the full loop; writes losses.csv, validation.csv, checkpoints/,
    params.json and sample previews under ``out_dir``."""
    if len(train_manifest) == 0:
        raise TrainingError("training dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)

    if experiment is not None:
        experiment.write_resolved(out_dir / "config.resolved")

    if resume_from is not None:
        state = load_checkpoint(resume_from, config)
    else:
        state = init_state(config)

    (out_dir / "params.json").write_text(json.dumps(parameter_summary(state.model), indent=2))

    cache = PairCache(train_manifest)
    val_cache = PairCache(val_manifest) if val_manifest is not None else cache
    shuffle_rng = seed_stream(config.seed, "shuffle")

    loss_path = out_dir / "losses.csv"
    val_path = out_dir / "validation.csv"
    loss_fh = open(loss_path, "a", newline="")
    val_fh = open(val_path, "a", newline="")
    loss_writer = None
    val_writer = csv.writer(val_fh)
    if val_fh.tell() == 0:
        val_writer.writerow(["step", "nmae"])

    def log_validation():
        nonlocal val_writer
        val_writer.writerow([state.step, f"{validation_nmae(state, val_cache):.6f}"])
        val_fh.flush()

    try:
        log_validation()  # step-0 reference point
        done = False
        while state.epoch < config.epochs and not done:
            order = shuffle_rng.permutation(len(cache))
            for idx in order:
                x, y, _ = cache.get(int(idx))
                report = train_step(state, x, y)
                if loss_writer is None:
                    cols = ["step"] + list(report.as_row().keys())
                    loss_writer = csv.DictWriter(loss_fh, fieldnames=cols)
                    if loss_fh.tell() == 0:
                        loss_writer.writeheader()
                loss_writer.writerow({"step": state.step, **{
                    k: f"{v:.6f}" for k, v in report.as_row().items()}})
                if state.step % 50 == 0:
                    loss_fh.flush()
                if state.step % config.validation_interval == 0:
                    log_validation()
                if config.max_steps and state.step >= config.max_steps:
                    done = True
                    break
            state.epoch += 1
            if state.epoch % config.checkpoint_interval_epochs == 0 or done:
                save_checkpoint(state, out_dir / "checkpoints" / f"epoch_{state.epoch:03d}")
        log_validation()
        save_checkpoint(state, out_dir / "checkpoints" / "last")
        _write_samples(state, val_cache, out_dir / "samples")
    finally:
        loss_fh.close()
        val_fh.close()
    return out_dir


def _write_samples(state: TrainState, cache: PairCache, sample_dir: Path, n: int = 4) -> None:
    from .imaging import save_image

    sample_dir.mkdir(parents=True, exist_ok=True)
    state.model.eval()
    with torch.no_grad():
        for i in range(min(n, len(cache))):
            x, _, _ = cache.get(i)
            pred = state.model.G(x)[0, 0].numpy()
            save_image(Image2D(np.clip(pred, -1, 1)), sample_dir / f"pred_{i:03d}.png")
    state.model.train()


def synthesize(
    checkpoint_dir: str | Path,
    manifest: DatasetManifest,
    direction: str = "x2y",
    emit_fields: bool = False,
):
    """Inference with the generator only; predictions stay in source space.

    Yields (sample_id, prediction array, optional forward field array).
    """
    if direction not in ("x2y", "y2x"):
        raise ValueError(f"direction must be 'x2y' or 'y2x', got '{direction}'")
    state = load_checkpoint(checkpoint_dir)
    state.model.eval()
    cache = PairCache(manifest)
    with torch.no_grad():
        for i, rec in enumerate(manifest.pairs):
            x, y, _ = cache.get(i)
            if direction == "x2y":
                pred = state.model.G(x)
                field_t = (
                    state.model.aligner_y.fields(pred, y)[0] if emit_fields else None
                )
            else:
                pred = state.model.F(y)
                field_t = (
                    state.model.aligner_x.fields(pred, x)[0] if emit_fields else None
                )
            yield (
                rec.sample_id,
                pred[0, 0].numpy(),
                field_t[0].numpy() if field_t is not None else None,
            )


def sensitivity_sweep(
    base_config: TrainConfig,
    parameter: str,
    values: list[float],
    train_manifest: DatasetManifest,
    out_dir: str | Path,
    val_manifest: DatasetManifest | None = None,
) -> list[dict]:
    """Train once per weight value; returns rows of (value, final validation NMAE)."""
    valid = {f.name for f in LossWeights.__dataclass_fields__.values()}
    if parameter not in valid:
        raise ValueError(f"unknown loss weight '{parameter}' (choose from {sorted(valid)})")
    out_dir = Path(out_dir)
    rows = []
    for value in values:
        weights = replace(base_config.loss_weights, **{parameter: value})
        cfg = replace(base_config, loss_weights=weights)
        run_dir = out_dir / f"{parameter}_{value:g}"
        train(cfg, train_manifest, run_dir, val_manifest=val_manifest)
        last = _read_last_validation(run_dir / "validation.csv")
        rows.append({"parameter": parameter, "value": value, "final_nmae": last})
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["parameter", "value", "final_nmae"])
        writer.writeheader()
        writer.writerows(rows)
    return rows


def _read_last_validation(path: Path) -> float:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return float(rows[-1]["nmae"]) if rows else float("nan")
