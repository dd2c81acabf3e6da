"""Experiment runner: config loading, the run modes and the ablation/scaling grids.

A run is described by one TOML file.  Top-level keys are ``mode``,
``seeds``, ``out`` and ``run_id``; every other section maps onto a
config object (``[model]`` onto :class:`~vitapes.encoder.ModelConfig` on
top of a named base, ``[data]`` onto :class:`~vitapes.data.GenConfig`,
``[train]`` onto :class:`~vitapes.training.TrainConfig`, and so on).
Unknown keys are rejected with the offending field named.
"""

from __future__ import annotations

import copy
import dataclasses
import os
import sys
from dataclasses import dataclass, field


if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import autograd as ag
from .checkpoint import load_checkpoint, save_checkpoint
from .data import GenConfig, generate_dataset, split, stack
from .embedding import export_pe_csv, pe_uniqueness_audit, write_pgm
from .encoder import (NAMED_CONFIGS, ModelConfig, build_model, count_parameters, cross_attention_mass,
                      features, named_config, write_attention_mass_csv)
from .errors import ConfigError, NumericError, VitapesError
from .fusion import SingularValueLog
from .objectives import (MaeConfig, ProbeConfig, add_mae_decoder, has_decoder, linear_probe, tactile_masking_sweep,
                         write_sweep_csv, zero_shot)
from .theory import AssumptionAudit, verify_battery, write_reports
from .training import MetricsLog, TrainConfig, accuracy, make_optimizer, train


MODES = ("pretrain_mae", "train_supervised", "probe", "zeroshot", "sweep", "verify", "ablate", "scale")

# three learnable-vs-sinusoidal cells, two PE-use cells, two modality cells
ABLATION_CELLS = {
    "vitapes_full": dict(pe_visual="learnable", pe_tactile="learnable", pe_global="learnable", modality="both"),
    "modal_sinusoidal": dict(pe_visual="sinusoidal", pe_tactile="sinusoidal", pe_global="learnable", modality="both"),
    "global_sinusoidal": dict(pe_visual="learnable", pe_tactile="learnable", pe_global="sinusoidal", modality="both"),
    "all_sinusoidal": dict(pe_visual="sinusoidal", pe_tactile="sinusoidal", pe_global="sinusoidal", modality="both"),
    "no_modal_pe": dict(pe_visual="off", pe_tactile="off", pe_global="learnable", modality="both"),
    "no_global_pe": dict(pe_visual="learnable", pe_tactile="learnable", pe_global="off", modality="both"),
    "vision_only": dict(pe_visual="learnable", pe_tactile="learnable", pe_global="learnable", modality="vision_only"),
    "touch_only": dict(pe_visual="learnable", pe_tactile="learnable", pe_global="learnable", modality="touch_only"),
}


@dataclass(frozen=True)
class SweepConfig:
    ratios: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    mask_seeds: tuple = (0, 1, 2, 3, 4)
    retrain_probe: bool = True
    encoder: str = "mae"            # mae | supervised | random | checkpoint


@dataclass(frozen=True)
class VerifyConfig:
    num_pairs: int = 10_000
    num_samples: int = 100
    gradients: bool = True


@dataclass(frozen=True)
class AuditConfig:
    stride: int = 5
    enabled: bool = True


@dataclass(frozen=True)
class ScaleConfig:
    variants: tuple = ("scale_micro", "minimal", "moderate")
    epochs: int | None = None
    lr: float | None = None


@dataclass(frozen=True)
class AblateConfig:
    cells: tuple = tuple(ABLATION_CELLS)


@dataclass(frozen=True)
class RunConfig:
    mode: str
    model: ModelConfig
    data: GenConfig
    train: TrainConfig = TrainConfig()
    mae: MaeConfig = MaeConfig()
    probe: ProbeConfig = ProbeConfig()
    sweep: SweepConfig = SweepConfig()
    verify: VerifyConfig = VerifyConfig()
    audit: AuditConfig = AuditConfig()
    scale: ScaleConfig = ScaleConfig()
    ablate: AblateConfig = AblateConfig()
    seeds: tuple = (0,)
    out: str = "runs/default"
    run_id: str = ""
    train_fraction: float = 0.75
    checkpoint: str | None = None      # encoder to load for probe/zeroshot/sweep
    checkpoint_every: int = 0
    resume: bool = False
    pretrain_epochs: int | None = None

    @property
    def name(self):
        return self.run_id or f"{self.mode}-{self.model.name}"


# -- loading -------------------------------------------------------------------------------

_SECTIONS = {"train": TrainConfig, "mae": MaeConfig, "probe": ProbeConfig, "sweep": SweepConfig,
             "verify": VerifyConfig, "audit": AuditConfig, "scale": ScaleConfig, "ablate": AblateConfig}
_TOP = {"mode", "seeds", "out", "run_id", "train_fraction", "checkpoint", "checkpoint_every", "resume",
        "pretrain_epochs"}


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _coerce(cls, section, values):
    known = _fields(cls)
    out = {}
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"unknown key {section}.{k}", f"{section}.{k}")
        out[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**out)
    except TypeError as exc:
        raise ConfigError(f"bad [{section}] section: {exc}", section) from exc


def parse_value(text):
    """TOML scalar/array literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw, overrides):
    """``key=value`` pairs with dotted keys, e.g. ``train.epochs=3``."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", item)
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table", key)
        node[parts[-1]] = parse_value(value.strip())
    return raw


def config_from_dict(raw):
    raw = dict(raw)
    if "mode" not in raw:
        raise ConfigError("missing required key 'mode'", "mode")
    mode = raw["mode"]
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}", "mode")
    for k in raw:
        if k not in _TOP and k not in _SECTIONS and k not in ("model", "data"):
            raise ConfigError(f"unknown top-level key {k!r}", k)

    model_raw = dict(raw.get("model", {}))
    base = model_raw.pop("name", "desk")
    if base not in NAMED_CONFIGS:
        raise ConfigError(f"unknown model config {base!r}", "model.name")
    for k in model_raw:
        if k not in _fields(ModelConfig):
            raise ConfigError(f"unknown key model.{k}", f"model.{k}")
    model = named_config(base, **model_raw)
    model.validate(allow_empty=True)

    data_raw = dict(raw.get("data", {}))
    data_raw.setdefault("image_side", model.visual_side)
    data_raw.setdefault("channels", model.channels)
    data_raw.setdefault("num_classes", model.num_classes)
    data_raw.setdefault("patch_size", model.patch_size)
    data = _coerce(GenConfig, "data", data_raw)
    data.validate()
    if data.image_side != model.visual_side or data.image_side != model.tactile_side:
        raise ConfigError(f"data.image_side={data.image_side} disagrees with the model input side", "data.image_side")
    if data.num_classes != model.num_classes:
        raise ConfigError("data.num_classes disagrees with model.num_classes", "data.num_classes")
    if data.channels != model.channels:
        raise ConfigError("data.channels disagrees with model.channels", "data.channels")

    kw = {name: _coerce(cls, name, raw.get(name, {})) for name, cls in _SECTIONS.items()}
    kw["mae"].validate()
    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds must be a non-empty list of non-negative integers", "seeds")
    tf = raw.get("train_fraction", 0.75)
    if not 0.0 < tf < 1.0:
        raise ConfigError("train_fraction must lie in (0, 1)", "train_fraction")
    if kw["train"].epochs < 1 or kw["train"].batch_size < 1:
        raise ConfigError("train.epochs and train.batch_size must be >= 1", "train.epochs")
    if kw["train"].lr <= 0:
        raise ConfigError("train.lr must be positive", "train.lr")
    for s in kw["scale"].variants:
        if s not in NAMED_CONFIGS:
            raise ConfigError(f"unknown scale variant {s!r}", "scale.variants")
    for c in kw["ablate"].cells:
        if c not in ABLATION_CELLS:
            raise ConfigError(f"unknown ablation cell {c!r}", "ablate.cells")
    if kw["sweep"].encoder not in ("mae", "supervised", "random", "checkpoint"):
        raise ConfigError(f"unknown sweep.encoder {kw['sweep'].encoder!r}", "sweep.encoder")
    if kw["sweep"].encoder == "checkpoint" and not raw.get("checkpoint"):
        raise ConfigError("sweep.encoder='checkpoint' needs a top-level checkpoint path", "checkpoint")
    return RunConfig(mode=mode, model=model, data=data, seeds=tuple(seeds),
                     out=str(raw.get("out", "runs/default")), run_id=str(raw.get("run_id", "")),
                     train_fraction=float(tf), checkpoint=raw.get("checkpoint"),
                     checkpoint_every=int(raw.get("checkpoint_every", 0)), resume=bool(raw.get("resume", False)),
                     pretrain_epochs=raw.get("pretrain_epochs"), **kw)


def load_config(path, overrides=(), seed=None, out=None):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}", "config") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}", "config") from exc
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seeds"] = [seed]
    if out is not None:
        raw["out"] = out
    return config_from_dict(raw)


# -- shared pieces ---------------------------------------------------------------------------

def workers():
    try:
        n = int(os.environ.get("VITAPES_WORKERS", "1"))
    except ValueError as exc:
        raise ConfigError("VITAPES_WORKERS must be an integer", "VITAPES_WORKERS") from exc
    return max(n, 1)


def _map(fn, jobs):
    """Run independent jobs, in parallel when VITAPES_WORKERS > 1; order preserved."""
    n = min(workers(), len(jobs))
    if n <= 1:
        return [fn(j) for j in jobs]
    import multiprocessing as mp

    with mp.get_context("fork").Pool(n) as pool:
        return pool.map(fn, jobs)


def dataset_for(cfg, seed):
    data = dataclasses.replace(cfg.data, seed=cfg.data.seed + seed)
    return split(generate_dataset(data), cfg.train_fraction, seed)


def _train_cfg(cfg, seed, epochs=None, lr=None):
    t = dataclasses.replace(cfg.train, seed=seed)
    if epochs is not None:
        t = dataclasses.replace(t, epochs=epochs)
    if lr is not None:
        t = dataclasses.replace(t, lr=lr)
    return t


class EpochPrinter:
    def __init__(self, label, stream=None):
        self.label = label
        self.stream = stream or sys.stdout

    def __call__(self, model, epoch, hist):
        print(f"[{self.label}] epoch {epoch + 1} loss {hist.losses[-1]:.6f} lr {hist.lrs[-1]:.3g}",
              file=self.stream, flush=True)


class PeriodicCheckpoint:
    def __init__(self, path, every, objective):
        self.path, self.every, self.objective = path, every, objective

    def __call__(self, model, epoch, hist):
        if self.every and (epoch + 1) % self.every == 0:
            save_checkpoint(self.path, model, getattr(model, "_opt", None), epoch,
                            {"objective": self.objective, "losses": list(hist.losses)})


def fit(cfg, model, train_pairs, objective, seed, out_dir=None, metrics=None, epochs=None,
        lr=None, audit=None, quiet=False):
    """Train with optional resume, periodic checkpoints and abort-on-NaN checkpointing."""
    tcfg = _train_cfg(cfg, seed, epochs, lr)
    ckpt = os.path.join(out_dir, f"checkpoint-{objective}-seed{seed}.vtpm") if out_dir else None
    start, opt = 0, None
    if cfg.resume and ckpt and os.path.exists(ckpt):
        c = load_checkpoint(ckpt)
        model = c.model
        if objective == "mae" and not has_decoder(model):
            add_mae_decoder(model, cfg.mae, seed)
        opt = make_optimizer(model, objective, tcfg)
        if c.optimizer_state:
            opt.load_state_dict(c.optimizer_state)
        start = (c.epoch + 1) if c.epoch is not None else 0
    else:
        if objective == "mae":
            add_mae_decoder(model, cfg.mae, seed)
        opt = make_optimizer(model, objective, tcfg)
    model._opt = opt
    hooks = []
    if not quiet:
        hooks.append(EpochPrinter(f"{cfg.name} {objective} seed {seed}"))
    if audit is not None:
        hooks.append(audit)
    if ckpt and cfg.checkpoint_every:
        hooks.append(PeriodicCheckpoint(ckpt, cfg.checkpoint_every, objective))
    try:
        hist = train(model, train_pairs, objective, tcfg, mae_cfg=cfg.mae, optimizer=opt,
                     start_epoch=start, hooks=hooks, metrics=metrics)
    except NumericError:
        if ckpt:
            save_checkpoint(ckpt, model, opt, None, {"objective": objective, "aborted": True})
        raise
    if ckpt:
        save_checkpoint(ckpt, model, opt, tcfg.epochs - 1, {"objective": objective, "losses": list(hist.losses)})
    return model, hist


def export_artifacts(model, out_dir, tag, test_pairs=None):
    """PE tables (CSV + PGM cosine heatmap) and the cross-attention mass table."""
    os.makedirs(out_dir, exist_ok=True)
    bank = model.bank
    for name, table in bank.tables().items():
        export_pe_csv(table, os.path.join(out_dir, f"pe_{name}-{tag}.csv"))
    if bank.tables():
        audit = pe_uniqueness_audit(bank)
        write_pgm(audit.matrix, os.path.join(out_dir, f"pe_cosine-{tag}.pgm"))
    if test_pairs:
        v, t, _ = stack(test_pairs[:16])
        with ag.no_grad():
            _, trace = features(model, v if model.cfg.n_visual else None, t if model.cfg.n_tactile else None, trace=True)
        if trace.weights:
            write_attention_mass_csv(cross_attention_mass(trace), os.path.join(out_dir, f"attention_mass-{tag}.csv"))


def _metrics_path(out_dir, seed):
    return os.path.join(out_dir, f"metrics-seed{seed}.csv")


def _encoder_for(cfg, seed, train_pairs, out_dir, metrics, kind):
    if kind == "checkpoint":
        return load_checkpoint(cfg.checkpoint).model
    model = build_model(cfg.model, seed)
    if kind == "mae":
        model, _ = fit(cfg, model, train_pairs, "mae", seed, out_dir, metrics, epochs=cfg.pretrain_epochs)
    elif kind == "supervised":
        model, _ = fit(cfg, model, train_pairs, "supervised", seed, out_dir, metrics)
    return model


# -- modes ------------------------------------------------------------------------------------

@dataclass
class RunResult:
    status: int
    summary: dict = field(default_factory=dict)


def _per_seed(cfg, out_dir, seed):
    tr, te = dataset_for(cfg, seed)
    metrics = MetricsLog(_metrics_path(out_dir, seed), cfg.name, seed, append=cfg.resume)
    mode = cfg.mode
    res = {"seed": seed}
    if mode == "train_supervised":
        audit = None
        if cfg.audit.enabled:
            sv = SingularValueLog(os.path.join(out_dir, f"singular_values-seed{seed}.csv"), cfg.model.embed_dim)
            audit = AssumptionAudit(cfg.audit.stride, os.path.join(out_dir, f"verify-seed{seed}.jsonl"), sv, seed)
            open(audit.jsonl_path, "w").close()
        model = build_model(cfg.model, seed)
        model, hist = fit(cfg, model, tr, "supervised", seed, out_dir, metrics, audit=audit)
        res["train_acc"] = accuracy(model, tr)
        res["test_acc"] = accuracy(model, te)
        metrics.log(cfg.train.epochs - 1, "train", "accuracy", res["train_acc"])
        metrics.log(cfg.train.epochs - 1, "test", "accuracy", res["test_acc"])
        export_artifacts(model, out_dir, f"seed{seed}", te)
    elif mode == "pretrain_mae":
        model = build_model(cfg.model, seed)
        model, hist = fit(cfg, model, tr, "mae", seed, out_dir, metrics, epochs=cfg.pretrain_epochs)
        rep = linear_probe(model, tr, te, cfg.probe, seed)
        res["final_mae_loss"] = hist.final_loss
        res["probe_acc"] = rep.accuracy
        metrics.log(len(hist.losses) - 1, "test", "probe_accuracy", rep.accuracy)
        export_artifacts(model, out_dir, f"seed{seed}", te)
    elif mode in ("probe", "zeroshot"):
        kind = "checkpoint" if cfg.checkpoint else "random"
        model = _encoder_for(cfg, seed, tr, out_dir, metrics, kind)
        if mode == "probe":
            rep = linear_probe(model, tr, te, cfg.probe, seed)
            metrics.log(0, "test", "probe_accuracy", rep.accuracy)
            res["probe_acc"] = rep.accuracy
        else:
            rep = zero_shot(model, tr, te)
            metrics.log(0, "test", "zeroshot_accuracy", rep.accuracy)
            res["zeroshot_acc"] = rep.accuracy
    elif mode == "sweep":
        model = _encoder_for(cfg, seed, tr, out_dir, metrics, cfg.sweep.encoder)
        base = linear_probe(model, tr, te, cfg.probe, seed)
        pts = tactile_masking_sweep(model, base.extra["probe"], te, cfg.sweep.ratios, cfg.sweep.mask_seeds,
                                    train=tr if cfg.sweep.retrain_probe else None, probe_cfg=cfg.probe)
        write_sweep_csv(pts, os.path.join(out_dir, f"sweep-seed{seed}.csv"))
        for p in pts:
            metrics.log(0, "test", f"acc_mask{p.ratio:g}", p.mean_acc)
        res["curve"] = [(p.ratio, p.mean_acc, p.std_acc) for p in pts]
    return res


def _write_rows(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[h]) for h in header) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _ablation_job(args):
    cfg, cell, seed, out_dir = args
    mcfg = dataclasses.replace(cfg.model, **ABLATION_CELLS[cell])
    sub = dataclasses.replace(cfg, model=mcfg, run_id=f"{cfg.name}-{cell}")
    row = {"cell": cell, "seed": seed, **ABLATION_CELLS[cell]}
    try:
        tr, te = dataset_for(sub, seed)
        model = build_model(mcfg, seed)
        metrics = MetricsLog(os.path.join(out_dir, f"metrics-{cell}-seed{seed}.csv"), sub.name, seed)
        model, _ = fit(sub, model, tr, "supervised", seed, None, metrics, quiet=True)
        row["test_acc"] = accuracy(model, te)
        row["params"] = model.num_parameters(include=("patch.", "pe.", "head.", "cls", "blocks.", "norm.", "classifier."))
        row["status"] = "ok"
        metrics.log(sub.train.epochs - 1, "test", "accuracy", row["test_acc"])
    except VitapesError as exc:
        row.update(test_acc=float("nan"), params=0, status=f"error: {type(exc).__name__}")
    print(f"[{cfg.name}] ablation {cell} seed {seed}: {row['test_acc']:.4f}", flush=True)
    return row


def ablation_grid(cfg, out_dir):
    jobs = [(cfg, cell, s, out_dir) for s in cfg.seeds for cell in cfg.ablate.cells]
    rows = _map(_ablation_job, jobs)
    _write_rows(os.path.join(out_dir, "ablation.csv"),
                ["cell", "seed", "pe_visual", "pe_tactile", "pe_global", "modality", "params", "test_acc", "status"],
                rows)
    return rows


def _scale_job(args):
    cfg, variant, seed, out_dir = args
    shape = {k: NAMED_CONFIGS[variant][k] for k in ("embed_dim", "depth", "heads")}
    shape["head_hidden"] = NAMED_CONFIGS[variant].get("head_hidden")
    mcfg = dataclasses.replace(cfg.model, name=variant, **shape)
    sub = dataclasses.replace(cfg, model=mcfg, run_id=f"{cfg.name}-{variant}")
    row = {"variant": variant, "seed": seed, **{k: shape[k] for k in ("embed_dim", "depth", "heads")}}
    try:
        tr, te = dataset_for(sub, seed)
        model = build_model(mcfg, seed)
        row["params"] = model.num_parameters(include=("patch.", "pe.", "head.", "cls", "blocks.", "norm.", "classifier."))
        row["params_formula"] = count_parameters(mcfg)
        metrics = MetricsLog(os.path.join(out_dir, f"metrics-{variant}-seed{seed}.csv"), sub.name, seed)
        model, _ = fit(sub, model, tr, "supervised", seed, None, metrics, epochs=cfg.scale.epochs,
                       lr=cfg.scale.lr, quiet=True)
        row["test_acc"] = accuracy(model, te)
        row["status"] = "ok"
    except MemoryError:
        row.update(params=row.get("params", 0), params_formula=count_parameters(mcfg),
                   test_acc=float("nan"), status="skipped: out of memory")
    except VitapesError as exc:
        row.update(params=row.get("params", 0), params_formula=count_parameters(mcfg),
                   test_acc=float("nan"), status=f"error: {type(exc).__name__}")
    print(f"[{cfg.name}] scale {variant} seed {seed}: {row['test_acc']:.4f} ({row['params']} params)", flush=True)
    return row


def scaling_grid(cfg, out_dir):
    jobs = [(cfg, v, s, out_dir) for s in cfg.seeds for v in cfg.scale.variants]
    rows = _map(_scale_job, jobs)
    _write_rows(os.path.join(out_dir, "scaling.csv"),
                ["variant", "seed", "embed_dim", "depth", "heads", "params", "params_formula", "test_acc", "status"],
                rows)
    return rows


def run_config(cfg):
    """Execute ``cfg``; returns a RunResult whose status is the CLI exit code."""
    out_dir = cfg.out
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out_dir!r} is not writable: {exc}", "out") from exc
    if cfg.mode == "verify":
        reports = []
        for s in cfg.seeds:
            reports += verify_battery(s, cfg.verify.num_pairs, cfg.verify.num_samples,
                                      gradients=cfg.verify.gradients)
        write_reports(reports, os.path.join(out_dir, "verify.jsonl"))
        failed = [r.check for r in reports if r.status == "fail"]
        for r in reports:
            print(f"[verify] {r.check}: {r.status}", flush=True)
        return RunResult(1 if failed else 0, {"failed": failed, "reports": reports})
    if cfg.mode == "ablate":
        rows = ablation_grid(cfg, out_dir)
        return RunResult(0, {"rows": rows})
    if cfg.mode == "scale":
        rows = scaling_grid(cfg, out_dir)
        bad = [r for r in rows if r["status"] == "ok" and r["params"] != r["params_formula"]]
        return RunResult(1 if bad else 0, {"rows": rows})
    results = [_per_seed(cfg, out_dir, s) for s in cfg.seeds]
    return RunResult(0, {"seeds": results})


def run(path, overrides=(), seed=None, out=None):
    """Load a config file and execute it."""
    return run_config(load_config(path, overrides, seed, out))
