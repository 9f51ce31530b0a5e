"""End-to-end orchestration: data, oracle, prompt training, fusion, reports.

A run is laid out as ``<out>/<confighash>/`` with datasets and the oracle
shared across seeds and one subdirectory per seed for the trained prompt
artifacts.  Every emitted number is a pure function of (config, seed);
wall-clock time goes to a side file that takes no part in that contract.
"""

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from .autograd import no_grad
from .config import ExperimentConfig, config_hash, save_config
from .datasets import DomainSpec, domain_digest, make_domain, save_domain
from .errors import StageError
from .fusion import (
    ApfHyper,
    FusionHeads,
    SharedEncoder,
    fusion_forward,
    infer,
    save_heads,
    train_apf,
)
from .metrics import miou
from .oracle import pretrain_oracle, save_oracle, seal
from .prompts import (
    SpgHyper,
    StylePromptGenerator,
    meta_pretrain,
    save_generator,
    train_spg,
)
from .scenes import SceneSpec
from .styles import TARGET_STYLES, style_presets

log = logging.getLogger(__name__)

STYLE_NAMES = tuple(style_presets())
TARGET_NAMES = tuple(TARGET_STYLES)
CLASS_COUNT = 6


@dataclass
class MetricsReport:
    """Everything a finished run emits, before formatting."""

    config_hash: str
    rows: list  # one dict per (domain, seed): baseline/fused mIoU + per-class IoU
    attention: list  # one dict per (domain, seed, style): mean fusion weight
    wall_clock: float = 0.0


def _stage(name):
    """Decorator: failures inside a stage abort with the stage name attached."""

    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as e:
                raise StageError(f"stage {name!r} failed: {e}") from e

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run

    return wrap


def domain_specs(cfg: ExperimentConfig) -> dict:
    """Every domain of the synthetic world, keyed by report name.

    Styled twins restyle the very scenes of the base split, so masks match
    pixel for pixel; targets combine held-out styles with fresh scenes.
    """
    d = cfg.data
    presets = style_presets()
    scene_tr = SceneSpec(seed=d.scene_train_seed, height=d.size, width=d.size)
    scene_val = SceneSpec(seed=d.scene_val_seed, height=d.size, width=d.size)
    scene_tgt = SceneSpec(seed=d.scene_target_seed, height=d.size, width=d.size)
    specs = {
        "base_train": DomainSpec("base_train", scene_tr, d.base_train),
        "base_val": DomainSpec("base_val", scene_val, d.base_val),
    }
    for s in STYLE_NAMES:
        specs[f"{s}_train"] = DomainSpec(
            f"{s}_train", scene_tr, d.styled_train,
            style_seed=d.style_train_seed, style_mean=presets[s],
            style_jitter=d.jitter,
        )
        specs[f"{s}_val"] = DomainSpec(
            f"{s}_val", scene_val, d.styled_val,
            style_seed=d.style_val_seed, style_mean=presets[s],
            style_jitter=d.jitter,
        )
    for t in TARGET_NAMES:
        specs[f"{t}_val"] = DomainSpec(
            f"{t}_val", scene_tgt, d.target_val,
            style_seed=d.style_target_seed, style_mean=TARGET_STYLES[t],
            style_jitter=d.jitter,
        )
    return specs


@_stage("gen-data")
def stage_data(cfg, run_dir=None) -> dict:
    """Build every domain; optionally persist them under ``run_dir/data``."""
    domains = {name: make_domain(spec) for name, spec in domain_specs(cfg).items()}
    if run_dir is not None:
        data_dir = os.path.join(run_dir, "data")
        os.makedirs(data_dir, exist_ok=True)
        for name, samples in domains.items():
            save_domain(os.path.join(data_dir, f"{name}.dom"), samples)
    return domains


@_stage("pretrain-oracle")
def stage_oracle(cfg, domains, run_dir=None):
    """Pretrain the frozen segmentation model on clean base scenes."""
    o = cfg.oracle
    model, losses = pretrain_oracle(
        domains["base_train"], iters=o.iters, seed=o.seed,
        batch_size=o.batch, lr=o.lr, widths=o.widths, kernel=o.kernel,
    )
    if run_dir is not None:
        save_oracle(os.path.join(run_dir, "oracle.ckpt"), model)
    return model, seal(model), losses


def spg_hyper(cfg) -> SpgHyper:
    s = cfg.spg
    return SpgHyper(iters=s.iters, batch=s.batch, lr=s.lr, momentum=s.momentum)


def apf_hyper(cfg) -> ApfHyper:
    a = cfg.apf
    return ApfHyper(iters=a.iters, batch=a.batch, lr=a.lr, betas=a.betas,
                    min_lr=a.min_lr, restart_frac=a.restart_frac, t_mult=a.t_mult)


@_stage("train-spg")
def stage_spg(cfg, domains, oracle, seed, seed_dir=None, only=None) -> dict:
    """Train one generator per style against the sealed oracle.

    ``only`` restricts per-style training to a single named style; the
    shared warm start still covers every style so the result matches the
    full run bit for bit.
    """
    s = cfg.spg
    d = cfg.data
    gens = {
        name: StylePromptGenerator(
            name, s.variant, height=d.size, width=d.size,
            pad=s.pad, depth=s.depth, init=s.init, seed=seed,
        )
        for name in STYLE_NAMES
    }
    subsets = {name: domains[f"{name}_train"] for name in STYLE_NAMES}
    if s.init == "meta":
        meta_pretrain(gens, subsets, oracle, spg_hyper(cfg), iters=s.meta_iters,
                      seed=seed)
    names = STYLE_NAMES if only is None else (only,)
    for name in names:
        train_spg(gens[name], subsets[name], oracle, spg_hyper(cfg), seed=seed)
        if seed_dir is not None:
            save_generator(os.path.join(seed_dir, f"spg_{name}.ckpt"), gens[name])
    return gens if only is None else {only: gens[only]}


@_stage("train-apf")
def stage_apf(cfg, domains, gens, enc, oracle, seed, seed_dir=None):
    """Train the fusion heads; everything else stays frozen."""
    a = cfg.apf
    source = list(domains["base_train"])
    if a.mix_styled:
        # stylized twins of the source join the pool, one style's worth of
        # base originals kept so the clean domain stays represented
        source = [x for s in STYLE_NAMES for x in domains[f"{s}_train"]]
        source += list(domains["base_train"])[: cfg.data.styled_train]
    heads = FusionHeads(feature_dim=enc.feature_dim, embed_dim=a.embed_dim,
                        seed=seed)
    train_apf(heads, source, list(gens.values()), enc, oracle, apf_hyper(cfg),
              seed=seed, per_channel=a.per_channel, use_softmax=a.use_softmax,
              use_tanh=a.use_tanh)
    if seed_dir is not None:
        save_heads(os.path.join(seed_dir, "apf.ckpt"), heads, enc.fingerprint())
    return heads


def eval_domains(cfg) -> tuple:
    """Names of the validation domains a report covers."""
    return ("base_val",) + tuple(f"{s}_val" for s in STYLE_NAMES) + tuple(
        f"{t}_val" for t in TARGET_NAMES
    )


@_stage("eval")
def stage_eval(cfg, domains, gens, enc, heads, oracle, seed, names=None) -> tuple:
    """Baseline and fused mIoU plus attention statistics per val domain."""
    a = cfg.apf
    gen_list = list(gens.values())
    rows, attention = [], []
    for name in (eval_domains(cfg) if names is None else names):
        samples = domains[name]
        xs = np.stack([x.image for x in samples])
        ys = np.stack([x.mask for x in samples])
        base_iou, base_mean = miou(oracle.predict_mask(xs), ys, CLASS_COUNT)
        pred, weights = infer(
            xs, gen_list, enc, heads, oracle, per_channel=a.per_channel,
            use_softmax=a.use_softmax, use_tanh=a.use_tanh, return_weights=True,
        )
        fused_iou, fused_mean = miou(pred, ys, CLASS_COUNT)
        row = {"domain": name, "seed": seed,
               "baseline_miou": base_mean, "sage_miou": fused_mean}
        for c in range(CLASS_COUNT):
            row[f"iou_{c}"] = fused_iou[c]
            row[f"baseline_iou_{c}"] = base_iou[c]
        rows.append(row)
        for i, style in enumerate(STYLE_NAMES):
            attention.append({"domain": name, "seed": seed, "style": style,
                              "mean_weight": float(weights[:, i].mean())})
    return rows, attention


def train_seed(cfg, domains, model, oracle, seed, run_dir=None):
    """All per-seed training and evaluation; returns (gens, heads, rows, att)."""
    seed_dir = None
    if run_dir is not None:
        seed_dir = os.path.join(run_dir, f"seed{seed}")
        os.makedirs(seed_dir, exist_ok=True)
    enc = SharedEncoder.from_seg_model(model)
    gens = stage_spg(cfg, domains, oracle, seed, seed_dir)
    heads = stage_apf(cfg, domains, gens, enc, oracle, seed, seed_dir)
    rows, attention = stage_eval(cfg, domains, gens, enc, heads, oracle, seed)
    return gens, heads, rows, attention


def _fmt(value):
    return f"{value:.6f}" if isinstance(value, float) else str(value)


def write_csv(path, rows, columns):
    with open(path, "w") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[c]) for c in columns) + "\n")


def report_columns():
    cols = ["domain", "seed", "baseline_miou", "sage_miou"]
    cols += [f"iou_{c}" for c in range(CLASS_COUNT)]
    cols += [f"baseline_iou_{c}" for c in range(CLASS_COUNT)]
    return cols


def run_pipeline(cfg: ExperimentConfig, out_root=None) -> MetricsReport:
    """The full experiment: every stage, every seed, reports on disk.

    ``out_root`` overrides ``cfg.out_dir``; pass ``None`` with an empty
    ``cfg.out_dir`` to keep everything in memory.
    """
    cfg.validate()
    t0 = time.time()
    root = cfg.out_dir if out_root is None else out_root
    run_dir = None
    if root:
        run_dir = os.path.join(root, config_hash(cfg))
        os.makedirs(run_dir, exist_ok=True)
        save_config(os.path.join(run_dir, "config.json"), cfg)
    domains = stage_data(cfg, run_dir)
    model, oracle, _ = stage_oracle(cfg, domains, run_dir)
    all_rows, all_attention = [], []
    for seed in cfg.seeds:
        log.info("pipeline seed %d", seed)
        _, _, rows, attention = train_seed(cfg, domains, model, oracle, seed,
                                           run_dir)
        all_rows.extend(rows)
        all_attention.extend(attention)
    report = MetricsReport(config_hash=config_hash(cfg), rows=all_rows,
                           attention=all_attention,
                           wall_clock=time.time() - t0)
    if run_dir is not None:
        write_csv(os.path.join(run_dir, "report.csv"), all_rows,
                  report_columns())
        write_csv(os.path.join(run_dir, "attention.csv"), all_attention,
                  ["domain", "seed", "style", "mean_weight"])
        meta = {"config_hash": report.config_hash,
                "wall_clock_sec": round(report.wall_clock, 3),
                "oracle_fingerprint": oracle.fingerprint}
        with open(os.path.join(run_dir, "report_meta.json"), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")
    return report


def target_mean(report: MetricsReport, column="sage_miou") -> float:
    """Mean over all (target domain, seed) cells of the report."""
    names = {f"{t}_val" for t in TARGET_NAMES}
    vals = [r[column] for r in report.rows if r["domain"] in names]
    return float(np.mean(vals))


def run_dir_for(cfg, out_root=None) -> str:
    root = cfg.out_dir if out_root is None else out_root
    return os.path.join(root, config_hash(cfg))


def load_seed_artifacts(cfg, run_dir, seed):
    """Rehydrate (model, oracle, enc, gens, heads) from a finished run."""
    from .fusion import load_heads
    from .oracle import load_oracle
    from .prompts import load_generator

    oracle_path = os.path.join(run_dir, "oracle.ckpt")
    if not os.path.exists(oracle_path):
        raise StageError(f"no oracle checkpoint at {oracle_path}; "
                         "run pretrain-oracle first")
    model = load_oracle(oracle_path)
    oracle = seal(model)
    enc = SharedEncoder.from_seg_model(model)
    seed_dir = os.path.join(run_dir, f"seed{seed}")
    gens = {}
    for name in STYLE_NAMES:
        path = os.path.join(seed_dir, f"spg_{name}.ckpt")
        if not os.path.exists(path):
            raise StageError(f"no generator checkpoint at {path}; "
                             "run train-spg first")
        gens[name] = load_generator(path)
    heads_path = os.path.join(seed_dir, "apf.ckpt")
    if not os.path.exists(heads_path):
        raise StageError(f"no fusion checkpoint at {heads_path}; "
                         "run train-apf first")
    heads, enc_fp = load_heads(heads_path)
    if enc_fp != enc.fingerprint():
        raise StageError("fusion heads were trained against a different "
                         "encoder (fingerprint mismatch)")
    return model, oracle, enc, gens, heads


# ---------------------------------------------------------------------------
# ablation suites

def _shared_world(cfg):
    """Data and oracle built once and reused by every arm of a suite."""
    domains = stage_data(cfg, None)
    model, oracle, _ = stage_oracle(cfg, domains, None)
    digests = {name: domain_digest(samples) for name, samples in domains.items()}
    return domains, model, oracle, digests


def _arm_mean_targets(cfg, domains, model, oracle) -> dict:
    """Mean target mIoU per seed for one configuration arm."""
    per_seed = {}
    names = tuple(f"{t}_val" for t in TARGET_NAMES)
    enc = SharedEncoder.from_seg_model(model)
    for seed in cfg.seeds:
        gens = stage_spg(cfg, domains, oracle, seed, None)
        heads = stage_apf(cfg, domains, gens, enc, oracle, seed, None)
        rows, _ = stage_eval(cfg, domains, gens, enc, heads, oracle, seed,
                             names=names)
        per_seed[seed] = float(np.mean([r["sage_miou"] for r in rows]))
    return per_seed


@dataclass
class AblationTable:
    suite: str
    arms: list  # dicts: {"arm": name, "per_seed": {seed: miou}, "mean": float}
    oracle_fingerprint: int
    data_digests: dict

    def mean(self, arm_name) -> float:
        for arm in self.arms:
            if arm["arm"] == arm_name:
                return arm["mean"]
        raise KeyError(arm_name)

    def to_csv(self, path):
        seeds = sorted(self.arms[0]["per_seed"])
        cols = ["arm"] + [f"seed{k}" for k in seeds] + ["mean"]
        rows = []
        for arm in self.arms:
            row = {"arm": arm["arm"], "mean": arm["mean"]}
            for k in seeds:
                row[f"seed{k}"] = arm["per_seed"][k]
            rows.append(row)
        write_csv(path, rows, cols)

    def to_markdown(self) -> str:
        seeds = sorted(self.arms[0]["per_seed"])
        head = ["arm"] + [f"seed {k}" for k in seeds] + ["mean"]
        lines = ["| " + " | ".join(head) + " |",
                 "|" + "|".join("---" for _ in head) + "|"]
        for arm in self.arms:
            cells = [arm["arm"]] + [f"{arm['per_seed'][k]:.4f}" for k in seeds]
            cells.append(f"{arm['mean']:.4f}")
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def _suite(cfg, suite, arm_cfgs) -> AblationTable:
    domains, model, oracle, digests = _shared_world(cfg)
    arms = []
    for name, arm_cfg in arm_cfgs:
        log.info("ablation %s arm %s", suite, name)
        per_seed = _arm_mean_targets(arm_cfg, domains, model, oracle)
        arms.append({"arm": name, "per_seed": per_seed,
                     "mean": float(np.mean(list(per_seed.values())))})
    return AblationTable(suite=suite, arms=arms,
                         oracle_fingerprint=oracle.fingerprint,
                         data_digests=digests)


def ablate_generators(cfg, variants=("border", "a_border", "full", "a_full")):
    """Prompt-shape comparison at a shared budget."""
    arm_cfgs = [
        (v, dataclasses.replace(cfg, spg=dataclasses.replace(cfg.spg, variant=v)))
        for v in variants
    ]
    return _suite(cfg, "generators", arm_cfgs)


def ablate_init(cfg, strategies=("zero", "uniform", "normal", "meta")):
    """Template initialization comparison at a shared budget."""
    arm_cfgs = [
        (s, dataclasses.replace(cfg, spg=dataclasses.replace(cfg.spg, init=s)))
        for s in strategies
    ]
    return _suite(cfg, "init", arm_cfgs)


def ablate_fusion(cfg) -> AblationTable:
    """All 2^3 combinations of {normalize, softmax, tanh} in the fusion path.

    Generators are trained once per seed and shared across the eight arms:
    the flags only touch the fusion machinery, and holding the prompts fixed
    makes the comparison exact.
    """
    domains, model, oracle, digests = _shared_world(cfg)
    enc = SharedEncoder.from_seg_model(model)
    combos = [(pn, sm, th) for pn in (True, False) for sm in (True, False)
              for th in (True, False)]
    names = {c: "+".join(tag for tag, on in
                         zip(("pn", "softmax", "tanh"), c) if on) or "none"
             for c in combos}
    arms = {names[c]: {} for c in combos}
    tgt = tuple(f"{t}_val" for t in TARGET_NAMES)
    for seed in cfg.seeds:
        gens = stage_spg(cfg, domains, oracle, seed, None)
        for combo in combos:
            pn, sm, th = combo
            arm_cfg = dataclasses.replace(
                cfg, apf=dataclasses.replace(
                    cfg.apf, per_channel=pn, use_softmax=sm, use_tanh=th))
            heads = stage_apf(arm_cfg, domains, gens, enc, oracle, seed, None)
            rows, _ = stage_eval(arm_cfg, domains, gens, enc, heads, oracle,
                                 seed, names=tgt)
            arms[names[combo]][seed] = float(np.mean(
                [r["sage_miou"] for r in rows]
            ))
    table = [{"arm": name, "per_seed": per_seed,
              "mean": float(np.mean(list(per_seed.values())))}
             for name, per_seed in arms.items()]
    return AblationTable(suite="fusion", arms=table,
                         oracle_fingerprint=oracle.fingerprint,
                         data_digests=digests)


def attention_report(cfg, report: MetricsReport) -> list:
    """Mean fusion weight per (domain, style), averaged over seeds."""
    out = []
    for name in eval_domains(cfg):
        for style in STYLE_NAMES:
            vals = [a["mean_weight"] for a in report.attention
                    if a["domain"] == name and a["style"] == style]
            out.append({"domain": name, "style": style,
                        "mean_weight": float(np.mean(vals))})
    return out


def styled_alignment(cfg, report: MetricsReport) -> dict:
    """For each styled val domain: does its own style win the attention row?

    Returns {style: count of seeds where argmax mean weight lands on the
    matching generator}.
    """
    wins = {}
    for style in STYLE_NAMES:
        domain = f"{style}_val"
        count = 0
        for seed in cfg.seeds:
            weights = {a["style"]: a["mean_weight"] for a in report.attention
                       if a["domain"] == domain and a["seed"] == seed}
            if max(weights, key=weights.get) == style:
                count += 1
        wins[style] = count
    return wins
