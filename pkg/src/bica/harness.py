"""Experiment orchestration: configuration records, seed presets, evaluation,
run persistence, the 15-variant ablation grid, and baseline comparisons.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import json
import os
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from . import gridworld as gw
from . import metrics as mt
from . import surrogate as su
from .alignment import cca_corr, wasserstein2_sq
from .gridworld import EnvParams
from .neural import save_checkpoint, softmax
from .surrogate import SurrogateConfig
from .trainer import (Components, TrainConfig, TrainResult, collect_rollouts,
                      human_message_dists, make_components, train)

SCHEMA_VERSION = 1

SEED_PRESETS = {
    "main": [13, 42, 15213, 2025, 4096],
    "extended": [7, 123, 314, 999, 1337],
    "robustness": [2023, 8888, 5555, 1111, 9876],
    "ablation": [42, 2025, 15213],
    "baseline": [13, 42, 2025],
    "dev": [0, 1, 2],
}


# -- configuration ------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run, in one auditable record."""
    name: str = "default"
    schema_version: int = SCHEMA_VERSION
    seeds: list[int] = field(default_factory=lambda: list(SEED_PRESETS["main"]))
    eval_episodes: int = 100
    eval_episodes_ood: int = 100
    lambda_ccm: float = 0.5
    anchors: mt.NormalizationAnchors = field(
        default_factory=mt.NormalizationAnchors)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        d = json.loads(text)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError("unsupported config schema version")
        anchors = mt.NormalizationAnchors(
            **{k: tuple(v) for k, v in d.pop("anchors").items()})
        tr = d.pop("train")
        env = EnvParams(**tr.pop("env"))
        scfg = SurrogateConfig(**tr.pop("surrogate"))
        train_cfg = TrainConfig(env=env, surrogate=scfg, **tr)
        return cls(anchors=anchors, train=train_cfg, **d)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]

    def apply_env_overrides(self, environ=None) -> None:
        """BICA_<FIELD>=value overrides for any top-level train-config key."""
        environ = os.environ if environ is None else environ
        for key, value in environ.items():
            if not key.startswith("BICA_"):
                continue
            name = key[len("BICA_"):].lower()
            if hasattr(self.train, name):
                current = getattr(self.train, name)
                cast = type(current) if current is not None else str
                setattr(self.train, name, cast(value))
            elif hasattr(self, name) and name not in ("train", "anchors"):
                current = getattr(self, name)
                setattr(self, name, type(current)(value))


# -- ablation grid ------------------------------------------------------------

@dataclass(frozen=True)
class AblationVariant:
    name: str
    family: str   # "architecture" | "hyperparameter" | "co-alignment"
    overrides: dict

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        out = copy.deepcopy(cfg)
        for k, v in self.overrides.items():
            if not hasattr(out, k):
                raise AttributeError(f"unknown config key {k!r}")
            setattr(out, k, v)
        return out


ABLATION_VARIANTS = (
    AblationVariant("small_code", "architecture", {"code_dim": 8}),
    AblationVariant("large_code", "architecture", {"code_dim": 32}),
    AblationVariant("high_temp", "hyperparameter",
                    {"tau_start": 2.0, "tau_end": 1.0}),
    AblationVariant("low_temp", "hyperparameter",
                    {"tau_start": 0.5, "tau_end": 0.25}),
    AblationVariant("tight_budgets", "hyperparameter",
                    {"tau_a": 0.02, "tau_h": 0.02}),
    AblationVariant("loose_budgets", "hyperparameter",
                    {"tau_a": 0.10, "tau_h": 0.10}),
    AblationVariant("low_ib", "hyperparameter", {"beta_ib": 0.5}),
    AblationVariant("high_ib", "hyperparameter", {"beta_ib": 2.0}),
    AblationVariant("no_gru", "architecture", {"arch": "mlp"}),
    AblationVariant("small_hidden", "architecture", {"hidden_size": 32}),
    AblationVariant("large_hidden", "architecture", {"hidden_size": 128}),
    AblationVariant("no_rep_gap", "co-alignment", {"mu_rep": 0.0}),
    AblationVariant("high_rep_gap", "co-alignment", {"mu_rep": 0.1}),
    AblationVariant("no_instructor_cost", "co-alignment",
                    {"kappa_teach": 0.0}),
    AblationVariant("high_instructor_cost", "co-alignment",
                    {"kappa_teach": 0.05}),
)

FAMILY_SIZES = {"architecture": 5, "hyperparameter": 6, "co-alignment": 4}
assert {v.family for v in ABLATION_VARIANTS} == set(FAMILY_SIZES)
for fam, n in FAMILY_SIZES.items():
    assert sum(v.family == fam for v in ABLATION_VARIANTS) == n
assert len(ABLATION_VARIANTS) == 15

ABLATION_COLUMNS = ("Variant", "SR", "ID SR", "OOD SR", "BAS", "CCM",
                    "Avg Steps", "Reward")


# -- evaluation ---------------------------------------------------------------

def _count_tokens(msgs) -> int:
    return sum(len(m) for m in msgs if m)


def episode_to_log(ep, comps: Components) -> mt.EpisodeLog:
    """Convert a rollout EpisodeRecord into the metrics module's schema."""
    idx = np.array(ep.human_msg_idx, dtype=int)
    dists = None
    keep = idx >= 0
    if np.any(keep):
        entries = np.stack(ep.human_entries)
        hiddens = np.stack(ep.human_hidden)
        dists = np.zeros((len(idx), su.N_MESSAGES))
        d, _ = human_message_dists(comps.surrogate, entries[keep],
                                   hiddens[keep])
        dists[keep] = d
    action_dists = np.stack(ep.action_dists)
    actions = np.array(ep.actions, dtype=int)
    confidences = action_dists[np.arange(len(actions)), actions]
    return mt.EpisodeLog(
        success=ep.success, steps=ep.steps,
        tokens_human=_count_tokens(ep.human_msgs),
        tokens_ai=_count_tokens(ep.ai_msgs),
        collisions=ep.collisions,
        ai_action_dists=action_dists, ai_actions=actions,
        human_msg_dists=dists, human_msg_idx=idx,
        z_h=np.stack(ep.z_h), z_a=np.stack(ep.z_a),
        interventions=sum(u.active for u in ep.interventions),
        ai_inputs=np.stack(ep.ai_inputs),
        human_hidden=np.stack(ep.human_hidden),
        confidences=confidences)


def evaluate(cfg: TrainConfig, comps: Components, n_episodes: int,
             rng: np.random.Generator, ood: bool = False,
             condition: str = "ID", seed: int = 0):
    """Frozen-policy evaluation rollouts converted to an EvalLog; the rollout
    batch is also returned for trace export."""
    env = gw.shift_environment(cfg.env, "ood") if ood else cfg.env
    batch = collect_rollouts(cfg, comps, n_episodes, rng, env_params=env,
                             freeze_table=True, table_update_scale=0.0,
                             ood=ood)
    log = mt.EvalLog([episode_to_log(ep, comps) for ep in batch.episodes],
                     condition=condition, seed=seed)
    return log, batch


def batch_traces(batch) -> list[list[dict]]:
    """Episode trace files (line-delimited JSON records) from a rollout."""
    traces = []
    for ep in batch.episodes:
        records = []
        for t in range(ep.steps):
            ev = ep.events[t]
            records.append({
                "step": t,
                "pose": list(ep.poses[t]),
                "action": int(ep.actions[t]),
                "human_msg": list(ep.human_msgs[t] or ()),
                "ai_msg": list(ep.ai_msgs[t] or ()),
                "reward": float(ep.rewards[t]),
                "collided": bool(ev.collided),
                "reached_goal": bool(ev.reached_goal),
                "intervention": bool(ep.interventions[t].active),
            })
        traces.append(records)
    return traces


def steerability_fn(cfg: TrainConfig, comps: Components,
                    rng: np.random.Generator, n_episodes: int = 16):
    """Builds the eval_fn used by the steerability bisection: perturb the
    message-decoder bias, report (success rate, message KL vs unperturbed)."""
    base_logits = None

    def context_batch():
        nonlocal base_logits
        batch = collect_rollouts(cfg, comps, 8, np.random.default_rng(0),
                                 freeze_table=True, table_update_scale=0.0)
        C = np.concatenate([np.stack(ep.ctx_vectors) for ep in batch.episodes
                            if ep.ctx_vectors])
        codes, _ = comps.generator.forward(C)
        base_logits, _ = comps.decoder.forward(np.tanh(codes))
        return np.tanh(codes)

    codes = context_batch()
    base_dist = softmax(base_logits, axis=-1)

    def eval_fn(delta: np.ndarray):
        pert = copy.deepcopy(comps)
        pert.decoder.w["b"] = pert.decoder.w["b"] + delta
        logits, _ = pert.decoder.forward(codes)
        dist = softmax(logits, axis=-1)
        kl = float(np.mean(np.sum(
            dist * (np.log(dist + 1e-12) - np.log(base_dist + 1e-12)),
            axis=-1)))
        batch = collect_rollouts(cfg, pert, n_episodes,
                                 np.random.default_rng(1234),
                                 freeze_table=True, table_update_scale=0.0)
        sr = float(np.mean([ep.success for ep in batch.episodes]))
        return sr, kl

    return eval_fn


def solo_success_rates(cfg: TrainConfig, comps: Components,
                       rng: np.random.Generator,
                       n_episodes: int = 32) -> tuple[float, float]:
    """(AI alone, human-script alone) success rates for the synergy term."""
    silent = copy.deepcopy(cfg)
    silent.surrogate = copy.deepcopy(cfg.surrogate)
    silent.surrogate.init_correct_mass = 0.0  # messages become uninformative
    muted = copy.deepcopy(comps)
    muted.table = su.build_initial_table(silent.surrogate)
    batch = collect_rollouts(silent, muted, n_episodes, rng,
                             freeze_table=True, table_update_scale=0.0)
    sr_ai = float(np.mean([ep.success for ep in batch.episodes]))

    # scripted human-only controller: turn toward the goal, then forward
    wins = 0
    for _ in range(n_episodes):
        density = gw.sample_density(cfg.env, rng)
        m = gw.generate_map(int(rng.integers(2 ** 31)), density,
                            width=cfg.env.width, height=cfg.env.height)
        st = gw.initial_state(m)
        for _ in range(gw.T_MAX):
            dr = m.goal[0] - st.pose[0]
            dc = m.goal[1] - st.pose[1]
            goalward = []
            if dr < 0:
                goalward.append("N")
            if dr > 0:
                goalward.append("S")
            if dc > 0:
                goalward.append("E")
            if dc < 0:
                goalward.append("W")
            target = goalward[0]
            if st.heading == target:
                act = gw.AiAction.FORWARD
            else:
                hi = gw.HEADINGS.index(st.heading)
                gi = gw.HEADINGS.index(target)
                act = gw.AiAction.RIGHT if (gi - hi) % 4 == 1 else gw.AiAction.LEFT
            st, events = gw.step(st, act)
            if st.done:
                break
        wins += st.done_reason == "goal"
    return sr_ai, wins / n_episodes


# -- per-seed reports ---------------------------------------------------------

ARTIFACT_FLAGS = tuple(sorted(mt.ARTIFACT_DEFINED))


def seed_metrics(cfg: ExperimentConfig, result: TrainResult,
                 seed: int, with_steerability: bool = True) -> dict:
    """All metrics for one trained seed: ID/OOD task metrics, BAS, CCM."""
    tcfg = cfg.train
    comps = result.components
    rng = np.random.default_rng(seed + 10_000)
    id_log, id_batch = evaluate(tcfg, comps, cfg.eval_episodes, rng,
                                condition="ID", seed=seed)
    ood_log, ood_batch = evaluate(tcfg, comps, cfg.eval_episodes_ood, rng,
                                  ood=True, condition="OOD", seed=seed)
    sr_id, steps_id = mt.task_metrics(id_log)
    sr_ood, steps_ood = mt.task_metrics(ood_log)
    reward_id = float(np.mean([ep.episode_return
                               for ep in id_batch.episodes]))

    mp = mt.mutual_predictability(id_log, rng, epochs=60)
    if with_steerability:
        try:
            bs = mt.bidirectional_steerability(
                steerability_fn(tcfg, comps, rng), rng,
                anchors=cfg.anchors, dim=8)
        except mt.SteerabilityError:
            bs = 0.0
    else:
        bs = 0.0
    z_h = np.concatenate([ep.z_h for ep in id_log.episodes])[:256]
    z_a = np.concatenate([ep.z_a for ep in id_log.episodes])[:256]
    mapped = comps.encoders.map_latents(z_h)[0] \
        if isinstance(comps.encoders.map_latents(z_h), tuple) \
        else comps.encoders.map_latents(z_h)
    rc = mt.representational_compatibility(z_h, mapped, z_a, cfg.anchors,
                                           tcfg.rep_target)
    ss = mt.shift_robust_safety(ood_log, cfg.anchors)
    solo = solo_success_rates(tcfg, comps, rng)
    ce = mt.cognitive_efficiency(id_log, id_log) if sr_id >= 0.9 else None
    bas = mt.bas(mp, bs, rc, ss, ce)
    ccm = mt.ccm(id_log, sr_id, solo, cfg.lambda_ccm, cfg.anchors)

    kl_a = result.log[-1]["kl_a"] if result.log else 0.0
    kl_h = result.log[-1]["kl_h"] if result.log else 0.0
    return {
        "seed": seed,
        "sr": sr_id, "sr_id": sr_id, "sr_ood": sr_ood,
        "avg_steps": steps_id, "avg_steps_ood": steps_ood,
        "reward": reward_id,
        "bas": bas.bas, "mp": bas.mp, "bs": bas.bs, "rc": bas.rc,
        "ss": bas.ss, "ce": bas.ce,
        "ccm": ccm.ccm, "ccm_diversity": ccm.diversity,
        "ccm_synergy": ccm.synergy,
        "kl_a": kl_a, "kl_h": kl_h,
        "mutual_adaptation": mt.mutual_adaptation_rate(kl_a, kl_h),
        "solo_sr_ai": solo[0], "solo_sr_human": solo[1],
        "_batches": (id_batch, ood_batch),
    }


def metrics_csv(rows: list[dict]) -> str:
    cols = [c for c in rows[0] if not c.startswith("_")]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: ("" if r[c] is None else r[c]) for c in cols})
    return buf.getvalue()


@dataclass
class RunReport:
    name: str
    config: ExperimentConfig
    per_seed: list[dict]
    failures: dict = field(default_factory=dict)

    def aggregate(self) -> dict:
        keys = [k for k in self.per_seed[0]
                if not k.startswith("_") and k not in ("seed", "ce")
                and isinstance(self.per_seed[0][k], (int, float))]
        out = {}
        for k in keys:
            vals = np.array([r[k] for r in self.per_seed], dtype=float)
            out[k] = {"mean": float(vals.mean()),
                      "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
        return out

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "config": json.loads(self.config.to_json()),
            "per_seed": [{k: v for k, v in r.items()
                          if not k.startswith("_")} for r in self.per_seed],
            "aggregate": self.aggregate(),
            "failures": {str(k): v for k, v in self.failures.items()},
            "artifact_defined_metrics": list(ARTIFACT_FLAGS),
        }


def run_experiment(cfg: ExperimentConfig,
                   seeds: Optional[Sequence[int]] = None,
                   out_dir: str = "runs",
                   save_artifacts: bool = True,
                   with_steerability: bool = True,
                   progress: bool = False) -> RunReport:
    """Train and evaluate each seed; persist per-seed artifacts under a
    content-addressed run directory. Seed failures are isolated."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    run_name = f"{cfg.name}-{cfg.content_hash()}"
    rows, failures = [], {}
    for seed in seeds:
        try:
            seed_dir = os.path.join(out_dir, run_name, str(seed))
            log_path = None
            if save_artifacts:
                os.makedirs(os.path.join(seed_dir, "checkpoints"),
                            exist_ok=True)
                os.makedirs(os.path.join(seed_dir, "traces"), exist_ok=True)
                with open(os.path.join(seed_dir, "config.json"), "w") as f:
                    f.write(cfg.to_json())
                log_path = os.path.join(seed_dir, "train_log.jsonl")
            result = train(cfg.train, seed, log_path=log_path,
                           progress=progress)
            row = seed_metrics(cfg, result, seed,
                               with_steerability=with_steerability)
            if save_artifacts:
                save_checkpoint(
                    os.path.join(seed_dir, "checkpoints", "final.ckpt"),
                    result.components.checkpoint_modules())
                id_batch, ood_batch = row["_batches"]
                for label, batch in (("id", id_batch), ("ood", ood_batch)):
                    for i, records in enumerate(batch_traces(batch)[:5]):
                        gw.write_trace(os.path.join(
                            seed_dir, "traces", f"{label}_{i:03d}.jsonl"),
                            records)
                with open(os.path.join(seed_dir, "metrics.csv"), "w") as f:
                    f.write(metrics_csv([row]))
                with open(os.path.join(seed_dir, "report.json"), "w") as f:
                    json.dump({k: v for k, v in row.items()
                               if not k.startswith("_")}, f, indent=2)
            rows.append(row)
        except Exception as exc:   # seed isolation is part of the contract
            failures[seed] = repr(exc)
    if not rows:
        raise RuntimeError(f"all seeds failed: {failures}")
    report = RunReport(name=run_name, config=cfg, per_seed=rows,
                       failures=failures)
    if save_artifacts:
        os.makedirs(os.path.join(out_dir, run_name), exist_ok=True)
        with open(os.path.join(out_dir, run_name, "report.json"), "w") as f:
            json.dump(report.to_json(), f, indent=2)
    return report


# -- ablation -----------------------------------------------------------------

def run_ablation(cfg: ExperimentConfig,
                 seeds: Optional[Sequence[int]] = None,
                 out_dir: str = "runs",
                 save_artifacts: bool = False,
                 with_steerability: bool = False) -> list[dict]:
    """Default config plus the 15 Table-style variants on the ablation seeds;
    each row carries the full metric column set and relative deltas."""
    seeds = list(SEED_PRESETS["ablation"] if seeds is None else seeds)
    rows = []
    variants = (None,) + ABLATION_VARIANTS
    default_means = None
    for variant in variants:
        vcfg = copy.deepcopy(cfg)
        vcfg.name = variant.name if variant else "default"
        if variant:
            vcfg.train = variant.apply(cfg.train)
        report = run_experiment(vcfg, seeds, out_dir=out_dir,
                                save_artifacts=save_artifacts,
                                with_steerability=with_steerability)
        agg = report.aggregate()
        row = {
            "Variant": vcfg.name,
            "family": variant.family if variant else "default",
            "SR": agg["sr"]["mean"],
            "ID SR": agg["sr_id"]["mean"],
            "OOD SR": agg["sr_ood"]["mean"],
            "BAS": agg["bas"]["mean"],
            "CCM": agg["ccm"]["mean"],
            "Avg Steps": agg["avg_steps"]["mean"],
            "Reward": agg["reward"]["mean"],
        }
        if default_means is None:
            default_means = row
        for col in ("SR", "BAS", "CCM", "Avg Steps"):
            row[f"delta_{col} [%]"] = mt.relative_delta_pct(
                row[col], default_means[col])
        rows.append(row)
    return rows


def family_means(rows: list[dict], metric: str = "SR") -> dict:
    out = {}
    for fam in FAMILY_SIZES:
        vals = [r[metric] for r in rows if r["family"] == fam]
        out[fam] = float(np.mean(vals))
    return out


# -- comparisons --------------------------------------------------------------

COMPARE_METRICS = ("sr", "sr_ood", "avg_steps", "reward", "bas", "ccm")


def compare(report_a: RunReport, report_b: RunReport,
            metrics: Sequence[str] = COMPARE_METRICS) -> list[dict]:
    """Per-metric improvement of A over B with Welch's t and Cohen's d."""
    seeds_a = [r["seed"] for r in report_a.per_seed]
    seeds_b = [r["seed"] for r in report_b.per_seed]
    if seeds_a != seeds_b:
        raise ValueError("reports cover different seeds")
    table = []
    for m in metrics:
        a = [r[m] for r in report_a.per_seed]
        b = [r[m] for r in report_b.per_seed]
        c = mt.compare_runs(a, b)
        table.append({"metric": m, "a_mean": c.mean_1, "b_mean": c.mean_2,
                      "improvement_pct": c.delta_pct, "welch_p": c.welch_p,
                      "cohens_d": c.cohens_d})
    return table


def format_comparison_row(mean_a: float, sd_a: float, n_a: int,
                          mean_b: float, sd_b: float, n_b: int) -> dict:
    """Summary-statistics path used to replay published tables."""
    t, p = mt.welch_from_summary(mean_a, sd_a, n_a, mean_b, sd_b, n_b)
    return {"improvement_pct": mt.relative_delta_pct(mean_a, mean_b),
            "welch_t": t, "welch_p": p,
            "cohens_d": mt.cohens_d_from_summary(mean_a, sd_a, mean_b, sd_b)}
