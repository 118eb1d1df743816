"""Two-stage training orchestration, evaluation and sweeps.

Stage 1 learns the static structured masks: the student minimizes task
cross-entropy plus distillation from the dense teacher plus the Lagrangian
sparsity penalty, while the multipliers ascend until the expected sparsity
hits its target. The binarized masks are then compacted into a physically
smaller model.

Stage 2 trains the per-layer token samplers on the (compacted) model: a
warmup phase with cross-entropy plus the entropy term runs to a validation
plateau, then the norm term switches on and starts eliminating tokens.

Batches pad to the batch maximum with the reserved pad id; padded positions
are pre-masked out of attention at entry, so batched masked execution of a
sequence is exactly its unpadded execution. Padding costs are an accounting
matter, handled by the FLOPs meter.

Evaluation runs every example unbatched with deterministic keep decisions
and physical token removal, records a pruning trace, and prices it under a
padding strategy.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape, Tensor, backward, cross_entropy, log_softmax, mul, tmean, tsum
from .checkpoint import load_checkpoint, save_checkpoint
from .data import PAD_ID, DatasetSpec, batches
from .encoder import Encoder, ModelConfig, StructuredMasks, clone_params, finalize_prune
from .flops import FlopsReport, ModelCost, PaddingStrategy, model_flops
from .losses import LossWeights, entropy_loss, ib_total, norm_loss, skim_loss
from .optim import SGD, AdamW
from .sparsity import (
    DistillConfig,
    GateSet,
    LagrangianState,
    expected_sparsity,
    l0_lagrangian,
    layerwise_distill_loss,
    prediction_distill_loss,
    update_multipliers,
)
from .tokens import (
    GumbelConfig,
    SamplerStack,
    deterministic_mask,
    forward_pruned,
    gumbel_sample,
    pin_keep_first,
    sampler_decisions,
)


class PipelineError(RuntimeError):
    """Aborted run (e.g. the keep rate collapsed)."""


def smoothed_cross_entropy(logits: Tensor, labels, smoothing: float) -> Tensor:
    """Cross-entropy against label-smoothed targets.

    Plain log-loss has no finite optimum: margins can grow forever, so
    masking any uninformative token keeps paying a little. The smoothed
    target pins a finite optimum, at which that incentive vanishes —
    without it, the token samplers drift toward dropping even with no
    compression pressure at all.
    """
    if smoothing <= 0.0:
        return cross_entropy(logits, labels)
    labels = np.asarray(labels, dtype=np.intp)
    batch, k = logits.data.shape
    targets = np.full((batch, k), smoothing / k)
    targets[np.arange(batch), labels] += 1.0 - smoothing
    logp = log_softmax(logits)
    return mul(tmean(tsum(mul(logp, Tensor(targets)), axis=-1)), -1.0)


@dataclass
class OptimizerConfig:
    lr: float = 5e-5
    sampler_lr: float = 2.0  # SGD on the keep/drop MLPs; see optim module
    gate_lr: float = 0.1
    mu_lr: float = 1.0
    weight_decay: float = 0.0
    batch_size: int = 32


@dataclass
class StageSchedule:
    teacher_steps: int = 400
    stage1_steps: int = 1200
    stage2_warmup_steps: int = 200
    stage2_steps: int = 400
    eval_every: int = 25
    patience: int = 3
    min_delta: float = 1e-4


@dataclass
class RunConfig:
    model: ModelConfig
    loss_weights: LossWeights = field(default_factory=LossWeights)
    target_sparsity: float = 0.6
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    stages: StageSchedule = field(default_factory=StageSchedule)
    seed: int = 42
    loss_variant: str = "ib"  # "ib" | "skim"
    distill_temperature: float = 2.0
    keep_rate_floor: float = 0.05
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.loss_variant not in ("ib", "skim"):
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")

    def to_dict(self) -> dict:
        return {
            "model_config": self.model.to_dict(),
            "loss_weights": {"gamma1": self.loss_weights.gamma1, "gamma2": self.loss_weights.gamma2},
            "lagrangian": {"target": self.target_sparsity},
            "gumbel": {
                "temperature": self.gumbel.temperature,
                "straight_through": self.gumbel.straight_through,
            },
            "optimizer": vars(self.optimizer).copy(),
            "stage_schedule": vars(self.stages).copy(),
            "seed": self.seed,
            "loss_variant": self.loss_variant,
            "distill_temperature": self.distill_temperature,
            "keep_rate_floor": self.keep_rate_floor,
            "label_smoothing": self.label_smoothing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            model=ModelConfig.from_dict(d["model_config"]),
            loss_weights=LossWeights(**d.get("loss_weights", {})),
            target_sparsity=d.get("lagrangian", {}).get("target", 0.6),
            gumbel=GumbelConfig(**d.get("gumbel", {})),
            optimizer=OptimizerConfig(**d.get("optimizer", {})),
            stages=StageSchedule(**d.get("stage_schedule", {})),
            seed=d.get("seed", 42),
            loss_variant=d.get("loss_variant", "ib"),
            distill_temperature=d.get("distill_temperature", 2.0),
            keep_rate_floor=d.get("keep_rate_floor", 0.05),
            label_smoothing=d.get("label_smoothing", 0.1),
        )

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# metrics stream


class MetricsWriter:
    """Append-only CSV of per-step loss breakdowns and eval results."""

    def __init__(self, num_layers: int):
        self.buffer = io.StringIO()
        self.columns = (
            ["step", "stage", "ce", "entropy", "norm", "skim", "l0", "distill", "total",
             "sparsity", "mu1", "mu2", "metric", "speedup"]
            + [f"keep_rate_{i}" for i in range(num_layers)]
        )
        self._writer = csv.writer(self.buffer)
        self._writer.writerow(self.columns)
        self.rows = 0

    @staticmethod
    def _fmt(x):
        if x is None:
            return ""
        if isinstance(x, float):
            return repr(x)
        return x

    def write(self, step, stage, breakdown=None, sparsity=None, multipliers=None,
              metric=None, speedup=None, keep_rates=None) -> None:
        b = breakdown
        mu1, mu2 = multipliers if multipliers is not None else (None, None)
        row = [
            step, stage,
            self._fmt(b.ce if b else None), self._fmt(b.entropy if b else None),
            self._fmt(b.norm if b else None), self._fmt(b.skim if b else None),
            self._fmt(b.l0 if b else None), self._fmt(b.distill if b else None),
            self._fmt(b.total if b else None), self._fmt(sparsity),
            self._fmt(mu1), self._fmt(mu2),
            self._fmt(metric), self._fmt(speedup),
        ]
        keep_rates = keep_rates or []
        row += [self._fmt(float(k)) for k in keep_rates]
        self._writer.writerow(row)
        self.rows += 1

    def getvalue(self) -> str:
        return self.buffer.getvalue()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.getvalue())


def _rng_streams(seed: int, n: int = 4):
    seq = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in seq.spawn(n)]


def _batch_stream(data, batch_size, rng):
    """Infinite deterministic batch iterator, reshuffled each epoch."""
    while True:
        order = rng.permutation(len(data))
        shuffled = [data[i] for i in order]
        yield from batches(shuffled, batch_size)


class _Plateau:
    """Stop when the watched loss fails to improve by min_delta for
    ``patience`` consecutive evaluations."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        if value < self.best - self.min_delta:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


# ---------------------------------------------------------------------------
# shared forward helpers


def _valid_mask(ids: np.ndarray) -> np.ndarray:
    return (ids != PAD_ID).astype(np.float64)


def _train_mask_fn(sampler: SamplerStack, gumbel: GumbelConfig, rng):
    def fn(layer, h, live):
        pi = pin_keep_first(sampler.keep_probs(h, layer))
        z = pin_keep_first(gumbel_sample(pi, gumbel, rng))
        return z, pi

    return fn


def _eval_mask_fn(sampler: SamplerStack):
    def fn(layer, h, live):
        pi = pin_keep_first(sampler.keep_probs(h, layer))
        z = deterministic_mask(pi)
        z[:, 0] = 1.0
        return Tensor(z), pi

    return fn


def _keep_rates(token_masks, valid: np.ndarray) -> list:
    denom = valid.sum()
    return [float((m.data * valid).sum() / denom) for m in token_masks]


def val_loss_and_metric(encoder, data, cfg: RunConfig, sampler=None, masks=None,
                        hard_hidden=False, include_norm=False):
    """Deterministic validation pass: loss pieces, accuracy, keep rates."""
    total_loss = 0.0
    correct = 0
    count = 0
    rate_sums = np.zeros(encoder.config.num_layers)
    for ids, labels, _ in batches(data, cfg.optimizer.batch_size):
        valid = _valid_mask(ids)
        fn = _eval_mask_fn(sampler) if sampler is not None else None
        acts = encoder.forward(ids, masks=masks, token_mask_fn=fn,
                               hard_hidden=hard_hidden, initial_live=valid)
        ce = smoothed_cross_entropy(acts.logits, labels, cfg.label_smoothing)
        loss = float(ce.data)
        if sampler is not None:
            weights = [valid] * encoder.config.num_layers
            ent = entropy_loss(acts.keep_probs, token_weights=weights)
            loss += cfg.loss_weights.gamma1 * float(ent.data)
            if include_norm:
                if cfg.loss_variant == "skim":
                    extra = skim_loss(acts.keep_probs, token_weights=weights)
                else:
                    extra = norm_loss(acts.sampler_views, acts.keep_probs, token_weights=weights)
                loss += cfg.loss_weights.gamma2 * float(extra.data)
            rate_sums += np.array(_keep_rates(acts.token_masks, valid)) * len(labels)
        total_loss += loss * len(labels)
        correct += int((acts.logits.data.argmax(axis=1) == labels).sum())
        count += len(labels)
    rates = (rate_sums / count).tolist() if sampler is not None else [1.0] * encoder.config.num_layers
    return total_loss / count, correct / count, rates


# ---------------------------------------------------------------------------
# teacher finetuning


def finetune_teacher(cfg: RunConfig, train, val, metrics: MetricsWriter | None = None):
    """Plain cross-entropy finetuning of the dense model."""
    rng_init, rng_data, _, _ = _rng_streams(cfg.seed)
    encoder = Encoder(cfg.model, rng=rng_init)
    opt = AdamW(encoder.params, lr=cfg.optimizer.lr, weight_decay=cfg.optimizer.weight_decay)
    stream = _batch_stream(train, cfg.optimizer.batch_size, rng_data)
    plateau = _Plateau(cfg.stages.patience, cfg.stages.min_delta)
    for step in range(1, cfg.stages.teacher_steps + 1):
        ids, labels, _ = next(stream)
        valid = _valid_mask(ids)
        with Tape() as tape:
            acts = encoder.forward(ids, initial_live=valid)
            loss = smoothed_cross_entropy(acts.logits, labels, cfg.label_smoothing)
        backward(loss, tape)
        opt.step()
        opt.zero_grad()
        if step % cfg.stages.eval_every == 0 or step == cfg.stages.teacher_steps:
            vloss, vacc, _ = val_loss_and_metric(encoder, val, cfg)
            if metrics is not None:
                _, bd = ib_total(loss, Tensor(np.zeros(())), Tensor(np.zeros(())), LossWeights())
                metrics.write(step, "teacher", bd, metric=vacc)
            if plateau.update(vloss):
                break
    return encoder


# ---------------------------------------------------------------------------
# stage 1: static mask learning


@dataclass
class Stage1Result:
    masked_params: dict
    masks: StructuredMasks
    compact_params: dict
    compact_report: dict
    lagrangian: LagrangianState
    converged: bool
    final_sparsity: float
    steps: int


def stage1_train(cfg: RunConfig, train, val, teacher: Encoder,
                 metrics: MetricsWriter | None = None) -> Stage1Result:
    """Learn the structured masks against the dense teacher.

    Runs until the expected sparsity is within 0.02 of the target and the
    validation loss has plateaued, or the step budget runs out (reported,
    never silent).
    """
    rng_init, rng_data, rng_noise, _ = _rng_streams(cfg.seed + 1)
    for p in teacher.params.values():
        p.requires_grad = False
    student = Encoder(cfg.model, params=clone_params(teacher.params))
    gates = GateSet(cfg.model, rng_init)
    lag = LagrangianState(target=cfg.target_sparsity)
    distill = DistillConfig.identity_map(cfg.model.num_layers, temperature=cfg.distill_temperature)
    opt_model = AdamW(student.params, lr=cfg.optimizer.lr, weight_decay=cfg.optimizer.weight_decay)
    opt_gates = AdamW(gates.params, lr=cfg.optimizer.gate_lr)
    stream = _batch_stream(train, cfg.optimizer.batch_size, rng_data)
    plateau = _Plateau(cfg.stages.patience, cfg.stages.min_delta)
    converged = False
    s_value = 0.0
    step = 0
    for step in range(1, cfg.stages.stage1_steps + 1):
        ids, labels, _ = next(stream)
        valid = _valid_mask(ids)
        with Tape() as tape:
            masks = gates.sample_masks(rng_noise)
            acts = student.forward(ids, masks=masks, initial_live=valid)
            t_acts = teacher.forward(ids, initial_live=valid)
            ce = smoothed_cross_entropy(acts.logits, labels, cfg.label_smoothing)
            pred = prediction_distill_loss(acts.logits, t_acts.logits, cfg.distill_temperature)
            layer = layerwise_distill_loss(acts.hidden_states, t_acts.hidden_states, distill)
            dloss = (distill.prediction_weight * pred) + (distill.layerwise_weight * layer)
            s = expected_sparsity(cfg.model, gates)
            l0 = l0_lagrangian(lag, s)
            total, bd = ib_total(
                ce, Tensor(np.zeros(())), Tensor(np.zeros(())), LossWeights(),
                extras={"distill": dloss, "l0": l0},
            )
        backward(total, tape)
        opt_model.step()
        opt_gates.step()
        opt_model.zero_grad()
        opt_gates.zero_grad()
        s_value = float(s.data)
        lag = update_multipliers(lag, s_value, cfg.optimizer.mu_lr)
        if metrics is not None:
            metrics.write(step, "stage1", bd, sparsity=s_value, multipliers=(lag.mu1, lag.mu2))
        if step % cfg.stages.eval_every == 0 or step == cfg.stages.stage1_steps:
            vloss, vacc, _ = val_loss_and_metric(
                student, val, cfg, masks=gates.deterministic_masks()
            )
            if metrics is not None:
                metrics.write(step, "stage1_eval", None, sparsity=s_value,
                              multipliers=(lag.mu1, lag.mu2), metric=vacc)
            stale = plateau.update(vloss)
            if abs(s_value - cfg.target_sparsity) < 0.02 and stale:
                converged = True
                break
    if not converged and abs(s_value - cfg.target_sparsity) < 0.02:
        converged = True
    if not converged:
        warnings.warn(
            f"stage 1 did not reach the sparsity target: |{s_value:.3f} - "
            f"{cfg.target_sparsity:.2f}| >= 0.02 after {step} steps"
        )
    hard = gates.binarize()
    compact, report = finalize_prune(student.params, cfg.model, hard)
    return Stage1Result(
        masked_params=student.params,
        masks=hard,
        compact_params=compact,
        compact_report=report,
        lagrangian=lag,
        converged=converged,
        final_sparsity=s_value,
        steps=step,
    )


# ---------------------------------------------------------------------------
# stage 2: token sampler training


@dataclass
class Stage2Result:
    params: dict
    sampler: SamplerStack
    keep_rates: list
    val_accuracy: float
    steps: int


def stage2_train(cfg: RunConfig, train, val, params: dict,
                 metrics: MetricsWriter | None = None) -> Stage2Result:
    """Train the token samplers on a (possibly compacted) model.

    Phase A minimizes ce + gamma1 * entropy to a validation plateau; phase B
    adds the norm term (or the skim baseline) and starts real elimination.
    A mean keep rate below the floor at any layer aborts the run.
    """
    rng_init, rng_data, rng_noise, _ = _rng_streams(cfg.seed + 2)
    encoder = Encoder(cfg.model, params=params)
    hidden = params["tok_emb"].data.shape[1]
    sampler = SamplerStack(cfg.model.num_layers, hidden, rng_init)
    opt = AdamW(params, lr=cfg.optimizer.lr, weight_decay=cfg.optimizer.weight_decay)
    opt_sampler = SGD(sampler.params, lr=cfg.optimizer.sampler_lr)
    stream = _batch_stream(train, cfg.optimizer.batch_size, rng_data)
    num_layers = cfg.model.num_layers

    def one_step(step: int, include_norm: bool, stage: str):
        ids, labels, _ = next(stream)
        valid = _valid_mask(ids)
        weights = [valid] * num_layers
        with Tape() as tape:
            fn = _train_mask_fn(sampler, cfg.gumbel, rng_noise)
            acts = encoder.forward(ids, token_mask_fn=fn, initial_live=valid)
            ce = smoothed_cross_entropy(acts.logits, labels, cfg.label_smoothing)
            ent = entropy_loss(acts.keep_probs, token_weights=weights)
            extras = {}
            if include_norm and cfg.loss_variant == "skim":
                sk = skim_loss(acts.keep_probs, token_weights=weights)
                nrm = Tensor(np.zeros(()))
                extras["skim"] = sk * cfg.loss_weights.gamma2
                gamma2 = 0.0
            else:
                nrm = norm_loss(acts.sampler_views, acts.keep_probs, token_weights=weights)
                gamma2 = cfg.loss_weights.gamma2 if include_norm else 0.0
            total, bd = ib_total(
                ce, ent, nrm, LossWeights(cfg.loss_weights.gamma1, gamma2), extras=extras
            )
        backward(total, tape)
        opt.step()
        opt_sampler.step()
        opt.zero_grad()
        opt_sampler.zero_grad()
        if metrics is not None:
            rates = _keep_rates(acts.token_masks, valid)
            metrics.write(step, stage, bd, keep_rates=rates)

    step = 0
    plateau = _Plateau(cfg.stages.patience, cfg.stages.min_delta)
    for _ in range(cfg.stages.stage2_warmup_steps):
        step += 1
        one_step(step, include_norm=False, stage="stage2_warmup")
        if step % cfg.stages.eval_every == 0:
            vloss, vacc, rates = val_loss_and_metric(encoder, val, cfg, sampler=sampler)
            if metrics is not None:
                metrics.write(step, "stage2_warmup_eval", None, metric=vacc, keep_rates=rates)
            if plateau.update(vloss):
                break

    rates = [1.0] * num_layers
    vacc = None
    for k in range(cfg.stages.stage2_steps):
        step += 1
        one_step(step, include_norm=True, stage="stage2")
        if step % cfg.stages.eval_every == 0 or k == cfg.stages.stage2_steps - 1:
            vloss, vacc, rates = val_loss_and_metric(
                encoder, val, cfg, sampler=sampler, include_norm=True
            )
            if metrics is not None:
                metrics.write(step, "stage2_eval", None, metric=vacc, keep_rates=rates)
            low = [i for i, r in enumerate(rates) if r < cfg.keep_rate_floor]
            if low:
                raise PipelineError(
                    f"keep rate collapsed below {cfg.keep_rate_floor:.0%} at layer(s) {low}: "
                    f"{[round(r, 4) for r in rates]}"
                )
    if vacc is None:
        _, vacc, rates = val_loss_and_metric(encoder, val, cfg, sampler=sampler, include_norm=True)
    return Stage2Result(params=params, sampler=sampler, keep_rates=rates,
                        val_accuracy=vacc, steps=step)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    metric_name: str
    metric_value: float
    accuracy: float
    flops: FlopsReport
    traces: list
    keep_rates: list
    predictions: list


def binary_f1(predictions, labels, positive: int = 1) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    tp = int(((predictions == positive) & (labels == positive)).sum())
    fp = int(((predictions == positive) & (labels != positive)).sum())
    fn = int(((predictions != positive) & (labels == positive)).sum())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def evaluate(cfg: RunConfig, params: dict, data, spec: DatasetSpec,
             strategy: PaddingStrategy, sampler: SamplerStack | None = None,
             baseline_config: ModelConfig | None = None) -> EvalResult:
    """Score a model example by example with physical pruning, and price the
    traces under the padding strategy."""
    encoder = Encoder(cfg.model, params=params)
    base_cfg = baseline_config or cfg.model
    cost = ModelCost.from_params(params, cfg.model, sampler_on=sampler is not None,
                                 sampler_dim=sampler.sampler_dim if sampler else None)
    baseline = ModelCost.dense(base_cfg)
    num_layers = cfg.model.num_layers
    predictions = []
    labels = []
    traces = []
    rate_sums = np.zeros(num_layers)
    for tokens, label in data:
        if sampler is not None:
            run = forward_pruned(encoder, tokens, sampler_decisions(sampler))
            kept = run.kept_counts
            index_sets = [p.tolist() for p in run.kept_positions]
            logits = run.logits.data[0]
        else:
            acts = encoder.forward(np.asarray(tokens)[None, :])
            kept = [len(tokens)] * num_layers
            index_sets = [list(range(len(tokens)))] * num_layers
            logits = acts.logits.data[0]
        predictions.append(int(np.argmax(logits)))
        labels.append(label)
        traces.append((len(tokens), kept, index_sets))
        rate_sums += np.array(kept) / len(tokens)
    accuracy = float((np.asarray(predictions) == np.asarray(labels)).mean())
    metric = binary_f1(predictions, labels) if spec.metric == "f1" else accuracy
    report = model_flops(traces, cost, strategy, baseline_cost=baseline)
    return EvalResult(
        metric_name=spec.metric,
        metric_value=metric,
        accuracy=accuracy,
        flops=report,
        traces=traces,
        keep_rates=(rate_sums / len(data)).tolist(),
        predictions=predictions,
    )


def save_trace_jsonl(path, traces) -> None:
    with open(path, "w") as fh:
        for i, trace in enumerate(traces):
            rec = {"index": i, "orig_len": trace[0], "kept_counts": list(trace[1])}
            if len(trace) > 2:
                rec["kept_indices"] = [list(map(int, s)) for s in trace[2]]
            fh.write(json.dumps(rec) + "\n")


def load_trace_jsonl(path) -> list:
    traces = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                if "kept_indices" in rec:
                    traces.append((rec["orig_len"], rec["kept_counts"], rec["kept_indices"]))
                else:
                    traces.append((rec["orig_len"], rec["kept_counts"]))
    return traces


# ---------------------------------------------------------------------------
# sweeps


SWEEP_COLUMNS = [
    "variant", "arm", "target_sparsity", "gamma1", "gamma2", "metric_name", "metric",
    "accuracy", "speedup_batch", "speedup_sequence", "mean_keep_rate", "keep_rates",
    "status", "error",
]


def sweep(cfg: RunConfig, train, val, spec: DatasetSpec, grid: list,
          sequence_fixed_len: int | None = None) -> list:
    """Run every (variant, arm, target_sparsity, gamma2) grid point.

    Teacher and per-target stage-1 results are shared across points. Rows
    that fail are recorded and the sweep continues. Returns dict rows ready
    for the tradeoff CSV.
    """
    teacher = finetune_teacher(cfg, train, val)
    stage1_cache: dict = {}
    rows = []
    for point in grid:
        variant = point.get("variant", cfg.loss_variant)
        arm = point.get("arm", "joint")
        s_hat = point.get("target_sparsity", cfg.target_sparsity)
        gamma1 = point.get("gamma1", cfg.loss_weights.gamma1)
        gamma2 = point.get("gamma2", cfg.loss_weights.gamma2)
        row = {
            "variant": variant, "arm": arm, "target_sparsity": s_hat,
            "gamma1": gamma1, "gamma2": gamma2, "metric_name": spec.metric,
            "metric": None, "accuracy": None, "speedup_batch": None,
            "speedup_sequence": None, "mean_keep_rate": None, "keep_rates": None,
            "status": "ok", "error": "",
        }
        try:
            point_cfg = replace(
                cfg,
                loss_weights=LossWeights(gamma1, gamma2),
                target_sparsity=s_hat,
                loss_variant=variant,
            )
            if arm in ("joint", "static_only"):
                if s_hat not in stage1_cache:
                    stage1_cache[s_hat] = stage1_train(point_cfg, train, val, teacher)
                stage1 = stage1_cache[s_hat]
                params = clone_params(stage1.compact_params)
            elif arm == "dynamic_only":
                params = clone_params(teacher.params)
            else:
                raise ValueError(f"unknown sweep arm {arm!r}")
            sampler = None
            if arm in ("joint", "dynamic_only"):
                result = stage2_train(point_cfg, train, val, params)
                sampler = result.sampler
                params = result.params
            batch_eval = evaluate(point_cfg, params, val, spec,
                                  PaddingStrategy(mode="batch"), sampler=sampler,
                                  baseline_config=cfg.model)
            seq_strategy = PaddingStrategy(mode="sequence", dataset=spec.name,
                                           fixed_len=sequence_fixed_len)
            seq_eval = evaluate(point_cfg, params, val, spec, seq_strategy, sampler=sampler,
                                baseline_config=cfg.model)
            row.update(
                metric=batch_eval.metric_value,
                accuracy=batch_eval.accuracy,
                speedup_batch=batch_eval.flops.speedup,
                speedup_sequence=seq_eval.flops.speedup,
                mean_keep_rate=float(np.mean(batch_eval.keep_rates)),
                keep_rates=json.dumps([round(r, 6) for r in batch_eval.keep_rates]),
            )
            row["_traces"] = batch_eval.traces
            row["_params"] = params
            row["_sampler"] = sampler
        except (PipelineError, ValueError) as e:
            row["status"] = "failed"
            row["error"] = str(e)
        rows.append(row)
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in SWEEP_COLUMNS})


# ---------------------------------------------------------------------------
# checkpoint plumbing


def save_model_checkpoint(path, cfg: RunConfig, params: dict, stage: str,
                          sampler: SamplerStack | None = None,
                          masks: StructuredMasks | None = None,
                          extra_meta: dict | None = None) -> None:
    tensors = dict(params)
    meta = {"stage": stage, "run_config": cfg.to_dict()}
    if sampler is not None:
        tensors.update(sampler.params)
        meta["sampler_dim"] = sampler.sampler_dim
    if masks is not None:
        tensors.update(masks.values())
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, meta, tensors)


def load_model_checkpoint(path):
    """Returns (run config, params, sampler or None, masks or None, meta)."""
    meta, tensors = load_checkpoint(path)
    cfg = RunConfig.from_dict(meta["run_config"])
    params = {}
    sampler_tensors = {}
    mask_values = {}
    for name, arr in tensors.items():
        if name.startswith("sampler."):
            sampler_tensors[name] = arr
        elif name.startswith("masks."):
            mask_values[name] = arr
        elif name.startswith("gates."):
            continue
        else:
            params[name] = Tensor(arr, requires_grad=True)
    sampler = None
    if sampler_tensors:
        sampler = SamplerStack.from_params(sampler_tensors, cfg.model.num_layers)
    masks = None
    if mask_values:
        masks = StructuredMasks.from_values(mask_values, cfg.model.num_layers)
    return cfg, params, sampler, masks, meta
