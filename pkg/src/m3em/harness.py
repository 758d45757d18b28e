"""Training loop, metrics, and ensemble evaluation.

Each training step draws one labeled source batch and one unlabeled target
batch of equal size.  The classification loss (verb + noun cross-entropy on
the fused scores) sees source samples only; the domain loss sees both batches
with domain labels.  A single backward pass drives all parameters: the
reversal layer inside the discriminator path scales and flips the domain
gradient reaching the feature machinery by lambda_d, while the discriminator
head itself always minimizes the plain domain loss.  The reported combined
loss is lambda_y * L_y + lambda_d * L_d.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, softmax_xent
from .model import (
    ABLATIONS,
    M3emParams,
    ModelDims,
    PEARSON_MODES,
    Scores,
    classification_loss,
    ensemble_scores,
    init_params,
    model_forward,
)
from .rng import Rng
from .synthdata import Split


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    lambda_y: float = 1.0
    lambda_d: float = 1.0
    bottleneck_ratio: int = 16
    pyramid_levels: int = 2
    latent_channels: int = 0  # 0 -> rgb channels // 2
    disc_hidden: int = 0      # 0 -> discriminator input // 2
    seed: int = 7
    ablation: str = "full"
    pearson_mode: str = "centered"

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not (0 <= self.momentum < 1):
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lambda_y < 0 or self.lambda_d < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.pearson_mode not in PEARSON_MODES:
            raise ValueError(f"unknown pearson mode {self.pearson_mode!r}")


@dataclass
class EpochLoss:
    loss_y: float
    loss_d: float
    loss_total: float  # lambda_y * L_y + lambda_d * L_d


@dataclass
class MetricsReport:
    verb_top1: float
    verb_top5: float
    noun_top1: float
    noun_top5: float
    action_top1: float
    action_top5: float
    disc_accuracy: float | None = None

    def validate(self) -> None:
        if self.verb_top5 < self.verb_top1 or self.noun_top5 < self.noun_top1 \
                or self.action_top5 < self.action_top1:
            raise AssertionError(f"top-5 below top-1 in {self}")
        if self.action_top1 > min(self.verb_top1, self.noun_top1) + 1e-12:
            raise AssertionError(f"action top-1 exceeds a head top-1 in {self}")
        if self.action_top5 > min(self.verb_top5, self.noun_top5) + 1e-12:
            raise AssertionError(f"action top-5 exceeds a head top-5 in {self}")

    def as_dict(self, prefix: str = "") -> dict[str, float]:
        out = {
            f"{prefix}verb_top1": self.verb_top1,
            f"{prefix}verb_top5": self.verb_top5,
            f"{prefix}noun_top1": self.noun_top1,
            f"{prefix}noun_top5": self.noun_top5,
            f"{prefix}action_top1": self.action_top1,
            f"{prefix}action_top5": self.action_top5,
        }
        if self.disc_accuracy is not None:
            out[f"{prefix}disc_accuracy"] = self.disc_accuracy
        return out


@dataclass
class TrainResult:
    params: M3emParams
    epoch_losses: list[EpochLoss] = field(default_factory=list)
    source_report: MetricsReport | None = None
    target_report: MetricsReport | None = None

    @property
    def domain_disc_accuracy(self) -> float | None:
        """Balanced mean of the per-domain discriminator accuracies."""
        accs = [r.disc_accuracy for r in (self.source_report, self.target_report)
                if r is not None and r.disc_accuracy is not None]
        return float(np.mean(accs)) if accs else None


def dims_for(split: Split, verb_classes: int, noun_classes: int) -> ModelDims:
    return ModelDims(
        rgb_channels=split.rgb.shape[1],
        flow_channels=split.flow.shape[1],
        audio_channels=split.audio.shape[1],
        height=split.rgb.shape[2],
        width=split.rgb.shape[3],
        verb_classes=verb_classes,
        noun_classes=noun_classes,
    )


def build_params(config: TrainConfig, dims: ModelDims) -> M3emParams:
    return init_params(
        dims,
        bottleneck_ratio=config.bottleneck_ratio,
        pyramid_levels=config.pyramid_levels,
        latent_channels=config.latent_channels,
        disc_hidden=config.disc_hidden,
        seed=config.seed,
    )


def _sample_features(split: Split, index: int) -> dict[str, Tensor]:
    return {
        "rgb": Tensor(split.rgb[index]),
        "flow": Tensor(split.flow[index]),
        "audio": Tensor(split.audio[index]),
    }


def _domain_xent(logits: Tensor, domain: int) -> Tensor:
    return softmax_xent(logits, domain)


def train(config: TrainConfig, source: Split, target: Split,
          verb_classes: int, noun_classes: int) -> TrainResult:
    """Run the full loop and evaluate both splits with the final parameters."""
    config.validate()
    if source.n == 0:
        raise ValueError("training requires a non-empty source split")
    if source.rgb.shape[1:] != target.rgb.shape[1:] and target.n > 0:
        raise ValueError(
            f"source/target features disagree: {source.rgb.shape[1:]} vs {target.rgb.shape[1:]}")
    dims = dims_for(source, verb_classes, noun_classes)
    params = build_params(config, dims)
    named = params.named()
    velocity = {name: np.zeros_like(t.data) for name, t in named.items()}
    shuffle_rng = Rng(config.seed).split("shuffle")

    batch = config.batch_size
    epoch_losses: list[EpochLoss] = []
    for epoch in range(config.epochs):
        order_s = shuffle_rng.split("source", epoch).permutation(source.n)
        order_t = shuffle_rng.split("target", epoch).permutation(target.n) if target.n else None
        steps = max(1, source.n // batch)
        sums = np.zeros(2)
        for step in range(steps):
            src_idx = order_s[step * batch: (step + 1) * batch]
            if len(src_idx) == 0:  # source split smaller than one batch
                src_idx = order_s
            if order_t is not None:
                lo = (step * batch) % target.n
                tgt_idx = np.concatenate([order_t, order_t])[lo: lo + min(batch, target.n)]
            else:
                tgt_idx = np.array([], dtype=np.int64)

            with Tape() as tape:
                loss_y = Tensor(0.0)
                loss_d = Tensor(0.0)
                for i in src_idx:
                    out = model_forward(
                        _sample_features(source, int(i)), params,
                        pearson_mode=config.pearson_mode, ablation=config.ablation,
                        lambda_d=config.lambda_d)
                    loss_y = loss_y + classification_loss(
                        out.scores.fused, int(source.verbs[i]), int(source.nouns[i]))
                    loss_d = loss_d + _domain_xent(out.domain_logits, 0)
                for i in tgt_idx:
                    out = model_forward(
                        _sample_features(target, int(i)), params,
                        pearson_mode=config.pearson_mode, ablation=config.ablation,
                        lambda_d=config.lambda_d)
                    loss_d = loss_d + _domain_xent(out.domain_logits, 1)
                loss_y = loss_y / len(src_idx)
                loss_d = loss_d / (len(src_idx) + len(tgt_idx))
                # The reversal layer already carries lambda_d for the feature
                # path; the discriminator head minimizes the unweighted loss.
                objective = loss_y * config.lambda_y + loss_d

            ly, ld = loss_y.item(), loss_d.item()
            if not (math.isfinite(ly) and math.isfinite(ld)):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"loss_y={ly}, loss_d={ld}")
            tape.backward(objective)
            for name, tensor in named.items():
                grad = tensor.grad if tensor.grad is not None else 0.0
                velocity[name] = config.momentum * velocity[name] + grad
                tensor.data = tensor.data - config.learning_rate * velocity[name]
                tensor.clear_grad()
            sums += (ly, ld)

        mean_y, mean_d = float(sums[0] / steps), float(sums[1] / steps)
        epoch_losses.append(EpochLoss(
            loss_y=mean_y, loss_d=mean_d,
            loss_total=config.lambda_y * mean_y + config.lambda_d * mean_d))

    result = TrainResult(params=params, epoch_losses=epoch_losses)
    result.source_report = evaluate(params, source, config, domain=0)
    if target.n:
        result.target_report = evaluate(params, target, config, domain=1)
    return result


def _topk_sets(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties broken by lower class index."""
    order = np.argsort(-logits, kind="stable")
    return order[:k]


def metrics_from_scores(fused: list[Scores], verbs: np.ndarray, nouns: np.ndarray,
                        disc_hits: int | None = None) -> MetricsReport:
    """Top-1/top-5 accounting; an action is correct only when both heads are."""
    verb_t1 = verb_t5 = noun_t1 = noun_t5 = act_t1 = act_t5 = 0
    for scores, verb, noun in zip(fused, verbs, nouns):
        v_top5 = _topk_sets(scores.verb.data, 5)
        n_top5 = _topk_sets(scores.noun.data, 5)
        v1 = v_top5[0] == verb
        n1 = n_top5[0] == noun
        v5 = verb in v_top5
        n5 = noun in n_top5
        verb_t1 += v1
        noun_t1 += n1
        verb_t5 += v5
        noun_t5 += n5
        act_t1 += v1 and n1
        act_t5 += v5 and n5
    n = max(1, len(fused))
    report = MetricsReport(
        verb_top1=float(verb_t1 / n), verb_top5=float(verb_t5 / n),
        noun_top1=float(noun_t1 / n), noun_top5=float(noun_t5 / n),
        action_top1=float(act_t1 / n), action_top5=float(act_t5 / n),
        disc_accuracy=float(disc_hits / n) if disc_hits is not None else None,
    )
    report.validate()
    return report


@dataclass
class EvalOutput:
    report: MetricsReport
    consensus_maps: list[np.ndarray] | None = None
    fused_scores: list[Scores] | None = None


def _forward_sample(params: M3emParams, split: Split, index: int,
                    config: TrainConfig):
    return model_forward(
        _sample_features(split, index), params,
        pearson_mode=config.pearson_mode, ablation=config.ablation,
        lambda_d=0.0)


def evaluate_full(params: M3emParams, split: Split, config: TrainConfig, *,
                  domain: int | None = None, threads: int = 1,
                  collect_consensus: bool = False,
                  collect_scores: bool = False) -> EvalOutput:
    """Forward every sample (read-only, no tape) and compute metrics.

    ``domain`` enables discriminator accuracy against that domain label.
    ``threads`` bounds optional batch parallelism across samples.
    """
    indices = list(range(split.n))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(
                lambda i: _forward_sample(params, split, i, config), indices))
    else:
        outputs = [_forward_sample(params, split, i, config) for i in indices]

    disc_correct = 0
    consensus_maps: list[np.ndarray] = []
    fused: list[Scores] = []
    for out in outputs:
        fused.append(out.scores.fused)
        if domain is not None:
            disc_correct += _topk_sets(out.domain_logits.data, 1)[0] == domain
        if collect_consensus:
            consensus_maps.append(out.consensus.data.copy())

    report = metrics_from_scores(fused, split.verbs, split.nouns,
                                 disc_hits=int(disc_correct) if domain is not None else None)
    return EvalOutput(report=report,
                      consensus_maps=consensus_maps if collect_consensus else None,
                      fused_scores=fused if collect_scores else None)


def evaluate(params: M3emParams, split: Split, config: TrainConfig, *,
             domain: int | None = None, threads: int = 1) -> MetricsReport:
    return evaluate_full(params, split, config, domain=domain, threads=threads).report


def evaluate_ensemble(params_list: list[M3emParams], weights: list[float],
                      split: Split, config: TrainConfig, *,
                      threads: int = 1) -> MetricsReport:
    """Metrics on the weighted softmax average of the member models' scores."""
    if not params_list:
        raise ValueError("ensemble needs at least one model")
    per_model = [
        evaluate_full(p, split, config, collect_scores=True, threads=threads).fused_scores
        for p in params_list
    ]
    combined = [ensemble_scores([scores[i] for scores in per_model], weights)
                for i in range(split.n)]
    return metrics_from_scores(combined, split.verbs, split.nouns)
