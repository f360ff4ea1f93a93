"""Training objectives: cross-entropy, VREx, supervised contrastive, MixUp.

All losses are torch functions of their inputs; mixup takes an explicit numpy
Generator so sampling is reproducible and worker-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class VRExCfg:
    lambda_vrex: float = 1.0

    def __post_init__(self):
        if self.lambda_vrex < 0:
            raise ValueError("lambda_vrex must be >= 0")


@dataclass
class SupConCfg:
    tau: float = 0.07
    weight: float = 0.5

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.weight < 0:
            raise ValueError("weight must be >= 0")


@dataclass
class MixUpCfg:
    alpha: float = 0.4
    enabled: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


@dataclass
class MixupState:
    labels_a: torch.Tensor
    labels_b: torch.Tensor
    lam: float


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of -log softmax(logits)[label], via log-sum-exp."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be B x C, got shape {tuple(logits.shape)}")
    n_classes = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    logz = torch.logsumexp(logits, dim=1)
    picked = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    return (logz - picked).mean()


def vrex_loss(per_domain_ce, lam: float) -> torch.Tensor:
    """mean(domain losses) + lam * population variance of domain losses."""
    if isinstance(per_domain_ce, (list, tuple)):
        if len(per_domain_ce) == 0:
            raise ValueError("per_domain_ce must be non-empty")
        losses = torch.stack([torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v
                              for v in per_domain_ce])
    else:
        losses = per_domain_ce
        if losses.numel() == 0:
            raise ValueError("per_domain_ce must be non-empty")
    mean = losses.mean()
    var = ((losses - mean) ** 2).mean()
    return mean + lam * var


def supcon_loss(embeddings: torch.Tensor, labels: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """Supervised contrastive loss over L2-normalized embeddings.

    Anchors with no positives contribute nothing and are excluded from the
    averaging denominator; with no positive pairs at all the loss is 0.
    """
    if embeddings.ndim != 2 or embeddings.shape[1] == 0:
        raise ValueError(f"embeddings must be B x E with E > 0, got {tuple(embeddings.shape)}")
    if not torch.isfinite(embeddings).all():
        raise ValueError("non-finite embeddings")
    b = embeddings.shape[0]
    if b < 2:
        raise ValueError("need at least 2 samples")
    z = torch.nn.functional.normalize(embeddings, dim=1)
    sim = z @ z.T / tau
    self_mask = torch.eye(b, dtype=torch.bool, device=sim.device)
    # stable log-softmax over a != i
    sim_masked = sim.masked_fill(self_mask, float("-inf"))
    log_denom = torch.logsumexp(sim_masked, dim=1, keepdim=True)
    log_prob = sim - log_denom
    pos_mask = (labels.view(-1, 1) == labels.view(1, -1)) & ~self_mask
    n_pos = pos_mask.sum(dim=1)
    has_pos = n_pos > 0
    if not has_pos.any():
        return torch.zeros((), dtype=embeddings.dtype, device=embeddings.device)
    per_anchor = (log_prob * pos_mask).sum(dim=1)[has_pos] / n_pos[has_pos]
    return -per_anchor.mean()


def mixup(
    batch_inputs: torch.Tensor,
    batch_labels: torch.Tensor,
    alpha: float,
    rng: np.random.Generator,
    lam: float | None = None,
):
    """lam ~ Beta(alpha, alpha) convex combination with a random permutation.

    `lam` can be forced for tests. Returns (mixed, labels_a, labels_b, lam).
    """
    if batch_inputs.shape[0] < 2:
        raise ValueError("mixup needs batch size >= 2")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    perm = torch.as_tensor(rng.permutation(batch_inputs.shape[0]))
    mixed = lam * batch_inputs + (1.0 - lam) * batch_inputs[perm]
    return mixed, batch_labels, batch_labels[perm], lam


def mixed_ce(
    logits: torch.Tensor,
    labels_a: torch.Tensor,
    labels_b: torch.Tensor,
    lam: float,
) -> torch.Tensor:
    """lam * CE(logits, labels_a) + (1 - lam) * CE(logits, labels_b)."""
    if not (0.0 <= lam <= 1.0):
        raise ValueError("lam must be in [0, 1]")
    return lam * cross_entropy(logits, labels_a) + (1.0 - lam) * cross_entropy(logits, labels_b)


def stage2_total_loss(
    logits: torch.Tensor,
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    supcon_cfg: SupConCfg,
    mixup_state: MixupState | None = None,
) -> torch.Tensor:
    """CE (mixed when mixup is active) + weight * SupCon on unmixed embeddings.

    `embeddings`/`labels` are always the unmixed batch; `logits` come from the
    mixed forward when mixup is active.
    """
    if logits.shape[0] != embeddings.shape[0] or logits.shape[0] != labels.shape[0]:
        raise ValueError("batch size mismatch between logits, embeddings, labels")
    if mixup_state is not None:
        ce_term = mixed_ce(logits, mixup_state.labels_a, mixup_state.labels_b, mixup_state.lam)
    else:
        ce_term = cross_entropy(logits, labels)
    if supcon_cfg.weight == 0:
        return ce_term
    return ce_term + supcon_cfg.weight * supcon_loss(embeddings, labels, supcon_cfg.tau)
