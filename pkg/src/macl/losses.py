"""Training objectives and their closed-form gradient verifiers.

Per decoding step the token-level contrastive loss combines the usual
negative log-likelihood with a penalty on one dynamically chosen negative
token: the knowledge token (other than the target) the model currently
ranks highest.  The penalty -log(1 - p_c) is reweighted by

    beta(p_c) = cos((1 - p_c) * pi) + 1          in [0, 2]

computed from the detached candidate probability, so confident mistakes
are punished hard while already-suppressed tokens contribute almost
nothing.  At the sequence level an InfoNCE loss pushes the pooled source
representation away from in-batch negatives and, with weight mu, from
mined degenerated responses.

The closed forms for the derivative of both penalized objectives with
respect to the ground-truth logit are provided for verification; autodiff
gradients of the implemented losses must equal their negatives.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch

from .errors import NumericError, ParameterError, ValidationError
from .model import StepDistributions

CANDIDATE_RULES = ("argmax_knowledge", "sample_by_prob", "random_knowledge")


@dataclass(frozen=True)
class TokenLossConfig:
    alpha: float = 4.0
    candidate_rule: str = "argmax_knowledge"
    epsilon: float = 1e-7

    def __post_init__(self):
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ParameterError(f"alpha must be finite and >= 0, got {self.alpha}")
        if self.candidate_rule not in CANDIDATE_RULES:
            raise ParameterError(f"candidate_rule must be one of {CANDIDATE_RULES}")
        if not 0.0 < self.epsilon < 1e-3:
            raise ParameterError(f"epsilon must be in (0, 1e-3), got {self.epsilon}")


@dataclass(frozen=True)
class SeqLossConfig:
    lam: float = 1.0
    mu: float = 2.0

    def __post_init__(self):
        for name in ("lam", "mu"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ParameterError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class NegativeCandidate:
    token_id: int
    p_c: float  # detached prediction probability
    beta: float


@dataclass(frozen=True)
class NegativeCandidateSet:
    candidates: tuple[NegativeCandidate | None, ...]

    @property
    def n_skipped(self) -> int:
        return sum(1 for c in self.candidates if c is None)


def _rows(dists: StepDistributions | torch.Tensor) -> torch.Tensor:
    probs = dists.probs if isinstance(dists, StepDistributions) else dists
    if probs.dim() != 2:
        raise ValidationError(f"expected [steps, vocab] probabilities, got shape {tuple(probs.shape)}")
    return probs


def mle_loss(dists: StepDistributions | torch.Tensor, target_ids: Sequence[int]) -> torch.Tensor:
    """Sum over steps of -log p(y_t)."""
    probs = _rows(dists)
    if len(target_ids) != probs.size(0):
        raise ValidationError(f"{len(target_ids)} targets for {probs.size(0)} probability rows")
    idx = torch.tensor(list(target_ids), dtype=torch.long, device=probs.device)
    loss = -torch.log(probs[torch.arange(len(target_ids)), idx]).sum()
    if not torch.isfinite(loss):
        raise NumericError("target token has zero probability; -log p diverged")
    return loss


def ul_loss_baseline(
    dists: StepDistributions | torch.Tensor,
    target_ids: Sequence[int],
    source_ids: Sequence[int],
    alpha: float,
    epsilon: float = 1e-7,
    exclude_ids: frozenset[int] = frozenset(),
) -> torch.Tensor:
    """Unlikelihood baseline: MLE plus alpha * sum -log(1 - p) over the
    prefix-and-source candidate set (target token excluded per step)."""
    probs = _rows(dists)
    loss = mle_loss(probs, target_ids)
    if alpha == 0:
        return loss
    source_set = set(source_ids) - exclude_ids
    penalty = probs.new_zeros(())
    for t, y_t in enumerate(target_ids):
        candidates = (source_set | set(target_ids[:t])) - {y_t} - exclude_ids
        if not candidates:
            continue
        idx = torch.tensor(sorted(candidates), dtype=torch.long, device=probs.device)
        penalty = penalty - torch.log((1.0 - probs[t, idx]).clamp_min(epsilon)).sum()
    return loss + alpha * penalty


def beta_weight(p_c: float) -> float:
    """Penalty weight cos((1 - p_c) * pi) + 1; 0 at p_c=0, 2 at p_c=1."""
    if not 0.0 <= p_c <= 1.0:
        raise ParameterError(f"candidate probability must be in [0, 1], got {p_c}")
    return math.cos((1.0 - p_c) * math.pi) + 1.0


def select_negative_token(
    prob_row: torch.Tensor | Sequence[float],
    knowledge_ids: Iterable[int],
    target_id: int,
    rule: str = "argmax_knowledge",
    rng: random.Random | None = None,
) -> NegativeCandidate | None:
    """Pick this step's negative token from the knowledge id set.

    The default rule takes the highest-probability knowledge token that is
    not the target, breaking ties toward the smallest id.  Returns None
    when no eligible id remains.  The recorded probability is detached.
    """
    if rule not in CANDIDATE_RULES:
        raise ParameterError(f"unknown candidate rule {rule!r}")
    row = prob_row.detach() if isinstance(prob_row, torch.Tensor) else torch.tensor(list(prob_row))
    pool = sorted(set(knowledge_ids) - {target_id})
    if not pool:
        return None
    if rule == "argmax_knowledge":
        best = pool[0]
        for i in pool[1:]:
            if float(row[i]) > float(row[best]):
                best = i
        chosen = best
    elif rule == "sample_by_prob":
        rng = rng or random.Random(0)
        weights = [max(float(row[i]), 0.0) for i in pool]
        if sum(weights) <= 0:
            chosen = rng.choice(pool)
        else:
            chosen = rng.choices(pool, weights=weights, k=1)[0]
    else:  # random_knowledge
        rng = rng or random.Random(0)
        chosen = rng.choice(pool)
    p_c = float(row[chosen])
    return NegativeCandidate(token_id=chosen, p_c=p_c, beta=beta_weight(min(max(p_c, 0.0), 1.0)))


def token_contrastive_loss(
    dists: StepDistributions | torch.Tensor,
    target_ids: Sequence[int],
    knowledge_ids: Iterable[int],
    cfg: TokenLossConfig = TokenLossConfig(),
    rng: random.Random | None = None,
) -> tuple[torch.Tensor, NegativeCandidateSet]:
    """MLE plus the beta-reweighted penalty on each step's chosen negative."""
    probs = _rows(dists)
    loss = mle_loss(probs, target_ids)
    kset = set(knowledge_ids)
    if not kset:
        return loss, NegativeCandidateSet(tuple(None for _ in target_ids))

    if cfg.candidate_rule == "argmax_knowledge":
        steps = torch.arange(len(target_ids), device=probs.device)
        targets = torch.tensor(list(target_ids), dtype=torch.long, device=probs.device)
        kmask = torch.zeros(probs.size(1), dtype=torch.bool, device=probs.device)
        kmask[torch.tensor(sorted(kset), dtype=torch.long, device=probs.device)] = True
        mask = kmask.unsqueeze(0).repeat(len(target_ids), 1)
        mask[steps, targets] = False
        has = mask.any(dim=1)
        masked = torch.where(mask, probs, probs.new_tensor(-1.0))
        cand = masked.argmax(dim=1)  # first maximum, i.e. smallest id on ties
        p_c = probs[steps, cand]
        p_det = p_c.detach()
        beta = torch.cos((1.0 - p_det) * math.pi) + 1.0
        step_pen = beta * -torch.log((1.0 - p_c).clamp_min(cfg.epsilon))
        if has.any():
            loss = loss + cfg.alpha * step_pen[has].sum()
        chosen: list[NegativeCandidate | None] = [
            NegativeCandidate(int(cand[t]), float(p_det[t]), float(beta[t])) if has[t] else None
            for t in range(len(target_ids))
        ]
        return loss, NegativeCandidateSet(tuple(chosen))

    chosen = []
    penalty = probs.new_zeros(())
    for t, y_t in enumerate(target_ids):
        cand = select_negative_token(probs[t], kset, y_t, rule=cfg.candidate_rule, rng=rng)
        chosen.append(cand)
        if cand is None:
            continue
        penalty = penalty + cand.beta * -torch.log((1.0 - probs[t, cand.token_id]).clamp_min(cfg.epsilon))
    return loss + cfg.alpha * penalty, NegativeCandidateSet(tuple(chosen))


def analytic_gradient_gt_logit(p_i: float, p_c: float, alpha: float) -> float:
    """Closed form 1 - p_i (1 - alpha beta(p_c) p_c / (1 - p_c)).

    This is the negative of the autodiff gradient of the token-level loss
    with respect to the ground-truth logit when exactly one candidate is
    penalized and beta is treated as a constant.
    """
    if p_c >= 1.0:
        raise ParameterError("p_c = 1 is a singularity of the penalty gradient")
    if not (0.0 < p_i < 1.0 and 0.0 < p_c < 1.0):
        raise ParameterError("p_i and p_c must lie strictly inside (0, 1)")
    if p_i + p_c > 1.0 + 1e-12:
        raise ParameterError("p_i + p_c cannot exceed 1")
    return 1.0 - p_i * (1.0 - alpha * beta_weight(p_c) * p_c / (1.0 - p_c))


def nt_gradient_gt_logit(p_i: float, p_c: float, alpha: float) -> float:
    """Same closed form with beta frozen at 1 (plain unlikelihood penalty)."""
    if p_c >= 1.0:
        raise ParameterError("p_c = 1 is a singularity of the penalty gradient")
    if not (0.0 < p_i < 1.0 and 0.0 < p_c < 1.0):
        raise ParameterError("p_i and p_c must lie strictly inside (0, 1)")
    if p_i + p_c > 1.0 + 1e-12:
        raise ParameterError("p_i + p_c cannot exceed 1")
    return 1.0 - p_i * (1.0 - alpha * p_c / (1.0 - p_c))


def _as_matrix(vectors: Sequence[torch.Tensor] | torch.Tensor | None, dim: int) -> torch.Tensor | None:
    if vectors is None:
        return None
    if isinstance(vectors, torch.Tensor):
        mat = vectors if vectors.dim() == 2 else vectors.unsqueeze(0)
    else:
        if len(vectors) == 0:
            return None
        mat = torch.stack(list(vectors))
    if mat.size(0) == 0:
        return None
    if mat.size(1) != dim:
        raise ValidationError(f"negative vectors of width {mat.size(1)}, expected {dim}")
    return mat


def infonce_seq_loss(
    z_x: torch.Tensor,
    z_y_positive: torch.Tensor,
    batch_negatives: Sequence[torch.Tensor] | torch.Tensor | None = None,
    hard_negatives: Sequence[torch.Tensor] | torch.Tensor | None = None,
    cfg: SeqLossConfig = SeqLossConfig(),
) -> torch.Tensor:
    """-log of the positive's share of exp-cosine mass against z_x.

    Hard negatives are weighted by mu in the denominator.  The positive
    term itself is part of the denominator, so the loss is non-negative
    and exactly 0 with no negatives.
    """
    if z_x.dim() != 1 or z_y_positive.dim() != 1 or z_x.size(0) != z_y_positive.size(0):
        raise ValidationError("z_x and z_y must be vectors of equal length")
    for v in (z_x, z_y_positive):
        if float(v.detach().norm()) == 0.0:
            raise NumericError("zero-norm representation has no cosine direction")
    pos = torch.exp(torch.nn.functional.cosine_similarity(z_x, z_y_positive, dim=0))
    denom = pos
    for mat, weight in ((_as_matrix(batch_negatives, z_x.size(0)), 1.0),
                        (_as_matrix(hard_negatives, z_x.size(0)), cfg.mu)):
        if mat is None:
            continue
        if (mat.norm(dim=1) == 0).any():
            raise NumericError("zero-norm negative representation")
        sims = torch.nn.functional.cosine_similarity(mat, z_x.unsqueeze(0), dim=1)
        denom = denom + weight * torch.exp(sims).sum()
    return torch.log(denom) - torch.log(pos)


def final_loss(
    token_loss: torch.Tensor | float, seq_loss: torch.Tensor | float, lam: float
) -> torch.Tensor | float:
    """Combined objective: token-level loss plus lam times sequence loss."""
    return token_loss + lam * seq_loss
