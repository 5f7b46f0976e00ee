"""Winner-takes-all regression and confidence losses, and the per-stage totals."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, Optional

import torch

from .errors import MissingComponent, NoGroundTruth



def best_mode(pred_mu: torch.Tensor, gt: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """argmin_k of the summed per-step L2 error; ties go to the smallest k.

    ``pred_mu`` (..., K, N, 2), ``gt`` (..., N, 2), ``valid`` (..., N).
    """
    pred_mu = torch.as_tensor(pred_mu)
    gt = torch.as_tensor(gt, dtype=pred_mu.dtype)
    err = torch.linalg.vector_norm(pred_mu - gt.unsqueeze(-3), dim=-1)  # (..., K, N)
    if valid is not None:
        valid = torch.as_tensor(valid, dtype=torch.bool)
        if not bool(valid.any(dim=-1).all()):
            raise NoGroundTruth("every agent needs at least one valid ground-truth step")
        err = err * valid.unsqueeze(-2).to(err.dtype)
    # torch.argmin returns the first minimal index
    return torch.argmin(err.detach().sum(-1), dim=-1)


def _pick(x: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Select mode k per leading index from (..., K, N, 2)."""
    idx = k.view(*k.shape, 1, 1, 1).expand(*k.shape, 1, *x.shape[-2:])
    return x.gather(-3, idx).squeeze(-3)


def laplace_nll(mu: torch.Tensor, b: torch.Tensor, gt: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Per-agent NLL of the winning mode, averaged over steps: shape (...)."""
    mu_k, b_k = _pick(mu, k), _pick(b, k)
    log_p = -(torch.log(2.0 * b_k) + torch.abs(gt - mu_k) / b_k).sum(-1)  # (..., N)
    return -log_p.mean(-1)


def confidence_ce(pi: torch.Tensor, k: torch.Tensor, soft_target: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Cross-entropy against a one-hot target at k (or an explicit soft target)."""
    logp = torch.log(pi)
    if soft_target is not None:
        return -(soft_target * logp).sum(-1)
    return -logp.gather(-1, k.unsqueeze(-1)).squeeze(-1)


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = torch.abs(x)
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_reg(mu: torch.Tensor, gt: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Per-agent SmoothL1 of the winning mode, summed over x/y and averaged over steps."""
    return smooth_l1(_pick(mu, k) - gt).sum(-1).mean(-1)


def soft_confidence_target(mu: torch.Tensor, gt: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Alternative classification target: softmax of negative endpoint error."""
    d = torch.linalg.vector_norm(mu[..., -1, :] - gt[..., -1, :].unsqueeze(-2), dim=-1)
    return torch.softmax(-d.detach() / temperature, dim=-1)


@dataclass
class LossReport:
    reg_aux: Optional[torch.Tensor] = None
    cls_aux: Optional[torch.Tensor] = None
    reg_base: Optional[torch.Tensor] = None
    cls_base: Optional[torch.Tensor] = None
    reg_refine: Optional[torch.Tensor] = None
    cls_refine: Optional[torch.Tensor] = None
    total: Optional[torch.Tensor] = None

    def as_floats(self) -> Dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self) if getattr(self, f.name) is not None}


STAGE_COMPONENTS = {
    1: ("reg_aux", "cls_aux"),
    2: ("reg_aux", "cls_aux", "reg_base", "cls_base"),
    3: ("reg_aux", "cls_aux", "reg_base", "cls_base", "reg_refine", "cls_refine"),
}


def stage_loss(stage: int, report: LossReport, lambda1: float = 1.0, lambda2: float = 5.0):
    if stage not in STAGE_COMPONENTS:
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    missing = [c for c in STAGE_COMPONENTS[stage] if getattr(report, c) is None]
    if missing:
        raise MissingComponent(f"stage {stage} needs {missing}")
    total = report.reg_aux + report.cls_aux
    if stage >= 2:
        total = total + lambda1 * (report.reg_base + report.cls_base)
    if stage >= 3:
        total = total + lambda2 * (report.reg_refine + report.cls_refine)
    return total


def compute_losses(
    output,
    gt: torch.Tensor,
    gt_present: torch.Tensor,
    stage: int,
    lambda1: float = 1.0,
    lambda2: float = 5.0,
    soft_labels: bool = False,
) -> LossReport:
    """All loss components for a forward pass, averaged over agents with ground truth."""
    sel = gt_present
    if not bool(sel.any()):
        raise NoGroundTruth("batch has no agent with ground truth")
    y = gt[sel]
    report = LossReport()

    def cls(pi, mu, k):
        target = soft_confidence_target(mu, y) if soft_labels else None
        return confidence_ce(pi, k, target).mean()

    aux = output.aux
    k = best_mode(aux.mu[sel], y)
    report.reg_aux = laplace_nll(aux.mu[sel], aux.b[sel], y, k).mean()
    report.cls_aux = cls(aux.pi[sel], aux.mu[sel], k)
    if stage >= 2:
        base = output.base
        k = best_mode(base.mu[sel], y)
        report.reg_base = laplace_nll(base.mu[sel], base.b[sel], y, k).mean()
        report.cls_base = cls(base.pi[sel], base.mu[sel], k)
    if stage >= 3:
        ref = output.refined
        k = best_mode(ref.mu[sel], y)
        report.reg_refine = smooth_l1_reg(ref.mu[sel], y, k).mean()
        report.cls_refine = cls(ref.pi[sel], ref.mu[sel], k)
    report.total = stage_loss(stage, report, lambda1, lambda2)
    return report
