"""Self-supervised pretraining of the model predictor.

A frozen teacher predictor sees clean current-frame features; a trainable
student copy (plus a linear tail on its weight vector) sees a copy-paste
corrupted version of the same features under identical reference
conditioning.  The student matches the teacher's weight vector (invariance)
while a channel expansion of its output is decorrelated across the batch
(covariance), which blocks the collapse to a constant predictor.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, DomainError, ShapeError, StateError


class ProjNet(nn.Module):
    """Linear tail on the weight vector, identity at initialization."""

    def __init__(self, channels: int):
        super().__init__()
        self.linear = nn.Linear(channels, channels)
        with torch.no_grad():
            self.linear.weight.copy_(torch.eye(channels))
            self.linear.bias.zero_()

    def forward(self, omega: torch.Tensor) -> torch.Tensor:
        return self.linear(omega)


class Expander(nn.Module):
    """Channel expansion feeding the covariance term only."""

    def __init__(self, channels: int, factor: int = 4):
        super().__init__()
        self.linear = nn.Linear(channels, channels * factor)

    def forward(self, omega: torch.Tensor) -> torch.Tensor:
        return self.linear(omega)


def corrupt_features(feat: torch.Tensor, rho_max: float, rng: np.random.Generator):
    """Copy-paste corruption on the cell grid of one (C, H, W) feature map.

    Draws a ratio rho ~ U(0, rho_max), picks K = floor(rho*H*W) distinct
    source cells and K distinct target cells, and overwrites each target
    cell's feature vector with its source's pre-corruption value.
    """
    if not 0.0 <= rho_max <= 1.0:
        raise ConfigurationError(f"rho_max {rho_max} outside [0, 1]")
    if feat.dim() != 3:
        raise ShapeError(f"expected (C,H,W) features, got {tuple(feat.shape)}")
    C, H, W = feat.shape
    rho = float(rng.uniform(0.0, rho_max))
    k = int(rho * H * W)
    log = {"rho": rho, "k": k, "source": [], "target": []}
    if k == 0:
        return feat.clone(), log
    source = rng.choice(H * W, size=k, replace=False)
    target = rng.choice(H * W, size=k, replace=False)
    log["source"] = source.tolist()
    log["target"] = target.tolist()
    flat = feat.reshape(C, H * W)
    out = flat.clone()
    out[:, torch.from_numpy(target)] = flat[:, torch.from_numpy(source)]
    return out.reshape(C, H, W), log


def loss_inv(omega: torch.Tensor, omega_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared L2 distance between student and teacher weight vectors."""
    if omega.shape != omega_hat.shape or omega.dim() != 2:
        raise ShapeError(
            f"weight batches {tuple(omega.shape)} vs {tuple(omega_hat.shape)}"
        )
    return (omega - omega_hat).pow(2).sum(dim=1).mean()


def loss_cov(omega_exp: torch.Tensor) -> torch.Tensor:
    """Sum of squared off-diagonal batch covariances, scaled by 1/width."""
    if omega_exp.dim() != 2:
        raise ShapeError(f"expected (n, c) batch, got {tuple(omega_exp.shape)}")
    n, c = omega_exp.shape
    if n < 2:
        raise DomainError("covariance needs a batch of at least 2")
    centered = omega_exp - omega_exp.mean(dim=0, keepdim=True)
    cov = centered.t() @ centered / (n - 1)
    off_diag = cov.pow(2).sum() - cov.diagonal().pow(2).sum()
    return off_diag / c


def loss_mp(l_inv, l_cov, alpha: float, beta: float):
    if alpha < 0 or beta < 0:
        raise ConfigurationError("loss weights must be non-negative")
    return alpha * l_inv + beta * l_cov


@dataclass
class JepaLossReport:
    l_inv: float
    l_cov: float
    l_mp: float
    alpha: float
    beta: float

    def consistent(self, tol: float = 1e-12) -> bool:
        return abs(self.l_mp - (self.alpha * self.l_inv + self.beta * self.l_cov)) <= tol


class StudentBundle(nn.Module):
    """Trainable student: predictor copy + linear tail + expander."""

    def __init__(self, predictor: nn.Module, channels: int, expander_factor: int = 4):
        super().__init__()
        self.predictor = predictor
        self.projnet = ProjNet(channels)
        self.expander = Expander(channels, expander_factor)

    def predict(self, refs: torch.Tensor, cur: torch.Tensor):
        raw, z = self.predictor(refs, cur)
        return self.projnet(raw), z


def build_student(teacher_predictor: nn.Module, channels: int,
                  expander_factor: int = 4) -> StudentBundle:
    return StudentBundle(copy.deepcopy(teacher_predictor), channels, expander_factor)


def parameter_digest(module: nn.Module) -> str:
    """Order-stable hash of all parameters, for frozen-weight assertions."""
    import hashlib
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class JepaData:
    """Precomputed windows: label-injected reference stacks + current features."""

    def __init__(self, refs: torch.Tensor, curs: torch.Tensor, holdout: float, seed: int):
        if refs.shape[0] != curs.shape[0]:
            raise ShapeError("reference and current window counts disagree")
        self.refs = refs
        self.curs = curs
        n = refs.shape[0]
        order = np.random.default_rng(seed).permutation(n)
        n_hold = max(1, int(round(holdout * n))) if holdout > 0 else 0
        self.holdout_idx = order[:n_hold]
        self.train_idx = order[n_hold:]
        if len(self.train_idx) == 0:
            raise DomainError("no training windows left after the holdout split")


def _branch_losses(teacher, student, refs, curs_clean, curs_student, alpha, beta):
    with torch.no_grad():
        omega_t, _ = teacher(refs, curs_clean)
    omega_s, _ = student.predict(refs, curs_student)
    l_i = loss_inv(omega_s, omega_t)
    omega_exp = student.expander(omega_s)
    l_c = loss_cov(omega_exp)
    return l_i, l_c, loss_mp(l_i, l_c, alpha, beta), omega_s, omega_exp


def holdout_losses(teacher, student, data: JepaData, rho_max: float,
                   seed: int, alpha: float, beta: float):
    """Held-out invariance/covariance under a fixed corruption draw."""
    rng = np.random.default_rng(seed)
    idx = data.holdout_idx
    refs = data.refs[idx]
    curs = data.curs[idx]
    corrupted = torch.stack(
        [corrupt_features(c, rho_max, rng)[0] for c in curs]
    )
    with torch.no_grad():
        l_i, l_c, _, _, _ = _branch_losses(
            teacher, student, refs, curs, corrupted, alpha, beta
        )
    return float(l_i), float(l_c), alpha * float(l_i) + beta * float(l_c)


def pretrain(teacher, student: StudentBundle, data: JepaData, cfg,
             log_path: str | None = None, eval_every: int = 50):
    """Run the pretraining loop; returns (student, records, summary).

    The teacher is frozen for the whole run (digest-checked).  Divergence
    aborts with the failing step; weight-vector collapse (tiny per-dimension
    batch std of the expanded output) aborts at run end.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher_digest = parameter_digest(teacher)

    opt = torch.optim.AdamW([
        {"params": student.predictor.parameters(), "lr": cfg.lr_predictor},
        {"params": student.projnet.parameters(), "lr": cfg.lr_projnet},
        {"params": student.expander.parameters(), "lr": cfg.lr_expander},
    ])

    records = []
    min_exp_std = float("inf")

    def snapshot(step, l_i, l_c, omega, omega_exp, holdout=None):
        nonlocal min_exp_std
        omega_std = omega.std(dim=0).min().item() if omega.shape[0] > 1 else 0.0
        exp_std = omega_exp.std(dim=0).min().item() if omega_exp.shape[0] > 1 else 0.0
        min_exp_std = min(min_exp_std, exp_std)
        # recombine in float64 so the reported total matches its parts exactly
        rec = {"step": step, "l_inv": float(l_i), "l_cov": float(l_c),
               "l_mp": cfg.alpha * float(l_i) + cfg.beta * float(l_c),
               "omega_std_min": omega_std, "omega_exp_std_min": exp_std}
        if holdout is not None:
            rec["holdout_l_inv"], rec["holdout_l_cov"], rec["holdout_l_mp"] = holdout
        records.append(rec)

    def eval_holdout():
        if len(data.holdout_idx) == 0:
            return None
        return holdout_losses(teacher, student, data, cfg.rho_max,
                              seed=cfg.seed + 9999, alpha=cfg.alpha, beta=cfg.beta)

    first_holdout = eval_holdout()
    for step in range(cfg.jepa_steps):
        idx = rng.choice(data.train_idx, size=min(cfg.jepa_batch, len(data.train_idx)),
                         replace=False)
        refs = data.refs[idx]
        curs = data.curs[idx]
        corrupted = torch.stack(
            [corrupt_features(c, cfg.rho_max, rng)[0] for c in curs]
        )
        l_i, l_c, l_m, omega_s, omega_exp = _branch_losses(
            teacher, student, refs, curs, corrupted, cfg.alpha, cfg.beta
        )
        if not torch.isfinite(l_m):
            raise StateError(f"non-finite pretraining loss at step {step}")
        opt.zero_grad()
        l_m.backward()
        opt.step()
        holdout = None
        if step == 0:
            holdout = first_holdout
        elif (step + 1) % eval_every == 0 or step == cfg.jepa_steps - 1:
            holdout = eval_holdout()
        snapshot(step, l_i.item(), l_c.item(),
                 omega_s.detach(), omega_exp.detach(), holdout)

    if parameter_digest(teacher) != teacher_digest:
        raise StateError("teacher parameters changed during pretraining")
    if cfg.beta > 0 and cfg.jepa_steps > 0 and min_exp_std <= 1e-3:
        raise StateError(
            f"expanded weight vector collapsed: min per-dim batch std {min_exp_std:.2e}"
        )

    summary = {
        "steps": cfg.jepa_steps,
        "min_omega_exp_std": min_exp_std if cfg.jepa_steps > 0 else None,
        "holdout_first": first_holdout,
        "holdout_last": eval_holdout(),
        "teacher_digest": teacher_digest,
    }
    if log_path is not None:
        with open(log_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps({"summary": summary}) + "\n")
    return student, records, summary
