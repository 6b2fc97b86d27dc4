"""Dependency-distribution estimation from syntactic distance and height.

Given per-gap distances tau (length n-1), per-token heights h (length n) and a
positive temperature mu, produces the n x n row-stochastic parent-probability
matrix used as the syntactic attention mask. The estimate decomposes parenthood
into (a) the smallest legal constituent of each token, whose margins come from
telescoping differences of a membership probability, and (b) a height-softmax
root choice within each candidate span.

Everything here is differentiable torch code; the max over intervening
distances is a hard max whose subgradient flows to the leftmost argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

MAX_SEQUENCE_LEN = 256


class EstimatorError(ValueError):
    pass


@dataclass
class SyntacticProfile:
    """Induced grammar of one sentence: distances, heights, temperature."""

    tau: torch.Tensor     # (n-1,)
    height: torch.Tensor  # (n,)
    mu: torch.Tensor      # scalar, > 0

    def __post_init__(self):
        self.tau = torch.as_tensor(self.tau, dtype=torch.get_default_dtype()) \
            if not torch.is_tensor(self.tau) else self.tau
        self.height = torch.as_tensor(self.height, dtype=torch.get_default_dtype()) \
            if not torch.is_tensor(self.height) else self.height
        self.mu = torch.as_tensor(self.mu, dtype=self.height.dtype) \
            if not torch.is_tensor(self.mu) else self.mu
        n = self.height.numel()
        if n == 0:
            raise EstimatorError("empty profile")
        if n > MAX_SEQUENCE_LEN:
            raise EstimatorError(f"sequence length {n} exceeds cap {MAX_SEQUENCE_LEN}")
        if self.tau.numel() != n - 1:
            raise EstimatorError(
                f"tau must have length n-1 = {n - 1}, got {self.tau.numel()}")
        if float(self.mu.detach()) <= 0:
            raise EstimatorError(
                f"temperature must be positive, got {float(self.mu.detach())}")

    @property
    def n(self) -> int:
        return self.height.numel()


def _gap_max(tau: torch.Tensor, n: int) -> torch.Tensor:
    """M[a, b] = max(tau[a..b-1]) for a < b; other entries are zero filler.

    Works on batched tau of shape (..., n-1). torch.cummax resolves ties to
    the first occurrence, so the subgradient goes to the leftmost argmax.
    """
    m = tau.new_zeros(tau.shape[:-1] + (n, n))
    for a in range(n - 1):
        m[..., a, a + 1:] = torch.cummax(tau[..., a:], dim=-1).values
    return m


def constituent_membership(profile: SyntacticProfile) -> torch.Tensor:
    """n x n matrix of p(l in C(w_i)); row i, column l.

    Off-diagonal entries are sigmoid((h_i - max of tau over the gap)/mu);
    the diagonal is exactly 1 (empty-max convention).
    """
    tau, h, mu = profile.tau, profile.height, profile.mu
    n = profile.n
    gap = _gap_max(tau, n)
    # symmetric lookup: row i, col l uses the gap range between them
    span_max = torch.triu(gap, diagonal=1)
    span_max = span_max + span_max.transpose(-2, -1)
    mem = torch.sigmoid((h.unsqueeze(-1) - span_max) / mu)
    eye = torch.eye(n, dtype=torch.bool, device=h.device)
    return torch.where(eye, mem.new_ones(()), mem)


def margin_distributions(membership: torch.Tensor):
    """Left/right margin distributions of the smallest legal constituent.

    left[i, l] = p(l in C) - p(l-1 in C) for l <= i (with p(-1 in C) = 0);
    right[i, r] = p(r in C) - p(r+1 in C) for r >= i (with p(n in C) = 0).
    Entries are clamped at 0 against rounding.
    """
    n = membership.shape[-1]
    zeros_col = membership.new_zeros(membership.shape[:-1] + (1,))
    shifted_l = torch.cat([zeros_col, membership[..., :-1]], dim=-1)
    shifted_r = torch.cat([membership[..., 1:], zeros_col], dim=-1)
    tril = torch.tril(torch.ones(n, n, dtype=torch.bool, device=membership.device))
    left = torch.where(tril, membership - shifted_l, membership.new_zeros(()))
    right = torch.where(tril.T, membership - shifted_r, membership.new_zeros(()))
    return left.clamp_min(0), right.clamp_min(0)


def root_distribution(height: torch.Tensor, left: int, right: int) -> torch.Tensor:
    """Softmax of heights over the inclusive 0-based span [left, right]."""
    if left > right:
        raise EstimatorError(f"invalid span [{left}, {right}]")
    if left < 0 or right >= height.numel():
        raise EstimatorError(f"span [{left}, {right}] out of range")
    return torch.softmax(height[left:right + 1], dim=-1)


def dependency_matrix(profile: SyntacticProfile) -> torch.Tensor:
    """Row-stochastic n x n matrix; entry (i, j) = p(token j is parent of i)."""
    if not (torch.isfinite(profile.tau).all() and torch.isfinite(profile.height).all()):
        raise EstimatorError("non-finite distance/height input")
    mem = constituent_membership(profile)
    left, right = margin_distributions(mem)
    return _assemble(profile.height, left, right)


def _assemble(h: torch.Tensor, left: torch.Tensor, right: torch.Tensor,
              real_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Combine margin distributions and the height softmax into P_D.

    p_D(j|i) = sum over spans [l, r] containing both i and j of
    left[i, l] * right[i, r] * exp(h_j) / sum_{l<=k<=r} exp(h_k).
    The double sum telescopes via a prefix sum over l and suffix sum over r.
    """
    n = h.shape[-1]
    if real_mask is None:
        hmax = h.max(dim=-1, keepdim=True).values
        eh = torch.exp(h - hmax)
    else:
        neg = torch.finfo(h.dtype).min
        hmax = torch.where(real_mask, h, h.new_full((), neg)) \
            .max(dim=-1, keepdim=True).values
        eh = torch.exp(h - hmax) * real_mask.to(h.dtype)
    prefix = torch.cumsum(eh, dim=-1)
    prefix = torch.cat([prefix.new_zeros(prefix.shape[:-1] + (1,)), prefix], dim=-1)
    # denom[l, r] = sum of exp(h) over [l, r], for l <= r
    denom = prefix[..., 1:].unsqueeze(-2) - prefix[..., :-1].unsqueeze(-1)
    # spans entirely inside padding have zero mass; guard their denominators
    valid = torch.triu(torch.ones(n, n, dtype=torch.bool, device=h.device)) & (denom > 0)
    inv = torch.where(valid, 1.0 / torch.where(valid, denom, denom.new_ones(())),
                      denom.new_zeros(()))
    # w[i, l, r] = left[i, l] * right[i, r] / denom[l, r]
    w = left.unsqueeze(-1) * right.unsqueeze(-2) * inv.unsqueeze(-3)
    acc = torch.cumsum(w, dim=-2)                      # prefix over l
    acc = torch.flip(torch.cumsum(torch.flip(acc, [-1]), dim=-1), [-1])  # suffix over r
    inner = torch.diagonal(acc, dim1=-2, dim2=-1)      # [i, j] = sum_{l<=j, r>=j}
    return eh.unsqueeze(-2) * inner


def dependency_matrix_batch(tau: torch.Tensor, h: torch.Tensor,
                            mu: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Batched estimator over right-padded profiles.

    tau: (B, L-1), h: (B, L), lengths: (B,). Pad positions never enter the
    estimate: membership columns/rows beyond each true length are zeroed and
    pad rows of the result are the identity.
    """
    b, n = h.shape
    if n > MAX_SEQUENCE_LEN:
        raise EstimatorError(f"sequence length {n} exceeds cap {MAX_SEQUENCE_LEN}")
    pos = torch.arange(n, device=h.device)
    real = pos.unsqueeze(0) < lengths.unsqueeze(1)          # (B, L)
    gap = _gap_max(tau, n)
    span_max = torch.triu(gap, diagonal=1)
    span_max = span_max + span_max.transpose(-2, -1)
    mem = torch.sigmoid((h.unsqueeze(-1) - span_max) / mu)
    eye = torch.eye(n, dtype=torch.bool, device=h.device)
    mem = torch.where(eye, mem.new_ones(()), mem)
    pair_real = real.unsqueeze(-1) & real.unsqueeze(-2)
    mem = torch.where(pair_real | eye, mem, mem.new_zeros(()))
    left, right = margin_distributions(mem)
    pd = _assemble(h, left, right, real_mask=real)
    # pad rows: self-parenthood keeps them row-stochastic and inert
    pad_row = ~real
    pd = torch.where(pad_row.unsqueeze(-1), eye.to(pd.dtype).expand_as(pd), pd)
    return pd


def format_debug_dump(profile: SyntacticProfile) -> str:
    """Plain-text dump of membership/left/right/P_D with fixed 9-decimal cells."""
    mem = constituent_membership(profile)
    left, right = margin_distributions(mem)
    pd = dependency_matrix(profile)
    blocks = [("membership", mem), ("left", left), ("right", right), ("p_d", pd)]
    out = []
    for name, mat in blocks:
        out.append(name)
        for row in mat.detach().tolist():
            out.append(" ".join(f"{v:.9f}" for v in row))
    return "\n".join(out) + "\n"
