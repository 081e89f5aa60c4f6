"""Loss terms for deformation-aware adversarial synthesis.

All pixel losses are means over pixels (not sums), so the weights transfer
between resolutions. Fields come as a dict with keys ``phi_y_fwd``,
``phi_y_bwd``, ``phi_x_fwd``, ``phi_x_bwd``:

* ``phi_y_fwd`` warps G(x) toward y, ``phi_y_bwd`` warps y toward G(x)
* ``phi_x_fwd`` warps F(y) toward x, ``phi_x_bwd`` warps x toward F(y)
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import torch
import torch.nn.functional as F

from .warp import chain_warp, spatial_gradient, warp_image

FIELD_KEYS = ("phi_y_fwd", "phi_y_bwd", "phi_x_fwd", "phi_x_bwd")


@dataclass(frozen=True)
class LossWeights:
    """Default weighting of the loss terms (all dimensionless, overridable)."""

    lambda_reg: float = 20.0
    lambda_smt: float = 10.0
    lambda_ic_reg: float = 10.0
    lambda_ic_gen: float = 10.0
    lambda_ic_joint: float = 10.0
    lambda_adv_da: float = 1.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")


@dataclass
class LossReport:
    """Named scalar per active term plus the weighted total."""

    terms: dict[str, float] = dataclass_field(default_factory=dict)
    total: float = 0.0

    def as_row(self) -> dict[str, float]:
        return {**self.terms, "total": self.total}


def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def sim_loss(x, y, g_out, f_out, fields: dict) -> torch.Tensor:
    """Registration similarity: L1 between each image and its warped counterpart."""
    return (
        _l1(y, warp_image(g_out, fields["phi_y_fwd"]))
        + _l1(g_out, warp_image(y, fields["phi_y_bwd"]))
        + _l1(x, warp_image(f_out, fields["phi_x_fwd"]))
        + _l1(f_out, warp_image(x, fields["phi_x_bwd"]))
    )


def smoothness_loss(fields: dict) -> torch.Tensor:
    """Sum over fields of per-plane mean squared forward differences."""
    total = None
    for key in FIELD_KEYS:
        grad = spatial_gradient(fields[key])
        # sum over the 4 component/axis planes, mean over pixels within each
        contrib = grad.pow(2).mean(dim=(-2, -1)).sum()
        total = contrib if total is None else total + contrib
    return total


def symmetric_registration_loss(x, y, g_out, f_out, fields, weights: LossWeights):
    """Weighted similarity + smoothness; returns (value, parts dict)."""
    sim = sim_loss(x, y, g_out, f_out, fields)
    smt = smoothness_loss(fields)
    return weights.lambda_reg * sim + weights.lambda_smt * smt, {"sim": sim, "smt": smt}


def ic_reg_loss(x, y, fields: dict) -> torch.Tensor:
    """Registration-level inverse consistency: backward-then-forward restores."""
    return _l1(chain_warp(y, fields["phi_y_bwd"], fields["phi_y_fwd"]), y) + _l1(
        chain_warp(x, fields["phi_x_bwd"], fields["phi_x_fwd"]), x
    )


def ic_gen_loss(x, y, G, F_) -> torch.Tensor:
    """Generation-level inverse consistency: F(G(x)) ~ x and G(F(y)) ~ y."""
    return _l1(F_(G(x)), x) + _l1(G(F_(y)), y)


def ic_joint_loss(x, y, G, F_, fields: dict) -> torch.Tensor:
    """Joint registration+generation cycle back to each source image."""
    a = _l1(warp_image(F_(warp_image(G(x), fields["phi_y_fwd"])), fields["phi_x_fwd"]), x)
    b = _l1(warp_image(G(warp_image(F_(y), fields["phi_x_fwd"])), fields["phi_y_fwd"]), y)
    return a + b


def mic_loss(
    ic_reg: torch.Tensor | None,
    ic_gen: torch.Tensor | None,
    ic_joint: torch.Tensor | None,
    weights: LossWeights,
) -> torch.Tensor:
    """Weighted combination of the enabled inverse-consistency terms."""
    total = torch.tensor(0.0)
    if ic_reg is not None:
        total = total + weights.lambda_ic_reg * ic_reg
    if ic_gen is not None:
        total = total + weights.lambda_ic_gen * ic_gen
    if ic_joint is not None:
        total = total + weights.lambda_ic_joint * ic_joint
    return total


# ---------------------------------------------------------------------------
# adversarial terms (stabilized logit-based cross-entropy, patch logits averaged)


def _check_domain(d, expect: str | None) -> None:
    if expect is not None:
        domain = getattr(d, "domain", None)
        if domain and domain != expect:
            raise ValueError(f"discriminator for domain '{domain}' used where '{expect}' expected")


def _bce(logits: torch.Tensor, real: bool) -> torch.Tensor:
    target = torch.ones_like(logits) if real else torch.zeros_like(logits)
    return F.binary_cross_entropy_with_logits(logits, target)


def adv_da_discriminator_loss(d, real, generated, phi_fwd, phi_bwd, domain: str | None = None):
    """Discriminator side: both shapes of real {y, y.phi_bwd} against both
    shapes of fake {G(x), G(x).phi_fwd}. Sum of the four patch-averaged terms."""
    _check_domain(d, domain)
    real_warped = warp_image(real, phi_bwd)
    fake_warped = warp_image(generated, phi_fwd)
    return (
        _bce(d(real), True)
        + _bce(d(real_warped), True)
        + _bce(d(generated.detach()), False)
        + _bce(d(fake_warped.detach()), False)
    )


def adv_da_generator_loss(d, generated, phi_fwd, domain: str | None = None, saturating: bool = False):
    """Generator/aligner side over the two fake shapes. Non-saturating
    fake-as-real cross-entropy by default; ``saturating`` selects the literal
    minimised log(1 - D) form (same fixed points)."""
    _check_domain(d, domain)
    fake_warped = warp_image(generated, phi_fwd)
    if saturating:
        return -(_bce(d(generated), False) + _bce(d(fake_warped), False))
    return _bce(d(generated), True) + _bce(d(fake_warped), True)


def conventional_adv_discriminator_loss(d, real, generated, domain: str | None = None):
    """Two-term cross-entropy on unwarped real vs. fake only."""
    _check_domain(d, domain)
    return _bce(d(real), True) + _bce(d(generated.detach()), False)


def conventional_adv_generator_loss(d, generated, domain: str | None = None, saturating: bool = False):
    _check_domain(d, domain)
    if saturating:
        return -_bce(d(generated), False)
    return _bce(d(generated), True)


def assemble_report(terms: dict[str, torch.Tensor], weights: dict[str, float]) -> LossReport:
    """LossReport whose total is the weighted sum of the given terms."""
    values = {k: float(v.detach()) for k, v in terms.items()}
    total = sum(weights.get(k, 1.0) * v for k, v in values.items())
    return LossReport(terms=values, total=total)
