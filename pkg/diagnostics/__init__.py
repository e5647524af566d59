from .audits import (
    RANK_TOL,
    Alignment,
    AuditError,
    ContractionEstimate,
    DiagnosticsReport,
    SamplePoints,
    SpectrumEstimate,
    VarianceAudit,
    alignment_report,
    assumption_checks,
    audit,
    collect_points,
    epsilon1_hat,
    estimate_contraction,
    hjb_residual_max,
    m_theta_spectrum,
    m_theta_v,
    neighborhood_bound,
    variance_audit,
)

__all__ = [
    "RANK_TOL",
    "Alignment",
    "AuditError",
    "ContractionEstimate",
    "DiagnosticsReport",
    "SamplePoints",
    "SpectrumEstimate",
    "VarianceAudit",
    "alignment_report",
    "assumption_checks",
    "audit",
    "collect_points",
    "epsilon1_hat",
    "estimate_contraction",
    "hjb_residual_max",
    "m_theta_spectrum",
    "m_theta_v",
    "neighborhood_bound",
    "variance_audit",
]
