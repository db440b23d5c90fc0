//! Parameter-count audit against the published model sizes.
//!
//! Only totals are published, so module attribution relies on published
//! differences between configurations: a backbone swap isolates the CNN,
//! and fusion-depth, ratio and head sweeps isolate the fusion module. The
//! trunk and decoder are never isolated by any published pair.

use serde::Serialize;

use crate::config::{build_config, CnnBackboneKind, ModelConfig, ParamReport, NAMED_MODELS};
use crate::error::Result;
use crate::model::count_parameters;

/// Accepted relative deviation of each total.
pub const TOLERANCE: f64 = 0.15;

/// Published totals in millions, at 224 x 224 and nine classes.
pub const PUBLISHED_TOTALS: [(&str, f64); 3] = [("hiformer-s", 23.25), ("hiformer-b", 25.51), ("hiformer-l", 29.52)];

/// Published totals (millions) of the base model with each backbone.
pub const PUBLISHED_BACKBONES: [(CnnBackboneKind, f64); 7] = [
    (CnnBackboneKind::Resnet18, 19.36),
    (CnnBackboneKind::Resnet34, 24.75),
    (CnnBackboneKind::Resnet50, 25.51),
    (CnnBackboneKind::Resnet101, 44.50),
    (CnnBackboneKind::Densenet121, 23.92),
    (CnnBackboneKind::Densenet169, 29.55),
    (CnnBackboneKind::Densenet201, 35.36),
];

/// A fusion-module variant of the base model with its published total.
pub struct FusionVariant {
    pub label: &'static str,
    pub millions: f64,
    pub apply: fn(&mut ModelConfig),
}

pub const PUBLISHED_FUSION_VARIANTS: [FusionVariant; 6] = [
    FusionVariant {
        label: "heads 12/6",
        millions: 25.51,
        apply: |c| {
            c.dlf.num_heads = 12;
            c.dlf.num_heads_large = Some(6);
        },
    },
    FusionVariant { label: "heads 3/3", millions: 25.51, apply: |c| c.dlf.num_heads = 3 },
    FusionVariant { label: "r=1", millions: 24.90, apply: |c| c.dlf.mlp_ratio = 1.0 },
    FusionVariant { label: "r=3", millions: 26.12, apply: |c| c.dlf.mlp_ratio = 3.0 },
    FusionVariant { label: "S=1", millions: 24.33, apply: |c| c.dlf.depth_small = 1 },
    FusionVariant { label: "L=2", millions: 25.59, apply: |c| c.dlf.depth_large = 2 },
];

const BASE_MODEL: &str = "hiformer-b";

#[derive(Debug, Clone, Serialize)]
pub struct AuditRow {
    pub model: String,
    pub published_m: f64,
    pub measured: ParamReport,
    /// `(measured - published) / published`.
    pub relative_delta: f64,
    pub within_tolerance: bool,
}

impl AuditRow {
    fn new(model: &str, published_m: f64, measured: ParamReport) -> Self {
        let relative_delta = (measured.total as f64 / 1e6 - published_m) / published_m;
        AuditRow {
            model: model.to_string(),
            published_m,
            measured,
            relative_delta,
            within_tolerance: relative_delta.abs() <= TOLERANCE,
        }
    }
}

/// A published difference between two configurations that changes one
/// module only.
#[derive(Debug, Clone, Serialize)]
pub struct DifferenceCheck {
    pub module: &'static str,
    pub description: String,
    pub published_m: f64,
    pub measured_m: f64,
    /// Counts toward attribution (sweeps of the named models only).
    pub attributes: bool,
}

impl DifferenceCheck {
    pub fn divergence_m(&self) -> f64 {
        (self.measured_m - self.published_m).abs()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub tolerance: f64,
    pub rows: Vec<AuditRow>,
    pub backbones: Vec<AuditRow>,
    pub fusion_variants: Vec<AuditRow>,
    pub differences: Vec<DifferenceCheck>,
}

/// Name used when no published difference explains a failing total.
pub const SHARED_REMAINDER: &str = "swin+decoder";

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.within_tolerance)
    }

    /// Module most likely responsible for a failing total: the module of
    /// the worst published difference when it explains at least half of
    /// the worst total's gap, otherwise the trunk and decoder together.
    pub fn largest_divergence(&self) -> Option<&'static str> {
        if self.passed() {
            return None;
        }
        let worst_gap = self
            .rows
            .iter()
            .map(|r| (r.measured.total as f64 / 1e6 - r.published_m).abs())
            .fold(0.0, f64::max);
        let worst = self
            .differences
            .iter()
            .filter(|d| d.attributes)
            .max_by(|a, b| a.divergence_m().total_cmp(&b.divergence_m()));
        match worst {
            Some(d) if d.divergence_m() >= 0.5 * worst_gap => Some(d.module),
            _ => Some(SHARED_REMAINDER),
        }
    }
}

fn millions(r: &ParamReport) -> f64 {
    r.total as f64 / 1e6
}

/// Counts every published configuration and compares.
pub fn run_audit() -> Result<AuditReport> {
    let mut rows = Vec::new();
    for (name, published) in PUBLISHED_TOTALS {
        debug_assert!(NAMED_MODELS.contains(&name));
        rows.push(AuditRow::new(name, published, count_parameters(&build_config(name)?)?));
    }
    let base = build_config(BASE_MODEL)?;
    let mut backbones = Vec::new();
    for (kind, published) in PUBLISHED_BACKBONES {
        let mut cfg = base.clone();
        cfg.cnn = kind;
        backbones.push(AuditRow::new(&format!("{BASE_MODEL} / {kind}"), published, count_parameters(&cfg)?));
    }
    let mut fusion_variants = Vec::new();
    for v in &PUBLISHED_FUSION_VARIANTS {
        let mut cfg = base.clone();
        (v.apply)(&mut cfg);
        fusion_variants.push(AuditRow::new(&format!("{BASE_MODEL} / {}", v.label), v.millions, count_parameters(&cfg)?));
    }

    let mut differences = Vec::new();
    let base_row = &backbones[PUBLISHED_BACKBONES.iter().position(|(k, _)| *k == base.cnn).expect("base backbone listed")];
    for row in &backbones {
        if row.model == base_row.model {
            continue;
        }
        let residual = row.model.contains("resnet");
        differences.push(DifferenceCheck {
            module: "cnn",
            description: format!("{} minus {}", row.model, base_row.model),
            published_m: row.published_m - base_row.published_m,
            measured_m: millions(&row.measured) - millions(&base_row.measured),
            attributes: residual,
        });
    }
    for row in &fusion_variants {
        differences.push(DifferenceCheck {
            module: "dlf",
            description: format!("{} minus {}", row.model, BASE_MODEL),
            published_m: row.published_m - rows[1].published_m,
            measured_m: millions(&row.measured) - millions(&rows[1].measured),
            attributes: true,
        });
    }
    // the small and large models share the backbone and differ only in fusion
    differences.push(DifferenceCheck {
        module: "dlf",
        description: "hiformer-l minus hiformer-s".to_string(),
        published_m: rows[2].published_m - rows[0].published_m,
        measured_m: millions(&rows[2].measured) - millions(&rows[0].measured),
        attributes: true,
    });
    Ok(AuditReport { tolerance: TOLERANCE, rows, backbones, fusion_variants, differences })
}

fn write_rows(f: &mut std::fmt::Formatter<'_>, rows: &[AuditRow], tolerance: Option<f64>) -> std::fmt::Result {
    for r in rows {
        let verdict = match tolerance {
            Some(_) if r.within_tolerance => "ok",
            Some(_) => "OUT OF TOLERANCE",
            None => "",
        };
        writeln!(
            f,
            "  {:<28} published {:>6.2} M  measured {:>6.2} M  delta {:>+7.2}%  {verdict}",
            r.model,
            r.published_m,
            millions(&r.measured),
            100.0 * r.relative_delta
        )?;
    }
    Ok(())
}

impl std::fmt::Display for AuditReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "named models (tolerance ±{:.0}%):", 100.0 * self.tolerance)?;
        write_rows(f, &self.rows, Some(self.tolerance))?;
        for r in &self.rows {
            let parts: Vec<String> =
                r.measured.per_module.iter().map(|(m, n)| format!("{m} {:.2} M", *n as f64 / 1e6)).collect();
            writeln!(f, "  {:<28} {}", r.model, parts.join(", "))?;
        }
        writeln!(f, "backbone sweep (informational):")?;
        write_rows(f, &self.backbones, None)?;
        writeln!(f, "fusion sweep (informational):")?;
        write_rows(f, &self.fusion_variants, None)?;
        writeln!(f, "single-module differences:")?;
        for d in &self.differences {
            writeln!(
                f,
                "  [{:<3}] {:<44} published {:>+6.2} M  measured {:>+6.2} M",
                d.module, d.description, d.published_m, d.measured_m
            )?;
        }
        match self.largest_divergence() {
            None => write!(f, "audit PASSED"),
            Some(m) => write!(f, "audit FAILED; largest divergence in `{m}`"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(measured_b: usize, cnn_gap: f64) -> AuditReport {
        let pr = |total: usize| ParamReport { total, per_module: vec![("cnn".into(), total)] };
        AuditReport {
            tolerance: TOLERANCE,
            rows: vec![AuditRow::new("hiformer-b", 25.51, pr(measured_b))],
            backbones: vec![],
            fusion_variants: vec![],
            differences: vec![DifferenceCheck {
                module: "cnn",
                description: "swap".into(),
                published_m: 1.0,
                measured_m: 1.0 + cnn_gap,
                attributes: true,
            }],
        }
    }

    #[test]
    fn tolerance_boundary() {
        assert!(report(25_510_000, 0.0).passed());
        assert!(report(29_000_000, 0.0).passed());
        assert!(!report(30_000_000, 0.0).passed());
    }

    #[test]
    fn failure_is_attributed() {
        assert_eq!(report(25_510_000, 0.0).largest_divergence(), None);
        assert_eq!(report(40_000_000, 14.0).largest_divergence(), Some("cnn"));
        assert_eq!(report(40_000_000, 0.0).largest_divergence(), Some(SHARED_REMAINDER));
    }
}
