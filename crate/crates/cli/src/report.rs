//! The side-by-side single-view vs multi-view comparison report.

use std::fmt::Write as _;

use mammofusion::labels::LabelScheme;
use mammofusion::metrics::LevelReports;

pub struct ComparisonReport {
    pub single: LevelReports,
    pub multi: LevelReports,
}

impl ComparisonReport {
    /// Macro-F1 deltas (multi-view minus single-view) per task and level.
    pub fn deltas(&self) -> [(&'static str, f64); 6] {
        [
            ("diagnosis.left", self.multi.diag_left.macro_f1 - self.single.diag_left.macro_f1),
            ("diagnosis.right", self.multi.diag_right.macro_f1 - self.single.diag_right.macro_f1),
            ("diagnosis.study", self.multi.diag_study.macro_f1 - self.single.diag_study.macro_f1),
            ("density.left", self.multi.dens_left.macro_f1 - self.single.dens_left.macro_f1),
            ("density.right", self.multi.dens_right.macro_f1 - self.single.dens_right.macro_f1),
            ("density.side", self.multi.dens_side.macro_f1 - self.single.dens_side.macro_f1),
        ]
    }

    pub fn render(&self, scheme: LabelScheme) -> String {
        let diag_names = scheme.diagnosis_class_names();
        let dens_names = scheme.density_class_names();
        let mut out = String::new();
        let _ = writeln!(out, "=== Single-view model ===");
        out.push_str(&self.single.render_table(&diag_names, &dens_names));
        let _ = writeln!(out, "\n=== Multi-view model ===");
        out.push_str(&self.multi.render_table(&diag_names, &dens_names));
        let _ = writeln!(out, "\n=== Multi-view gain (macro-F1 delta) ===");
        for (name, delta) in self.deltas() {
            let _ = writeln!(out, "{name:<18} {delta:>+8.4}");
        }
        out
    }

    pub fn render_key_values(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.single.render_key_values("single_view"));
        out.push_str(&self.multi.render_key_values("multi_view"));
        for (name, delta) in self.deltas() {
            let _ = writeln!(out, "delta.{name}.macro_f1 {delta:.6}");
        }
        out
    }
}
