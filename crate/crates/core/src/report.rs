//! Plain-text reports for the command line.

use std::fmt::Write;

use crate::error::Result;
use crate::model::{stage_table, ModelSpec};
use crate::profile::{deviation_pct, profile, Target};
use crate::scan::build_plan;

/// Stage assignment line, e.g. `EVSS EVSS InRes InRes`.
pub fn assignment(spec: &ModelSpec) -> String {
    spec.stage_kinds().map(|k| k.to_string()).join(" ")
}

/// Stage table with block kinds, depths, widths and resolutions, plus
/// profile totals against the reference budget when the spec is a named variant.
pub fn inspect_model(spec: &ModelSpec) -> String {
    let res = spec.input_resolution;
    let named = Target::for_variant(&spec.name).is_some();
    let mut out = String::new();
    let _ = writeln!(out, "model {} (input {res}x{res}, layout {})", spec.name, layout_name(spec));
    let _ = writeln!(out, "{:<6} {:<6} {:>5} {:>5} {:>10}  note", "stage", "kind", "depth", "dim", "resolution");
    let stem = res / 2;
    let _ = writeln!(out, "{:<6} {:<6} {:>5} {:>5} {:>10}", "stem", "conv", 2, spec.dims[0], format!("{stem}x{stem}"));
    for (stage, kind, depth, dim, extent) in stage_table(spec) {
        let note = if named && stage == 2 { "decision" } else { "" };
        let line = format!(
            "{:<6} {:<6} {:>5} {:>5} {:>10}  {note}",
            stage,
            kind.to_string(),
            depth,
            dim,
            format!("{extent}x{extent}")
        );
        let _ = writeln!(out, "{}", line.trim_end());
    }
    let _ = writeln!(out, "head   GAP -> FC({}) -> softmax", spec.num_classes);
    let _ = writeln!(out, "assignment: {}", assignment(spec));
    let report = profile(spec, res, res);
    let _ = write!(out, "params {:.3} M, FLOPs {:.3} G (MACs)", report.params_millions(), report.gmacs());
    if let Some(t) = report.target() {
        let _ = write!(
            out,
            "\ntarget {} M / {} G: params {:+.1}%, FLOPs {:+.1}%",
            t.params_m,
            t.gflops,
            deviation_pct(report.params_millions(), t.params_m),
            deviation_pct(report.gmacs(), t.gflops)
        );
    }
    out
}

fn layout_name(spec: &ModelSpec) -> String {
    serde_json::to_value(spec.layout)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Group map of a skip-scan plan as rows of 1-based group ids.
pub fn scan_plan_grid(height: usize, width: usize, step: usize) -> Result<String> {
    let plan = build_plan(height, width, step)?;
    let map = plan.group_map();
    let cell = (plan.groups.len()).to_string().len();
    let rows: Vec<String> = map
        .chunks(width)
        .map(|row| {
            row.iter()
                .map(|g| format!("{:>cell$}", g + 1))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    Ok(rows.join("\n"))
}

/// Group map followed by a table of offsets, sizes, directions and step counts.
pub fn inspect_scan_plan(height: usize, width: usize, step: usize) -> Result<String> {
    let mut out = scan_plan_grid(height, width, step)?;
    let plan = build_plan(height, width, step)?;
    let _ = write!(out, "\n\n{:>5} {:>7} {:>7} direction", "group", "offset", "tokens");
    for (i, g) in plan.groups.iter().enumerate() {
        let _ = write!(
            out,
            "\n{:>5} {:>7} {:>7} {}",
            i + 1,
            format!("({},{})", g.offset.0, g.offset.1),
            g.len(),
            g.direction
        );
    }
    let _ = write!(
        out,
        "\nskip scan steps {} (one direction per group), cross scan steps {}",
        plan.total_tokens(),
        4 * height * width
    );
    Ok(out)
}
