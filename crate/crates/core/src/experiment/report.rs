use std::fmt::Write;

use super::ControllerResult;
use crate::signal::format_float;

const COLUMNS: [&str; 5] = ["J_ISE", "J_IAE", "J_u", "J_track", "CPU [s]"];

/// `controller,formulation,J_ISE,J_IAE,J_u,J_track,cpu_s,fallbacks,error`.
pub fn metrics_csv(results: &[ControllerResult]) -> String {
    let mut s = String::from("controller,formulation,J_ISE,J_IAE,J_u,J_track,cpu_s,fallbacks,error\n");
    for r in results {
        let metrics = match &r.metrics {
            Some(m) => [m.j_ise, m.j_iae, m.j_u, m.j_track, m.mean_cpu]
                .iter()
                .map(|v| format_float(*v))
                .collect::<Vec<_>>()
                .join(","),
            None => ",,,,".to_string(),
        };
        let error = r.error.as_deref().unwrap_or("").replace(['"', '\n'], "'");
        let error = if error.contains(',') { format!("\"{error}\"") } else { error };
        let _ = writeln!(
            s,
            "{},{},{metrics},{},{error}",
            r.label,
            r.formulation.name(),
            r.fallbacks
        );
    }
    s
}

/// Fixed-width table with the columns `J_ISE, J_IAE, J_u, J_track, CPU`.
pub fn metrics_table(results: &[ControllerResult]) -> String {
    let width = results.iter().map(|r| r.label.len()).max().unwrap_or(0).max("Formulation".len());
    let mut s = format!("{:<width$}", "Formulation");
    for c in COLUMNS {
        let _ = write!(s, "  {c:>10}");
    }
    s.push('\n');
    s.push_str(&"-".repeat(width + 12 * COLUMNS.len()));
    s.push('\n');
    for r in results {
        let _ = write!(s, "{:<width$}", r.label);
        match &r.metrics {
            Some(m) => {
                for v in [m.j_ise, m.j_iae, m.j_u, m.j_track] {
                    let _ = write!(s, "  {v:>10.4}");
                }
                let _ = write!(s, "  {:>10.2e}", m.mean_cpu);
                if r.fallbacks > 0 {
                    let _ = write!(s, "  ({} fallback steps)", r.fallbacks);
                }
            }
            None => {
                let _ = write!(s, "  failed: {}", r.error.as_deref().unwrap_or("unknown error"));
            }
        }
        s.push('\n');
    }
    s
}

/// Gnuplot script that plots output vs reference and the input of every trajectory.
pub fn gnuplot_script(results: &[ControllerResult]) -> String {
    let mut s = String::from(
        "# Run from the experiment directory: gnuplot plot.gp\n\
         set datafile separator ','\n\
         set terminal pngcairo size 1000,700\n\
         set key outside right\n\
         set grid\n",
    );
    for r in results {
        let Some(log) = &r.log else { continue };
        let Some(first) = log.records.first() else { continue };
        let (m, p) = (first.u.len(), first.y.len());
        let file = format!("trajectories/{}.csv", r.label);
        let _ = write!(
            s,
            "\nset output '{label}.png'\nset multiplot layout 2,1 title '{label}'\n\
             set ylabel 'output'\nplot ",
            label = r.label
        );
        let outputs: Vec<String> = (0..p)
            .flat_map(|i| {
                let (y, rr) = (3 + m + i, 3 + m + p + i);
                [
                    format!("'{file}' every ::1 using 2:{y} with lines title 'y{}'", i + 1),
                    format!("'{file}' every ::1 using 2:{rr} with lines dt 2 title 'r{}'", i + 1),
                ]
            })
            .collect();
        s.push_str(&outputs.join(", \\\n     "));
        s.push_str("\nset ylabel 'input'\nset xlabel 't [s]'\nplot ");
        let inputs: Vec<String> = (0..m)
            .map(|i| format!("'{file}' every ::1 using 2:{} with steps title 'u{}'", 3 + i, i + 1))
            .collect();
        s.push_str(&inputs.join(", \\\n     "));
        s.push_str("\nunset multiplot\nunset xlabel\n");
    }
    s
}
