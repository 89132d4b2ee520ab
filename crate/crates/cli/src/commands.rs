use polydiff_core::diffusion::{build_diffusing_orbit, plan_chain, scaling_study, DiffusionError};
use polydiff_core::io::write_table;
use polydiff_core::melnikov::{certify_at, certify_condition1, melnikov_field};
use polydiff_core::transition::{
    bump_perturbation, find_transition, fy_regression_samples, glue, linear_fit, projection_pair, OuterBoundary,
};
use polydiff_core::variational::{action, solve_loop, BoundarySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Files written by a command, relative to the output directory.
#[derive(Debug, Default)]
pub struct Outputs {
    dir: PathBuf,
    pub files: Vec<String>,
    /// One-line summary printed on success.
    pub summary: String,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            ..Default::default()
        })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    fn csv<F>(&mut self, name: &str, write: F) -> Result<(), CliError>
    where
        F: FnOnce(BufWriter<File>) -> csv::Result<()>,
    {
        let path = self.dir.join(name);
        let w = self.create(name)?;
        write(w).map_err(|e| CliError::io(&path, e))
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let w = self.create(name)?;
        serde_json::to_writer_pretty(w, value).map_err(|e| CliError::io(&path, e))
    }
}

fn omega_label(omega: f64) -> String {
    format!("{omega}").replace('.', "p")
}

pub fn cmd_melnikov(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let s = cfg.system_params()?;
    let st = &cfg.melnikov;
    for &w in &st.omega {
        let field = melnikov_field(w, &s.perturbation, st.n_t, st.n_q, &st.options)?;
        out.csv(&format!("melnikov_field_w{}.csv", omega_label(w)), |f| field.write_csv(f))?;
    }
    let certs = st
        .omega
        .iter()
        .map(|&w| certify_at(w, &s.perturbation, &st.box_policy, st.refinement_tol, &st.options))
        .collect::<Result<Vec<_>, _>>()?;
    out.json("certificates.json", &certs)?;
    let mut summary = format!("{} certificate(s)", certs.len());
    if let Some([lo, hi]) = st.certify_range {
        let report = certify_condition1(
            (lo, hi),
            st.certify_step,
            &s.perturbation,
            &st.box_policy,
            st.refinement_tol,
            &st.options,
        )?;
        out.json("condition1_report.json", &report)?;
        summary = format!(
            "{summary}; global gap {:.6} at omega = {}",
            report.global_gap, report.worst_omega
        );
    }
    out.summary = summary;
    Ok(())
}

pub fn cmd_loop(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let s = cfg.system_params()?;
    let st = &cfg.loop_stage;
    let default_len = if s.mu > 0.0 {
        2.0 * PI * ((s.loop_time() + PI) / (2.0 * PI)).ceil()
    } else {
        40.0
    };
    let t1 = st.t1.unwrap_or(st.t0 + default_len);
    let rotor1 = st.rotor1.unwrap_or(st.rotor0 + st.omega * (t1 - st.t0));
    let b = BoundarySpec::single_loop(st.t0, st.rotor0, t1, rotor1);
    let (curve, profile, stats) = solve_loop(&b, &s, &st.solver)?;
    out.csv("loop_curve.csv", |f| curve.write_csv(f))?;
    let parts = action(&curve, &s);
    out.json(
        "loop_report.json",
        &json!({
            "boundary": b,
            "nodes": curve.len(),
            "action": parts.total,
            "action_free": parts.free,
            "action_perturbation": parts.perturbation,
            "profile": profile,
            "stats": stats,
        }),
    )?;
    out.summary = format!(
        "loop on [{}, {}]: action {:.10}, residual {:.3e}, max profile distance {:.4e}",
        b.t0,
        b.t1,
        parts.total,
        stats.residual,
        profile.max()
    );
    Ok(())
}

pub fn cmd_transition(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let s = cfg.system_params()?;
    let st = &cfg.transition;
    let outer = st
        .outer
        .unwrap_or_else(|| OuterBoundary::for_step(st.omega1, st.omega2, &s));
    let cert = certify_at(st.omega1, &s.perturbation, &st.box_policy, st.refinement_tol, &st.options.melnikov)?;
    let (record, curve) = find_transition(&outer, st.omega1, st.omega2, &s, &cert, &st.options, None)?;
    out.json("transition_record.json", &record)?;
    out.csv("transition_curve.csv", |f| curve.write_csv(f))?;
    let mut summary = format!(
        "junction ({:.6}, {:.6}), margin {:.4e}, velocity jump {:.3e}, residual {:.3e}",
        record.junction_t,
        record.junction_q,
        record.boundary_margin,
        record.vel_jump_max(),
        record.el_residual
    );
    if st.regression_grid > 0 {
        let pts = fy_regression_samples(&outer, st.omega1, &record.junction_box, st.regression_grid, &s, &st.options)?;
        out.csv("fy_regression.csv", |f| {
            write_table(
                f,
                &["mu_A", "F_Y"],
                pts.iter().map(|p| vec![polydiff_core::io::fmt_f64(p.0), polydiff_core::io::fmt_f64(p.1)]),
            )
        })?;
        if let Some((slope, intercept)) = linear_fit(&pts) {
            out.json("fy_regression_fit.json", &json!({ "slope": slope, "intercept": intercept }))?;
            summary = format!("{summary}; F_Y regression slope {slope:.4}");
        }
    }
    if st.projection_samples > 0 {
        let glued = glue(record.junction_t, record.junction_q, &outer, &s, &st.options.solver)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut rows = Vec::with_capacity(st.projection_samples);
        for _ in 0..st.projection_samples {
            let amp = st.projection_amplitude;
            let qc: Vec<f64> = (0..8).map(|_| amp * rng.random_range(-1.0..1.0)).collect();
            let rc: Vec<f64> = (0..8).map(|_| amp * rng.random_range(-1.0..1.0)).collect();
            let p = bump_perturbation(&glued.curve, &qc, &rc);
            rows.push(projection_pair(&p, &outer, &s, &st.options.solver)?);
        }
        let worst = rows.iter().map(|(f, g)| f - g).fold(f64::INFINITY, f64::min);
        out.csv("projection_check.csv", |f| {
            use polydiff_core::io::fmt_f64;
            write_table(
                f,
                &["F", "F_projected", "difference"],
                rows.iter().map(|&(a, b)| vec![fmt_f64(a), fmt_f64(b), fmt_f64(a - b)]),
            )
        })?;
        summary = format!("{summary}; min F - F_projected {worst:.3e}");
    }
    out.summary = summary;
    Ok(())
}

pub fn cmd_diffuse(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let s = cfg.system_params()?;
    let st = &cfg.diffuse;
    let plan = plan_chain(st.omega_start, st.omega_end, s.mu)?;
    match build_diffusing_orbit(&plan, &s, &st.options) {
        Ok((curve, report)) => {
            out.json("diffusion_report.json", &report)?;
            if st.write_curve {
                out.csv("diffusion_curve.csv", |f| curve.write_csv(f))?;
            }
            out.summary = format!(
                "{} transitions, Qdot {:.4} -> {:.4}, t_d = {}, residual {:.3e}",
                report.transitions.len(),
                report.qdot_start,
                report.qdot_end,
                report.t_d.map(|t| format!("{t:.3}")).unwrap_or_else(|| "none".into()),
                report.residual_max
            );
            Ok(())
        }
        Err(DiffusionError::Transition { index, source, partial }) => {
            out.json("diffusion_report_partial.json", &*partial)?;
            Err(DiffusionError::Transition { index, source, partial }.into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_scaling(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let s = cfg.system_params()?;
    let st = &cfg.scaling;
    let table = scaling_study(&st.mu, (st.omega_start, st.omega_end), &s, &st.options)?;
    out.csv("scaling.csv", |f| table.write_csv(f))?;
    out.json("scaling_summary.json", &table)?;
    out.summary = format!("fitted exponent p = {:.4}, C = {:.4}", table.p, table.c_fit);
    Ok(())
}
