//! CSV writers. Every file has a header row and floats carry 17 significant
//! digits.

use crate::model::PhasePoint;
use std::io::Write;

/// Formats with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_table<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_phase_points<W: Write>(out: W, points: &[PhasePoint]) -> csv::Result<()> {
    write_table(
        out,
        &["t", "q", "qdot", "Q", "Qdot"],
        points.iter().map(|p| {
            [p.t, p.q, p.qdot, p.rotor, p.rotor_dot]
                .iter()
                .map(|&x| fmt_f64(x))
                .collect()
        }),
    )
}
