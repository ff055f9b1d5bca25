use std::fmt::Write;

use anyhow::Result;
use syncrec_core::epoch::correct_recording;
use syncrec_core::model::MarkerOrigin;
use syncrec_core::recorder::{Record, Recording};

fn origin(o: MarkerOrigin) -> &'static str {
    match o {
        MarkerOrigin::Auto => "auto",
        MarkerOrigin::Investigator => "investigator",
        MarkerOrigin::Subject => "subject",
    }
}

/// Text report of a recording. Depends on nothing but the file contents.
pub fn render(rec: &Recording) -> Result<String> {
    let mut out = String::new();
    let counts = rec.scanned_counts();
    writeln!(out, "format version {}{}", rec.version, if rec.truncated { " (truncated)" } else { "" })?;
    writeln!(out)?;
    writeln!(out, "{:>4}  {:<12} {:<14} {:>8} {:>4} {:>10}", "id", "stream", "source", "rate_hz", "ch", "samples")?;
    for d in rec.streams() {
        writeln!(
            out,
            "{:>4}  {:<12} {:<14} {:>8.2} {:>4} {:>10}",
            d.stream_id,
            d.info.name,
            d.info.source_id,
            d.info.nominal_rate_hz,
            d.info.channel_count,
            counts.get(&d.stream_id).copied().unwrap_or(0)
        )?;
    }
    let offsets = rec.records.iter().filter(|r| matches!(r, Record::Offset(_))).count();
    writeln!(out)?;
    writeln!(out, "markers {}  offset entries {}", counts.get(&0).copied().unwrap_or(0), offsets)?;
    if !rec.truncated {
        let agree = rec.footer.counts == counts;
        writeln!(out, "footer counts {}", if agree { "match" } else { "DIFFER from scanned records" })?;
    }
    if !rec.footer.metadata.is_empty() {
        writeln!(out)?;
        writeln!(out, "metadata")?;
        for (k, v) in &rec.footer.metadata {
            writeln!(out, "  {k} = {v}")?;
        }
    }
    let corrected = correct_recording(rec)?;
    writeln!(out)?;
    writeln!(out, "marker timeline (hub clock, s)")?;
    let t0 = corrected.markers.first().map(|m| m.t).unwrap_or(0.0);
    for m in &corrected.markers {
        writeln!(out, "  {:>12.4}  +{:>10.4}  {:<12}  {}", m.t, m.t - t0, origin(m.origin), m.label)?;
    }
    Ok(out)
}
