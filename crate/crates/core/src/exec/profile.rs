use std::io::{self, Write};

use serde::Serialize;

/// Timing and output record for one executed layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerProfile {
    pub layer: u32,
    pub kind: &'static str,
    pub wall_us: f64,
    pub output_shape: [usize; 4],
    pub bytes_written: usize,
}

/// Writes one JSON object per line.
pub fn write_profile_jsonl<W: Write>(profiles: &[LayerProfile], mut out: W) -> io::Result<()> {
    for p in profiles {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
