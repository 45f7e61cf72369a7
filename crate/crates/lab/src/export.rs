use std::fs;
use std::io::{self, Write};
use std::path::Path;

use ens_core::worldmodel::Trace;

/// One JSON object per line: tick, seq, day, epoch, kind, args.
pub fn write_ndjson<W: Write>(trace: &Trace, mut out: W) -> io::Result<()> {
    for ev in trace {
        serde_json::to_writer(&mut out, ev)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_ndjson(trace: &Trace) -> String {
    let mut buf = Vec::new();
    write_ndjson(trace, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

pub fn save(trace: &Trace, path: &Path) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let f = io::BufWriter::new(fs::File::create(path)?);
    write_ndjson(trace, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ens_core::worldmodel::{TimeConfig, World};

    #[test]
    fn field_order() {
        let mut w = World::new(TimeConfig::default());
        w.advance(1);
        let s = to_ndjson(w.trace());
        let first = s.lines().next().unwrap();
        assert_eq!(first, r#"{"tick":0,"seq":0,"day":0,"epoch":0,"kind":"Day","args":{"day":0}}"#);
        assert_eq!(s.lines().count(), w.trace().len());
    }
}
