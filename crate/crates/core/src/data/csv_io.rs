use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::Samples;
use crate::error::{invalid, Result};

/// Writes one row per sample: `client,y,f0,...`.
pub fn write_csv<W: Write>(w: W, clients: &[(usize, &Samples)]) -> Result<()> {
    let dim = clients.first().map_or(0, |(_, s)| s.dim);
    if clients.iter().any(|(_, s)| s.dim != dim) {
        return invalid("all clients must share one feature dimension");
    }
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["client".to_string(), "y".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    out.write_record(&header)?;
    for (k, s) in clients {
        for i in 0..s.len() {
            let mut rec = vec![k.to_string(), s.y[i].to_string()];
            rec.extend(s.row(i).iter().map(|v| format!("{v:?}")));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads the format produced by [`write_csv`], grouped by ascending client id.
pub fn read_csv<R: Read>(r: R) -> Result<Vec<(usize, Samples)>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "client" || &headers[1] != "y" {
        return invalid("expected header `client,y,f0,...`");
    }
    let dim = headers.len() - 2;
    let mut groups: BTreeMap<usize, Samples> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse_err = |what: &str| crate::Error::Invalid(format!("row {}: bad {what}", line + 1));
        let k: usize = rec[0].trim().parse().map_err(|_| parse_err("client id"))?;
        let y: usize = rec[1].trim().parse().map_err(|_| parse_err("label"))?;
        let feats = rec
            .iter()
            .skip(2)
            .map(|f| f.trim().parse::<f64>().map_err(|_| parse_err("feature")))
            .collect::<Result<Vec<_>>>()?;
        groups.entry(k).or_insert_with(|| Samples::new(dim)).push(&feats, y);
    }
    Ok(groups.into_iter().collect())
}
