//! CSV and JSON artifact formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use colflux_core::column::{measurement_label, FeedConditions};
use colflux_core::sampling::{InitialConditionPool, NoisePool, RegionData};
use colflux_core::scenarios::{DisturbanceSequence, Envelope, QUANTILE_LEVELS};

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn join_row(values: impl IntoIterator<Item = f64>) -> String {
    let mut s = String::new();
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v}");
    }
    s
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes())
}

/// Header fields and numeric rows of a CSV file with `#` comments.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rdr = reader(&text);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{} row {}", path.display(), i + 1))?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|e| anyhow!("{} row {}: {e}", path.display(), i + 1)))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != header.len() {
            bail!("{} row {} has {} fields, header has {}", path.display(), i + 1, row.len(), header.len());
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// `# key=value` comment lines at the top of a file.
pub fn read_comment(path: &Path, key: &str) -> Result<Option<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let prefix = format!("# {key}=");
    Ok(text.lines().take_while(|l| l.starts_with('#')).find_map(|l| l.strip_prefix(&prefix).map(str::to_string)))
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header.iter().position(|h| h == name).ok_or_else(|| anyhow!("missing column {name}"))
}

pub fn write_sequence(path: &Path, seq: &DisturbanceSequence) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(seq)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_sequence(path: &Path) -> Result<DisturbanceSequence> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// Columns: `t, T_1..T_N, M_1..M_N, F, zF, qF`.
pub fn region_csv(region: &RegionData, n: usize) -> String {
    let mut s = String::from("t");
    (1..=n).for_each(|i| s += &format!(",T_{i}"));
    (1..=n).for_each(|i| s += &format!(",M_{i}"));
    s += ",F,zF,qF\n";
    for k in 0..region.len() {
        let f = region.feed[k];
        let row = std::iter::once(region.time[k])
            .chain(region.temperatures[k].iter().copied())
            .chain(region.holdups[k].iter().copied())
            .chain([f.rate, f.composition, f.liquid_fraction]);
        s += &join_row(row);
        s.push('\n');
    }
    s
}

pub fn read_region(path: &Path, n: usize) -> Result<RegionData> {
    let (header, rows) = read_numeric_csv(path)?;
    let t = column(&header, "t")?;
    let t1 = column(&header, "T_1")?;
    let m1 = column(&header, "M_1")?;
    let f = column(&header, "F")?;
    let mut region = RegionData { time: vec![], temperatures: vec![], holdups: vec![], feed: vec![] };
    for r in rows {
        region.time.push(r[t]);
        region.temperatures.push(r[t1..t1 + n].to_vec());
        region.holdups.push(r[m1..m1 + n].to_vec());
        region.feed.push(FeedConditions::new(r[f], r[f + 1], r[f + 2]));
    }
    if region.is_empty() {
        bail!("{} has no rows", path.display());
    }
    Ok(region)
}

/// Columns: `stage, q0, q5, q25, q50, q75, q95, q100`.
pub fn quantile_csv(q: &[[f64; 7]]) -> String {
    let mut s = String::from("stage");
    for p in QUANTILE_LEVELS {
        s += &format!(",q{}", (p * 100.0).round());
    }
    s.push('\n');
    for (i, row) in q.iter().enumerate() {
        s += &format!("{},{}\n", i + 1, join_row(row.iter().copied()));
    }
    s
}

/// Columns: `M_1..M_N, x_1..x_N, F, zF, qF`, after `# seed=` and `# source=` lines.
pub fn initial_pool_csv(pool: &InitialConditionPool, n: usize) -> String {
    let mut s = format!("# seed={}\n# source={}\n", pool.seed, pool.source);
    let mut header: Vec<String> = (1..=n).map(|i| format!("M_{i}")).collect();
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend(["F", "zF", "qF"].map(String::from));
    s += &header.join(",");
    s.push('\n');
    for (z, f) in pool.states.iter().zip(&pool.feeds) {
        s += &join_row(z.iter().copied().chain([f.rate, f.composition, f.liquid_fraction]));
        s.push('\n');
    }
    s
}

pub fn read_initial_pool(path: &Path, n: usize) -> Result<InitialConditionPool> {
    let (header, rows) = read_numeric_csv(path)?;
    if header.len() != 2 * n + 3 {
        bail!("{}: expected {} columns, found {}", path.display(), 2 * n + 3, header.len());
    }
    let seed = read_comment(path, "seed")?.and_then(|s| s.parse().ok()).unwrap_or(0);
    let source = read_comment(path, "source")?.unwrap_or_default();
    let mut pool = InitialConditionPool { states: vec![], feeds: vec![], seed, source };
    for r in rows {
        pool.states.push(r[..2 * n].to_vec());
        pool.feeds.push(FeedConditions::new(r[2 * n], r[2 * n + 1], r[2 * n + 2]));
    }
    if pool.is_empty() {
        bail!("{} has no samples", path.display());
    }
    Ok(pool)
}

/// One column per measurement slot, labelled `T1..TN, F, TF, qF, M1, MN`.
pub fn noise_pool_csv(pool: &NoisePool, n: usize) -> String {
    let mut s = format!("# seed={}\n", pool.seed);
    let width = pool.samples.first().map_or(n + 5, Vec::len);
    s += &(0..width).map(|i| measurement_label(i, n)).collect::<Vec<_>>().join(",");
    s.push('\n');
    for row in &pool.samples {
        s += &join_row(row.iter().copied());
        s.push('\n');
    }
    s
}

pub fn read_noise_pool(path: &Path, n: usize) -> Result<NoisePool> {
    let (header, rows) = read_numeric_csv(path)?;
    if header.len() != n + 5 {
        bail!("{}: expected {} columns, found {}", path.display(), n + 5, header.len());
    }
    let seed = read_comment(path, "seed")?.and_then(|s| s.parse().ok()).unwrap_or(0);
    if rows.is_empty() {
        bail!("{} has no samples", path.display());
    }
    Ok(NoisePool { samples: rows, seed })
}

pub const ENVELOPE_COLUMNS: [&str; 6] = ["L_T_min", "L_T_max", "V_B_min", "V_B_max", "L_T_std", "V_B_std"];

/// Appends envelope columns to trajectory CSV text with matching rows.
pub fn append_envelope(traj_csv: &str, env: &Envelope) -> Result<String> {
    let mut out = String::with_capacity(traj_csv.len() * 2);
    let mut lines = traj_csv.lines();
    let header = lines.next().ok_or_else(|| anyhow!("empty trajectory"))?;
    out += header;
    for c in ENVELOPE_COLUMNS {
        out.push(',');
        out += c;
    }
    out.push('\n');
    for (k, line) in lines.enumerate() {
        if k >= env.time.len() {
            bail!("envelope shorter than trajectory");
        }
        out += line;
        out.push(',');
        let (lo, hi, sd) = (env.min[k], env.max[k], env.std[k]);
        out += &join_row([lo[0], hi[0], lo[1], hi[1], sd[0], sd[1]]);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pool = InitialConditionPool {
            states: vec![vec![0.5, 0.6, 0.1, 0.9], vec![0.4, 0.45, 0.2, 0.8]],
            feeds: vec![FeedConditions::new(1.0, 0.5, 1.0), FeedConditions::new(1.1, 0.45, 0.9)],
            seed: 9,
            source: "abc".into(),
        };
        let p = dir.path().join("ic.csv");
        write_bytes(&p, initial_pool_csv(&pool, 2).as_bytes()).unwrap();
        assert_eq!(read_initial_pool(&p, 2).unwrap(), pool);
        let noise = NoisePool { samples: vec![vec![0.1, -0.2, 0.0, 0.01, 0.02, 0.03, -0.04]], seed: 4 };
        let q = dir.path().join("noise.csv");
        write_bytes(&q, noise_pool_csv(&noise, 2).as_bytes()).unwrap();
        assert_eq!(read_noise_pool(&q, 2).unwrap(), noise);
        assert!(read_noise_pool(&q, 3).is_err());
    }
}
