use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointproc::SpikeCountMatrix;

/// One parsed row of a cumulative case file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseRow {
    pub date: NaiveDate,
    pub county: String,
    pub state: String,
    pub fips: String,
    pub cases: u64,
}

/// Cumulative county case counts, sorted by `(state, fips, date)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseTable {
    pub rows: Vec<CaseRow>,
    /// Rows skipped because they carried no fips code.
    pub dropped_missing_fips: usize,
}

/// First differences of a cumulative series with negative increments
/// clipped to zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DailySeries {
    pub daily: Vec<u64>,
    pub clipped_cells: usize,
    /// Signed sum of the clipped increments (never positive), so that
    /// `sum(daily) = final cumulative - clipped_mass`.
    pub clipped_mass: i64,
}

pub fn daily_from_cumulative(cumulative: &[u64]) -> DailySeries {
    let mut prev = 0i64;
    let mut out = DailySeries {
        daily: Vec::with_capacity(cumulative.len()),
        clipped_cells: 0,
        clipped_mass: 0,
    };
    for &c in cumulative {
        let inc = c as i64 - prev;
        if inc < 0 {
            out.clipped_cells += 1;
            out.clipped_mass += inc;
            out.daily.push(0);
        } else {
            out.daily.push(inc as u64);
        }
        prev = c as i64;
    }
    out
}

#[derive(Deserialize)]
struct RawRow {
    date: String,
    county: String,
    state: String,
    fips: String,
    cases: String,
    #[allow(dead_code)]
    deaths: String,
}

/// Parse a `date,county,state,fips,cases,deaths` file.
pub fn ingest_cases_csv(path: &Path) -> Result<CaseTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cases_csv(&text, path)
}

/// [`ingest_cases_csv`] on in-memory text; `path` only labels errors.
pub fn parse_cases_csv(text: &str, path: &Path) -> Result<CaseTable> {
    let bad = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    let want = ["date", "county", "state", "fips", "cases", "deaths"];
    if header.iter().collect::<Vec<_>>() != want {
        return Err(bad(1, format!("expected header {}", want.join(","))));
    }
    let mut rows = Vec::new();
    let mut dropped = 0;
    let mut seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let raw: RawRow = rec.deserialize(Some(&header)).map_err(|e| bad(line, e.to_string()))?;
        let date = NaiveDate::parse_from_str(raw.date.trim(), "%Y-%m-%d")
            .map_err(|e| bad(line, format!("date {:?}: {e}", raw.date)))?;
        let cases: u64 = raw
            .cases
            .trim()
            .parse()
            .map_err(|_| bad(line, format!("cases {:?} is not a nonnegative integer", raw.cases)))?;
        let fips = raw.fips.trim().to_string();
        if fips.is_empty() {
            log::warn!("{}:{line}: dropping {} / {} without fips", path.display(), raw.county, raw.state);
            dropped += 1;
            continue;
        }
        if !seen.insert((fips.clone(), date)) {
            return Err(bad(line, format!("duplicate row for fips {fips} on {date}")));
        }
        rows.push(CaseRow {
            date,
            county: raw.county.trim().to_string(),
            state: raw.state.trim().to_string(),
            fips,
            cases,
        });
    }
    rows.sort_by(|a, b| (&a.state, &a.fips, a.date).cmp(&(&b.state, &b.fips, b.date)));
    Ok(CaseTable {
        rows,
        dropped_missing_fips: dropped,
    })
}

/// How a state's counties are grouped into splits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    /// Chunks of consecutive counties in name order.
    #[default]
    Alphabetical,
    /// Chunks of consecutive counties in fips order.
    Fips,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct County {
    pub fips: String,
    pub name: String,
    pub final_cumulative: u64,
    pub clipped_cells: usize,
    pub clipped_mass: i64,
}

/// A group of at most `max_nodes` counties observed over a shared daily grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CommunitySplit {
    /// `State-k`.
    pub id: String,
    pub counties: Vec<County>,
    /// First day of the grid; bin `i` is `start + i` days.
    pub start: NaiveDate,
    /// Daily new cases, one node per county, bin width one day.
    pub counts: SpikeCountMatrix,
    /// Complete digraph within the split, self-loops included.
    pub adjacency: Vec<Vec<bool>>,
}

/// Partition `state`'s counties into deterministic splits.
///
/// Every county is placed on the state's full date grid; a county's
/// cumulative count is zero before its first row and carried forward over
/// missing days.
pub fn split_communities(table: &CaseTable, state: &str, max_nodes: usize, scheme: SplitScheme) -> Result<Vec<CommunitySplit>> {
    if max_nodes == 0 {
        return Err(Error::Config("max_nodes must be positive".into()));
    }
    let rows: Vec<&CaseRow> = table.rows.iter().filter(|r| r.state == state).collect();
    let (Some(start), Some(end)) = (rows.iter().map(|r| r.date).min(), rows.iter().map(|r| r.date).max()) else {
        return Err(Error::Config(format!("state {state:?} has no county rows")));
    };
    let n_days = (end - start).num_days() as usize + 1;

    let mut by_fips: BTreeMap<&str, (String, Vec<Option<u64>>)> = BTreeMap::new();
    for r in &rows {
        let entry = by_fips.entry(&r.fips).or_insert_with(|| (r.county.clone(), vec![None; n_days]));
        entry.1[(r.date - start).num_days() as usize] = Some(r.cases);
    }
    let mut counties: Vec<(County, Vec<u64>)> = by_fips
        .into_iter()
        .map(|(fips, (name, cells))| {
            let mut last = 0;
            let cumulative: Vec<u64> = cells
                .iter()
                .map(|c| {
                    last = c.unwrap_or(last);
                    last
                })
                .collect();
            let ds = daily_from_cumulative(&cumulative);
            let county = County {
                fips: fips.to_string(),
                name,
                final_cumulative: last,
                clipped_cells: ds.clipped_cells,
                clipped_mass: ds.clipped_mass,
            };
            (county, ds.daily)
        })
        .collect();
    match scheme {
        SplitScheme::Alphabetical => counties.sort_by(|a, b| (&a.0.name, &a.0.fips).cmp(&(&b.0.name, &b.0.fips))),
        SplitScheme::Fips => counties.sort_by(|a, b| a.0.fips.cmp(&b.0.fips)),
    }

    counties
        .chunks(max_nodes)
        .enumerate()
        .map(|(k, chunk)| {
            let n = chunk.len();
            let mut counts = SpikeCountMatrix::zeros(n, n_days, 1.0);
            for (node, (_, daily)) in chunk.iter().enumerate() {
                for (bin, &x) in daily.iter().enumerate() {
                    counts.set(node, bin, x);
                }
            }
            Ok(CommunitySplit {
                id: format!("{state}-{k}"),
                counties: chunk.iter().map(|(c, _)| c.clone()).collect(),
                start,
                counts,
                adjacency: vec![vec![true; n]; n],
            })
        })
        .collect()
}

/// `split,node,fips,county`.
pub fn splits_csv(splits: &[CommunitySplit]) -> String {
    let mut s = String::from("split,node,fips,county\n");
    for sp in splits {
        for (i, c) in sp.counties.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", sp.id, i, c.fips, quote(&c.name));
        }
    }
    s
}

/// `fips,county,split,total_daily,final_cumulative,clipped_cells,clipped_mass`.
pub fn ingest_report_csv(splits: &[CommunitySplit]) -> String {
    let mut s = String::from("fips,county,split,total_daily,final_cumulative,clipped_cells,clipped_mass\n");
    for sp in splits {
        for (i, c) in sp.counties.iter().enumerate() {
            let total: u64 = (0..sp.counts.n_bins).map(|b| sp.counts.get(i, b)).sum();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.fips,
                quote(&c.name),
                sp.id,
                total,
                c.final_cumulative,
                c.clipped_cells,
                c.clipped_mass
            );
        }
    }
    s
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str) -> Result<CaseTable> {
        parse_cases_csv(text, Path::new("cases.csv"))
    }

    const HEADER: &str = "date,county,state,fips,cases,deaths\n";

    #[test]
    fn first_difference() {
        assert_eq!(daily_from_cumulative(&[3, 5, 5, 9]).daily, vec![3, 2, 0, 4]);
    }

    #[test]
    fn dip_is_clipped_and_counted() {
        let d = daily_from_cumulative(&[5, 4]);
        assert_eq!((d.daily, d.clipped_cells, d.clipped_mass), (vec![5, 0], 1, -1));
    }

    #[test]
    fn conservation_up_to_clipped_mass() {
        let cum = [2, 7, 6, 6, 11, 3, 20, 19];
        let d = daily_from_cumulative(&cum);
        let total: u64 = d.daily.iter().sum();
        assert_eq!(total as i64, *cum.last().unwrap() as i64 - d.clipped_mass);
        assert_eq!(d.clipped_cells, 3);
    }

    #[test]
    fn malformed_rows_report_line() {
        let text = format!("{HEADER}2020-03-01,A,Georgia,13001,1,0\n2020-03-02,A,Georgia,13001,x,0\n");
        match table(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = format!("{HEADER}2020-13-01,A,Georgia,13001,1,0\n");
        assert!(matches!(table(&text), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(table("a,b\n1,2\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_fips_dropped() {
        let text = format!("{HEADER}2020-03-01,Unknown,Georgia,,4,\n2020-03-01,A,Georgia,13001,1,0\n");
        let t = table(&text).unwrap();
        assert_eq!((t.rows.len(), t.dropped_missing_fips), (1, 1));
    }

    fn many_counties(n: usize) -> String {
        let mut s = String::from(HEADER);
        for i in 0..n {
            for day in 1..=3 {
                let _ = writeln!(s, "2020-04-0{day},County{:02},Georgia,{},{},0", (i * 7) % n, 13000 + i, i * day);
            }
        }
        s.push_str("2020-04-01,Other,Alabama,1001,5,0\n");
        s
    }

    #[test]
    fn thirty_counties_split_25_and_5() {
        let t = table(&many_counties(30)).unwrap();
        let s = split_communities(&t, "Georgia", 25, SplitScheme::Alphabetical).unwrap();
        assert_eq!(s.iter().map(|x| x.counties.len()).collect::<Vec<_>>(), vec![25, 5]);
        assert_eq!((s[0].id.as_str(), s[1].id.as_str()), ("Georgia-0", "Georgia-1"));
        assert_eq!(s[0].counties[0].name, "County00");
        assert!(s[1].adjacency.iter().flatten().all(|&b| b));
    }

    #[test]
    fn splits_are_deterministic_partitions() {
        let t = table(&many_counties(30)).unwrap();
        for scheme in [SplitScheme::Alphabetical, SplitScheme::Fips] {
            let a = split_communities(&t, "Georgia", 7, scheme).unwrap();
            assert_eq!(a, split_communities(&t, "Georgia", 7, scheme).unwrap());
            let mut all: Vec<&str> = a.iter().flat_map(|s| s.counties.iter().map(|c| c.fips.as_str())).collect();
            assert_eq!(all.len(), 30);
            all.sort();
            all.dedup();
            assert_eq!(all.len(), 30);
            assert!(a.iter().all(|s| s.counties.len() <= 7));
        }
    }

    #[test]
    fn gaps_carry_forward_and_late_counties_start_at_zero() {
        let text = format!(
            "{HEADER}2020-03-01,A,Georgia,13001,2,0\n2020-03-03,A,Georgia,13001,5,0\n2020-03-02,B,Georgia,13003,4,0\n2020-03-03,B,Georgia,13003,3,0\n"
        );
        let t = table(&text).unwrap();
        let s = split_communities(&t, "Georgia", 25, SplitScheme::Alphabetical).unwrap();
        let c = &s[0].counts;
        assert_eq!((0..3).map(|b| c.get(0, b)).collect::<Vec<_>>(), vec![2, 0, 3]);
        assert_eq!((0..3).map(|b| c.get(1, b)).collect::<Vec<_>>(), vec![0, 4, 0]);
        assert_eq!(s[0].counties[1].clipped_mass, -1);
        assert!(ingest_report_csv(&s).contains("13003,B,Georgia-0,4,3,1,-1"));
    }

    #[test]
    fn absent_state_errors() {
        let t = table(&many_counties(3)).unwrap();
        assert!(split_communities(&t, "Texas", 25, SplitScheme::Alphabetical).is_err());
    }
}
