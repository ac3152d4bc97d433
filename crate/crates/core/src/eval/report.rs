use std::fmt::Write as _;

use super::{EvalError, SimilarityScore};

/// One similarity dataset scored under the base embedding and optionally a
/// tuned one.
#[derive(Debug)]
pub struct SimilarityRow {
    pub dataset: String,
    pub pairs: usize,
    pub base: Result<SimilarityScore, EvalError>,
    pub tuned: Option<Result<SimilarityScore, EvalError>>,
}

/// Aggregate of the intrinsic checks for one embedding.
#[derive(Debug, Default)]
pub struct EvalReport {
    pub similarity: Vec<SimilarityRow>,
    pub qvec_score: Option<f64>,
    pub nonzero_rows: usize,
    pub nonzero_fraction: f64,
    pub top_norms: Vec<(String, f64)>,
}

fn cell(score: &Result<SimilarityScore, EvalError>) -> (String, String, String) {
    match score {
        Ok(s) => (s.rho.to_string(), s.used.to_string(), s.skipped.to_string()),
        Err(EvalError::Unusable { used, skipped }) => {
            ("NA".into(), used.to_string(), skipped.to_string())
        }
        Err(_) => ("NA".into(), "NA".into(), "NA".into()),
    }
}

/// TSV with one row per dataset. Columns: `dataset pairs used skipped
/// rho_base`, plus `rho_tuned delta` when any row has a tuned score. `delta`
/// is the signed difference `rho_tuned − rho_base`.
pub fn similarity_table(rows: &[SimilarityRow]) -> String {
    let tuned = rows.iter().any(|r| r.tuned.is_some());
    let mut out = String::from("dataset\tpairs\tused\tskipped\trho_base");
    if tuned {
        out.push_str("\trho_tuned\tdelta");
    }
    out.push('\n');
    for row in rows {
        let (rho, used, skipped) = cell(&row.base);
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            row.dataset, row.pairs, used, skipped, rho
        );
        if tuned {
            let (t, _, _) = row
                .tuned
                .as_ref()
                .map_or_else(|| ("NA".to_owned(), String::new(), String::new()), cell);
            let diff = match (&row.base, &row.tuned) {
                (Ok(b), Some(Ok(t))) => format!("{:+}", t.rho - b.rho),
                _ => "NA".to_owned(),
            };
            let _ = write!(out, "\t{t}\t{diff}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_shape() {
        let rows = vec![
            SimilarityRow {
                dataset: "ws".into(),
                pairs: 3,
                base: Ok(SimilarityScore {
                    rho: 0.5,
                    used: 3,
                    skipped: 0,
                }),
                tuned: Some(Ok(SimilarityScore {
                    rho: 0.75,
                    used: 3,
                    skipped: 0,
                })),
            },
            SimilarityRow {
                dataset: "rare".into(),
                pairs: 2,
                base: Err(EvalError::Unusable {
                    used: 1,
                    skipped: 1,
                }),
                tuned: Some(Err(EvalError::Unusable {
                    used: 1,
                    skipped: 1,
                })),
            },
        ];
        let t = similarity_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(
            lines[0],
            "dataset\tpairs\tused\tskipped\trho_base\trho_tuned\tdelta"
        );
        assert_eq!(lines[1], "ws\t3\t3\t0\t0.5\t0.75\t+0.25");
        assert_eq!(lines[2], "rare\t2\t1\t1\tNA\tNA\tNA");
    }
}
