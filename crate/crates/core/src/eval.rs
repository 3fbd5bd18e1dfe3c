//! Per-sample evaluation and the aggregated report.
//!
//! Errors are computed in parallel. Inference time is measured in a separate
//! single-threaded pass so that it is comparable across machines.

use std::fmt::Write as _;
use std::time::Instant;

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::geometry::{MeshGrid2D, MeshGrid3D};
use crate::model::Model;
use crate::parallel::{self, Exec};
use crate::procrustes::aligned_vertex_error;

pub const SAMPLES_HEADER: &str = "condition,index,err3d_aligned,err2d_px,time_ms";
pub const SUMMARY_HEADER: &str = "condition,count,mean3d,median3d,std3d,mean2d,mean_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub condition: String,
    pub index: usize,
    pub err3d_aligned: f64,
    pub err2d_px: f64,
    pub time_ms: f64,
}

/// Aggregates of one condition. `std3d` is the population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub condition: String,
    pub count: usize,
    pub mean3d: f64,
    pub median3d: f64,
    pub std3d: f64,
    pub mean2d: f64,
    pub mean_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<SampleRow>,
    pub summaries: Vec<Summary>,
}

/// `(err3d_aligned, err2d_px)` of one prediction.
pub fn sample_errors(pred3d: &MeshGrid3D, pred2d: &MeshGrid2D, truth: &Sample) -> Result<(f64, f64)> {
    if pred3d.n() != truth.mesh3d.n() || pred2d.n() != truth.mesh2d.n() {
        return Err(Error::Mismatch(format!("predicted grid side {} but sample has {}", pred3d.n(), truth.mesh3d.n())));
    }
    let e3 = aligned_vertex_error(pred3d.vertices(), truth.mesh3d.vertices())?;
    Ok((e3, pred2d.mean_distance(&truth.mesh2d)))
}

/// Rows for every sample of one split, labelled `condition`.
pub fn evaluate_split(model: &Model, samples: &[Sample], condition: &str, exec: Exec) -> Result<Vec<SampleRow>> {
    if let Some(s) = samples.iter().find(|s| s.mesh3d.n() != model.config.n) {
        return Err(Error::Mismatch(format!("sample grid side {} but model expects {}", s.mesh3d.n(), model.config.n)));
    }
    let errors = parallel::map(exec, samples, |s| {
        let p = model.predict(&s.image_tensor(), &s.camera)?;
        sample_errors(&p.mesh3d, &p.mesh2d, s)
    });
    let mut rows = Vec::with_capacity(samples.len());
    for (index, (s, e)) in samples.iter().zip(errors).enumerate() {
        let (err3d_aligned, err2d_px) = e?;
        let image = s.image_tensor();
        let t0 = Instant::now();
        model.predict(&image, &s.camera)?;
        let time_ms = t0.elapsed().as_secs_f64() * 1e3;
        rows.push(SampleRow { condition: condition.to_string(), index, err3d_aligned, err2d_px, time_ms });
    }
    Ok(rows)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    match k {
        0 => f64::NAN,
        _ if k % 2 == 1 => xs[k / 2],
        _ => 0.5 * (xs[k / 2 - 1] + xs[k / 2]),
    }
}

/// One summary per condition, in order of first appearance.
pub fn summarize(rows: &[SampleRow]) -> Vec<Summary> {
    let mut conditions: Vec<&str> = Vec::new();
    for r in rows {
        if !conditions.contains(&r.condition.as_str()) {
            conditions.push(&r.condition);
        }
    }
    conditions
        .into_iter()
        .map(|c| {
            let group: Vec<&SampleRow> = rows.iter().filter(|r| r.condition == c).collect();
            let k = group.len() as f64;
            let mean = |f: fn(&SampleRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / k;
            let mean3d = mean(|r| r.err3d_aligned);
            let var = group.iter().map(|r| (r.err3d_aligned - mean3d).powi(2)).sum::<f64>() / k;
            Summary {
                condition: c.to_string(),
                count: group.len(),
                mean3d,
                median3d: median(group.iter().map(|r| r.err3d_aligned).collect()),
                std3d: var.sqrt(),
                mean2d: mean(|r| r.err2d_px),
                mean_ms: mean(|r| r.time_ms),
            }
        })
        .collect()
}

impl EvalReport {
    pub fn from_rows(rows: Vec<SampleRow>) -> Self {
        let summaries = summarize(&rows);
        EvalReport { rows, summaries }
    }

    pub fn summary(&self, condition: &str) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.condition == condition)
    }

    /// Floats use the shortest representation that parses back exactly.
    pub fn samples_csv(&self) -> String {
        let mut s = format!("{SAMPLES_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.condition, r.index, r.err3d_aligned, r.err2d_px, r.time_ms);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for m in &self.summaries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                m.condition, m.count, m.mean3d, m.median3d, m.std3d, m.mean2d, m.mean_ms
            );
        }
        s
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        for m in &self.summaries {
            let _ = writeln!(
                s,
                "{:<16} n={:<5} 3D mean {:.4} median {:.4} std {:.4}  2D {:.3} px  {:.2} ms/sample",
                m.condition, m.count, m.mean3d, m.median3d, m.std3d, m.mean2d, m.mean_ms
            );
        }
        s
    }
}

/// Parses the per-sample CSV written by [`EvalReport::samples_csv`].
pub fn parse_samples_csv(text: &str) -> std::result::Result<Vec<SampleRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(SAMPLES_HEADER) {
        return Err("missing or unexpected header".into());
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| format!("line {}: bad {what}", i + 2);
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad("column count"));
            }
            Ok(SampleRow {
                condition: f[0].to_string(),
                index: f[1].parse().map_err(|_| bad("index"))?,
                err3d_aligned: f[2].parse().map_err(|_| bad("err3d_aligned"))?,
                err2d_px: f[3].parse().map_err(|_| bad("err2d_px"))?,
                time_ms: f[4].parse().map_err(|_| bad("time_ms"))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::datagen::scene::{make_sample, TextureChoice};
    use crate::datagen::{DataConfig, TextureKind};
    use proptest::prelude::*;

    fn samples(k: u64) -> Vec<Sample> {
        let c = DataConfig { n: 3, image_width: 16, image_height: 16, sim_steps: 100, ..DataConfig::default() };
        (0..k).map(|s| make_sample(&c, s, TextureChoice { kind: TextureKind::Checker, id: 0, seed: s }, false).unwrap()).collect()
    }

    #[test]
    fn ground_truth_scores_zero() {
        for s in samples(3) {
            let (e3, e2) = sample_errors(&s.mesh3d, &s.mesh2d, &s).unwrap();
            assert!(e3 < 1e-12 && e2 == 0.0, "{e3} {e2}");
        }
    }

    #[test]
    fn mismatched_grid_is_an_error() {
        let s = &samples(1)[0];
        let big = MeshGrid3D::new(4, vec![[0.0, 0.0, 1.0]; 16]).unwrap();
        let big2 = MeshGrid2D::new(4, vec![[0.0, 0.0]; 16]).unwrap();
        assert!(matches!(sample_errors(&big, &big2, s), Err(Error::Mismatch(_))));
        let model = Model::new(&ModelConfig { n: 4, image_width: 16, image_height: 16, channels: 4, stage_width: 4, depth_width: 4, ..ModelConfig::default() });
        assert!(evaluate_split(&model, &samples(1), "x", Exec::Sequential).is_err());
    }

    #[test]
    fn report_columns_and_exec_independence() {
        let model = Model::new(&ModelConfig { n: 3, image_width: 16, image_height: 16, channels: 4, stage_width: 4, depth_width: 4, ..ModelConfig::default() });
        let set = samples(4);
        let a = evaluate_split(&model, &set, "test_known", Exec::Auto).unwrap();
        let b = evaluate_split(&model, &set, "test_known", Exec::Sequential).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.err3d_aligned, x.err2d_px), (y.err3d_aligned, y.err2d_px));
            assert!(x.time_ms > 0.0);
        }
        let report = EvalReport::from_rows(a);
        assert_eq!(report.samples_csv().lines().next(), Some(SAMPLES_HEADER));
        assert_eq!(report.summary_csv().lines().next(), Some(SUMMARY_HEADER));
        assert_eq!(report.summary("test_known").unwrap().count, 4);
    }

    #[test]
    fn median_and_std_by_hand() {
        let rows: Vec<SampleRow> = [1.0, 4.0, 2.0, 9.0]
            .iter()
            .enumerate()
            .map(|(i, &e)| SampleRow { condition: "a".into(), index: i, err3d_aligned: e, err2d_px: 1.0, time_ms: 2.0 })
            .collect();
        let s = &summarize(&rows)[0];
        assert_eq!((s.mean3d, s.median3d, s.mean2d, s.mean_ms), (4.0, 3.0, 1.0, 2.0));
        assert!((s.std3d - 3.082207001484488).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn aggregates_recompute_from_written_rows(
            errs in proptest::collection::vec((0.0f64..10.0, 0.0f64..50.0, 0.0f64..100.0, 0usize..3), 1..40)
        ) {
            let names = ["test_known", "test_new", "test_plain_occ"];
            let rows: Vec<SampleRow> = errs.iter().enumerate().map(|(i, &(a, b, t, c))| SampleRow {
                condition: names[c].to_string(), index: i, err3d_aligned: a, err2d_px: b, time_ms: t,
            }).collect();
            let report = EvalReport::from_rows(rows);
            let back = parse_samples_csv(&report.samples_csv()).unwrap();
            prop_assert_eq!(&back, &report.rows);
            prop_assert_eq!(summarize(&back), report.summaries);
        }
    }
}
