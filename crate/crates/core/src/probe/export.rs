use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ProbeError;
use crate::data::LabelValues;
use crate::model::{encode, GatingMode, Normalization, SmixaeConfig, SmixaeParams};
use crate::numerics::{derive_seed, seeded_rng, Rng as SeededRng, Tensor};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn color(label: i64) -> &'static str {
    PALETTE[label.rem_euclid(PALETTE.len() as i64) as usize]
}

/// Writes `<prefix>.csv` (columns `x,y,z,label,is_mean`, points first, then
/// one mean row per class present) and three orthographic SVG projections
/// `<prefix>_xy.svg`, `<prefix>_xz.svg`, `<prefix>_yz.svg`.
pub fn export_scatter(points: &DMatrix<f64>, labels: &[i64], prefix: &Path) -> Result<Vec<PathBuf>, ProbeError> {
    if points.ncols() != 3 || points.nrows() != labels.len() {
        return Err(ProbeError::Shape(format!(
            "scatter needs [m, 3] points with m labels, got {:?} and {}",
            points.shape(),
            labels.len()
        )));
    }
    let mut sums: BTreeMap<i64, ([f64; 3], usize)> = BTreeMap::new();
    for (r, &l) in labels.iter().enumerate() {
        let e = sums.entry(l).or_insert(([0.0; 3], 0));
        for c in 0..3 {
            e.0[c] += points[(r, c)];
        }
        e.1 += 1;
    }
    let means: Vec<(i64, [f64; 3])> = sums
        .into_iter()
        .map(|(l, (s, n))| (l, s.map(|v| v / n as f64)))
        .collect();

    let csv_path = with_suffix(prefix, ".csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["x", "y", "z", "label", "is_mean"])?;
    for (r, &l) in labels.iter().enumerate() {
        let row = points.row(r);
        w.write_record([row[0].to_string(), row[1].to_string(), row[2].to_string(), l.to_string(), "0".into()])?;
    }
    for (l, m) in &means {
        w.write_record([m[0].to_string(), m[1].to_string(), m[2].to_string(), l.to_string(), "1".into()])?;
    }
    w.flush()?;

    let mut files = vec![csv_path];
    for (name, a, b) in [("xy", 0, 1), ("xz", 0, 2), ("yz", 1, 2)] {
        let path = with_suffix(prefix, &format!("_{name}.svg"));
        fs::write(&path, projection_svg(points, labels, &means, a, b, name))?;
        files.push(path);
    }
    Ok(files)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn projection_svg(points: &DMatrix<f64>, labels: &[i64], means: &[(i64, [f64; 3])], a: usize, b: usize, name: &str) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 20.0;
    let range = |c: usize| {
        let (lo, hi) = points
            .column(c)
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if lo.is_finite() && hi > lo {
            (lo, hi)
        } else if lo.is_finite() {
            (lo - 1.0, lo + 1.0)
        } else {
            (-1.0, 1.0)
        }
    };
    let (ra, rb) = (range(a), range(b));
    let px = |v: f64| PAD + (v - ra.0) / (ra.1 - ra.0) * (SIZE - 2.0 * PAD);
    let py = |v: f64| SIZE - PAD - (v - rb.0) / (rb.1 - rb.0) * (SIZE - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<title>{name} projection</title>"#);
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    for (r, &l) in labels.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{}" fill-opacity="0.6"/>"#,
            px(points[(r, a)]),
            py(points[(r, b)]),
            color(l)
        );
    }
    for (l, m) in means {
        let (x, y) = (px(m[a]), py(m[b]));
        let _ = writeln!(
            s,
            r##"<path d="M{:.2} {:.2}l6 6l6 -6l-6 -6z" fill="{}" stroke="#000000" stroke-width="1"/>"##,
            x - 6.0,
            y,
            color(*l)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSampleOptions {
    pub max_points: usize,
    pub min_activations: usize,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for RandomSampleOptions {
    fn default() -> Self {
        Self {
            max_points: 1000,
            min_activations: 100,
            sample_size: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledExpert {
    pub expert: usize,
    pub activations: usize,
    pub exported_points: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSampleSummary {
    pub options: RandomSampleOptions,
    pub tokens: usize,
    pub qualifying_experts: usize,
    pub experts: Vec<SampledExpert>,
    pub warning: Option<String>,
}

struct Reservoir {
    seen: usize,
    rows: Vec<usize>,
    points: Vec<Vec<f64>>,
    rng: SeededRng,
}

impl Reservoir {
    fn offer(&mut self, cap: usize, row: usize, point: &[f32]) {
        let point: Vec<f64> = point.iter().map(|&v| v as f64).collect();
        if self.rows.len() < cap {
            self.rows.push(row);
            self.points.push(point);
        } else {
            let j = self.rng.gen_range(0..=self.seen);
            if j < cap {
                self.rows[j] = row;
                self.points[j] = point;
            }
        }
        self.seen += 1;
    }
}

/// Streams `batches`, keeps up to `max_points` bottleneck vectors per expert
/// by reservoir sampling, then exports a uniform sample of `sample_size`
/// experts admitted at least `min_activations` times. Writes
/// `expert_XXXXX.csv` per chosen expert (plus scatter projections when the
/// bottleneck is 3-dimensional) and `summary.json` into `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn random_sample_export<I>(
    params: &SmixaeParams<f32>,
    config: &SmixaeConfig,
    batches: I,
    normalization: Option<&Normalization>,
    labels: Option<&LabelValues>,
    opts: &RandomSampleOptions,
    out_dir: &Path,
) -> Result<RandomSampleSummary, ProbeError>
where
    I: IntoIterator<Item = Tensor<f32>>,
{
    let mut res: Vec<Reservoir> = (0..config.j)
        .map(|i| Reservoir {
            seen: 0,
            rows: Vec::new(),
            points: Vec::new(),
            rng: seeded_rng(derive_seed(opts.seed, i as u64)),
        })
        .collect();
    let mut offset = 0;
    for mut batch in batches {
        if let Some(norm) = normalization {
            norm.apply(&mut batch);
        }
        let lat = encode(params, &batch, config, GatingMode::Inference)?;
        for tok in 0..lat.batch_size() {
            for (i, r) in res.iter_mut().enumerate() {
                if lat.admitted(tok, i) {
                    r.offer(opts.max_points, offset + tok, lat.latent(tok, i));
                }
            }
        }
        offset += lat.batch_size();
    }
    if let Some(l) = labels {
        if l.len() != offset {
            return Err(ProbeError::Shape(format!("{offset} rows streamed but {} labels", l.len())));
        }
    }

    let qualifying: Vec<usize> = (0..config.j).filter(|&i| res[i].seen >= opts.min_activations).collect();
    let (chosen, warning) = if qualifying.len() < opts.sample_size {
        let w = format!(
            "only {} experts reached {} activations; exporting all of them instead of {}",
            qualifying.len(),
            opts.min_activations,
            opts.sample_size
        );
        (qualifying.clone(), Some(w))
    } else {
        let mut rng = seeded_rng(derive_seed(opts.seed, u64::MAX));
        let mut pick: Vec<usize> = sample(&mut rng, qualifying.len(), opts.sample_size)
            .into_iter()
            .map(|q| qualifying[q])
            .collect();
        pick.sort_unstable();
        (pick, None)
    };

    fs::create_dir_all(out_dir)?;
    let label_vals = labels.map(LabelValues::as_f64);
    let mut experts = Vec::new();
    for &i in &chosen {
        let r = &res[i];
        // Export in stream order.
        let mut order: Vec<usize> = (0..r.rows.len()).collect();
        order.sort_by_key(|&k| r.rows[k]);
        let name = format!("expert_{i:05}");
        let mut w = csv::Writer::from_path(out_dir.join(format!("{name}.csv")))?;
        let mut header = vec!["token".to_string()];
        header.extend((0..config.b).map(|c| format!("z{c}")));
        if label_vals.is_some() {
            header.push("label".into());
        }
        w.write_record(&header)?;
        for &k in &order {
            let mut rec = vec![r.rows[k].to_string()];
            rec.extend(r.points[k].iter().map(|v| v.to_string()));
            if let Some(lv) = &label_vals {
                rec.push(lv[r.rows[k]].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        if config.b == 3 {
            let pts = DMatrix::from_fn(order.len(), 3, |row, c| r.points[order[row]][c]);
            let cls: Vec<i64> = order
                .iter()
                .map(|&k| label_vals.as_ref().map_or(0, |lv| lv[r.rows[k]].round() as i64))
                .collect();
            export_scatter(&pts, &cls, &out_dir.join(format!("{name}_scatter")))?;
        }
        experts.push(SampledExpert {
            expert: i,
            activations: r.seen,
            exported_points: r.rows.len(),
            file: format!("{name}.csv"),
        });
    }
    let summary = RandomSampleSummary {
        options: opts.clone(),
        tokens: offset,
        qualifying_experts: qualifying.len(),
        experts,
        warning,
    };
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}
