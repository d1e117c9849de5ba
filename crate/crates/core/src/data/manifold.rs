use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::shard::{LabelColumn, LabelValues};
use super::DataError;
use crate::numerics::{derive_seed, seeded_rng, Rng, Tensor};

/// Shape of a synthetic feature manifold in its intrinsic coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifoldKind {
    /// `((R + r cos φ) cos θ, (R + r cos φ) sin θ, r sin φ)`, θ toroidal, φ poloidal.
    Torus { major_radius: f64, minor_radius: f64 },
    /// `(ρ cos θ, ρ sin θ, pitch · θ / 2π)` for θ in `[0, 2π·turns)`.
    Helix { radius: f64, pitch: f64, turns: f64 },
    Circle { radius: f64 },
    /// Segment `[-length/2, length/2]` on one axis.
    Line { length: f64 },
    /// Gaussian blobs of width `spread` around `centers` fixed points whose
    /// coordinates are drawn with standard deviation `center_spread`.
    Cluster {
        centers: usize,
        center_spread: f64,
        spread: f64,
    },
}

impl ManifoldKind {
    /// Dimension of the intrinsic embedding space.
    pub fn dim(&self) -> usize {
        match self {
            ManifoldKind::Torus { .. } | ManifoldKind::Helix { .. } | ManifoldKind::Cluster { .. } => 3,
            ManifoldKind::Circle { .. } => 2,
            ManifoldKind::Line { .. } => 1,
        }
    }

    /// Names of the generating parameters recorded as labels.
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            ManifoldKind::Torus { .. } => &["toroidal_angle", "poloidal_angle"],
            ManifoldKind::Helix { .. } => &["helix_param"],
            ManifoldKind::Circle { .. } => &["angle"],
            ManifoldKind::Line { .. } => &["position"],
            ManifoldKind::Cluster { .. } => &["cluster"],
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let positive = |what: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(DataError::Invalid(format!("{what} must be positive, got {v}")))
            }
        };
        match *self {
            ManifoldKind::Torus {
                major_radius,
                minor_radius,
            } => {
                positive("major radius", major_radius)?;
                positive("minor radius", minor_radius)
            }
            ManifoldKind::Helix { radius, pitch, turns } => {
                positive("helix radius", radius)?;
                positive("helix pitch", pitch)?;
                positive("helix turns", turns)
            }
            ManifoldKind::Circle { radius } => positive("circle radius", radius),
            ManifoldKind::Line { length } => positive("line length", length),
            ManifoldKind::Cluster {
                centers,
                center_spread,
                spread,
            } => {
                if centers == 0 {
                    return Err(DataError::Invalid("cluster needs at least one center".into()));
                }
                positive("center spread", center_spread)?;
                if spread < 0.0 {
                    return Err(DataError::Invalid("cluster spread must be >= 0".into()));
                }
                Ok(())
            }
        }
    }

    fn cluster_centers(&self) -> Vec<[f64; 3]> {
        match *self {
            ManifoldKind::Cluster {
                centers,
                center_spread,
                ..
            } => {
                let mut rng = seeded_rng(derive_seed(0xC1_5E_ED, centers as u64));
                (0..centers)
                    .map(|_| {
                        let mut c = [0.0; 3];
                        for v in &mut c {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            *v = z * center_spread;
                        }
                        c
                    })
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    /// Noise-free point for the given generating parameters. Cluster points
    /// return the cluster center.
    pub fn point(&self, params: &[f64]) -> Vec<f64> {
        match *self {
            ManifoldKind::Torus {
                major_radius,
                minor_radius,
            } => {
                let (theta, phi) = (params[0], params[1]);
                let ring = major_radius + minor_radius * phi.cos();
                vec![ring * theta.cos(), ring * theta.sin(), minor_radius * phi.sin()]
            }
            ManifoldKind::Helix { radius, pitch, .. } => {
                let theta = params[0];
                vec![radius * theta.cos(), radius * theta.sin(), pitch * theta / TAU]
            }
            ManifoldKind::Circle { radius } => {
                vec![radius * params[0].cos(), radius * params[0].sin()]
            }
            ManifoldKind::Line { .. } => vec![params[0]],
            ManifoldKind::Cluster { .. } => self.cluster_centers()[params[0] as usize].to_vec(),
        }
    }

    /// Draws generating parameters and the matching noise-free point.
    pub fn sample_one(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let params = match *self {
            ManifoldKind::Torus { .. } => vec![rng.gen::<f64>() * TAU, rng.gen::<f64>() * TAU],
            ManifoldKind::Helix { turns, .. } => vec![rng.gen::<f64>() * TAU * turns],
            ManifoldKind::Circle { .. } => vec![rng.gen::<f64>() * TAU],
            ManifoldKind::Line { length } => vec![(rng.gen::<f64>() - 0.5) * length],
            ManifoldKind::Cluster { centers, spread, .. } => {
                let idx = rng.gen_range(0..centers);
                let mut point = self.cluster_centers()[idx].to_vec();
                for v in &mut point {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += z * spread;
                }
                return (vec![idx as f64], point);
            }
        };
        let point = self.point(&params);
        (params, point)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    #[serde(flatten)]
    pub kind: ManifoldKind,
    /// Isotropic Gaussian noise in intrinsic coordinates, added before embedding.
    #[serde(default)]
    pub noise_sigma: f64,
    pub ambient_dim: usize,
}

impl ManifoldSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        self.kind.validate()?;
        if !(self.noise_sigma >= 0.0) {
            return Err(DataError::Invalid(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.ambient_dim < self.kind.dim() {
            return Err(DataError::Contract(format!(
                "ambient dimension {} is smaller than intrinsic dimension {}",
                self.ambient_dim,
                self.kind.dim()
            )));
        }
        Ok(())
    }
}

/// Points in intrinsic coordinates with their generating parameters.
#[derive(Debug, Clone)]
pub struct ManifoldSample {
    /// `[count, kind.dim()]`
    pub points: Tensor<f64>,
    pub labels: Vec<LabelColumn>,
}

pub(crate) fn label_columns(kind: &ManifoldKind, prefix: &str, params: Vec<Vec<f64>>) -> Vec<LabelColumn> {
    kind.param_names()
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let col: Vec<f64> = params.iter().map(|p| p[c]).collect();
            let values = match kind {
                ManifoldKind::Cluster { .. } => LabelValues::Int(col.iter().map(|&v| v as i64).collect()),
                _ => LabelValues::Real(col),
            };
            LabelColumn {
                name: format!("{prefix}{name}"),
                values,
            }
        })
        .collect()
}

pub fn sample_manifold(spec: &ManifoldSpec, count: usize, seed: u64) -> Result<ManifoldSample, DataError> {
    spec.validate()?;
    let d = spec.kind.dim();
    let mut rng = seeded_rng(seed);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let mut data = Vec::with_capacity(count * d);
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let (p, mut point) = spec.kind.sample_one(&mut rng);
        if spec.noise_sigma > 0.0 {
            for v in &mut point {
                *v += noise.sample(&mut rng);
            }
        }
        data.extend_from_slice(&point);
        params.push(p);
    }
    Ok(ManifoldSample {
        points: Tensor::from_vec(&[count, d], data).expect("sized above"),
        labels: label_columns(&spec.kind, "", params),
    })
}

/// Random `n x d` matrix with orthonormal columns, row-major.
pub fn random_frame(d: usize, n: usize, seed: u64) -> Result<Vec<f64>, DataError> {
    if n < d {
        return Err(DataError::Contract(format!(
            "cannot embed dimension {d} isometrically into {n}"
        )));
    }
    let mut rng = seeded_rng(seed);
    // columns stored contiguously while orthonormalizing
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        // modified Gram-Schmidt, applied twice for stability
        for _ in 0..2 {
            for c in &cols {
                let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        cols.push(v);
    }
    let mut frame = vec![0.0; n * d];
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            frame[r * d + c] = *v;
        }
    }
    Ok(frame)
}

/// Maps `[count, d]` points into `R^n` through a random isometric frame:
/// `out = points · Eᵀ`.
pub fn embed_isometry(points: &Tensor<f64>, n: usize, seed: u64) -> Result<Tensor<f64>, DataError> {
    let d = points.shape().get(1).copied().unwrap_or(0);
    let frame = random_frame(d, n, seed)?;
    Ok(apply_frame(points, &frame, n))
}

pub(crate) fn apply_frame(points: &Tensor<f64>, frame: &[f64], n: usize) -> Tensor<f64> {
    let (count, d) = (points.rows(), points.shape()[1]);
    let mut out = vec![0.0; count * n];
    for i in 0..count {
        let p = points.row(i);
        let dst = &mut out[i * n..(i + 1) * n];
        for (r, o) in dst.iter_mut().enumerate() {
            *o = frame[r * d..(r + 1) * d].iter().zip(p).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::from_vec(&[count, n], out).expect("sized above")
}
