//! Toy ground-truth distributions: concept-conditioned 2-D Gaussian
//! mixtures and the linear customization target drawn on a subset of
//! modality centers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point2 = [f64; 2];

/// Concept tokens of the four-peak world's peaks.
pub const FOUR_PEAK_CONCEPTS: [&str; 4] = ["A", "B", "C", "D"];
/// Super-class concept token of the 25-peak world.
pub const SUPER_CLASS: &str = "super";

/// Mixture std deviation shared by all builtin worlds. Modes sit at least
/// 13 sigma apart so mode-occupancy counting is unambiguous.
pub const WORLD_SIGMA: f64 = 0.15;

const WORLD_FORMAT_VERSION: u32 = 1;

/// One weighted Gaussian mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Point2,
    /// Row-major 2x2 covariance, symmetric positive-definite.
    pub cov: [[f64; 2]; 2],
}

impl GaussianComponent {
    pub fn isotropic(weight: f64, mean: Point2, sigma: f64) -> Self {
        let v = sigma * sigma;
        GaussianComponent { weight, mean, cov: [[v, 0.0], [0.0, v]] }
    }

    fn validate(&self) -> Result<()> {
        if !(self.weight > 0.0 && self.weight <= 1.0) {
            return Err(Error::contract(format!("component weight {} not in (0,1]", self.weight)));
        }
        let [[a, b], [c, d]] = self.cov;
        if (b - c).abs() > 1e-12 {
            return Err(Error::contract("covariance not symmetric"));
        }
        // Positive definite iff trace and determinant are positive.
        if a + d <= 0.0 || a * d - b * c <= 0.0 {
            return Err(Error::contract("covariance not positive definite"));
        }
        Ok(())
    }

    /// Lower Cholesky factor of the covariance.
    fn chol(&self) -> [[f64; 2]; 2] {
        let [[a, b], [_, d]] = self.cov;
        let l11 = a.sqrt();
        let l21 = b / l11;
        let l22 = (d - l21 * l21).sqrt();
        [[l11, 0.0], [l21, l22]]
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Point2 {
        let l = self.chol();
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        [
            self.mean[0] + l[0][0] * z0,
            self.mean[1] + l[1][0] * z0 + l[1][1] * z1,
        ]
    }
}

/// Named concepts mapped to Gaussian mixtures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptWorld {
    format_version: u32,
    concepts: BTreeMap<String, Vec<GaussianComponent>>,
}

impl ConceptWorld {
    pub fn new(concepts: BTreeMap<String, Vec<GaussianComponent>>) -> Result<Self> {
        let world = ConceptWorld { format_version: WORLD_FORMAT_VERSION, concepts };
        world.validate()?;
        Ok(world)
    }

    fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(Error::contract("world has no concepts"));
        }
        for (token, comps) in &self.concepts {
            if comps.is_empty() {
                return Err(Error::contract(format!("concept `{token}` has no components")));
            }
            let total: f64 = comps.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::contract(format!(
                    "concept `{token}` weights sum to {total}, expected 1"
                )));
            }
            for c in comps {
                c.validate()?;
            }
        }
        Ok(())
    }

    pub fn concept_tokens(&self) -> impl Iterator<Item = &str> {
        self.concepts.keys().map(|s| s.as_str())
    }

    pub fn components(&self, concept: &str) -> Result<&[GaussianComponent]> {
        self.concepts
            .get(concept)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::lookup(format!("unknown concept `{concept}`")))
    }

    /// Component means of a concept, in component order.
    pub fn modality_centers(&self, concept: &str) -> Result<Vec<Point2>> {
        Ok(self.components(concept)?.iter().map(|c| c.mean).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let world: ConceptWorld = serde_json::from_str(json)
            .map_err(|e| Error::contract(format!("world parse error: {e}")))?;
        if world.format_version != WORLD_FORMAT_VERSION {
            return Err(Error::contract(format!(
                "world format_version {} unsupported (expected {WORLD_FORMAT_VERSION})",
                world.format_version
            )));
        }
        world.validate()?;
        Ok(world)
    }
}

/// Four isolated peaks, one concept per peak.
pub fn build_four_peak_world() -> ConceptWorld {
    let centers: [Point2; 4] = [[-2.0, 2.0], [2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]];
    let mut concepts = BTreeMap::new();
    for (token, center) in FOUR_PEAK_CONCEPTS.iter().zip(centers) {
        concepts.insert(
            token.to_string(),
            vec![GaussianComponent::isotropic(1.0, center, WORLD_SIGMA)],
        );
    }
    ConceptWorld::new(concepts).expect("builtin world is valid")
}

/// One super-class concept with 25 equally weighted modes on the 5x5 grid
/// over {-4,-2,0,2,4}^2. Component order is row-major in (y, x).
pub fn build_grid25_world() -> ConceptWorld {
    let mut comps = Vec::with_capacity(25);
    for iy in 0..5 {
        for ix in 0..5 {
            let center = [-4.0 + 2.0 * ix as f64, -4.0 + 2.0 * iy as f64];
            comps.push(GaussianComponent::isotropic(0.04, center, WORLD_SIGMA));
        }
    }
    let mut concepts = BTreeMap::new();
    concepts.insert(SUPER_CLASS.to_string(), comps);
    ConceptWorld::new(concepts).expect("builtin world is valid")
}

/// Indices of the 5 main-diagonal modes of the 25-peak grid.
pub const GRID25_DIAGONAL_CARRIERS: [usize; 5] = [0, 6, 12, 18, 24];

/// Scattered 5-mode carrier set used by the builtin experiments. Unlike
/// the main diagonal, no line fits these centers, so a customization
/// cannot shortcut the per-mode target by learning one global pull
/// toward a line through the carriers.
pub const GRID25_SCATTER_CARRIERS: [usize; 5] = [1, 9, 12, 15, 23];

/// Points with a provenance label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<Point2>,
    pub label: String,
}

impl PointSet {
    pub fn new(points: Vec<Point2>, label: impl Into<String>) -> Self {
        PointSet { points, label: label.into() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.points.iter().all(|p| p[0].is_finite() && p[1].is_finite())
    }
}

/// `n` i.i.d. draws from a concept's mixture: component by weight, then a
/// Gaussian draw. Bit-identical under a fixed generator state.
pub fn sample_concept<R: Rng>(
    world: &ConceptWorld,
    concept: &str,
    n: usize,
    rng: &mut R,
) -> Result<PointSet> {
    if n == 0 {
        return Err(Error::contract("sample_concept: n must be >= 1"));
    }
    let comps = world.components(concept)?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let comp = pick_component(comps, rng);
        points.push(comp.sample(rng));
    }
    Ok(PointSet::new(points, format!("world:{concept}")))
}

fn pick_component<'a, R: Rng>(comps: &'a [GaussianComponent], rng: &mut R) -> &'a GaussianComponent {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for c in comps {
        acc += c.weight;
        if u < acc {
            return c;
        }
    }
    comps.last().expect("non-empty mixture")
}

/// The customized target distribution: a jittered line segment repeated at a
/// subset of a concept's modality centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearTarget {
    pub anchor_a: Point2,
    pub anchor_b: Point2,
    pub jitter: f64,
    pub carrier_modalities: Vec<usize>,
}

impl LinearTarget {
    pub fn new(
        anchor_a: Point2,
        anchor_b: Point2,
        jitter: f64,
        carrier_modalities: Vec<usize>,
    ) -> Result<Self> {
        if jitter < 0.0 {
            return Err(Error::contract("jitter must be >= 0"));
        }
        if carrier_modalities.is_empty() {
            return Err(Error::contract("carrier set must be non-empty"));
        }
        Ok(LinearTarget { anchor_a, anchor_b, jitter, carrier_modalities })
    }

    /// The segment used throughout the builtin experiments: diagonal from
    /// (-0.25,-0.25) to (0.55,0.55) around each carrier center, jitter
    /// 0.05. The midpoint sits at (0.15,0.15), giving the customization a
    /// learnable mean component while most of the segment stays within the
    /// mode-coverage radius of its carrier.
    pub fn diagonal_segment(carrier_modalities: Vec<usize>) -> Result<Self> {
        LinearTarget::new([-0.25, -0.25], [0.55, 0.55], 0.05, carrier_modalities)
    }

    fn validate_against(&self, centers: &[Point2]) -> Result<()> {
        for &idx in &self.carrier_modalities {
            if idx >= centers.len() {
                return Err(Error::contract(format!(
                    "carrier modality {idx} out of range ({} modes)",
                    centers.len()
                )));
            }
        }
        Ok(())
    }
}

/// Limited-modality training set for customization: each point is
/// `center + a + u*(b-a) + jitter-noise` with a uniformly chosen carrier
/// center and `u ~ Uniform(0,1)`.
pub fn sample_custom_target<R: Rng>(
    target: &LinearTarget,
    world: &ConceptWorld,
    concept: &str,
    n: usize,
    rng: &mut R,
) -> Result<PointSet> {
    if n == 0 {
        return Err(Error::contract("sample_custom_target: n must be >= 1"));
    }
    let centers = world.modality_centers(concept)?;
    target.validate_against(&centers)?;
    let (a, b) = (target.anchor_a, target.anchor_b);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let carrier = target.carrier_modalities[rng.random_range(0..target.carrier_modalities.len())];
        let c = centers[carrier];
        let u: f64 = rng.random();
        let n0: f64 = StandardNormal.sample(rng);
        let n1: f64 = StandardNormal.sample(rng);
        points.push([
            c[0] + a[0] + u * (b[0] - a[0]) + target.jitter * n0,
            c[1] + a[1] + u * (b[1] - a[1]) + target.jitter * n1,
        ]);
    }
    Ok(PointSet::new(points, format!("target:{concept}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn four_peak_world_shape() {
        let w = build_four_peak_world();
        assert_eq!(w.concept_tokens().count(), 4);
        for token in FOUR_PEAK_CONCEPTS {
            let comps = w.components(token).unwrap();
            assert_eq!(comps.len(), 1);
            assert_eq!(comps[0].weight, 1.0);
        }
        assert_eq!(w.modality_centers("A").unwrap(), vec![[-2.0, 2.0]]);
    }

    #[test]
    fn four_peak_sample_mean_converges() {
        let w = build_four_peak_world();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ps = sample_concept(&w, "A", 10_000, &mut rng).unwrap();
        let mean = [
            ps.points.iter().map(|p| p[0]).sum::<f64>() / ps.len() as f64,
            ps.points.iter().map(|p| p[1]).sum::<f64>() / ps.len() as f64,
        ];
        assert!((mean[0] + 2.0).abs() < 0.01, "mean x {}", mean[0]);
        assert!((mean[1] - 2.0).abs() < 0.01, "mean y {}", mean[1]);
    }

    #[test]
    fn grid25_world_shape() {
        let w = build_grid25_world();
        let comps = w.components(SUPER_CLASS).unwrap();
        assert_eq!(comps.len(), 25);
        for c in comps {
            assert_eq!(c.weight, 0.04);
        }
        // Diagonal carriers are the modes with x == y.
        let centers = w.modality_centers(SUPER_CLASS).unwrap();
        for &i in &GRID25_DIAGONAL_CARRIERS {
            assert_eq!(centers[i][0], centers[i][1]);
        }
    }

    #[test]
    fn grid25_occupancy_is_uniform() {
        let w = build_grid25_world();
        let centers = w.modality_centers(SUPER_CLASS).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = sample_concept(&w, SUPER_CLASS, 100_000, &mut rng).unwrap();
        let mut counts = vec![0usize; 25];
        for p in &ps.points {
            let nearest = centers
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da = (p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2);
                    let db = (p[0] - b[0]).powi(2) + (p[1] - b[1]).powi(2);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
                .0;
            counts[nearest] += 1;
        }
        let expected = 100_000.0 / 25.0;
        for (i, &c) in counts.iter().enumerate() {
            let rel = (c as f64 - expected).abs() / expected;
            assert!(rel < 0.10, "mode {i}: count {c} deviates {rel:.3}");
        }
    }

    #[test]
    fn grid25_large_sample_mean_near_origin() {
        let w = build_grid25_world();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = sample_concept(&w, SUPER_CLASS, 50_000, &mut rng).unwrap();
        let mean = [
            ps.points.iter().map(|p| p[0]).sum::<f64>() / ps.len() as f64,
            ps.points.iter().map(|p| p[1]).sum::<f64>() / ps.len() as f64,
        ];
        assert!(mean[0].abs() < 0.05 && mean[1].abs() < 0.05, "{mean:?}");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let w = build_four_peak_world();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            sample_concept(&w, "A", 1, &mut rng).unwrap()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn zero_samples_rejected() {
        let w = build_four_peak_world();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_concept(&w, "A", 0, &mut rng).is_err());
    }

    #[test]
    fn unknown_concept_rejected() {
        let w = build_four_peak_world();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_concept(&w, "nope", 5, &mut rng),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn degenerate_target_hits_carrier_centers() {
        let w = build_grid25_world();
        let target = LinearTarget::new([0.0, 0.0], [0.0, 0.0], 0.0, vec![0, 12]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = sample_custom_target(&target, &w, SUPER_CLASS, 64, &mut rng).unwrap();
        let centers = w.modality_centers(SUPER_CLASS).unwrap();
        for p in &ps.points {
            assert!(p == &centers[0] || p == &centers[12], "{p:?}");
        }
    }

    #[test]
    fn jittered_target_stays_near_carriers() {
        let w = build_grid25_world();
        let target = LinearTarget::diagonal_segment(GRID25_SCATTER_CARRIERS.to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ps = sample_custom_target(&target, &w, SUPER_CLASS, 2_000, &mut rng).unwrap();
        let centers = w.modality_centers(SUPER_CLASS).unwrap();
        let (a, b) = (target.anchor_a, target.anchor_b);
        let norm = |p: [f64; 2]| (p[0] * p[0] + p[1] * p[1]).sqrt();
        let bound = 3.0 * target.jitter + norm(a).max(norm(b));
        for p in &ps.points {
            let close = GRID25_SCATTER_CARRIERS.iter().any(|&i| {
                let c = centers[i];
                ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() <= bound
            });
            assert!(close, "{p:?} outside bound {bound}");
        }
    }

    #[test]
    fn empty_carrier_set_rejected() {
        assert!(LinearTarget::new([0.0, 0.0], [1.0, 1.0], 0.05, vec![]).is_err());
    }

    #[test]
    fn carrier_out_of_range_rejected() {
        let w = build_four_peak_world();
        let target = LinearTarget::new([0.0, 0.0], [1.0, 1.0], 0.0, vec![3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_custom_target(&target, &w, "A", 4, &mut rng).is_err());
    }

    #[test]
    fn world_json_roundtrip() {
        let w = build_grid25_world();
        let json = w.to_json();
        let back = ConceptWorld::from_json(&json).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn bad_weights_rejected() {
        let mut concepts = BTreeMap::new();
        concepts.insert(
            "x".to_string(),
            vec![GaussianComponent::isotropic(0.7, [0.0, 0.0], 0.1)],
        );
        assert!(ConceptWorld::new(concepts).is_err());
    }
}
